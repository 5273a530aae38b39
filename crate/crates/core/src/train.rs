//! Desk-scale training: patch sampling, batch-parallel gradient evaluation
//! with a fixed reduction order, Adam updates, and a metrics log.
//!
//! Every random draw comes from one seeded stream consumed in a fixed
//! order, so a given seed reproduces the metrics log and the final weights
//! bit for bit regardless of worker count.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::checkpoint_save;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossWeights, PerceptualExtractor};
use crate::metrics::psnr;
use crate::network::{forward, forward_on_tape, build_model, ModelConfig, ModelWeights};
use crate::optim::{adam_step, LrSchedule, OptimState};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub patch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub loss: LossWeights,
    /// Seed for batch order, patch offsets, and the frozen extractor.
    pub seed: u64,
    /// Holdout PSNR cadence in steps.
    pub eval_every: u64,
    /// Periodic checkpoint cadence; 0 keeps only the final checkpoint.
    pub ckpt_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch: 4,
            patch: 64,
            lr0: 1e-4,
            lr_min: 1e-7,
            loss: LossWeights::default(),
            seed: 0,
            eval_every: 50,
            ckpt_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights<f32>,
    pub metrics_csv: String,
    /// Batch loss at the first step, evaluated before any update.
    pub first_loss: f64,
    pub last_loss: f64,
    /// Mean PSNR of the trained model over the training pairs.
    pub final_train_psnr: f64,
    /// Mean PSNR of the blurred inputs against their sharp references.
    pub blurred_input_psnr: f64,
}

/// Crop a (H, W, C) image to `size` starting at (top, left); the whole
/// image when it is not larger than the patch.
fn crop_patch(img: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let (h, w, c) = (img.dim(0), img.dim(1), img.dim(2));
    if h <= size && w <= size {
        return img.clone();
    }
    let size_h = size.min(h);
    let size_w = size.min(w);
    let src = img.data();
    let mut out = Vec::with_capacity(size_h * size_w * c);
    for y in top..top + size_h {
        out.extend_from_slice(&src[(y * w + left) * c..(y * w + left + size_w) * c]);
    }
    Tensor::new(out, &[size_h, size_w, c]).expect("crop within bounds")
}

fn to_batch1(img: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    img.reshape(&shape).expect("adding batch axis")
}

struct SampleResult {
    losses: [f64; 4],
    grads: BTreeMap<String, Vec<f64>>,
}

/// Train on the given (blurred, sharp) pairs. `holdout` feeds the periodic
/// PSNR column without participating in updates.
pub fn train_loop(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    pairs: &[(Tensor<f32>, Tensor<f32>)],
    holdout: Option<&(Tensor<f32>, Tensor<f32>)>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::EmptyData("training pair list".into()));
    }
    cfg.loss.validate()?;
    let mut weights = build_model::<f32>(model_cfg)?;
    let extractor = PerceptualExtractor::<f32>::new(cfg.seed);
    let schedule = LrSchedule::new(cfg.lr0, cfg.lr_min, cfg.steps);
    let mut state = OptimState::new(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut csv = String::from("step,loss,l_char,l_edge,l_p,lr,psnr_holdout\n");
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;

    for step in 0..cfg.steps {
        // all draws happen up front on the single stream
        let batch: Vec<(Tensor<f32>, Tensor<f32>)> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.gen_range(0..pairs.len());
                let (blur, sharp) = &pairs[idx];
                let (h, w) = (blur.dim(0), blur.dim(1));
                let top = if h > cfg.patch { rng.gen_range(0..=h - cfg.patch) } else { 0 };
                let left = if w > cfg.patch { rng.gen_range(0..=w - cfg.patch) } else { 0 };
                (
                    crop_patch(blur, top, left, cfg.patch),
                    crop_patch(sharp, top, left, cfg.patch),
                )
            })
            .collect();

        // independent tape per sample; results land in batch order
        let results: Vec<Result<SampleResult>> = batch
            .par_iter()
            .map(|(blur, sharp)| {
                let mut tape = Tape::new();
                let input = tape.constant(to_batch1(blur));
                let target = tape.constant(to_batch1(sharp));
                let (pred, binding) = forward_on_tape(&mut tape, &weights, model_cfg, input)?;
                let parts = total_loss(&mut tape, pred, target, &cfg.loss, &extractor)?;
                let grads = tape.backward(parts.total)?;
                let mut by_path = BTreeMap::new();
                for (path, node) in binding.ids {
                    if let Some(g) = grads.get(node) {
                        by_path.insert(path, g.data().iter().map(|&v| v as f64).collect());
                    }
                }
                Ok(SampleResult {
                    losses: [
                        tape.value(parts.total).item() as f64,
                        tape.value(parts.l_char).item() as f64,
                        tape.value(parts.l_edge).item() as f64,
                        tape.value(parts.l_p).item() as f64,
                    ],
                    grads: by_path,
                })
            })
            .collect();

        // fixed-order reduction keeps f32 training bitwise reproducible
        let mut losses = [0.0f64; 4];
        let mut grad_acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for result in results {
            let sample = result?;
            for (a, b) in losses.iter_mut().zip(sample.losses.iter()) {
                *a += b;
            }
            for (path, g) in sample.grads {
                match grad_acc.get_mut(&path) {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g.iter()) {
                            *a += b;
                        }
                    }
                    None => {
                        grad_acc.insert(path, g);
                    }
                }
            }
        }
        let inv_batch = 1.0 / cfg.batch as f64;
        for v in losses.iter_mut() {
            *v *= inv_batch;
        }
        let grads: BTreeMap<String, Tensor<f32>> = grad_acc
            .into_iter()
            .map(|(path, g)| {
                let shape = weights.get(&path).expect("path from binding").shape().to_vec();
                let data: Vec<f32> = g.into_iter().map(|v| (v * inv_batch) as f32).collect();
                Ok((path, Tensor::new(data, &shape)?))
            })
            .collect::<Result<_>>()?;

        if step == 0 {
            first_loss = losses[0];
        }
        last_loss = losses[0];
        let lr = schedule.at(state.step);
        adam_step(&mut weights, &grads, &mut state, &schedule)?;

        let holdout_psnr = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            match holdout {
                Some((blur, sharp)) => {
                    let restored = forward(&weights, model_cfg, &to_batch1(blur))?;
                    let restored = restored.reshape(sharp.shape())?;
                    format!("{:.4}", psnr(&restored, sharp, 1.0, 100.0)?)
                }
                None => String::new(),
            }
        } else {
            String::new()
        };
        csv.push_str(&format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.3e},{}\n",
            step, losses[0], losses[1], losses[2], losses[3], lr, holdout_psnr
        ));

        if let Some(dir) = out_dir {
            if cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 {
                checkpoint_save(&dir.join(format!("step{:06}.ckpt", step + 1)), &weights, model_cfg)?;
            }
        }
    }

    // end-of-run quality on the training pairs themselves
    let mut psnr_out = 0.0;
    let mut psnr_in = 0.0;
    for (blur, sharp) in pairs {
        let restored = forward(&weights, model_cfg, &to_batch1(blur))?;
        let restored = restored.reshape(sharp.shape())?;
        psnr_out += psnr(&restored, sharp, 1.0, 100.0)?;
        psnr_in += psnr(blur, sharp, 1.0, 100.0)?;
    }
    psnr_out /= pairs.len() as f64;
    psnr_in /= pairs.len() as f64;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        checkpoint_save(&dir.join("final.ckpt"), &weights, model_cfg)?;
        std::fs::write(dir.join("metrics.csv"), &csv).map_err(|source| Error::Io {
            path: dir.join("metrics.csv"),
            source,
        })?;
    }

    Ok(TrainOutcome {
        weights,
        metrics_csv: csv,
        first_loss,
        last_loss,
        final_train_psnr: psnr_out,
        blurred_input_psnr: psnr_in,
    })
}
