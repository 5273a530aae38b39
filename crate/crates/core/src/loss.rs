//! Training loss: Charbonnier distance, an edge term on Laplacian responses,
//! a frozen-extractor feature distance, and their weighted sum
//! L = L_char + lambda1 * L_edge + lambda2 * L_p.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::block::ConvWeights;
use crate::error::{Error, Result};
use crate::tape::{ConvMode, NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps_char: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.05,
            lambda2: 0.0005,
            eps_char: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 < 0.0 {
            return Err(Error::config("loss.lambda1", "must be >= 0"));
        }
        if self.lambda2 < 0.0 {
            return Err(Error::config("loss.lambda2", "must be >= 0"));
        }
        if self.eps_char <= 0.0 {
            return Err(Error::config("loss.eps_char", "must be > 0"));
        }
        Ok(())
    }
}

/// mean(sqrt((x - y)^2 + eps^2)) as a scalar node.
pub fn charbonnier<T: Scalar>(tape: &mut Tape<T>, x: NodeId, y: NodeId, eps: T) -> Result<NodeId> {
    tape.charbonnier(x, y, eps)
}

/// Charbonnier distance between per-channel Laplacian responses. The
/// Laplacian kills constants, so the value is invariant to a shared offset
/// of both images and equals eps when the images match.
pub fn edge_loss<T: Scalar>(tape: &mut Tape<T>, x: NodeId, y: NodeId, eps: T) -> Result<NodeId> {
    let xv = tape.value(x);
    if xv.rank() != 4 {
        return Err(Error::shape(format!("edge_loss input must be NHWC, got {:?}", xv.shape())));
    }
    let c = xv.dim(3);
    let lap = laplacian_kernel::<T>(c);
    let w = tape.constant(lap);
    let b = tape.constant(Tensor::zeros(&[c]));
    let ex = tape.conv2d(x, w, b, ConvMode::Depthwise3x3, 1)?;
    let ey = tape.conv2d(y, w, b, ConvMode::Depthwise3x3, 1)?;
    tape.charbonnier(ex, ey, eps)
}

fn laplacian_kernel<T: Scalar>(c: usize) -> Tensor<T> {
    let pattern: [f64; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
    Tensor::from_fn(&[3, 3, c], |i| T::from_f64(pattern[i / c]))
}

/// Frozen random convolutional pyramid standing in for a pretrained feature
/// extractor: three SiLU-activated dense 3x3 stride-2 stages.
#[derive(Debug, Clone)]
pub struct PerceptualExtractor<T: Scalar> {
    stages: Vec<ConvWeights<T>>,
}

impl<T: Scalar> PerceptualExtractor<T> {
    pub const STAGE_CHANNELS: [usize; 3] = [8, 16, 32];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut c_in = 3;
        for &c_out in Self::STAGE_CHANNELS.iter() {
            stages.push(ConvWeights::init(ConvMode::Full3x3, c_in, c_out, &mut rng));
            c_in = c_out;
        }
        PerceptualExtractor { stages }
    }

    /// Feature nodes per stage; weights enter the tape as constants so no
    /// gradient ever reaches them.
    fn features(&self, tape: &mut Tape<T>, x: NodeId) -> Result<Vec<NodeId>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for stage in &self.stages {
            let w = tape.constant(stage.w.clone());
            let b = tape.constant(stage.b.clone());
            let conv = tape.conv2d(cur, w, b, ConvMode::Full3x3, 2)?;
            cur = tape.silu(conv)?;
            out.push(cur);
        }
        Ok(out)
    }
}

/// Mean squared feature distance across all extractor stages; exactly zero
/// for identical inputs.
pub fn perceptual_loss<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    y: NodeId,
    extractor: &PerceptualExtractor<T>,
) -> Result<NodeId> {
    let fx = extractor.features(tape, x)?;
    let fy = extractor.features(tape, y)?;
    let mut acc: Option<NodeId> = None;
    for (a, b) in fx.into_iter().zip(fy.into_iter()) {
        let d = tape.sub(a, b)?;
        let sq = tape.mul(d, d)?;
        let mse = tape.mean_all(sq)?;
        acc = Some(match acc {
            Some(s) => tape.add(s, mse)?,
            None => mse,
        });
    }
    let total = acc.expect("extractor has stages");
    let scale = T::from_f64(1.0 / PerceptualExtractor::<T>::STAGE_CHANNELS.len() as f64);
    tape.affine(total, scale, T::ZERO)
}

/// Scalar nodes of the composite loss and its parts.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: NodeId,
    pub l_char: NodeId,
    pub l_edge: NodeId,
    pub l_p: NodeId,
}

/// L = L_char + lambda1 * L_edge + lambda2 * L_p.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: NodeId,
    target: NodeId,
    w: &LossWeights,
    extractor: &PerceptualExtractor<T>,
) -> Result<LossParts> {
    w.validate()?;
    let eps = T::from_f64(w.eps_char);
    let l_char = charbonnier(tape, pred, target, eps)?;
    let l_edge = edge_loss(tape, pred, target, eps)?;
    let l_p = perceptual_loss(tape, pred, target, extractor)?;
    let edge_w = tape.affine(l_edge, T::from_f64(w.lambda1), T::ZERO)?;
    let p_w = tape.affine(l_p, T::from_f64(w.lambda2), T::ZERO)?;
    let partial = tape.add(l_char, edge_w)?;
    let total = tape.add(partial, p_w)?;
    Ok(LossParts {
        total,
        l_char,
        l_edge,
        l_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn img(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn charbonnier_uniform_difference() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 4], 0.5f64));
        let y = tape.constant(Tensor::full(&[2, 4], 0.5 - 3e-3));
        let l = charbonnier(&mut tape, x, y, 1e-3).unwrap();
        let want = (1e-5f64).sqrt();
        assert!((tape.value(l).item() - want).abs() < 1e-15);
        assert!((want - 3.1623e-3).abs() < 1e-7);
    }

    #[test]
    fn charbonnier_rejects_bad_eps() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 0.1f64));
        let y = tape.constant(Tensor::full(&[2], 0.1));
        assert!(charbonnier(&mut tape, x, y, 0.0).is_err());
    }

    #[test]
    fn edge_loss_constant_images_give_eps() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 6, 6, 3], 0.2f64));
        let y = tape.constant(Tensor::full(&[1, 6, 6, 3], 0.9));
        let l = edge_loss(&mut tape, x, y, 1e-3).unwrap();
        assert!((tape.value(l).item() - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn edge_loss_invariant_to_joint_offset() {
        let a = img(&[1, 8, 8, 3], 70);
        let b = img(&[1, 8, 8, 3], 71);
        let run = |off: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(a.map(|v| v + off));
            let y = tape.constant(b.map(|v| v + off));
            let l = edge_loss(&mut tape, x, y, 1e-3).unwrap();
            tape.value(l).item()
        };
        let base = run(0.0);
        let shifted = run(0.3);
        assert!((base - shifted).abs() < 1e-12);
    }

    #[test]
    fn perceptual_zero_on_identical_and_deterministic() {
        let a = img(&[1, 16, 16, 3], 72);
        let ex = PerceptualExtractor::<f64>::new(11);
        let mut tape = Tape::new();
        let x = tape.leaf(a.clone());
        let y = tape.constant(a.clone());
        let l = perceptual_loss(&mut tape, x, y, &ex).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let b = img(&[1, 16, 16, 3], 73);
        let run = |ex: &PerceptualExtractor<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone());
            let y = tape.constant(b.clone());
            let l = perceptual_loss(&mut tape, x, y, ex).unwrap();
            tape.value(l).item()
        };
        assert_eq!(run(&PerceptualExtractor::new(11)), run(&PerceptualExtractor::new(11)));
        assert_ne!(run(&PerceptualExtractor::new(11)), run(&PerceptualExtractor::new(12)));
    }

    #[test]
    fn total_loss_identical_pair_at_defaults() {
        let a = img(&[1, 8, 8, 3], 74);
        let ex = PerceptualExtractor::<f64>::new(7);
        let w = LossWeights::default();
        let mut tape = Tape::new();
        let x = tape.leaf(a.clone());
        let y = tape.constant(a);
        let parts = total_loss(&mut tape, x, y, &w, &ex).unwrap();
        // 1e-3 + 0.05 * 1e-3 + 0.0005 * 0
        let want = 1.05e-3;
        assert!((tape.value(parts.total).item() - want).abs() < 1e-12);
        assert_eq!(tape.value(parts.l_p).item(), 0.0);
    }

    #[test]
    fn total_loss_reduces_to_charbonnier_when_unweighted() {
        let a = img(&[1, 8, 8, 3], 75);
        let b = img(&[1, 8, 8, 3], 76);
        let ex = PerceptualExtractor::<f64>::new(7);
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            eps_char: 1e-3,
        };
        let mut tape = Tape::new();
        let x = tape.leaf(a);
        let y = tape.constant(b);
        let parts = total_loss(&mut tape, x, y, &w, &ex).unwrap();
        assert_eq!(
            tape.value(parts.total).item(),
            tape.value(parts.l_char).item()
        );
    }

    #[test]
    fn default_weights_match_training_setup() {
        let w = LossWeights::default();
        assert_eq!(w.lambda1, 0.05);
        assert_eq!(w.lambda2, 0.0005);
    }

    #[test]
    fn gradcheck_loss_components() {
        let a = img(&[1, 8, 8, 3], 77);
        let b = img(&[1, 8, 8, 3], 78);
        let ex = PerceptualExtractor::<f64>::new(7);
        // charbonnier is smooth but sharply curved near x = y (second
        // derivative ~ 1/eps), so the tight 1e-6 check needs a finer step
        let r = crate::gradcheck::gradcheck_with_step(
            &[("x", a.clone()), ("y", b.clone())],
            1e-6,
            1e-6,
            |tape, ids| tape.charbonnier(ids[0], ids[1], 1e-3),
        )
        .unwrap();
        assert!(r.passed(), "charbonnier rel err {}", r.max_rel_err());

        let r = crate::gradcheck::gradcheck(&[("x", a.clone()), ("y", b.clone())], 1e-4, |tape, ids| {
            edge_loss(tape, ids[0], ids[1], 1e-3)
        })
        .unwrap();
        assert!(r.passed(), "edge rel err {}", r.max_rel_err());

        let r = crate::gradcheck::gradcheck(&[("x", a.clone())], 1e-4, |tape, ids| {
            let y = tape.constant(b.clone());
            perceptual_loss(tape, ids[0], y, &ex)
        })
        .unwrap();
        assert!(r.passed(), "perceptual rel err {}", r.max_rel_err());

        let w = LossWeights::default();
        let r = crate::gradcheck::gradcheck(&[("x", a), ("y", b)], 1e-4, |tape, ids| {
            Ok(total_loss(tape, ids[0], ids[1], &w, &ex)?.total)
        })
        .unwrap();
        assert!(r.passed(), "total rel err {}", r.max_rel_err());
    }
}
