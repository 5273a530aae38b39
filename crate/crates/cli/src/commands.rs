//! Command implementations. Every command writes an effective-config
//! snapshot into the output directory and never mutates its inputs.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xyscan_core::analysis::{bench_compare, order_report};
use xyscan_core::checkpoint::{checkpoint_load, validate_weights};
use xyscan_core::data::synth_pair;
use xyscan_core::error::{Error, Result};
use xyscan_core::image_io::{png_read, png_write};
use xyscan_core::metrics::{psnr, ssim};
use xyscan_core::network::{build_model, count_flops, describe, forward, FusionKind, ModelConfig};
use xyscan_core::tensor::Tensor;
use xyscan_core::train::train_loop;
use xyscan_core::verify::{format_suite, gradient_suite};

use crate::settings::Settings;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Every run leaves `effective-config.txt` in its output directory so the
/// run is reproducible from the snapshot alone.
pub fn write_snapshot(settings: &Settings, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_text(&out.join("effective-config.txt"), &settings.snapshot())
}

pub fn make_data(settings: &Settings, out: &Path) -> Result<()> {
    write_snapshot(settings, out)?;
    let blur_dir = out.join("blur");
    let sharp_dir = out.join("sharp");
    ensure_dir(&blur_dir)?;
    ensure_dir(&sharp_dir)?;
    let d = &settings.data;
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    for i in 0..d.count {
        let (blur, sharp) = synth_pair(&mut rng, d.size, (d.kernel_min, d.kernel_max), d.noise_sigma)?;
        let name = format!("{i:04}.png");
        png_write(&blur_dir.join(&name), &blur)?;
        png_write(&sharp_dir.join(&name), &sharp)?;
    }
    println!(
        "wrote {} pairs of {}x{} images under {}",
        d.count,
        d.size,
        d.size,
        out.display()
    );
    Ok(())
}

/// Sorted PNG names shared by `<dir>/blur` and `<dir>/sharp`.
fn load_pair_dir(dir: &Path) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let blur_dir = dir.join("blur");
    let sharp_dir = dir.join("sharp");
    let mut names: Vec<String> = std::fs::read_dir(&blur_dir)
        .map_err(|source| Error::Io {
            path: blur_dir.clone(),
            source,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        pairs.push((png_read(&blur_dir.join(&name))?, png_read(&sharp_dir.join(&name))?));
    }
    Ok(pairs)
}

pub fn train(settings: &Settings, out: &Path) -> Result<()> {
    write_snapshot(settings, out)?;
    let mut pairs = if settings.data.dir.is_empty() {
        let d = &settings.data;
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        (0..d.count)
            .map(|_| synth_pair(&mut rng, d.size, (d.kernel_min, d.kernel_max), d.noise_sigma))
            .collect::<Result<Vec<_>>>()?
    } else {
        load_pair_dir(Path::new(&settings.data.dir))?
    };
    if pairs.is_empty() {
        return Err(Error::EmptyData("no training pairs found".into()));
    }
    let holdout = if settings.data.holdout && pairs.len() >= 2 {
        pairs.pop()
    } else {
        None
    };
    let outcome = train_loop(
        &settings.model,
        &settings.train,
        &pairs,
        holdout.as_ref(),
        Some(out),
    )?;
    println!(
        "trained {} steps on {} pairs: loss {:.6} -> {:.6}, train PSNR {:.2} dB (blurred {:.2} dB)",
        settings.train.steps,
        pairs.len(),
        outcome.first_loss,
        outcome.last_loss,
        outcome.final_train_psnr,
        outcome.blurred_input_psnr
    );
    println!("checkpoint and metrics under {}", out.display());
    Ok(())
}

fn collect_pngs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut names: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|source| Error::Io {
                    path: input.clone(),
                    source,
                })?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "png"))
                .collect();
            names.sort();
            files.extend(names);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::EmptyData("no input PNG files".into()));
    }
    Ok(files)
}

pub fn infer(settings: &Settings, ckpt: &Path, inputs: &[PathBuf], out: &Path) -> Result<()> {
    write_snapshot(settings, out)?;
    let (weights, cfg) = checkpoint_load::<f32>(ckpt)?;
    validate_weights(&weights, &cfg)?;
    for file in collect_pngs(inputs)? {
        let img = png_read(&file)?;
        let shape = img.shape().to_vec();
        let batched = img.reshape(&[1, shape[0], shape[1], 3])?;
        let restored = forward(&weights, &cfg, &batched)?;
        let restored = restored.reshape(&shape)?;
        let name = file.file_name().expect("png path has a file name");
        png_write(&out.join(name), &restored)?;
    }
    println!("restored images written to {}", out.display());
    Ok(())
}

pub fn eval(settings: &Settings, restored_dir: &Path, reference_dir: &Path, out: &Path) -> Result<()> {
    write_snapshot(settings, out)?;
    let mut names: Vec<String> = std::fs::read_dir(restored_dir)
        .map_err(|source| Error::Io {
            path: restored_dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyData(format!(
            "no PNG files in {}",
            restored_dir.display()
        )));
    }
    let mut csv = String::from("file,psnr,ssim\n");
    let (mut psnr_sum, mut ssim_sum) = (0.0, 0.0);
    for name in &names {
        let a = png_read(&restored_dir.join(name))?;
        let b = png_read(&reference_dir.join(name))?;
        let p = psnr(&a, &b, 1.0, 100.0)?;
        let s = ssim(&a, &b)?;
        psnr_sum += p;
        ssim_sum += s;
        csv.push_str(&format!("{name},{p:.4},{s:.6}\n"));
    }
    let n = names.len() as f64;
    csv.push_str(&format!("mean,{:.4},{:.6}\n", psnr_sum / n, ssim_sum / n));
    print!("{csv}");
    write_text(&out.join("eval.csv"), &csv)?;
    Ok(())
}

/// Exit is nonzero when any gradient check fails.
pub fn gradcheck_cmd(settings: &Settings, out: &Path) -> Result<bool> {
    write_snapshot(settings, out)?;
    let entries = gradient_suite()?;
    let text = format_suite(&entries);
    print!("{text}");
    write_text(&out.join("gradcheck.txt"), &text)?;
    let all = entries.iter().all(|e| e.passed());
    println!(
        "{}: {} checks",
        if all { "ALL PASS" } else { "FAILURES PRESENT" },
        entries.len()
    );
    Ok(all)
}

pub fn bench_scan(settings: &Settings, out: &Path) -> Result<()> {
    write_snapshot(settings, out)?;
    let b = &settings.bench;
    let report = bench_compare(b.channels, b.state_dim, b.depth, b.height, b.width, b.repeats, settings.data.seed)?;
    print!("{}", report.to_table());
    println!();
    print!("{}", order_report(b.height, b.width));
    write_text(&out.join("bench.csv"), &report.to_csv())?;
    Ok(())
}

pub fn count(settings: &Settings, out: &Path) -> Result<()> {
    write_snapshot(settings, out)?;
    let cfg = &settings.model;
    let weights = build_model::<f32>(cfg)?;
    let (h, w) = (settings.bench.height, settings.bench.width);
    let flops = count_flops(cfg, h, w)?;
    println!("parameters: {}", weights.param_count());
    println!("MACs at {h}x{w}: {}", flops.total());
    for (name, macs) in &flops.items {
        println!("  {name:<10} {macs}");
    }

    // fusion ablation at the current width: DGFF vs AFF
    let dgff_cfg = ModelConfig {
        fusion: FusionKind::Dgff,
        ..cfg.clone()
    };
    let aff_cfg = ModelConfig {
        fusion: FusionKind::Aff,
        ..cfg.clone()
    };
    let dgff_params = build_model::<f32>(&dgff_cfg)?.param_count_under("fusion");
    let aff_params = build_model::<f32>(&aff_cfg)?.param_count_under("fusion");
    let dgff_macs = count_flops(&dgff_cfg, h, w)?.under("fusion");
    let aff_macs = count_flops(&aff_cfg, h, w)?.under("fusion");
    println!("fusion comparison at this width:");
    println!(
        "  dgff params {dgff_params}, aff params {aff_params}, ratio {:.4}",
        dgff_params as f64 / aff_params as f64
    );
    println!(
        "  dgff MACs {dgff_macs}, aff MACs {aff_macs}, ratio {:.4}",
        dgff_macs as f64 / aff_macs as f64
    );
    println!();
    println!("architecture:");
    print!("{}", describe(&weights, cfg));
    Ok(())
}
