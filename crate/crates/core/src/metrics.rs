//! Distortion metrics on floating RGB images in [0, 1].

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 10 * log10(peak^2 / MSE) in dB, returning `cap` for identical images.
pub fn psnr<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>, peak: f64, cap: f64) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in pred.data().iter().zip(reference.data().iter()) {
        let d = a.to_f64() - b.to_f64();
        acc += d * d;
    }
    let mse = acc / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(cap))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Structural similarity with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
/// K2=0.03 and unit dynamic range, computed per channel over valid windows
/// and averaged. Requires (H, W, C) images with H, W >= 11.
pub fn ssim<T: Scalar>(pred: &Tensor<T>, reference: &Tensor<T>) -> Result<f64> {
    if pred.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "ssim shapes differ: {:?} vs {:?}",
            pred.shape(),
            reference.shape()
        )));
    }
    if pred.rank() != 3 {
        return Err(Error::shape(format!("ssim input must be (H, W, C), got {:?}", pred.shape())));
    }
    let (h, w, c) = (pred.dim(0), pred.dim(1), pred.dim(2));
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let pd = pred.data();
    let rd = reference.data();
    let mut acc = 0.0;
    let mut count = 0usize;
    for ci in 0..c {
        for y0 in 0..=(h - SSIM_WINDOW) {
            for x0 in 0..=(w - SSIM_WINDOW) {
                let (mut mu_a, mut mu_b) = (0.0f64, 0.0f64);
                let (mut aa, mut bb, mut ab) = (0.0f64, 0.0f64, 0.0f64);
                for wy in 0..SSIM_WINDOW {
                    for wx in 0..SSIM_WINDOW {
                        let k = window[wy * SSIM_WINDOW + wx];
                        let a = pd[((y0 + wy) * w + x0 + wx) * c + ci].to_f64();
                        let b = rd[((y0 + wy) * w + x0 + wx) * c + ci].to_f64();
                        mu_a += k * a;
                        mu_b += k * b;
                        aa += k * a * a;
                        bb += k * b * b;
                        ab += k * a * b;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                acc += s;
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w, 3], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_identities() {
        let a = textured(8, 8, 1);
        assert_eq!(psnr(&a, &a, 1.0, 100.0).unwrap(), 100.0);
        // uniform difference 0.5: MSE 0.25, peak 1 -> 6.0206 dB
        let b = a.map(|v| v + 0.5);
        let got = psnr(&b, &a, 1.0, 100.0).unwrap();
        assert!((got - 6.0206).abs() < 1e-4, "got {got}");
        // doubling peak adds 20*log10(2)
        let doubled = psnr(&b, &a, 2.0, 100.0).unwrap();
        assert!((doubled - got - 20.0 * 2.0f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let a = textured(12, 12, 2);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.3] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let noisy = a.map(|v| v + rng.gen_range(-amp..amp));
            let p = psnr(&noisy, &a, 1.0, 100.0).unwrap();
            assert!(p < last, "amp {amp}: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = textured(8, 8, 4);
        let b = textured(8, 9, 4);
        assert!(psnr(&a, &b, 1.0, 100.0).is_err());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let a = textured(16, 16, 5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = textured(16, 16, 6);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 1.0 && ab >= -1.0);
    }

    #[test]
    fn ssim_penalizes_constant_shift() {
        let a = textured(16, 16, 7);
        let b = a.map(|v| v + 0.1);
        let s = ssim(&b, &a).unwrap();
        assert!(s < 1.0, "shifted image scored {s}");
    }

    #[test]
    fn ssim_window_size_is_enforced() {
        let a = textured(10, 16, 8);
        assert!(matches!(ssim(&a, &a), Err(Error::Shape(_))));
    }
}
