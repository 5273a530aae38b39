//! Synthetic paired deblurring data: procedural sharp images convolved with
//! normalized linear-motion kernels plus optional Gaussian noise.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Procedural sharp image (H, W, 3) in [0, 1]: a color gradient background
/// overlaid with filled polygons, checkerboard patches, and stroke marks.
pub fn synth_sharp(rng: &mut impl Rng, height: usize, width: usize) -> Tensor<f32> {
    let mut img = vec![0.0f32; height * width * 3];
    // gradient background with a random direction per channel
    for c in 0..3 {
        let (gx, gy): (f32, f32) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let base: f32 = rng.gen_range(0.2..0.8);
        for y in 0..height {
            for x in 0..width {
                let u = x as f32 / width as f32 - 0.5;
                let v = y as f32 / height as f32 - 0.5;
                img[(y * width + x) * 3 + c] = (base + 0.5 * (gx * u + gy * v)).clamp(0.0, 1.0);
            }
        }
    }
    // filled rectangles and triangles
    for _ in 0..rng.gen_range(3..7) {
        let color: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let cx = rng.gen_range(0..width) as i64;
        let cy = rng.gen_range(0..height) as i64;
        let half_w = rng.gen_range(2..(width / 3).max(3)) as i64;
        let half_h = rng.gen_range(2..(height / 3).max(3)) as i64;
        let triangle = rng.gen_bool(0.5);
        for y in (cy - half_h).max(0)..(cy + half_h).min(height as i64) {
            for x in (cx - half_w).max(0)..(cx + half_w).min(width as i64) {
                let inside = if triangle {
                    // wedge opening downward from the center row
                    let dy = y - (cy - half_h);
                    let spread = half_w * dy / (2 * half_h).max(1);
                    (x - cx).abs() <= spread
                } else {
                    true
                };
                if inside {
                    for c in 0..3 {
                        img[((y as usize) * width + x as usize) * 3 + c] = color[c];
                    }
                }
            }
        }
    }
    // one checkerboard patch
    {
        let cell = rng.gen_range(2..6);
        let x0 = rng.gen_range(0..width / 2);
        let y0 = rng.gen_range(0..height / 2);
        let w = rng.gen_range(width / 4..width / 2);
        let h = rng.gen_range(height / 4..height / 2);
        let (a, b): (f32, f32) = (rng.gen_range(0.0..0.3), rng.gen_range(0.7..1.0));
        for y in y0..(y0 + h).min(height) {
            for x in x0..(x0 + w).min(width) {
                let v = if ((x - x0) / cell + (y - y0) / cell) % 2 == 0 { a } else { b };
                for c in 0..3 {
                    img[(y * width + x) * 3 + c] = v;
                }
            }
        }
    }
    // glyph-like strokes: short random walks
    for _ in 0..rng.gen_range(2..5) {
        let mut x = rng.gen_range(0..width) as i64;
        let mut y = rng.gen_range(0..height) as i64;
        let val: f32 = if rng.gen_bool(0.5) { 0.05 } else { 0.95 };
        for _ in 0..rng.gen_range(10..40) {
            for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1)] {
                let (px, py) = (x + dx, y + dy);
                if px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height {
                    for c in 0..3 {
                        img[((py as usize) * width + px as usize) * 3 + c] = val;
                    }
                }
            }
            x += rng.gen_range(-1..=1);
            y += rng.gen_range(-1..=1);
        }
    }
    Tensor::new(img, &[height, width, 3]).expect("buffer sized above")
}

/// Normalized linear-motion blur kernel: a segment of the given length at
/// the given angle rasterized with bilinear weights onto an odd-sided grid.
/// The kernel always sums to 1; length 1 degenerates to the identity.
pub fn motion_kernel(length: f64, angle: f64) -> Result<(Vec<f32>, usize)> {
    if length < 1.0 {
        return Err(Error::contract(format!(
            "motion kernel length must be >= 1, got {length}"
        )));
    }
    let side = (length.ceil() as usize) | 1; // odd
    let mut k = vec![0.0f32; side * side];
    let center = (side / 2) as f64;
    let (dx, dy) = (angle.cos(), angle.sin());
    let half = (length - 1.0) / 2.0;
    let samples = (length * 8.0).ceil() as usize;
    for i in 0..=samples {
        let t = if samples == 0 { 0.0 } else { i as f64 / samples as f64 };
        let s = -half + t * (length - 1.0);
        let (x, y) = (center + s * dx, center + s * dy);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (ix, iy, w) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x0 + 1.0, y0, fx * (1.0 - fy)),
            (x0, y0 + 1.0, (1.0 - fx) * fy),
            (x0 + 1.0, y0 + 1.0, fx * fy),
        ] {
            if ix >= 0.0 && iy >= 0.0 && (ix as usize) < side && (iy as usize) < side {
                k[(iy as usize) * side + ix as usize] += w as f32;
            }
        }
    }
    let total: f32 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= total;
    }
    Ok((k, side))
}

/// Convolve each channel with the kernel under reflect padding.
pub fn blur_image(img: &Tensor<f32>, kernel: &[f32], side: usize) -> Result<Tensor<f32>> {
    if img.rank() != 3 {
        return Err(Error::shape(format!("blur input must be (H, W, C), got {:?}", img.shape())));
    }
    let (h, w, c) = (img.dim(0), img.dim(1), img.dim(2));
    let half = (side / 2) as isize;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut v = i;
        if v < 0 {
            v = -v;
        }
        if v >= n {
            v = 2 * n - 2 - v;
        }
        v.clamp(0, n - 1) as usize
    };
    let src = img.data();
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let mut acc = 0.0f32;
                for ky in 0..side {
                    let sy = reflect(y as isize + ky as isize - half, h);
                    for kx in 0..side {
                        let sx = reflect(x as isize + kx as isize - half, w);
                        acc += src[(sy * w + sx) * c + ci] * kernel[ky * side + kx];
                    }
                }
                out[(y * w + x) * c + ci] = acc;
            }
        }
    }
    Tensor::new(out, &[h, w, c])
}

/// One pixel-aligned (blurred, sharp) pair.
pub fn synth_pair(
    rng: &mut impl Rng,
    size: usize,
    kernel_len_range: (f64, f64),
    noise_sigma: f64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let sharp = synth_sharp(rng, size, size);
    let length = if kernel_len_range.0 >= kernel_len_range.1 {
        kernel_len_range.0
    } else {
        rng.gen_range(kernel_len_range.0..kernel_len_range.1)
    };
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (kernel, side) = motion_kernel(length, angle)?;
    let blurred = blur_image(&sharp, &kernel, side)?;
    let noisy = if noise_sigma > 0.0 {
        // Box-Muller from the same stream keeps pairs reproducible
        let data: Vec<f32> = blurred
            .data()
            .iter()
            .map(|&v| {
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                (v as f64 + noise_sigma * z).clamp(0.0, 1.0) as f32
            })
            .collect();
        Tensor::new(data, blurred.shape())?
    } else {
        blurred.map(|v| v.clamp(0.0, 1.0))
    };
    Ok((noisy, sharp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_sums_to_one_and_identity_at_length_one() {
        let (k, side) = motion_kernel(1.0, 0.7).unwrap();
        assert_eq!(side, 1);
        assert!((k[0] - 1.0).abs() < 1e-6);
        for len in [3.0, 7.5, 15.0] {
            let (k, _) = motion_kernel(len, 1.1).unwrap();
            let s: f32 = k.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "length {len} sums to {s}");
        }
        assert!(motion_kernel(0.5, 0.0).is_err());
    }

    #[test]
    fn identity_kernel_preserves_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let img = synth_sharp(&mut rng, 16, 16);
        let (k, side) = motion_kernel(1.0, 0.3).unwrap();
        let blurred = blur_image(&img, &k, side).unwrap();
        for (a, b) in img.data().iter().zip(blurred.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_unchanged_before_noise() {
        let img = Tensor::full(&[12, 12, 3], 0.6f32);
        let (k, side) = motion_kernel(9.0, 0.9).unwrap();
        let blurred = blur_image(&img, &k, side).unwrap();
        for &v in blurred.data() {
            assert!((v - 0.6).abs() < 1e-5);
        }
    }

    #[test]
    fn blur_strength_monotonically_degrades_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let sharp = synth_sharp(&mut rng, 48, 48);
        let mut values = Vec::new();
        for len in [3.0, 7.0, 15.0] {
            let (k, side) = motion_kernel(len, 0.6).unwrap();
            let blurred = blur_image(&sharp, &k, side).unwrap();
            values.push(psnr(&blurred, &sharp, 1.0, 100.0).unwrap());
        }
        assert!(values[0] > values[1] && values[1] > values[2], "{values:?}");
    }

    #[test]
    fn pairs_are_reproducible_and_clamped() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(82);
            synth_pair(&mut rng, 32, (3.0, 15.0), 0.01).unwrap()
        };
        let (b1, s1) = make();
        let (b2, s2) = make();
        assert_eq!(b1.data(), b2.data());
        assert_eq!(s1.data(), s2.data());
        assert!(b1.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
