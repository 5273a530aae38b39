//! 8-bit RGB PNG input/output for (H, W, 3) float tensors in [0, 1].

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::{ColorType, DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Read an 8-bit RGB PNG into a (H, W, 3) tensor scaled to [0, 1].
pub fn png_read(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let decoded = image::load(BufReader::new(file), ImageFormat::Png)
        .map_err(|e| Error::CorruptImage(format!("{}: {e}", path.display())))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(Error::UnsupportedImage(format!(
                "{}: expected 8-bit RGB, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = rgb.dimensions();
    let data: Vec<f32> = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Tensor::new(data, &[h as usize, w as usize, 3])
}

/// Write a (H, W, 3) tensor as 8-bit RGB PNG; values are clamped to [0, 1]
/// and quantized with round-half-up.
pub fn png_write(path: &Path, img: &Tensor<f32>) -> Result<()> {
    if img.rank() != 3 || img.dim(2) != 3 {
        return Err(Error::shape(format!(
            "png_write expects (H, W, 3), got {:?}",
            img.shape()
        )));
    }
    let (h, w) = (img.dim(0), img.dim(1));
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let writer = BufWriter::new(file);
    image::write_buffer_with_format(
        &mut BufWriter::new(writer),
        &bytes,
        w as u32,
        h as u32,
        ColorType::Rgb8,
        ImageFormat::Png,
    )
    .map_err(|e| Error::CorruptImage(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("xyscan-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn quantized_round_trip_is_bitwise() {
        let dir = tmpdir();
        let path = dir.join("rt.png");
        // values already on the 1/255 grid survive exactly
        let img = Tensor::from_fn(&[5, 7, 3], |i| ((i * 11) % 256) as f32 / 255.0);
        png_write(&path, &img).unwrap();
        let back = png_read(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn out_of_range_values_clamp() {
        let dir = tmpdir();
        let path = dir.join("clamp.png");
        let img = Tensor::new(vec![1.2f32, -0.3, 0.5], &[1, 1, 3]).unwrap();
        png_write(&path, &img).unwrap();
        let back = png_read(&path).unwrap();
        assert_eq!(back.data()[0], 1.0); // stored as 255
        assert_eq!(back.data()[1], 0.0);
    }

    #[test]
    fn grayscale_png_is_unsupported() {
        let dir = tmpdir();
        let path = dir.join("gray.png");
        let gray = image::GrayImage::from_pixel(4, 4, image::Luma([128]));
        gray.save(&path).unwrap();
        assert!(matches!(png_read(&path), Err(Error::UnsupportedImage(_))));
    }

    #[test]
    fn missing_and_corrupt_files_are_distinct_errors() {
        let dir = tmpdir();
        assert!(matches!(
            png_read(&dir.join("nope.png")),
            Err(Error::Io { .. })
        ));
        let bad = dir.join("bad.png");
        std::fs::write(&bad, b"this is not a png").unwrap();
        assert!(matches!(png_read(&bad), Err(Error::CorruptImage(_))));
    }
}
