//! 8-bit PNG export/import for frames (RGB) and masks (grayscale). PNG is
//! the human-inspectable side channel; training reads the raw float files.

use crate::error::IoFormatError;
use crate::tensor::{Shape, TensorData};
use image::{GrayImage, ImageReader, RgbImage};
use std::path::Path;

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a `[1,3,h,w]` tensor in [0,1] as RGB PNG.
pub fn write_rgb_png(path: &Path, t: &TensorData<f32>) -> Result<(), IoFormatError> {
    let s = t.shape;
    assert_eq!((s.n, s.c), (1, 3), "write_rgb_png expects [1,3,h,w], got {s}");
    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_u8(t.at(0, 0, y, x)), to_u8(t.at(0, 1, y, x)), to_u8(t.at(0, 2, y, x))]),
            );
        }
    }
    img.save(path).map_err(|e| IoFormatError::Png { path: path.display().to_string(), detail: e.to_string() })
}

/// Write a `[1,1,h,w]` tensor in [0,1] as grayscale PNG.
pub fn write_gray_png(path: &Path, t: &TensorData<f32>) -> Result<(), IoFormatError> {
    let s = t.shape;
    assert_eq!((s.n, s.c), (1, 1), "write_gray_png expects [1,1,h,w], got {s}");
    let mut img = GrayImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            img.put_pixel(x as u32, y as u32, image::Luma([to_u8(t.at(0, 0, y, x))]));
        }
    }
    img.save(path).map_err(|e| IoFormatError::Png { path: path.display().to_string(), detail: e.to_string() })
}

/// Read any PNG as `[1,3,h,w]` in [0,1] (grayscale is replicated).
pub fn read_rgb_png(path: &Path) -> Result<TensorData<f32>, IoFormatError> {
    let img = ImageReader::open(path)
        .map_err(|e| IoFormatError::io(path, e))?
        .decode()
        .map_err(|e| IoFormatError::Png { path: path.display().to_string(), detail: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = TensorData::zeros(Shape::new(1, 3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                *t.at_mut(0, c, y, x) = p.0[c] as f32 / 255.0;
            }
        }
    }
    Ok(t)
}

/// Read a PNG as `[1,1,h,w]` in [0,1] via its first channel.
pub fn read_gray_png(path: &Path) -> Result<TensorData<f32>, IoFormatError> {
    let img = ImageReader::open(path)
        .map_err(|e| IoFormatError::io(path, e))?
        .decode()
        .map_err(|e| IoFormatError::Png { path: path.display().to_string(), detail: e.to_string() })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = TensorData::zeros(Shape::new(1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            *t.at_mut(0, 0, y, x) = img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0;
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let mut t = TensorData::zeros(Shape::new(1, 3, 2, 3));
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = ((i * 13) % 256) as f32 / 255.0;
        }
        write_rgb_png(&path, &t).unwrap();
        let back = read_rgb_png(&path).unwrap();
        assert_eq!(back.shape, t.shape);
        for (a, b) in back.data.iter().zip(&t.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn binary_mask_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = TensorData::zeros(Shape::new(1, 1, 4, 4));
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = if i % 3 == 0 { 1.0 } else { 0.0 };
        }
        write_gray_png(&path, &m).unwrap();
        let back = read_gray_png(&path).unwrap();
        assert_eq!(back.data, m.data);
    }
}
