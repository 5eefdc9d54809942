//! Raw planar float frames: channel planes of little-endian f32, no header.
//! Dimensions travel in the corpus manifest, so the reader is told the shape.

use crate::error::IoFormatError;
use crate::tensor::{Shape, TensorData};
use std::fs;
use std::path::Path;

pub fn write_rawf32(path: &Path, t: &TensorData<f32>) -> Result<(), IoFormatError> {
    assert_eq!(t.shape.n, 1, "write_rawf32 stores single images, got {}", t.shape);
    let mut buf = Vec::with_capacity(4 * t.data.len());
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| IoFormatError::io(path, e))
}

pub fn read_rawf32(path: &Path, c: usize, h: usize, w: usize) -> Result<TensorData<f32>, IoFormatError> {
    let bytes = fs::read(path).map_err(|e| IoFormatError::io(path, e))?;
    let want = 4 * c * h * w;
    if bytes.len() != want {
        return Err(IoFormatError::malformed(
            path,
            format!("expected {want} bytes for {c}x{h}x{w} f32 planes, found {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(TensorData { shape: Shape::new(1, c, h, w), data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.rawf32");
        let mut t = TensorData::zeros(Shape::new(1, 3, 4, 5));
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = (i as f32).sin();
        }
        write_rawf32(&path, &t).unwrap();
        let back = read_rawf32(&path, 3, 4, 5).unwrap();
        assert_eq!(back.data, t.data);
        assert_eq!(back.shape, t.shape);
    }

    #[test]
    fn rejects_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.rawf32");
        std::fs::write(&path, [0u8; 16]).unwrap();
        assert!(read_rawf32(&path, 3, 4, 5).is_err());
    }
}
