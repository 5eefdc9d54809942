//! Middlebury `.flo` optical-flow files: 4-byte magic "PIEH", little-endian
//! i32 width and height, then row-major interleaved (dx, dy) f32 pairs.

use crate::error::IoFormatError;
use crate::tensor::{Shape, TensorData};
use std::fs;
use std::io::Write as _;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PIEH";

/// Write a `[1,2,h,w]` flow field.
pub fn write_flo(path: &Path, flow: &TensorData<f32>) -> Result<(), IoFormatError> {
    let s = flow.shape;
    assert_eq!((s.n, s.c), (1, 2), "write_flo expects a [1,2,h,w] tensor, got {s}");
    let mut buf = Vec::with_capacity(12 + 8 * s.h * s.w);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(s.w as i32).to_le_bytes());
    buf.extend_from_slice(&(s.h as i32).to_le_bytes());
    for y in 0..s.h {
        for x in 0..s.w {
            buf.extend_from_slice(&flow.at(0, 0, y, x).to_le_bytes());
            buf.extend_from_slice(&flow.at(0, 1, y, x).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| IoFormatError::io(path, e))?;
    f.write_all(&buf).map_err(|e| IoFormatError::io(path, e))
}

/// Read a flow field into a `[1,2,h,w]` tensor.
pub fn read_flo(path: &Path) -> Result<TensorData<f32>, IoFormatError> {
    let bytes = fs::read(path).map_err(|e| IoFormatError::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(IoFormatError::malformed(path, "missing PIEH magic"));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(IoFormatError::malformed(path, format!("implausible dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let want = 12 + 8 * w * h;
    if bytes.len() != want {
        return Err(IoFormatError::malformed(
            path,
            format!("expected {want} bytes for {w}x{h}, found {}", bytes.len()),
        ));
    }
    let mut flow = TensorData::zeros(Shape::new(1, 2, h, w));
    let mut off = 12;
    for y in 0..h {
        for x in 0..w {
            let dx = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            let dy = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
            off += 8;
            *flow.at_mut(0, 0, y, x) = dx;
            *flow.at_mut(0, 1, y, x) = dy;
        }
    }
    Ok(flow)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let mut flow = TensorData::zeros(Shape::new(1, 2, 3, 4));
        for (i, v) in flow.data.iter_mut().enumerate() {
            *v = (i as f32) * 0.37 - 2.0;
        }
        write_flo(&path, &flow).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back.shape, flow.shape);
        assert_eq!(back.data, flow.data);
    }

    #[test]
    fn header_layout_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let mut flow = TensorData::zeros(Shape::new(1, 2, 1, 2));
        *flow.at_mut(0, 0, 0, 0) = 1.5;
        *flow.at_mut(0, 1, 0, 0) = -2.0;
        write_flo(&path, &flow).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"PIEH");
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1.5);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), -2.0);
        assert_eq!(bytes.len(), 12 + 8 * 2);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, b"PIEX\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(read_flo(&path).is_err());
        std::fs::write(&path, b"PIEH\x02\x00\x00\x00\x02\x00\x00\x00short").unwrap();
        assert!(read_flo(&path).is_err());
    }
}
