//! Dense NCHW tensor storage.

use super::scalar::Scalar;
use crate::error::TensorError;

/// Logical shape of a 4-D tensor in NCHW layout. Scalars are `[1,1,1,1]`,
/// per-image maps `[n,1,h,w]`, flows `[n,2,h,w]`, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Flat index of `(n, c, h, w)`; debug-asserted in bounds.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{},{},{}]", self.n, self.c, self.h, self.w)
    }
}

/// Owned tensor payload: shape plus a row-major NCHW buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<T: Scalar> {
    pub shape: Shape,
    pub data: Vec<T>,
}

impl<T: Scalar> TensorData<T> {
    pub fn zeros(shape: Shape) -> Self {
        TensorData { shape, data: vec![T::ZERO; shape.numel()] }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        TensorData { shape, data: vec![value; shape.numel()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {} wants {} elements, got {}", shape, shape.numel(), data.len()),
            });
        }
        Ok(TensorData { shape, data })
    }

    pub fn scalar(value: T) -> Self {
        TensorData { shape: Shape::scalar(), data: vec![value] }
    }

    /// Sole element of a 1-element tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if !self.shape.is_scalar() {
            return Err(TensorError::NonScalarOutput { shape: self.shape });
        }
        Ok(self.data[0])
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.shape.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        &mut self.data[self.shape.idx(n, c, h, w)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert elementwise (f32 -> f64 promotion for gradient checking).
    pub fn cast<U: Scalar>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

impl TensorData<f32> {
    /// Single-image view helper: shape `[1,c,h,w]` from channel planes.
    pub fn from_planes(planes: &[&[f32]], h: usize, w: usize) -> Result<Self, TensorError> {
        let c = planes.len();
        let mut data = Vec::with_capacity(c * h * w);
        for plane in planes {
            if plane.len() != h * w {
                return Err(TensorError::ShapeMismatch {
                    op: "from_planes",
                    detail: format!("plane has {} elements, want {}", plane.len(), h * w),
                });
            }
            data.extend_from_slice(plane);
        }
        TensorData::from_vec(Shape::new(1, c, h, w), data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_is_row_major_nchw() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.idx(1, 2, 3, 4), 119);
        assert_eq!(s.numel(), 120);
    }

    #[test]
    fn from_vec_rejects_wrong_len() {
        let r = TensorData::<f32>::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]);
        assert!(r.is_err());
    }

    #[test]
    fn item_rejects_non_scalar() {
        let t = TensorData::<f32>::zeros(Shape::new(1, 1, 2, 1));
        assert!(t.item().is_err());
        let s = TensorData::<f32>::scalar(7.0);
        assert_eq!(s.item().unwrap(), 7.0);
    }
}
