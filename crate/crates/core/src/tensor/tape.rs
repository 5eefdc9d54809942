//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs; nodes are therefore already in topological order and the
//! backward pass is a single reverse sweep. Gradients are kept for leaf
//! nodes only (parameters and inputs); intermediate gradients are consumed
//! as the sweep moves past them.

use super::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use super::data::{Shape, TensorData};
use super::scalar::Scalar;
use super::upsample::{
    bilinear_up2_backward, bilinear_up2_forward, convex_up2_backward, convex_up2_forward,
};
use super::warp::{warp_backward, warp_forward};
use crate::error::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, spec: ConvSpec },
    Warp { src: TensorId, flow: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    /// Broadcast-multiply `[n,c,h,w]` by a single-channel map `[n,1,h,w]`.
    MulChannelMap { x: TensorId, map: TensorId },
    AffineScalar { x: TensorId, scale: f64 },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    Relu { x: TensorId },
    Exp { x: TensorId },
    Ln { x: TensorId },
    Abs { x: TensorId },
    Clamp { x: TensorId, lo: f64, hi: f64 },
    ConcatChannels { xs: Vec<TensorId> },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    BilinearUp2 { x: TensorId },
    ConvexUp2 { coarse: TensorId, logits: TensorId },
    Detach,
}

struct Node<T: Scalar> {
    value: TensorData<T>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients harvested by a backward sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<TensorData<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: TensorId) -> Option<&TensorData<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: TensorId) -> Option<TensorData<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<TensorData<T>>, delta: TensorData<T>) {
    match slot {
        None => *slot = Some(delta),
        Some(g) => {
            debug_assert_eq!(g.shape, delta.shape);
            for (a, b) in g.data.iter_mut().zip(&delta.data) {
                *a += *b;
            }
        }
    }
}

#[inline]
fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x.to_f64() >= 0.0 {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &TensorData<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].value.shape
    }

    fn push(&mut self, value: TensorData<T>, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { value, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// New differentiable leaf (parameter or input under test).
    pub fn leaf(&mut self, value: TensorData<T>, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradient (data, targets, frozen filters).
    pub fn constant(&mut self, value: TensorData<T>) -> TensorId {
        self.leaf(value, false)
    }

    fn binary_shape_check(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<Shape, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{} vs {}", sa, sb),
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.binary_shape_check("add", a, b)?;
        let mut out = TensorData::zeros(shape);
        for (o, (x, y)) in out.data.iter_mut().zip(self.value(a).data.iter().zip(&self.value(b).data))
        {
            *o = *x + *y;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.binary_shape_check("sub", a, b)?;
        let mut out = TensorData::zeros(shape);
        for (o, (x, y)) in out.data.iter_mut().zip(self.value(a).data.iter().zip(&self.value(b).data))
        {
            *o = *x - *y;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let shape = self.binary_shape_check("mul", a, b)?;
        let mut out = TensorData::zeros(shape);
        for (o, (x, y)) in out.data.iter_mut().zip(self.value(a).data.iter().zip(&self.value(b).data))
        {
            *o = *x * *y;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    /// `x * map` where `map` has one channel broadcast across all of `x`'s.
    pub fn mul_channel_map(&mut self, x: TensorId, map: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sm) = (self.shape(x), self.shape(map));
        if sm.c != 1 || sm.n != sx.n || sm.h != sx.h || sm.w != sx.w {
            return Err(TensorError::ShapeMismatch {
                op: "mul_channel_map",
                detail: format!("x {} with map {} (want [n,1,h,w])", sx, sm),
            });
        }
        let mut out = TensorData::zeros(sx);
        for n in 0..sx.n {
            for c in 0..sx.c {
                for h in 0..sx.h {
                    for w in 0..sx.w {
                        *out.at_mut(n, c, h, w) =
                            self.value(x).at(n, c, h, w) * self.value(map).at(n, 0, h, w);
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(map);
        Ok(self.push(out, Op::MulChannelMap { x, map }, ng))
    }

    /// `scale * x + offset` with compile-time constants.
    pub fn affine(&mut self, x: TensorId, scale: f64, offset: f64) -> TensorId {
        let (s, o) = (T::from_f64(scale), T::from_f64(offset));
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = s * *v + o;
        }
        let ng = self.needs(x);
        self.push(out, Op::AffineScalar { x, scale }, ng)
    }

    pub fn scale(&mut self, x: TensorId, scale: f64) -> TensorId {
        self.affine(x, scale, 0.0)
    }

    /// `1 - x`, the usual complement of masks and gates.
    pub fn one_minus(&mut self, x: TensorId) -> TensorId {
        self.affine(x, -1.0, 1.0)
    }

    fn unary<F: Fn(T) -> T>(&mut self, x: TensorId, f: F, op: Op) -> TensorId {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = f(*v);
        }
        let ng = self.needs(x);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(x, sigmoid_scalar, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.maxv(T::ZERO), Op::Relu { x })
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.exp(), Op::Exp { x })
    }

    /// Natural log; rejects non-positive inputs outright since every use in
    /// this crate clamps first.
    pub fn ln(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        if self.value(x).data.iter().any(|v| v.to_f64() <= 0.0) {
            return Err(TensorError::NonFinite { op: "ln" });
        }
        Ok(self.unary(x, |v| v.ln(), Op::Ln { x }))
    }

    pub fn abs(&mut self, x: TensorId) -> TensorId {
        self.unary(x, |v| v.abs(), Op::Abs { x })
    }

    pub fn clamp(&mut self, x: TensorId, lo: f64, hi: f64) -> TensorId {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(x, |v| v.maxv(l).minv(h), Op::Clamp { x, lo, hi })
    }

    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Invalid("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]);
        let mut total_c = 0;
        for &x in xs {
            let s = self.shape(x);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    detail: format!("{} vs {}", s, first),
                });
            }
            total_c += s.c;
        }
        let shape = Shape::new(first.n, total_c, first.h, first.w);
        let mut out = TensorData::zeros(shape);
        let plane = first.h * first.w;
        for n in 0..first.n {
            let mut c_off = 0;
            for &x in xs {
                let s = self.shape(x);
                let src = &self.value(x).data[n * s.c * plane..(n + 1) * s.c * plane];
                out.data[(n * total_c + c_off) * plane..(n * total_c + c_off + s.c) * plane]
                    .copy_from_slice(src);
                c_off += s.c;
            }
        }
        let ng = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(out, Op::ConcatChannels { xs: xs.to_vec() }, ng))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let mut s = T::ZERO;
        for v in &self.value(x).data {
            s += *v;
        }
        let ng = self.needs(x);
        self.push(TensorData::scalar(s), Op::SumAll { x }, ng)
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let numel = self.shape(x).numel();
        let mut s = T::ZERO;
        for v in &self.value(x).data {
            s += *v;
        }
        let mean = s * T::from_f64(1.0 / numel as f64);
        let ng = self.needs(x);
        self.push(TensorData::scalar(mean), Op::MeanAll { x }, ng)
    }

    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        spec: ConvSpec,
    ) -> Result<TensorId, TensorError> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let ng = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, ng))
    }

    pub fn warp(&mut self, src: TensorId, flow: TensorId) -> Result<TensorId, TensorError> {
        let out = warp_forward(self.value(src), self.value(flow))?;
        let ng = self.needs(src) || self.needs(flow);
        Ok(self.push(out, Op::Warp { src, flow }, ng))
    }

    pub fn bilinear_up2(&mut self, x: TensorId) -> TensorId {
        let out = bilinear_up2_forward(self.value(x));
        let ng = self.needs(x);
        self.push(out, Op::BilinearUp2 { x }, ng)
    }

    pub fn convex_up2(
        &mut self,
        coarse: TensorId,
        logits: TensorId,
    ) -> Result<TensorId, TensorError> {
        let out = convex_up2_forward(self.value(coarse), self.value(logits))?;
        let ng = self.needs(coarse) || self.needs(logits);
        Ok(self.push(out, Op::ConvexUp2 { coarse, logits }, ng))
    }

    /// Copy of the value that blocks gradient flow.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let out = self.value(x).clone();
        self.push(out, Op::Detach, false)
    }

    pub fn assert_finite(&self, id: TensorId, op: &'static str) -> Result<(), TensorError> {
        if self.value(id).all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Reverse sweep from a scalar loss. Returns the gradients of all leaf
    /// nodes that required them.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if !lv.shape.is_scalar() {
            return Err(TensorError::NonScalarOutput { shape: lv.shape });
        }
        if !lv.data[0].is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<TensorData<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(TensorData::scalar(T::ONE));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue; // keep the gradient for harvesting
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue, // node does not feed the loss
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Detach => {}
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.needs(*b) {
                        let mut neg = g;
                        for v in &mut neg.data {
                            *v = -*v;
                        }
                        accumulate(&mut grads[b.0], neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs(*a) {
                        let mut da = g.clone();
                        for (v, y) in da.data.iter_mut().zip(&self.value(*b).data) {
                            *v *= *y;
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.needs(*b) {
                        let mut db = g;
                        for (v, x) in db.data.iter_mut().zip(&self.value(*a).data) {
                            *v *= *x;
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::MulChannelMap { x, map } => {
                    let sx = self.shape(*x);
                    if self.needs(*x) {
                        let mut dx = TensorData::zeros(sx);
                        for n in 0..sx.n {
                            for c in 0..sx.c {
                                for h in 0..sx.h {
                                    for w in 0..sx.w {
                                        *dx.at_mut(n, c, h, w) =
                                            g.at(n, c, h, w) * self.value(*map).at(n, 0, h, w);
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.needs(*map) {
                        let mut dm = TensorData::zeros(self.shape(*map));
                        for n in 0..sx.n {
                            for h in 0..sx.h {
                                for w in 0..sx.w {
                                    let mut s = T::ZERO;
                                    for c in 0..sx.c {
                                        s += g.at(n, c, h, w) * self.value(*x).at(n, c, h, w);
                                    }
                                    *dm.at_mut(n, 0, h, w) = s;
                                }
                            }
                        }
                        accumulate(&mut grads[map.0], dm);
                    }
                }
                Op::AffineScalar { x, scale } => {
                    if self.needs(*x) {
                        let mut dx = g;
                        let s = T::from_f64(*scale);
                        for v in &mut dx.data {
                            *v *= s;
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Sigmoid { x } => {
                    if self.needs(*x) {
                        let mut dx = g;
                        for (v, y) in dx.data.iter_mut().zip(&node.value.data) {
                            *v *= *y * (T::ONE - *y);
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Tanh { x } => {
                    if self.needs(*x) {
                        let mut dx = g;
                        for (v, y) in dx.data.iter_mut().zip(&node.value.data) {
                            *v *= T::ONE - *y * *y;
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Relu { x } => {
                    if self.needs(*x) {
                        let mut dx = g;
                        for (v, xin) in dx.data.iter_mut().zip(&self.value(*x).data) {
                            if xin.to_f64() <= 0.0 {
                                *v = T::ZERO;
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Exp { x } => {
                    if self.needs(*x) {
                        let mut dx = g;
                        for (v, y) in dx.data.iter_mut().zip(&node.value.data) {
                            *v *= *y;
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Ln { x } => {
                    if self.needs(*x) {
                        let mut dx = g;
                        for (v, xin) in dx.data.iter_mut().zip(&self.value(*x).data) {
                            *v = *v / *xin;
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Abs { x } => {
                    if self.needs(*x) {
                        let mut dx = g;
                        for (v, xin) in dx.data.iter_mut().zip(&self.value(*x).data) {
                            let s = xin.to_f64();
                            if s < 0.0 {
                                *v = -*v;
                            } else if s == 0.0 {
                                *v = T::ZERO;
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if self.needs(*x) {
                        let mut dx = g;
                        for (v, xin) in dx.data.iter_mut().zip(&self.value(*x).data) {
                            let s = xin.to_f64();
                            if s < *lo || s > *hi {
                                *v = T::ZERO;
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::ConcatChannels { xs } => {
                    let total = node.value.shape;
                    let plane = total.h * total.w;
                    let mut c_off = 0;
                    for &x in xs {
                        let s = self.shape(x);
                        if self.needs(x) {
                            let mut dx = TensorData::zeros(s);
                            for n in 0..total.n {
                                let src = &g.data[(n * total.c + c_off) * plane
                                    ..(n * total.c + c_off + s.c) * plane];
                                dx.data[n * s.c * plane..(n + 1) * s.c * plane]
                                    .copy_from_slice(src);
                            }
                            accumulate(&mut grads[x.0], dx);
                        }
                        c_off += s.c;
                    }
                }
                Op::SumAll { x } => {
                    if self.needs(*x) {
                        let gv = g.data[0];
                        accumulate(&mut grads[x.0], TensorData::full(self.shape(*x), gv));
                    }
                }
                Op::MeanAll { x } => {
                    if self.needs(*x) {
                        let s = self.shape(*x);
                        let gv = g.data[0] * T::from_f64(1.0 / s.numel() as f64);
                        accumulate(&mut grads[x.0], TensorData::full(s, gv));
                    }
                }
                Op::Conv2d { x, w, b, spec } => {
                    let want_dx = self.needs(*x);
                    let want_dw = self.needs(*w);
                    let want_db = b.map_or(false, |b| self.needs(b));
                    let cg = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *spec,
                        want_dx,
                        want_dw,
                        want_db,
                    )?;
                    if let Some(dx) = cg.dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if let Some(dw) = cg.dw {
                        accumulate(&mut grads[w.0], dw);
                    }
                    if let (Some(db), Some(b)) = (cg.db, b) {
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Warp { src, flow } => {
                    let wg = warp_backward(self.value(*src), self.value(*flow), &g)?;
                    if self.needs(*src) {
                        accumulate(&mut grads[src.0], wg.dsrc);
                    }
                    if self.needs(*flow) {
                        accumulate(&mut grads[flow.0], wg.dflow);
                    }
                }
                Op::BilinearUp2 { x } => {
                    if self.needs(*x) {
                        let dx = bilinear_up2_backward(self.shape(*x), &g);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::ConvexUp2 { coarse, logits } => {
                    let cg = convex_up2_backward(self.value(*coarse), self.value(*logits), &g)?;
                    if self.needs(*coarse) {
                        accumulate(&mut grads[coarse.0], cg.dcoarse);
                    }
                    if self.needs(*logits) {
                        accumulate(&mut grads[logits.0], cg.dlogits);
                    }
                }
            }
            grads[i] = None;
        }
        Ok(Gradients { grads })
    }
}
