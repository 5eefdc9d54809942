//! Frozen multi-scale feature extractor for the perceptual loss.
//!
//! Three levels; level `l` Gaussian-blurs the frame, average-pools it down
//! by 2^l, and applies a seed-deterministic 3×3 conv producing 8 channels.
//! The weights never train — they enter every graph as constants — so the
//! loss built on top stays a fixed measuring stick across checkpoints.

use crate::tensor::{ConvSpec, Scalar, Shape, Tape, TensorData, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LEVELS: usize = 3;
pub const FEATURE_CHANNELS: usize = 8;

#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Scalar> {
    blur: TensorData<T>,
    pools: Vec<Option<TensorData<T>>>,
    filters: Vec<TensorData<T>>,
}

/// 5×5 Gaussian (σ = 1) applied channel-by-channel, expressed as a dense
/// 3-channel conv kernel with zero cross-channel taps.
fn gaussian_kernel<T: Scalar>() -> TensorData<T> {
    let sigma = 1.0f64;
    let mut taps = [0.0f64; 5];
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *t = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    let mut w = TensorData::zeros(Shape::new(3, 3, 5, 5));
    for c in 0..3 {
        for ky in 0..5 {
            for kx in 0..5 {
                *w.at_mut(c, c, ky, kx) = T::from_f64(taps[ky] * taps[kx]);
            }
        }
    }
    w
}

/// s×s average pooling as a dense stride-s conv with zero cross-channel taps.
fn pool_kernel<T: Scalar>(s: usize) -> TensorData<T> {
    let mut w = TensorData::zeros(Shape::new(3, 3, s, s));
    let v = T::from_f64(1.0 / (s * s) as f64);
    for c in 0..3 {
        for ky in 0..s {
            for kx in 0..s {
                *w.at_mut(c, c, ky, kx) = v;
            }
        }
    }
    w
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (27.0f64).sqrt();
        let filters = (0..LEVELS)
            .map(|_| {
                let shape = Shape::new(FEATURE_CHANNELS, 3, 3, 3);
                let mut w = TensorData {
                    shape,
                    data: (0..shape.numel())
                        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                        .collect(),
                };
                // Guarantee sensitivity to uniform brightness shifts: a random
                // kernel can come out nearly zero-sum, which would null a
                // constant offset between prediction and target.
                for c in 0..3 {
                    let center = w.at(0, c, 1, 1).to_f64();
                    *w.at_mut(0, c, 1, 1) = T::from_f64(center + 0.2);
                }
                w
            })
            .collect();
        let pools = (0..LEVELS).map(|l| (l > 0).then(|| pool_kernel(1 << l))).collect();
        FeaturePyramid { blur: gaussian_kernel(), pools, filters }
    }

    /// Feature tensors for all levels; shapes `[1, 8, h/2^l, w/2^l]`.
    /// Gradients flow through to `x`; the filter weights are constants.
    pub fn features(&self, tape: &mut Tape<T>, x: TensorId) -> Vec<TensorId> {
        let sh = tape.shape(x);
        assert_eq!(sh.c, 3, "feature pyramid expects RGB input");
        assert!(
            sh.h % (1 << (LEVELS - 1)) == 0 && sh.w % (1 << (LEVELS - 1)) == 0,
            "feature pyramid input dims must be divisible by {}, got {sh}",
            1 << (LEVELS - 1)
        );
        let blur_w = tape.constant(self.blur.clone());
        let blurred =
            tape.conv2d(x, blur_w, None, ConvSpec::new(1, 2, 1)).expect("blur preserves dims");
        (0..LEVELS)
            .map(|l| {
                let scaled = match &self.pools[l] {
                    Some(pool) => {
                        let pw = tape.constant(pool.clone());
                        let s = 1 << l;
                        tape.conv2d(blurred, pw, None, ConvSpec::new(s, 0, 1))
                            .expect("pooling divides dims")
                    }
                    None => blurred,
                };
                let fw = tape.constant(self.filters[l].clone());
                tape.conv2d(scaled, fw, None, ConvSpec::same(3)).expect("same-pad feature conv")
            })
            .collect()
    }
}
