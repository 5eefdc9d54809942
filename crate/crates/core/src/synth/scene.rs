//! Background clips: a camera translating over a fixed procedural texture.
//! Because frames are point samples of a continuous texture, the motion
//! between any two frames is known exactly and the ground-truth flow fields
//! are analytic.

use super::texture::Texture;
use crate::error::PipelineError;
use crate::tensor::{Shape, TensorData};

/// Scene content moves by `velocity` pixels per frame (equivalently the
/// camera pans by `-velocity`). Pure translation: the motion is trivially
/// invertible and the flow between frames t and k is the constant
/// `(k - t) * velocity`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub texture_seed: u64,
    pub velocity: (f64, f64),
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.frames < 3 {
            return Err(PipelineError::Invalid(format!(
                "clip needs at least 3 frames, got {}",
                self.frames
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(PipelineError::Invalid("empty frame".into()));
        }
        if !self.velocity.0.is_finite() || !self.velocity.1.is_finite() {
            return Err(PipelineError::Invalid("non-finite velocity".into()));
        }
        Ok(())
    }

    /// How far shape placement must extend beyond the frame.
    pub fn domain_pad(&self) -> f64 {
        let speed = (self.velocity.0.powi(2) + self.velocity.1.powi(2)).sqrt();
        speed * self.frames as f64 + 24.0
    }
}

/// Render the clean frames `{C_t}`.
pub fn gen_background_clip(spec: &SceneSpec) -> Result<Vec<TensorData<f32>>, PipelineError> {
    spec.validate()?;
    let tex = Texture::new(spec.texture_seed, spec.width, spec.height, spec.domain_pad());
    let shape = Shape::new(1, 3, spec.height, spec.width);
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        // Frame t samples the texture at p - t*v, so content drifts by +v
        // per frame.
        let (ox, oy) = (-(t as f64) * spec.velocity.0, -(t as f64) * spec.velocity.1);
        let mut frame = TensorData::zeros(shape);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let rgb = tex.eval(x as f64 + ox, y as f64 + oy);
                for c in 0..3 {
                    *frame.at_mut(0, c, y, x) = rgb[c];
                }
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Analytic ground-truth flow from frame `t` to frame `k`: the constant
/// field `(k - t) * velocity`, in the backward-warp convention (sampling
/// frame k at `p + F_{t->k}(p)` reconstructs frame t).
pub fn gt_flow(spec: &SceneSpec, t: usize, k: usize) -> TensorData<f32> {
    let d = k as f64 - t as f64;
    let mut flow = TensorData::zeros(Shape::new(1, 2, spec.height, spec.width));
    let (dx, dy) = ((d * spec.velocity.0) as f32, (d * spec.velocity.1) as f32);
    for y in 0..spec.height {
        for x in 0..spec.width {
            *flow.at_mut(0, 0, y, x) = dx;
            *flow.at_mut(0, 1, y, x) = dy;
        }
    }
    flow
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::warp::warp_forward;

    fn spec() -> SceneSpec {
        SceneSpec { width: 48, height: 48, frames: 5, texture_seed: 21, velocity: (2.0, 0.0) }
    }

    #[test]
    fn unit_translation_flow_is_constant() {
        let s = spec();
        let f = gt_flow(&s, 0, 1);
        assert!(f.data[..48 * 48].iter().all(|v| *v == 2.0));
        assert!(f.data[48 * 48..].iter().all(|v| *v == 0.0));
        let back = gt_flow(&s, 3, 1);
        assert!(back.data[..48 * 48].iter().all(|v| *v == -4.0));
    }

    #[test]
    fn self_flow_is_zero() {
        let s = spec();
        let f = gt_flow(&s, 2, 2);
        assert!(f.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn warping_next_frame_by_gt_flow_reproduces_current() {
        // Resampling oracle: W(C_{t+1}, F_{t->t+1}) ~ C_t away from borders.
        let s = SceneSpec { velocity: (2.3, -1.1), ..spec() };
        let frames = gen_background_clip(&s).unwrap();
        for t in 0..s.frames - 1 {
            let flow = gt_flow(&s, t, t + 1);
            let warped = warp_forward(&frames[t + 1], &flow).unwrap();
            let mut err = 0.0f64;
            let mut n = 0;
            for c in 0..3 {
                for y in 4..s.height - 4 {
                    for x in 4..s.width - 4 {
                        err += (warped.at(0, c, y, x) - frames[t].at(0, c, y, x)).abs() as f64;
                        n += 1;
                    }
                }
            }
            let mean = err / n as f64;
            assert!(mean < 2e-2, "frame {t}: mean abs resampling error {mean}");
        }
    }

    #[test]
    fn integer_translation_warp_is_near_exact() {
        // With integer velocity the warp needs no interpolation, so interior
        // pixels must match to float precision.
        let s = spec();
        let frames = gen_background_clip(&s).unwrap();
        let flow = gt_flow(&s, 1, 2);
        let warped = warp_forward(&frames[2], &flow).unwrap();
        for c in 0..3 {
            for y in 0..s.height {
                for x in 0..s.width - 4 {
                    let d = (warped.at(0, c, y, x) - frames[1].at(0, c, y, x)).abs();
                    assert!(d < 1e-6, "({c},{y},{x}): {d}");
                }
            }
        }
    }

    #[test]
    fn rejects_too_few_frames() {
        let s = SceneSpec { frames: 2, ..spec() };
        assert!(gen_background_clip(&s).is_err());
    }
}
