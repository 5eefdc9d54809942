//! Procedural scene texture: multi-octave value noise plus soft colored
//! shapes, evaluable at arbitrary (fractional) coordinates so camera motion
//! produces exact sub-pixel resampling with analytic ground-truth flow.

/// SplitMix64 — the seed mixer used everywhere a derived stream is needed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Deterministic lattice hash to [0,1).
fn hash01(seed: u64, octave: u64, channel: u64, i: i64, j: i64) -> f64 {
    let mut h = splitmix64(seed ^ octave.wrapping_mul(0x9E37_79B9));
    h = splitmix64(h ^ channel.wrapping_mul(0xC2B2_AE35));
    h = splitmix64(h ^ (i as u64).wrapping_mul(0x1656_67B1));
    h = splitmix64(h ^ (j as u64).wrapping_mul(0x27D4_EB2F));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[inline]
fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, octave: u64, channel: u64, x: f64, y: f64, cell: f64) -> f64 {
    let u = x / cell;
    let v = y / cell;
    let i0 = u.floor() as i64;
    let j0 = v.floor() as i64;
    let fu = smoothstep(u - i0 as f64);
    let fv = smoothstep(v - j0 as f64);
    let h = |i, j| hash01(seed, octave, channel, i, j);
    let a = h(i0, j0) * (1.0 - fu) + h(i0 + 1, j0) * fu;
    let b = h(i0, j0 + 1) * (1.0 - fu) + h(i0 + 1, j0 + 1) * fu;
    a * (1.0 - fv) + b * fv
}

struct SoftShape {
    cx: f64,
    cy: f64,
    radius: f64,
    edge: f64,
    color: [f64; 3],
    opacity: f64,
}

/// A fixed, seed-deterministic texture covering the padded scene domain.
pub struct Texture {
    seed: u64,
    shapes: Vec<SoftShape>,
}

const OCTAVE_CELLS: [f64; 3] = [16.0, 8.0, 4.0];
const OCTAVE_AMPS: [f64; 3] = [1.0, 0.5, 0.25];

impl Texture {
    /// `pad` extends the shape-placement domain beyond `[0,w)×[0,h)` so a
    /// camera translating up to `pad` pixels never runs out of content.
    pub fn new(seed: u64, w: usize, h: usize, pad: f64) -> Self {
        let x0 = -pad;
        let y0 = -pad;
        let x1 = w as f64 + pad;
        let y1 = h as f64 + pad;
        let area = (x1 - x0) * (y1 - y0);
        // One shape per ~40x40 patch keeps several in any 64x64 window.
        let count = ((area / 1600.0).ceil() as usize).max(4);
        let mut shapes = Vec::with_capacity(count);
        let mut state = splitmix64(seed ^ 0x5348_4150);
        let mut next = || {
            state = splitmix64(state);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..count {
            shapes.push(SoftShape {
                cx: x0 + next() * (x1 - x0),
                cy: y0 + next() * (y1 - y0),
                radius: 5.0 + next() * 14.0,
                edge: 2.0 + next() * 4.0,
                color: [
                    0.05 + next() * 0.9,
                    0.05 + next() * 0.9,
                    0.05 + next() * 0.9,
                ],
                opacity: 0.5 + next() * 0.5,
            });
        }
        Texture { seed, shapes }
    }

    /// RGB in [0,1] at an arbitrary continuous point.
    pub fn eval(&self, x: f64, y: f64) -> [f32; 3] {
        let amp_sum: f64 = OCTAVE_AMPS.iter().sum();
        let mut rgb = [0.0f64; 3];
        for (c, out) in rgb.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (o, (&cell, &amp)) in OCTAVE_CELLS.iter().zip(&OCTAVE_AMPS).enumerate() {
                acc += amp * value_noise(self.seed, o as u64, c as u64, x, y, cell);
            }
            *out = acc / amp_sum;
        }
        for s in &self.shapes {
            let d = ((x - s.cx).powi(2) + (y - s.cy).powi(2)).sqrt();
            if d >= s.radius {
                continue;
            }
            let t = ((s.radius - d) / s.edge).clamp(0.0, 1.0);
            let a = smoothstep(t) * s.opacity;
            for c in 0..3 {
                rgb[c] = rgb[c] * (1.0 - a) + s.color[c] * a;
            }
        }
        [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_across_constructions() {
        let a = Texture::new(99, 64, 64, 40.0);
        let b = Texture::new(99, 64, 64, 40.0);
        for &(x, y) in &[(0.0, 0.0), (13.7, -22.1), (80.5, 3.25)] {
            assert_eq!(a.eval(x, y), b.eval(x, y));
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        let t = Texture::new(3, 32, 32, 20.0);
        for y in -30..60 {
            for x in -30..60 {
                let v = t.eval(x as f64 * 1.31, y as f64 * 0.77);
                for c in v {
                    assert!((0.0..=1.0).contains(&c), "{c} out of range");
                }
            }
        }
    }

    #[test]
    fn texture_is_continuous_at_small_steps() {
        let t = Texture::new(7, 64, 64, 30.0);
        let mut max_step = 0.0f32;
        for i in 0..500 {
            let x = i as f64 * 0.13;
            let a = t.eval(x, 10.0);
            let b = t.eval(x + 0.01, 10.0);
            for c in 0..3 {
                max_step = max_step.max((a[c] - b[c]).abs());
            }
        }
        // 0.01 px steps must not jump; generous bound on the local Lipschitz
        // constant of smoothstep-interpolated noise plus shape edges.
        assert!(max_step < 0.05, "texture discontinuity: {max_step}");
    }

    #[test]
    fn different_seeds_give_different_textures() {
        let a = Texture::new(1, 64, 64, 30.0);
        let b = Texture::new(2, 64, 64, 30.0);
        let mut diff = 0.0;
        for i in 0..100 {
            let (x, y) = (i as f64 * 0.9, i as f64 * 1.7);
            let (va, vb) = (a.eval(x, y), b.eval(x, y));
            diff += (va[0] - vb[0]).abs() as f64;
        }
        assert!(diff > 1.0, "seeds produced near-identical textures");
    }

    #[test]
    fn texture_has_local_contrast_for_block_matching() {
        // Mean absolute gradient over a window must be well above zero or
        // SAD matching has nothing to lock onto.
        let t = Texture::new(5, 64, 64, 30.0);
        let mut grad_sum = 0.0f64;
        let mut n = 0;
        for y in 0..63 {
            for x in 0..63 {
                let v = t.eval(x as f64, y as f64);
                let vx = t.eval(x as f64 + 1.0, y as f64);
                grad_sum += (v[0] - vx[0]).abs() as f64;
                n += 1;
            }
        }
        assert!(grad_sum / n as f64 > 0.01, "texture too flat: {}", grad_sum / n as f64);
    }
}
