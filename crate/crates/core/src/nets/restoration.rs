//! Recurrent restoration: input encoding, the ConvGRU temporal unit, the
//! blending-mask head, pixel-effectiveness maps, and the spatial
//! restoration autoencoder.
//!
//! All features live at half resolution (one stride-2 encoder conv); the
//! blending mask is decoded at half resolution and bilinearly upsampled.

use super::blocks::{same_spec, ConvLayer, Graph};
use crate::tensor::{ParamStore, Scalar, Shape, TensorData, TensorId};
use rand::Rng;

/// Channels of the recurrent hidden state (at half resolution).
pub const HIDDEN_CHANNELS: usize = 32;

#[derive(Debug, Clone)]
pub struct RestorationNets {
    pub enc1: ConvLayer,
    pub enc2: ConvLayer,
    pub gru_z: ConvLayer,
    pub gru_r: ConvLayer,
    pub gru_h: ConvLayer,
    pub mask1: ConvLayer,
    pub mask2: ConvLayer,
    pub mask3: ConvLayer,
    pub sp_enc1: ConvLayer,
    pub sp_enc2: ConvLayer,
    pub sp_mix: ConvLayer,
    pub sp_enc3: ConvLayer,
    pub sp_dil1: ConvLayer,
    pub sp_dil2: ConvLayer,
    pub sp_dec2: ConvLayer,
    pub sp_dec1: ConvLayer,
    pub sp_head: ConvLayer,
}

impl RestorationNets {
    /// Input channels: target frame (3) + its attention (1) + warped
    /// reference (3) + effectiveness map (1).
    pub const IN_CHANNELS: usize = 8;

    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str) -> Self {
        let s1 = same_spec(3, 1, 1);
        let s2 = same_spec(3, 2, 1);
        let h = HIDDEN_CHANNELS;
        RestorationNets {
            enc1: ConvLayer::new(store, rng, &format!("{name}.enc1"), Self::IN_CHANNELS, 16, 3, s2),
            enc2: ConvLayer::new(store, rng, &format!("{name}.enc2"), 16, h, 3, s1),
            gru_z: ConvLayer::new(store, rng, &format!("{name}.gru_z"), 2 * h, h, 3, s1),
            gru_r: ConvLayer::new(store, rng, &format!("{name}.gru_r"), 2 * h, h, 3, s1),
            gru_h: ConvLayer::new(store, rng, &format!("{name}.gru_h"), 2 * h, h, 3, s1),
            mask1: ConvLayer::new(store, rng, &format!("{name}.mask1"), h, 16, 3, s1),
            mask2: ConvLayer::new(store, rng, &format!("{name}.mask2"), 16, 16, 3, s1),
            // Zero head: an untrained blend sits at M = 0.5.
            mask3: ConvLayer::zeroed(store, &format!("{name}.mask3"), 16, 1, 3, s1),
            sp_enc1: ConvLayer::new(store, rng, &format!("{name}.sp_enc1"), 3, 16, 3, s1),
            sp_enc2: ConvLayer::new(store, rng, &format!("{name}.sp_enc2"), 16, 32, 3, s2),
            sp_mix: ConvLayer::new(store, rng, &format!("{name}.sp_mix"), 32 + h, 32, 3, s1),
            sp_enc3: ConvLayer::new(store, rng, &format!("{name}.sp_enc3"), 32, 64, 3, s2),
            sp_dil1: ConvLayer::new(store, rng, &format!("{name}.sp_dil1"), 64, 64, 3, same_spec(3, 1, 2)),
            sp_dil2: ConvLayer::new(store, rng, &format!("{name}.sp_dil2"), 64, 64, 3, same_spec(3, 1, 4)),
            sp_dec2: ConvLayer::new(store, rng, &format!("{name}.sp_dec2"), 64, 32, 3, s1),
            sp_dec1: ConvLayer::new(store, rng, &format!("{name}.sp_dec1"), 32, 16, 3, s1),
            // Zero head: an untrained spatial stage is the identity on T.
            sp_head: ConvLayer::zeroed(store, &format!("{name}.sp_head"), 16, 3, 3, s1),
        }
    }

    /// Fresh all-zero hidden state for a full-resolution frame of (h, w).
    pub fn zero_hidden<T: Scalar>(h: usize, w: usize) -> TensorData<T> {
        TensorData::zeros(Shape::new(1, HIDDEN_CHANNELS, h / 2, w / 2))
    }

    /// Encode one iteration's inputs into half-resolution GRU features.
    pub fn encode_inputs<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        frame_t: TensorId,
        att_t: TensorId,
        warped_ref: TensorId,
        att_effective: TensorId,
    ) -> TensorId {
        let x = g
            .tape
            .concat_channels(&[frame_t, att_t, warped_ref, att_effective])
            .expect("restoration inputs are co-registered");
        debug_assert_eq!(g.tape.shape(x).c, Self::IN_CHANNELS);
        let e = self.enc1.forward(g, x);
        let e = g.tape.relu(e);
        let e = self.enc2.forward(g, e);
        g.tape.relu(e)
    }

    /// One ConvGRU update: three independent gate convolutions over the
    /// concatenated (hidden, input) features.
    pub fn gru_step<T: Scalar>(&self, g: &mut Graph<'_, T>, h_prev: TensorId, x: TensorId) -> TensorId {
        let hx = g.tape.concat_channels(&[h_prev, x]).expect("hidden and input share resolution");
        let z = self.gru_z.forward(g, hx);
        let z = g.tape.sigmoid(z);
        let r = self.gru_r.forward(g, hx);
        let r = g.tape.sigmoid(r);
        let rh = g.tape.mul(r, h_prev).expect("reset gate matches hidden");
        let rhx = g.tape.concat_channels(&[rh, x]).expect("gated hidden and input share resolution");
        let hc = self.gru_h.forward(g, rhx);
        let hc = g.tape.tanh(hc);
        let keep = g.tape.one_minus(z);
        let kept = g.tape.mul(keep, h_prev).expect("gate matches hidden");
        let new = g.tape.mul(z, hc).expect("gate matches candidate");
        g.tape.add(kept, new).expect("gated halves share a shape")
    }

    /// Full-resolution blending mask in [0,1] decoded from the hidden state.
    pub fn blend_mask<T: Scalar>(&self, g: &mut Graph<'_, T>, hidden: TensorId) -> TensorId {
        let m = self.mask1.forward(g, hidden);
        let m = g.tape.relu(m);
        let m = self.mask2.forward(g, m);
        let m = g.tape.relu(m);
        let m = self.mask3.forward(g, m);
        let m = g.tape.sigmoid(m);
        g.tape.bilinear_up2(m)
    }

    /// Spatial restoration: decode a residual from (T, hidden) and clamp.
    pub fn spatial_restore<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        t_i: TensorId,
        hidden: TensorId,
    ) -> TensorId {
        let e1 = self.sp_enc1.forward(g, t_i);
        let e1 = g.tape.relu(e1);
        let e2 = self.sp_enc2.forward(g, e1);
        let e2 = g.tape.relu(e2);
        let cat = g.tape.concat_channels(&[e2, hidden]).expect("hidden lives at half resolution");
        let m = self.sp_mix.forward(g, cat);
        let m = g.tape.relu(m);
        let e3 = self.sp_enc3.forward(g, m);
        let e3 = g.tape.relu(e3);
        let d = self.sp_dil1.forward(g, e3);
        let d = g.tape.relu(d);
        let d = self.sp_dil2.forward(g, d);
        let d = g.tape.relu(d);
        let u2 = g.tape.bilinear_up2(d);
        let u2 = self.sp_dec2.forward(g, u2);
        let u2 = g.tape.relu(u2);
        let u1 = g.tape.bilinear_up2(u2);
        let u1 = self.sp_dec1.forward(g, u1);
        let u1 = g.tape.relu(u1);
        let delta = self.sp_head.forward(g, u1);
        let sum = g.tape.add(t_i, delta).expect("residual matches frame");
        g.tape.clamp(sum, 0.0, 1.0)
    }
}

/// Pixels of the reference that can actually help the target:
/// `A_eff = (1 − warped A_k) ⊙ A_t`.
pub fn effective_map<T: Scalar>(
    g: &mut Graph<'_, T>,
    att_t: TensorId,
    warped_att_k: TensorId,
) -> TensorId {
    let usable = g.tape.one_minus(warped_att_k);
    g.tape.mul(usable, att_t).expect("attention maps are co-registered")
}

/// Blend the warped reference into the running restoration under the mask:
/// `T_i = M ⊙ warped + (1 − M) ⊙ T_prev` with a single-channel M.
pub fn temporal_blend<T: Scalar>(
    g: &mut Graph<'_, T>,
    mask: TensorId,
    warped_ref: TensorId,
    t_prev: TensorId,
) -> TensorId {
    let picked = g.tape.mul_channel_map(warped_ref, mask).expect("mask broadcasts over RGB");
    let inv = g.tape.one_minus(mask);
    let kept = g.tape.mul_channel_map(t_prev, inv).expect("mask broadcasts over RGB");
    g.tape.add(picked, kept).expect("blend halves share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GraphBinds, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nets(seed: u64) -> (RestorationNets, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = RestorationNets::new(&mut store, &mut rng, "rest");
        (nets, store)
    }

    fn rand_t(shape: Shape, lo: f32, hi: f32, seed: u64) -> TensorData<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorData { shape, data: (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect() }
    }

    #[test]
    fn closed_update_gate_keeps_previous_hidden() {
        let (nets, mut store) = nets(1);
        store.load_value(nets.gru_z.b, &[-20.0f32; HIDDEN_CHANNELS]).unwrap();
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let h_prev = g.input(rand_t(Shape::new(1, HIDDEN_CHANNELS, 8, 8), -0.9, 0.9, 2));
        let x = g.input(rand_t(Shape::new(1, HIDDEN_CHANNELS, 8, 8), -1.0, 1.0, 3));
        let h = nets.gru_step(&mut g, h_prev, x);
        let max_dev = tape
            .value(h)
            .data
            .iter()
            .zip(&tape.value(h_prev).data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dev < 1e-6, "closed gate drifted by {max_dev}");
    }

    #[test]
    fn open_update_gate_replaces_hidden_with_candidate() {
        let (nets, mut store) = nets(4);
        store.load_value(nets.gru_z.b, &[20.0f32; HIDDEN_CHANNELS]).unwrap();
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let h_prev = g.input(rand_t(Shape::new(1, HIDDEN_CHANNELS, 8, 8), -0.9, 0.9, 5));
        let x = g.input(rand_t(Shape::new(1, HIDDEN_CHANNELS, 8, 8), -1.0, 1.0, 6));
        let h = nets.gru_step(&mut g, h_prev, x);

        // Recompute the candidate branch on the same graph.
        let hx = g.tape.concat_channels(&[h_prev, x]).unwrap();
        let r = nets.gru_r.forward(&mut g, hx);
        let r = g.tape.sigmoid(r);
        let rh = g.tape.mul(r, h_prev).unwrap();
        let rhx = g.tape.concat_channels(&[rh, x]).unwrap();
        let hc = nets.gru_h.forward(&mut g, rhx);
        let hc = g.tape.tanh(hc);

        let max_dev = tape
            .value(h)
            .data
            .iter()
            .zip(&tape.value(hc).data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dev < 1e-6, "open gate missed the candidate by {max_dev}");
    }

    #[test]
    fn gru_output_is_bounded_by_hidden_and_unity() {
        let (nets, store) = nets(7);
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let h_prev = g.input(rand_t(Shape::new(1, HIDDEN_CHANNELS, 8, 8), -1.5, 1.5, 8));
        let x = g.input(rand_t(Shape::new(1, HIDDEN_CHANNELS, 8, 8), -2.0, 2.0, 9));
        let h = nets.gru_step(&mut g, h_prev, x);
        let bound = tape.value(h_prev).data.iter().fold(1.0f32, |m, v| m.max(v.abs()));
        for &v in &tape.value(h).data {
            assert!(v.abs() <= bound + 1e-6, "|{v}| exceeds bound {bound}");
        }
    }

    #[test]
    fn effective_map_matches_hand_values() {
        let (_, store) = nets(10);
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let shape = Shape::new(1, 1, 4, 4);
        let a_t = g.input(TensorData::full(shape, 1.0f32));

        let zero = g.input(TensorData::zeros(shape));
        let full = g.input(TensorData::full(shape, 1.0f32));
        let quarter = g.input(TensorData::full(shape, 0.25f32));

        let same = effective_map(&mut g, a_t, zero);
        assert_eq!(g.tape.value(same).data, g.tape.value(a_t).data);
        let none = effective_map(&mut g, a_t, full);
        assert!(g.tape.value(none).data.iter().all(|&v| v == 0.0));
        let partial = effective_map(&mut g, a_t, quarter);
        assert!(g.tape.value(partial).data.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn effective_map_never_exceeds_target_attention() {
        let (_, store) = nets(11);
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let shape = Shape::new(1, 1, 6, 6);
        let a_t = g.input(rand_t(shape, 0.0, 1.0, 12));
        let a_k = g.input(rand_t(shape, 0.0, 1.0, 13));
        let eff = effective_map(&mut g, a_t, a_k);
        for (e, t) in tape.value(eff).data.iter().zip(&tape.value(a_t).data) {
            assert!(*e >= 0.0 && e <= t, "effect {e} escapes [0, {t}]");
        }
    }

    #[test]
    fn saturated_masks_select_one_blend_input() {
        let (nets, mut store) = nets(14);
        let mut run = |bias: f32| {
            store.load_value(nets.mask3.b, &[bias]).unwrap();
            let mut tape = Tape::new();
            let mut binds = GraphBinds::new(&store);
            let mut g = Graph::new(&mut tape, &store, &mut binds);
            let hidden = g.input(rand_t(Shape::new(1, HIDDEN_CHANNELS, 8, 8), -1.0, 1.0, 15));
            let warped = g.input(rand_t(Shape::new(1, 3, 16, 16), 0.0, 1.0, 16));
            let t_prev = g.input(rand_t(Shape::new(1, 3, 16, 16), 0.0, 1.0, 17));
            let m = nets.blend_mask(&mut g, hidden);
            let t = temporal_blend(&mut g, m, warped, t_prev);
            (
                tape.value(t).clone(),
                tape.value(warped).clone(),
                tape.value(t_prev).clone(),
            )
        };
        let (t, warped, _) = run(20.0);
        let dev = t.data.iter().zip(&warped.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(dev < 1e-6, "M=1 blend missed the warped reference by {dev}");

        let (t, _, prev) = run(-20.0);
        let dev = t.data.iter().zip(&prev.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(dev < 1e-6, "M=0 blend missed the previous result by {dev}");
    }

    #[test]
    fn blend_stays_between_its_inputs() {
        let (nets, store) = nets(18);
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let hidden = g.input(rand_t(Shape::new(1, HIDDEN_CHANNELS, 8, 8), -1.0, 1.0, 19));
        let warped = g.input(rand_t(Shape::new(1, 3, 16, 16), 0.0, 1.0, 20));
        let t_prev = g.input(rand_t(Shape::new(1, 3, 16, 16), 0.0, 1.0, 21));
        let m = nets.blend_mask(&mut g, hidden);
        assert_eq!(g.tape.shape(m), Shape::new(1, 1, 16, 16));
        assert!(g.tape.value(m).data.iter().all(|v| (0.0..=1.0).contains(v)));
        let t = temporal_blend(&mut g, m, warped, t_prev);
        for i in 0..tape.value(t).data.len() {
            let (a, b) = (tape.value(warped).data[i], tape.value(t_prev).data[i]);
            let v = tape.value(t).data[i];
            assert!(v >= a.min(b) - 1e-6 && v <= a.max(b) + 1e-6);
        }
    }

    #[test]
    fn untrained_spatial_restore_is_identity_on_unit_range() {
        let (nets, store) = nets(22);
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let t_i = g.input(rand_t(Shape::new(1, 3, 16, 16), 0.0, 1.0, 23));
        let hidden = g.input(rand_t(Shape::new(1, HIDDEN_CHANNELS, 8, 8), -1.0, 1.0, 24));
        let p = nets.spatial_restore(&mut g, t_i, hidden);
        assert_eq!(tape.shape(p), Shape::new(1, 3, 16, 16));
        assert_eq!(tape.value(p).data, tape.value(t_i).data);
    }

    #[test]
    fn spatial_restore_clamps_to_unit_range() {
        let (nets, mut store) = nets(25);
        // Push the head bias far positive so the raw sum exceeds 1.
        store.load_value(nets.sp_head.b, &[5.0f32; 3]).unwrap();
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let t_i = g.input(rand_t(Shape::new(1, 3, 16, 16), 0.0, 1.0, 26));
        let hidden = g.input(RestorationNets::zero_hidden(16, 16));
        let p = nets.spatial_restore(&mut g, t_i, hidden);
        assert!(tape.value(p).data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn encoder_produces_half_resolution_hidden_features() {
        let (nets, store) = nets(27);
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let frame = g.input(rand_t(Shape::new(1, 3, 16, 16), 0.0, 1.0, 28));
        let att = g.input(rand_t(Shape::new(1, 1, 16, 16), 0.0, 1.0, 29));
        let warped = g.input(rand_t(Shape::new(1, 3, 16, 16), 0.0, 1.0, 30));
        let eff = g.input(rand_t(Shape::new(1, 1, 16, 16), 0.0, 1.0, 31));
        let x = nets.encode_inputs(&mut g, frame, att, warped, eff);
        assert_eq!(g.tape.shape(x), Shape::new(1, HIDDEN_CHANNELS, 8, 8));
        let h0 = g.input(RestorationNets::zero_hidden(16, 16));
        let h1 = nets.gru_step(&mut g, h0, x);
        assert_eq!(tape.shape(h1), Shape::new(1, HIDDEN_CHANNELS, 8, 8));
        assert!(tape.value(h1).all_finite());
    }
}
