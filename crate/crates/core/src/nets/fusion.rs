//! Feature fusion layer: a gated convex blend of a pass-through branch and a
//! two-conv hallucination branch.
//!
//! `f_out = pass(f_in) ⊙ α + G_l(f_in) ⊙ (1 − α)` with a single-channel
//! `α = sigmoid(G_α(f_in))` broadcast over channels. When the layer changes
//! channel count or stride, the pass-through branch goes through a 1×1
//! adapter conv so both branches agree in shape.

use super::blocks::{same_spec, ConvLayer, Graph};
use crate::tensor::{ConvSpec, ParamStore, Scalar, TensorId};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub g_alpha: ConvLayer,
    pub gl1: ConvLayer,
    pub gl2: ConvLayer,
    pub adapter: Option<ConvLayer>,
    pub in_c: usize,
    pub out_c: usize,
}

impl FusionLayer {
    /// Gate bias starts at +2 so a fresh layer mostly passes its input
    /// through (α ≈ 0.88) instead of amplifying random features.
    pub const GATE_BIAS: f64 = 2.0;

    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let g_alpha = ConvLayer::with_bias(
            store,
            rng,
            &format!("{name}.alpha"),
            in_c,
            1,
            3,
            same_spec(3, stride, 1),
            Self::GATE_BIAS,
        );
        let gl1 = ConvLayer::new(
            store,
            rng,
            &format!("{name}.gl1"),
            in_c,
            out_c,
            3,
            same_spec(3, stride, dilation),
        );
        let gl2 =
            ConvLayer::new(store, rng, &format!("{name}.gl2"), out_c, out_c, 3, same_spec(3, 1, dilation));
        let adapter = (in_c != out_c || stride != 1).then(|| {
            ConvLayer::new(
                store,
                rng,
                &format!("{name}.pass"),
                in_c,
                out_c,
                1,
                ConvSpec::new(stride, 0, 1),
            )
        });
        FusionLayer { g_alpha, gl1, gl2, adapter, in_c, out_c }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f_in: TensorId) -> TensorId {
        let alpha = self.g_alpha.forward(g, f_in);
        let alpha = g.tape.sigmoid(alpha);
        let pass = match &self.adapter {
            Some(a) => a.forward(g, f_in),
            None => f_in,
        };
        let h = self.gl1.forward(g, f_in);
        let h = g.tape.relu(h);
        let h = self.gl2.forward(g, h);
        let hall = g.tape.relu(h);
        let kept = g.tape.mul_channel_map(pass, alpha).expect("pass branch matches alpha");
        let inv = g.tape.one_minus(alpha);
        let hallucinated = g.tape.mul_channel_map(hall, inv).expect("hallucination branch matches alpha");
        g.tape.add(kept, hallucinated).expect("fusion branches share a shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GraphBinds, Shape, Tape, TensorData};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_layer(
        layer: &FusionLayer,
        store: &ParamStore<f32>,
        input: &TensorData<f32>,
    ) -> (TensorData<f32>, TensorData<f32>) {
        // Returns (f_out, hallucination branch output) for comparison.
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(store);
        let mut g = Graph::new(&mut tape, store, &mut binds);
        let x = g.input(input.clone());
        let out = layer.forward(&mut g, x);

        let h = layer.gl1.forward(&mut g, x);
        let h = g.tape.relu(h);
        let h = layer.gl2.forward(&mut g, h);
        let hall = g.tape.relu(h);
        (tape.value(out).clone(), tape.value(hall).clone())
    }

    fn rand_input(c: usize, h: usize, w: usize, seed: u64) -> TensorData<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(1, c, h, w);
        TensorData {
            shape,
            data: (0..shape.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn saturated_open_gate_passes_input_through() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = FusionLayer::new(&mut store, &mut rng, "f", 4, 4, 1, 1);
        // Drive the gate to alpha -> 1 everywhere.
        store.load_value(layer.g_alpha.b, &[20.0]).unwrap();
        let zeros = vec![0.0f32; 1 * 4 * 3 * 3];
        store.load_value(layer.g_alpha.w, &zeros).unwrap();

        let input = rand_input(4, 10, 10, 2);
        let (out, _) = run_layer(&layer, &store, &input);
        let max_dev = out
            .data
            .iter()
            .zip(&input.data)
            .map(|(o, i)| (o - i).abs() / i.abs().max(1.0))
            .fold(0.0f32, f32::max);
        assert!(max_dev < 1e-6, "open gate deviated by {max_dev}");
    }

    #[test]
    fn saturated_closed_gate_yields_hallucination_branch() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = FusionLayer::new(&mut store, &mut rng, "f", 4, 4, 1, 1);
        store.load_value(layer.g_alpha.b, &[-20.0]).unwrap();
        let zeros = vec![0.0f32; 1 * 4 * 3 * 3];
        store.load_value(layer.g_alpha.w, &zeros).unwrap();

        let input = rand_input(4, 10, 10, 4);
        let (out, hall) = run_layer(&layer, &store, &input);
        let max_dev = out
            .data
            .iter()
            .zip(&hall.data)
            .map(|(o, h)| (o - h).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dev < 1e-6, "closed gate deviated from G_l by {max_dev}");
    }

    #[test]
    fn output_is_elementwise_between_the_branches() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = FusionLayer::new(&mut store, &mut rng, "f", 3, 3, 1, 1);
        let input = rand_input(3, 12, 12, 6);
        let (out, hall) = run_layer(&layer, &store, &input);
        for i in 0..out.data.len() {
            let (a, b) = (input.data[i], hall.data[i]);
            let (lo, hi) = (a.min(b), a.max(b));
            assert!(
                out.data[i] >= lo - 1e-6 && out.data[i] <= hi + 1e-6,
                "element {i}: {} outside [{lo}, {hi}]",
                out.data[i]
            );
        }
    }

    #[test]
    fn strided_and_widening_layers_reshape_consistently() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let widen = FusionLayer::new(&mut store, &mut rng, "w", 8, 16, 1, 1);
        let down = FusionLayer::new(&mut store, &mut rng, "d", 16, 16, 2, 1);
        let dilated = FusionLayer::new(&mut store, &mut rng, "dil", 16, 16, 1, 8);
        assert!(widen.adapter.is_some());
        assert!(down.adapter.is_some());
        assert!(dilated.adapter.is_none());

        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let x = g.input(rand_input(8, 16, 16, 8));
        let a = widen.forward(&mut g, x);
        let b = down.forward(&mut g, a);
        let c = dilated.forward(&mut g, b);
        assert_eq!(tape.shape(a), Shape::new(1, 16, 16, 16));
        assert_eq!(tape.shape(b), Shape::new(1, 16, 8, 8));
        assert_eq!(tape.shape(c), Shape::new(1, 16, 8, 8));
    }
}
