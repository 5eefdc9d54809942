//! Shared building blocks: a graph-building context and a conv layer that
//! owns its parameters by id.

use crate::tensor::{
    conv_init, ConvSpec, GraphBinds, ParamId, ParamStore, Scalar, Shape, Tape, TensorData, TensorId,
};
use rand::Rng;

/// Everything needed to grow one forward graph: the tape being built, the
/// parameter store, and the per-graph bindings that dedupe shared weights.
pub struct Graph<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub binds: &'a mut GraphBinds,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, binds: &'a mut GraphBinds) -> Self {
        Graph { tape, store, binds }
    }

    pub fn bind(&mut self, id: ParamId) -> TensorId {
        self.binds.bind(self.tape, self.store, id)
    }

    /// Shorthand for feeding a fixed tensor (no gradient) into the graph.
    pub fn input(&mut self, value: TensorData<T>) -> TensorId {
        self.tape.constant(value)
    }
}

/// A convolution with bias, registered in a [`ParamStore`] under
/// `<name>.w` / `<name>.b`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub spec: ConvSpec,
}

impl ConvLayer {
    /// Uniform He-style init over fan-in.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let w = store.add(format!("{name}.w"), conv_init(rng, Shape::new(out_c, in_c, k, k)));
        let b = store.add(format!("{name}.b"), TensorData::zeros(Shape::new(1, out_c, 1, 1)));
        ConvLayer { w, b, spec }
    }

    /// All-zero weights and bias; used for prediction heads so an untrained
    /// network starts from the identity / neutral output.
    pub fn zeroed<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        spec: ConvSpec,
    ) -> Self {
        let w = store.add(format!("{name}.w"), TensorData::zeros(Shape::new(out_c, in_c, k, k)));
        let b = store.add(format!("{name}.b"), TensorData::zeros(Shape::new(1, out_c, 1, 1)));
        ConvLayer { w, b, spec }
    }

    /// Random weights with every bias set to `bias`; used for gate convs
    /// whose resting activation should sit away from zero.
    pub fn with_bias<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        spec: ConvSpec,
        bias: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), conv_init(rng, Shape::new(out_c, in_c, k, k)));
        let b = store.add(
            format!("{name}.b"),
            TensorData::full(Shape::new(1, out_c, 1, 1), T::from_f64(bias)),
        );
        ConvLayer { w, b, spec }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: TensorId) -> TensorId {
        let w = g.bind(self.w);
        let b = g.bind(self.b);
        g.tape.conv2d(x, w, Some(b), self.spec).expect("conv layer wired with mismatched shapes")
    }
}

/// Same-padding spec for a k×k conv with the given stride and dilation.
pub fn same_spec(k: usize, stride: usize, dilation: usize) -> ConvSpec {
    ConvSpec::new(stride, dilation * (k / 2), dilation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_spec_preserves_dims_across_strides_and_dilations() {
        for (k, s, d, h) in [(3, 1, 1, 17), (3, 2, 1, 64), (3, 1, 8, 32), (1, 2, 1, 64)] {
            let spec = same_spec(k, s, d);
            let out = spec.out_dim(h, k).unwrap();
            let expect = if s == 1 { h } else { h / s };
            assert_eq!(out, expect, "k={k} s={s} d={d} h={h}");
        }
    }

    #[test]
    fn conv_layer_registers_and_runs() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = ConvLayer::new(&mut store, &mut rng, "enc.c1", 3, 8, 3, same_spec(3, 2, 1));
        assert!(store.find("enc.c1.w").is_some());
        assert!(store.find("enc.c1.b").is_some());

        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let x = g.input(TensorData::full(Shape::new(1, 3, 16, 16), 0.5f32));
        let y = layer.forward(&mut g, x);
        assert_eq!(tape.shape(y), Shape::new(1, 8, 8, 8));
        assert!(tape.value(y).all_finite());
    }
}
