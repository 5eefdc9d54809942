//! Flow completion: fills in background motion wherever the degraded flow
//! is unreliable (contaminated regions), guided by the frame and the
//! attention map.
//!
//! The net is an autoencoder of fusion layers — six in the encoder (strided
//! at layers 2, 4, 6, reaching 1/8 resolution), four dilated in the
//! bottleneck (dilations 2, 4, 8, 16) — and a decoder that predicts a flow
//! at 1/8 resolution, then convex-upsamples it twice with per-pixel learned
//! 3×3 weights, adding a residual correction at each scale, and finishes
//! with a plain bilinear ×2. The final output is `F_deg + residual`, and
//! every prediction head starts at zero, so an untrained net is exactly the
//! identity on its input flow.

use super::blocks::{same_spec, ConvLayer, Graph};
use super::fusion::FusionLayer;
use crate::error::PipelineError;
use crate::tensor::{ParamStore, Scalar, TensorId};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct FlowCompletionNet {
    encoder: Vec<FusionLayer>,
    bottleneck: Vec<FusionLayer>,
    dec4: FusionLayer,
    dec2: FusionLayer,
    head_flow8: ConvLayer,
    head_logits8: ConvLayer,
    head_res4: ConvLayer,
    head_logits4: ConvLayer,
    head_res2: ConvLayer,
}

impl FlowCompletionNet {
    pub const IN_CHANNELS: usize = 6;

    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str) -> Self {
        let enc_plan: [(usize, usize, usize); 6] = [
            (Self::IN_CHANNELS, 16, 1),
            (16, 16, 2),
            (16, 32, 1),
            (32, 32, 2),
            (32, 64, 1),
            (64, 64, 2),
        ];
        let encoder = enc_plan
            .iter()
            .enumerate()
            .map(|(i, &(ic, oc, s))| {
                FusionLayer::new(store, rng, &format!("{name}.enc{}", i + 1), ic, oc, s, 1)
            })
            .collect();
        let bottleneck = [2usize, 4, 8, 16]
            .iter()
            .map(|&d| FusionLayer::new(store, rng, &format!("{name}.dil{d}"), 64, 64, 1, d))
            .collect();
        let s1 = same_spec(3, 1, 1);
        FlowCompletionNet {
            encoder,
            bottleneck,
            dec4: FusionLayer::new(store, rng, &format!("{name}.dec4"), 64, 32, 1, 1),
            dec2: FusionLayer::new(store, rng, &format!("{name}.dec2"), 32, 16, 1, 1),
            head_flow8: ConvLayer::zeroed(store, &format!("{name}.flow8"), 64, 2, 3, s1),
            head_logits8: ConvLayer::zeroed(store, &format!("{name}.logits8"), 64, 36, 3, s1),
            head_res4: ConvLayer::zeroed(store, &format!("{name}.res4"), 32, 2, 3, s1),
            head_logits4: ConvLayer::zeroed(store, &format!("{name}.logits4"), 32, 36, 3, s1),
            head_res2: ConvLayer::zeroed(store, &format!("{name}.res2"), 16, 2, 3, s1),
        }
    }

    /// Residual flow at full resolution from the assembled 6-channel input.
    fn residual<T: Scalar>(&self, g: &mut Graph<'_, T>, input: TensorId) -> TensorId {
        let mut f = input;
        for layer in &self.encoder {
            f = layer.forward(g, f);
        }
        for layer in &self.bottleneck {
            f = layer.forward(g, f);
        }
        let feat8 = f;

        let flow8 = self.head_flow8.forward(g, feat8);
        let logits8 = self.head_logits8.forward(g, feat8);
        let flow4 = g.tape.convex_up2(flow8, logits8).expect("heads share feat8 resolution");

        let up4 = g.tape.bilinear_up2(feat8);
        let feat4 = self.dec4.forward(g, up4);
        let res4 = self.head_res4.forward(g, feat4);
        let flow4 = g.tape.add(flow4, res4).expect("residual matches quarter-res flow");
        let logits4 = self.head_logits4.forward(g, feat4);
        let flow2 = g.tape.convex_up2(flow4, logits4).expect("heads share feat4 resolution");

        let up2 = g.tape.bilinear_up2(feat4);
        let feat2 = self.dec2.forward(g, up2);
        let res2 = self.head_res2.forward(g, feat2);
        let flow2 = g.tape.add(flow2, res2).expect("residual matches half-res flow");

        let full = g.tape.bilinear_up2(flow2);
        g.tape.scale(full, 2.0)
    }
}

/// Complete a degraded flow field. The input flow is width-normalized for
/// the network (matching the attention detector's convention); the output
/// stays in raw pixel units.
pub fn complete_flow<T: Scalar>(
    net: &FlowCompletionNet,
    g: &mut Graph<'_, T>,
    flow_deg: TensorId,
    frame: TensorId,
    attention: TensorId,
) -> Result<TensorId, PipelineError> {
    let fl = g.tape.shape(flow_deg);
    let fr = g.tape.shape(frame);
    let at = g.tape.shape(attention);
    if fl.c != 2 || fr.c != 3 || at.c != 1 || fl.h != fr.h || fl.w != fr.w || fl.h != at.h || fl.w != at.w
    {
        return Err(PipelineError::Invalid(format!(
            "flow completion inputs not co-registered: flow {fl}, frame {fr}, attention {at}"
        )));
    }
    if fl.h % 8 != 0 || fl.w % 8 != 0 {
        return Err(PipelineError::Invalid(format!(
            "flow completion needs dims divisible by 8, got {fl}"
        )));
    }
    let flow_n = g.tape.scale(flow_deg, 1.0 / fl.w as f64);
    let input = g.tape.concat_channels(&[flow_n, frame, attention]).expect("checked shapes above");
    let residual = net.residual(g, input);
    Ok(g.tape.add(flow_deg, residual).expect("residual is full-resolution"))
}

/// Mean absolute error over all flow components.
pub fn l1_flow_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    flow: TensorId,
    flow_gt: TensorId,
) -> Result<TensorId, PipelineError> {
    if g.tape.shape(flow) != g.tape.shape(flow_gt) {
        return Err(PipelineError::Invalid(format!(
            "flow loss shapes differ: {} vs {}",
            g.tape.shape(flow),
            g.tape.shape(flow_gt)
        )));
    }
    let d = g.tape.sub(flow, flow_gt).expect("checked shapes above");
    let a = g.tape.abs(d);
    Ok(g.tape.mean_all(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_param_gradients, DEFAULT_EPS};
    use crate::tensor::{GraphBinds, Shape, Tape, TensorData};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: Shape, lo: f32, hi: f32, seed: u64) -> TensorData<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TensorData { shape, data: (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect() }
    }

    #[test]
    fn untrained_net_is_the_identity_on_flow() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = FlowCompletionNet::new(&mut store, &mut rng, "comp");

        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let flow = g.input(rand_t(Shape::new(1, 2, 16, 16), -3.0, 3.0, 3));
        let frame = g.input(rand_t(Shape::new(1, 3, 16, 16), 0.0, 1.0, 4));
        let att = g.input(rand_t(Shape::new(1, 1, 16, 16), 0.0, 1.0, 5));
        let out = complete_flow(&net, &mut g, flow, frame, att).unwrap();
        assert_eq!(tape.shape(out), Shape::new(1, 2, 16, 16));
        assert!(tape.value(out).all_finite());
        assert_eq!(tape.value(out).data, tape.value(flow).data);
    }

    #[test]
    fn rejects_misregistered_or_indivisible_inputs() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = FlowCompletionNet::new(&mut store, &mut rng, "comp");

        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);
        let flow = g.input(TensorData::zeros(Shape::new(1, 2, 16, 16)));
        let frame_small = g.input(TensorData::zeros(Shape::new(1, 3, 8, 8)));
        let att = g.input(TensorData::zeros(Shape::new(1, 1, 16, 16)));
        assert!(complete_flow(&net, &mut g, flow, frame_small, att).is_err());

        let flow12 = g.input(TensorData::zeros(Shape::new(1, 2, 12, 12)));
        let frame12 = g.input(TensorData::zeros(Shape::new(1, 3, 12, 12)));
        let att12 = g.input(TensorData::zeros(Shape::new(1, 1, 12, 12)));
        assert!(complete_flow(&net, &mut g, flow12, frame12, att12).is_err());
    }

    #[test]
    fn l1_loss_matches_hand_arithmetic() {
        let store = ParamStore::<f32>::new();
        let mut tape = Tape::new();
        let mut binds = GraphBinds::new(&store);
        let mut g = Graph::new(&mut tape, &store, &mut binds);

        let gt = g.input(TensorData::zeros(Shape::new(1, 2, 2, 2)));
        let same = g.input(TensorData::zeros(Shape::new(1, 2, 2, 2)));
        let zero = l1_flow_loss(&mut g, same, gt).unwrap();
        assert_eq!(g.tape.value(zero).item().unwrap(), 0.0);

        // Constant (1,0) offset: dx errors are 1, dy errors are 0; the mean
        // over both channels is 0.5.
        let mut off = TensorData::zeros(Shape::new(1, 2, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                *off.at_mut(0, 0, y, x) = 1.0;
            }
        }
        let off = g.input(off);
        let half = l1_flow_loss(&mut g, off, gt).unwrap();
        assert!((g.tape.value(half).item().unwrap() - 0.5).abs() < 1e-7);

        // 2×2 field, one channel pair per pixel: |1|+|−2|+|0.5|+|0| over 8
        // components = 0.4375.
        let hand = g.input(
            TensorData::from_vec(
                Shape::new(1, 2, 2, 2),
                vec![1.0, -2.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0],
            )
            .unwrap(),
        );
        let v = l1_flow_loss(&mut g, hand, gt).unwrap();
        assert!((g.tape.value(v).item().unwrap() - 0.4375).abs() < 1e-7);
    }

    #[test]
    fn full_network_gradient_matches_finite_differences() {
        // 16×16 instance in f64, probing a few coordinates of every
        // parameter tensor through the L1 completion loss.
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = FlowCompletionNet::new(&mut store, &mut rng, "comp");
        // Zero heads hide upstream gradient errors behind zero multipliers;
        // give every head small random weights before checking.
        for head in ["comp.flow8", "comp.logits8", "comp.res4", "comp.logits4", "comp.res2"] {
            let id = store.find(&format!("{head}.w")).unwrap();
            let sh = store.value(id).shape;
            let vals: Vec<f64> =
                (0..sh.numel()).map(|_| rng.gen_range(-0.05..0.05)).collect();
            store.load_value(id, &vals).unwrap();
        }

        let mk = |seed: u64, shape: Shape, lo: f64, hi: f64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            TensorData::<f64> {
                shape,
                data: (0..shape.numel()).map(|_| r.gen_range(lo..hi)).collect(),
            }
        };
        let flow = mk(21, Shape::new(1, 2, 16, 16), -2.0, 2.0);
        let frame = mk(22, Shape::new(1, 3, 16, 16), 0.0, 1.0);
        let att = mk(23, Shape::new(1, 1, 16, 16), 0.0, 1.0);
        let gt = mk(24, Shape::new(1, 2, 16, 16), -2.0, 2.0);

        let report = check_param_gradients(
            "flow_completion_l1",
            &mut store,
            move |tape, binds, store| {
                let mut g = Graph::new(tape, store, binds);
                let f = g.input(flow.clone());
                let fr = g.input(frame.clone());
                let a = g.input(att.clone());
                let t = g.input(gt.clone());
                let out = complete_flow(&net, &mut g, f, fr, a)
                    .map_err(|_| crate::error::TensorError::NoGradient)?;
                l1_flow_loss(&mut g, out, t).map_err(|_| crate::error::TensorError::NoGradient)
            },
            2,
            31,
            DEFAULT_EPS,
            2e-4,
        )
        .unwrap();
        assert!(report.passed, "{report}");
    }
}
