//! Contamination attention detector: a small U-Net over the concatenation
//! of an RGB frame and a width-normalized flow field, producing a soft
//! [0,1] map. The same weights score the target frame (with its outgoing
//! flow) and each reference frame (with the reverse flow).

use super::blocks::{same_spec, ConvLayer, Graph};
use crate::error::PipelineError;
use crate::tensor::{ParamStore, Scalar, TensorId};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct AttentionNet {
    enc1a: ConvLayer,
    enc1b: ConvLayer,
    down1: ConvLayer,
    enc2: ConvLayer,
    down2: ConvLayer,
    enc3: ConvLayer,
    dec2: ConvLayer,
    dec1: ConvLayer,
    head: ConvLayer,
}

impl AttentionNet {
    pub const IN_CHANNELS: usize = 5;

    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str) -> Self {
        let s1 = same_spec(3, 1, 1);
        let s2 = same_spec(3, 2, 1);
        AttentionNet {
            enc1a: ConvLayer::new(store, rng, &format!("{name}.enc1a"), Self::IN_CHANNELS, 16, 3, s1),
            enc1b: ConvLayer::new(store, rng, &format!("{name}.enc1b"), 16, 16, 3, s1),
            down1: ConvLayer::new(store, rng, &format!("{name}.down1"), 16, 32, 3, s2),
            enc2: ConvLayer::new(store, rng, &format!("{name}.enc2"), 32, 32, 3, s1),
            down2: ConvLayer::new(store, rng, &format!("{name}.down2"), 32, 64, 3, s2),
            enc3: ConvLayer::new(store, rng, &format!("{name}.enc3"), 64, 64, 3, s1),
            dec2: ConvLayer::new(store, rng, &format!("{name}.dec2"), 64 + 32, 32, 3, s1),
            dec1: ConvLayer::new(store, rng, &format!("{name}.dec1"), 32 + 16, 16, 3, s1),
            // Zero head: an untrained detector reports sigmoid(0) = 0.5
            // everywhere (maximum uncertainty) instead of random structure.
            head: ConvLayer::zeroed(store, &format!("{name}.head"), 16, 1, 3, s1),
        }
    }

    /// Forward from an already-assembled 5-channel input.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, input: TensorId) -> TensorId {
        let sh = g.tape.shape(input);
        assert_eq!(sh.c, Self::IN_CHANNELS, "detector input must have 5 channels");
        assert!(
            sh.h % 4 == 0 && sh.w % 4 == 0,
            "detector input dims must be divisible by 4, got {sh}"
        );
        let e1 = self.enc1a.forward(g, input);
        let e1 = g.tape.relu(e1);
        let e1 = self.enc1b.forward(g, e1);
        let e1 = g.tape.relu(e1);
        let e2 = self.down1.forward(g, e1);
        let e2 = g.tape.relu(e2);
        let e2 = self.enc2.forward(g, e2);
        let e2 = g.tape.relu(e2);
        let e3 = self.down2.forward(g, e2);
        let e3 = g.tape.relu(e3);
        let e3 = self.enc3.forward(g, e3);
        let e3 = g.tape.relu(e3);

        let u2 = g.tape.bilinear_up2(e3);
        let u2 = g.tape.concat_channels(&[u2, e2]).expect("skip connection shares resolution");
        let d2 = self.dec2.forward(g, u2);
        let d2 = g.tape.relu(d2);
        let u1 = g.tape.bilinear_up2(d2);
        let u1 = g.tape.concat_channels(&[u1, e1]).expect("skip connection shares resolution");
        let d1 = self.dec1.forward(g, u1);
        let d1 = g.tape.relu(d1);
        let logits = self.head.forward(g, d1);
        g.tape.sigmoid(logits)
    }
}

/// Score a frame for contamination. The flow is divided by the image width
/// before entering the net so the detector sees resolution-independent
/// motion.
pub fn detect_attention<T: Scalar>(
    net: &AttentionNet,
    g: &mut Graph<'_, T>,
    frame: TensorId,
    flow: TensorId,
) -> Result<TensorId, PipelineError> {
    let fsh = g.tape.shape(frame);
    let wsh = g.tape.shape(flow);
    if fsh.h != wsh.h || fsh.w != wsh.w || fsh.c != 3 || wsh.c != 2 {
        return Err(PipelineError::Invalid(format!(
            "detector expects co-registered RGB frame and 2-channel flow, got {fsh} and {wsh}"
        )));
    }
    let flow_n = g.tape.scale(flow, 1.0 / fsh.w as f64);
    let input = g.tape.concat_channels(&[frame, flow_n]).expect("checked shapes above");
    Ok(net.forward(g, input))
}
