//! Trainable networks: the attention detector, flow completion net,
//! recurrent restoration nets, and the frozen perceptual feature pyramid.

pub mod attention;
pub mod blocks;
pub mod completion;
pub mod fusion;
pub mod pyramid;
pub mod restoration;

pub use attention::{detect_attention, AttentionNet};
pub use blocks::{same_spec, ConvLayer, Graph};
pub use completion::{complete_flow, l1_flow_loss, FlowCompletionNet};
pub use fusion::FusionLayer;
pub use pyramid::FeaturePyramid;
pub use restoration::{
    effective_map, temporal_blend, RestorationNets, HIDDEN_CHANNELS,
};
