//! Invertible layers, the flow generators and the likelihood-side losses.

pub mod generator;
pub mod layers;
pub mod loss;

pub use generator::{ActivationPlacement, FlowConfig, FlowGenerator, Generated, Inverted};
pub use layers::{
    init_layer, AffineCoupling, FlowLayer, InvConv1x1, LayerKind, Squeeze, TanhActivation,
};
pub use loss::{
    bits_per_dim, flow_loss, generator_loss, modality_flow_loss, noise_loss, GaussianPrior,
    NoisePairing,
};
