//! Network blocks: analysis/synthesis transforms, hyper transforms, the
//! masked context model, the entropy-parameter stack and the Unet
//! post-network.

mod config;
mod model;
mod unet;

pub use config::{parse_key_values, Distortion, ModelConfig, Variant, MSE_LAMBDAS, MSSSIM_LAMBDAS};
pub use model::{
    build_model, causal_mask, entropy_parameter_widths, CompressionModel, ConvLayer, Gate, GatedNet, MaskedConv, RateInput,
    GATE_PREFIX, LEAKY_SLOPE,
};
pub use unet::{unet_width, Unet};

#[allow(unused_imports)]
pub(crate) use config::{parse_bool, parse_list, parse_num};
