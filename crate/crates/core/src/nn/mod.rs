//! Minimal trainable building blocks for the toy models.
//!
//! Every layer keeps its weights in a [`ParamStore`] and exposes an explicit
//! forward/backward pair over row-major `Array2<f32>` activations. There is no
//! tape: callers hold on to whatever forward inputs the backward pass needs.

mod adam;
mod layers;
mod store;

pub use adam::{Adam, AdamConfig};
pub use layers::{
    avg_pool2, avg_pool2_backward, relu, relu_backward, silu, silu_backward, Conv3x3, LayerNorm,
    LayerNormCache, Linear, SpatialDims,
};
pub use store::{Grads, ParamId, ParamStore};
