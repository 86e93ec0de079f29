//! Reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters live in
//! a [`ParamStore`] and enter a graph through [`Graph::param`]; after
//! [`Graph::backward`] their gradients are collected with
//! [`Graph::param_grads`] and applied by [`AdamState::step`].

mod adam;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{
    finite_difference_check, param_finite_difference_check, relative_error, Coverage, GradCheck,
    REL_ERROR_FLOOR,
};
pub use graph::{sigmoid, Graph, Var, LAYER_NORM_EPS};
pub use params::{accumulate, GradMap, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

/// One depthwise-separable convolution: per-channel `depth_kernel[k×ch]`
/// followed by the 1×1 mix `point_kernel[ch×ch_out]`.
pub fn depthwise_separable_conv1d(
    g: &mut Graph,
    x: Var,
    depth_kernel: Var,
    point_kernel: Var,
) -> crate::Result<Var> {
    let h = g.depthwise_conv1d(x, depth_kernel)?;
    g.matmul(h, point_kernel)
}
