//! Reverse-mode automatic differentiation over 2-D float64 arrays.
//!
//! The engine is deliberately small: it provides exactly the operations the
//! model graph needs (matrix product, broadcast arithmetic, masked softmax,
//! layer normalization, dropout, gathers/slices/concats and a handful of
//! reductions), recorded on a [`Tape`] and differentiated by walking the
//! tape in reverse. All tensors are two-dimensional; vectors are `[n, 1]`
//! or `[1, n]`, scalars are `[1, 1]`.

mod adam;
mod gradcheck;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use params::{GradStore, Leases, ParamStore};
pub use tape::{causal_mask, EmptyRowPolicy, Gradients, MaskMode, Tape, TensorId};

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Denominators are clamped below by this before any division.
pub const DIV_GUARD: f64 = 1e-8;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
