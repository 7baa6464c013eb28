//! Minimal reverse-mode autodiff over `ndarray` tensors (f64, NCHW layout).
//!
//! The graph is a flat tape of nodes built per forward pass. Parameters live
//! in a [`ParamStore`] outside the graph; whether a parameter node receives a
//! gradient is decided when the graph is created, which gives exact-zero
//! gradients on the frozen side of an adversarial update.

mod adam;
mod conv;
mod graph;
mod params;

pub use adam::{Adam, AdamState};
pub use conv::{col2im, conv2d_naive, conv_out_size, im2col};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamMeta, ParamStore, Side};

use ndarray::ArrayD;

/// Central finite-difference gradient of `eval` w.r.t. parameter `id`.
///
/// `eval` must be a pure function of the store contents. Used by tests as the
/// independent oracle for analytic gradients.
pub fn finite_diff_grad(
    store: &mut ParamStore,
    id: ParamId,
    eps: f64,
    eval: &mut dyn FnMut(&ParamStore) -> f64,
) -> ArrayD<f64> {
    let shape = store.value(id).raw_dim();
    let mut grad = ArrayD::zeros(shape);
    let n = store.value(id).len();
    for i in 0..n {
        let orig = store.value(id).as_slice().unwrap()[i];
        store.value_mut(id).as_slice_mut().unwrap()[i] = orig + eps;
        let plus = eval(store);
        store.value_mut(id).as_slice_mut().unwrap()[i] = orig - eps;
        let minus = eval(store);
        store.value_mut(id).as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Max relative error between two gradient tensors, with an absolute floor so
/// near-zero entries do not blow up the ratio.
pub fn max_rel_error(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
