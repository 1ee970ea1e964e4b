//! Finite-difference gradient checking.
//!
//! The checker never touches the reverse sweep: it re-evaluates the loss
//! closure with individual parameter entries nudged by ±h and forms the
//! central difference, so it is an independent oracle for
//! [`Tape::backward`](crate::tape::Tape::backward).

use alloc::vec::Vec;

use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Central-difference gradients of `loss_fn` w.r.t. every trainable
/// parameter entry.
pub fn finite_difference_gradients(
    store: &ParamStore,
    mut loss_fn: impl FnMut(&ParamStore) -> f64,
    step: f64,
) -> Vec<Option<Tensor>> {
    let mut scratch = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for idx in 0..store.len() {
        let id = ParamId(idx);
        if !store.get(id).trainable {
            out.push(None);
            continue;
        }
        let (rows, cols) = {
            let t = &store.get(id).tensor;
            (t.rows(), t.cols())
        };
        let mut grad = Tensor::zeros(rows, cols);
        for e in 0..rows * cols {
            let original = store.get(id).tensor.data()[e];
            scratch.get_mut(id).tensor.data_mut()[e] = original + step;
            let up = loss_fn(&scratch);
            scratch.get_mut(id).tensor.data_mut()[e] = original - step;
            let down = loss_fn(&scratch);
            scratch.get_mut(id).tensor.data_mut()[e] = original;
            grad.data_mut()[e] = (up - down) / (2.0 * step);
        }
        out.push(Some(grad));
    }
    out
}

/// Largest elementwise relative error between analytic and numeric
/// gradients; the denominator is floored at `1e-4` so near-zero entries
/// compare at an absolute tolerance of `1e-4 · rtol`.
pub fn max_relative_error(analytic: &Gradients, numeric: &[Option<Tensor>]) -> f64 {
    let mut worst = 0.0f64;
    for (idx, num) in numeric.iter().enumerate() {
        let Some(num) = num else { continue };
        let Some(ana) = analytic.get(ParamId(idx)) else {
            continue;
        };
        for (&a, &n) in ana.data().iter().zip(num.data()) {
            let denom = libm::fabs(a).max(libm::fabs(n)).max(1e-4);
            worst = worst.max(libm::fabs(a - n) / denom);
        }
    }
    worst
}
