//! Differentiable operations, grouped by kind. All are inherent methods on
//! [`Tensor`](crate::Tensor).

mod conv;
pub(crate) mod elementwise;
mod linalg;
mod norm;
mod reduce;
mod shape;

use ndarray::{ArrayD, Axis, IxDyn};

use crate::Real;

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn reduce_to_shape<T: Real>(grad: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &target) in shape.iter().enumerate() {
        if target == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(g.shape(), shape);
    g
}

/// Contiguous row-major copy (no copy when already standard).
pub(crate) fn standard<T: Real>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

pub(crate) fn reshape_owned<T: Real>(a: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    standard(a)
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape of a standard-layout array")
}
