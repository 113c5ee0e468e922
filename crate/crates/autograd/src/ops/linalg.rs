use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView3, Axis, Ix2, Ix3, IxDyn};

use super::standard;
use crate::{profile, Real, Tensor};

fn as3<T: Real>(a: &ArrayD<T>) -> ArrayView3<'_, T> {
    a.view().into_dimensionality::<Ix3>().expect("rank 3")
}

impl<T: Real> Tensor<T> {
    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
        let in_dim = *self.shape().last().expect("rank >= 1");
        let (out_dim, w_in) = (w.shape()[0], w.shape()[1]);
        assert_eq!(in_dim, w_in, "linear: input has {in_dim} features, weight expects {w_in}");
        let rows = self.numel() / in_dim;
        let x = self.value().as_standard_layout();
        let x2 = x.view().into_shape_with_order((rows, in_dim)).expect("contiguous");
        let wv = w.value().view().into_dimensionality::<Ix2>().expect("rank 2 weight");
        let mut y = Array2::<T>::zeros((rows, out_dim));
        general_mat_mul(T::one(), &x2, &wv.t(), T::zero(), &mut y);
        if let Some(b) = b {
            let bv = b.value().view().into_shape_with_order(out_dim).expect("bias is 1-D");
            y += &bv;
        }
        profile::record("linear", (rows * in_dim * out_dim) as u64);
        let mut out_shape = self.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = out_dim;
        let y = y.into_dyn().into_shape_with_order(IxDyn(&out_shape)).expect("reshape");

        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        let x_shape = self.shape().to_vec();
        Tensor::from_op("linear", y, parents, move |a| {
            let g = standard(a.grad.clone());
            let g2 = g.view().into_shape_with_order((rows, out_dim)).expect("contiguous");
            let w = a.parents[1].value().view().into_dimensionality::<Ix2>().expect("rank 2");
            let mut out = Vec::with_capacity(a.parents.len());
            out.push(if a.parents[0].requires_grad() {
                let mut gx = Array2::<T>::zeros((rows, in_dim));
                general_mat_mul(T::one(), &g2, &w, T::zero(), &mut gx);
                Some(gx.into_dyn().into_shape_with_order(IxDyn(&x_shape)).expect("reshape"))
            } else {
                None
            });
            out.push(if a.parents[1].requires_grad() {
                let xs = a.parents[0].value().as_standard_layout();
                let x2 = xs.view().into_shape_with_order((rows, in_dim)).expect("contiguous");
                let mut gw = Array2::<T>::zeros((out_dim, in_dim));
                general_mat_mul(T::one(), &g2.t(), &x2, T::zero(), &mut gw);
                Some(gw.into_dyn())
            } else {
                None
            });
            if a.parents.len() == 3 {
                out.push(Some(g2.sum_axis(Axis(0)).into_dyn()));
            }
            out
        })
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]` (or `[B, n, k]` when
    /// `trans_b`), giving `[B, m, n]`.
    pub fn bmm(&self, other: &Tensor<T>, trans_b: bool) -> Tensor<T> {
        assert_eq!(self.ndim(), 3, "bmm lhs must be rank 3");
        assert_eq!(other.ndim(), 3, "bmm rhs must be rank 3");
        let (bsz, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bb, r1, r2) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        assert_eq!(bsz, bb, "bmm batch mismatch");
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        assert_eq!(k, kb, "bmm inner dimension mismatch");

        let av = self.value().as_standard_layout();
        let bv = other.value().as_standard_layout();
        let mut y = ndarray::Array3::<T>::zeros((bsz, m, n));
        {
            let a3 = av.view().into_dimensionality::<Ix3>().expect("rank 3");
            let b3 = bv.view().into_dimensionality::<Ix3>().expect("rank 3");
            for i in 0..bsz {
                let ai = a3.index_axis(Axis(0), i);
                let bi = b3.index_axis(Axis(0), i);
                let mut yi = y.index_axis_mut(Axis(0), i);
                if trans_b {
                    general_mat_mul(T::one(), &ai, &bi.t(), T::zero(), &mut yi);
                } else {
                    general_mat_mul(T::one(), &ai, &bi, T::zero(), &mut yi);
                }
            }
        }
        profile::record("bmm", (bsz * m * k * n) as u64);
        Tensor::from_op(
            "bmm",
            y.into_dyn(),
            vec![self.clone(), other.clone()],
            move |a| {
                let g = standard(a.grad.clone());
                let g3 = as3(&g);
                let av = a.parents[0].value().as_standard_layout();
                let bv = a.parents[1].value().as_standard_layout();
                let a3 = av.view().into_dimensionality::<Ix3>().expect("rank 3");
                let b3 = bv.view().into_dimensionality::<Ix3>().expect("rank 3");
                let ga = if a.parents[0].requires_grad() {
                    let mut ga = ndarray::Array3::<T>::zeros((bsz, m, k));
                    for i in 0..bsz {
                        let gi = g3.index_axis(Axis(0), i);
                        let bi = b3.index_axis(Axis(0), i);
                        let mut out = ga.index_axis_mut(Axis(0), i);
                        // dA = G · Bᵀ  (or G · B when B was transposed)
                        if trans_b {
                            general_mat_mul(T::one(), &gi, &bi, T::zero(), &mut out);
                        } else {
                            general_mat_mul(T::one(), &gi, &bi.t(), T::zero(), &mut out);
                        }
                    }
                    Some(ga.into_dyn())
                } else {
                    None
                };
                let gb = if a.parents[1].requires_grad() {
                    let mut gb = ndarray::Array3::<T>::zeros((bsz, r1, r2));
                    for i in 0..bsz {
                        let gi = g3.index_axis(Axis(0), i);
                        let ai = a3.index_axis(Axis(0), i);
                        let mut out = gb.index_axis_mut(Axis(0), i);
                        if trans_b {
                            // B is [n, k]: dB = Gᵀ · A
                            general_mat_mul(T::one(), &gi.t(), &ai, T::zero(), &mut out);
                        } else {
                            general_mat_mul(T::one(), &ai.t(), &gi, T::zero(), &mut out);
                        }
                    }
                    Some(gb.into_dyn())
                } else {
                    None
                };
                vec![ga, gb]
            },
        )
    }

    /// Product over the last two axes with matching leading axes.
    pub fn matmul(&self, other: &Tensor<T>, trans_b: bool) -> Tensor<T> {
        let nd = self.ndim();
        assert!(nd >= 2 && other.ndim() == nd, "matmul rank mismatch");
        let lead = &self.shape()[..nd - 2];
        assert_eq!(lead, &other.shape()[..nd - 2], "matmul batch mismatch");
        let b: usize = lead.iter().product();
        let a3 = self.reshape(&[b, self.shape()[nd - 2], self.shape()[nd - 1]]);
        let b3 = other.reshape(&[b, other.shape()[nd - 2], other.shape()[nd - 1]]);
        let y = a3.bmm(&b3, trans_b);
        let mut shape = lead.to_vec();
        shape.extend_from_slice(&y.shape()[1..]);
        y.reshape(&shape)
    }
}
