use ndarray::{ArrayD, IxDyn};

use crate::{Real, Tensor};

/// Mean and reciprocal standard deviation (biased variance) of `xs`.
fn moments<T: Real>(xs: impl Iterator<Item = T> + Clone, n: usize, eps: T) -> (T, T) {
    let nf = T::lit(n as f64);
    let mean = xs.clone().fold(T::zero(), |a, v| a + v) / nf;
    let var = xs.fold(T::zero(), |a, v| a + (v - mean) * (v - mean)) / nf;
    (mean, T::one() / (var + eps).sqrt())
}

impl<T: Real> Tensor<T> {
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Tensor<T> {
        let c = *self.shape().last().expect("rank >= 1");
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); xs.len()];
        for (row, o) in xs.chunks(c).zip(out.chunks_mut(c)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut s = T::zero();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = (v - m).exp();
                s += *oi;
            }
            for oi in o.iter_mut() {
                *oi /= s;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(self.shape()), out).expect("shape");
        Tensor::from_op("softmax", value, vec![self.clone()], move |a| {
            let y = a.output.as_standard_layout();
            let g = a.grad.as_standard_layout();
            let (ys, gs) = (y.as_slice().expect("std"), g.as_slice().expect("std"));
            let mut dx = vec![T::zero(); ys.len()];
            for ((yr, gr), dr) in ys.chunks(c).zip(gs.chunks(c)).zip(dx.chunks_mut(c)) {
                let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&y, &g)| acc + y * g);
                for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(a.output.shape()), dx).expect("shape"))]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self) -> Tensor<T> {
        let c = *self.shape().last().expect("rank >= 1");
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); xs.len()];
        for (row, o) in xs.chunks(c).zip(out.chunks_mut(c)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = m + row.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
            for (oi, &v) in o.iter_mut().zip(row) {
                *oi = v - lse;
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(self.shape()), out).expect("shape");
        Tensor::from_op("log_softmax", value, vec![self.clone()], move |a| {
            let y = a.output.as_standard_layout();
            let g = a.grad.as_standard_layout();
            let (ys, gs) = (y.as_slice().expect("std"), g.as_slice().expect("std"));
            let mut dx = vec![T::zero(); ys.len()];
            for ((yr, gr), dr) in ys.chunks(c).zip(gs.chunks(c)).zip(dx.chunks_mut(c)) {
                let gsum = gr.iter().fold(T::zero(), |acc, &g| acc + g);
                for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = g - y.exp() * gsum;
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(a.output.shape()), dx).expect("shape"))]
        })
    }

    /// Layer normalisation over the last axis with optional affine parameters.
    pub fn layer_norm(&self, weight: Option<&Tensor<T>>, bias: Option<&Tensor<T>>, eps: f64) -> Tensor<T> {
        let c = *self.shape().last().expect("rank >= 1");
        // one group per row, channels along the row
        self.grouped_norm(1, c, 1, weight, bias, eps, "layer_norm")
    }

    /// Group normalisation of `[N, C, spatial...]` with `groups` channel groups.
    pub fn group_norm(
        &self,
        groups: usize,
        weight: Option<&Tensor<T>>,
        bias: Option<&Tensor<T>>,
        eps: f64,
    ) -> Tensor<T> {
        assert!(self.ndim() >= 2, "group_norm expects [N, C, ...]");
        let c = self.shape()[1];
        assert_eq!(c % groups, 0, "{c} channels not divisible into {groups} groups");
        let spatial: usize = self.shape()[2..].iter().product();
        self.grouped_norm(groups, c / groups, spatial, weight, bias, eps, "group_norm")
    }

    /// Shared kernel: data viewed as `[outer, groups, per_group, inner]`, statistics
    /// over `(per_group, inner)`, affine over the channel index `g * per_group + j`.
    /// With `groups == 1` and `inner == 1` this is a per-row layer norm.
    #[allow(clippy::too_many_arguments)]
    fn grouped_norm(
        &self,
        groups: usize,
        per_group: usize,
        inner: usize,
        weight: Option<&Tensor<T>>,
        bias: Option<&Tensor<T>>,
        eps: f64,
        name: &'static str,
    ) -> Tensor<T> {
        let channels = groups * per_group;
        let eps_t = T::lit(eps);
        let x = self.value().as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let wv: Option<Vec<T>> = weight.map(|w| w.value().iter().copied().collect());
        let bv: Option<Vec<T>> = bias.map(|b| b.value().iter().copied().collect());
        if let Some(w) = &wv {
            assert_eq!(w.len(), channels, "{name}: weight length");
        }
        let block = per_group * inner;
        let mut out = vec![T::zero(); xs.len()];
        for (bi, (xb, ob)) in xs.chunks(block).zip(out.chunks_mut(block)).enumerate() {
            let g = bi % groups;
            let (mean, rstd) = moments(xb.iter().copied(), block, eps_t);
            for j in 0..per_group {
                let ch = g * per_group + j;
                let (wc, bc) = (
                    wv.as_ref().map_or(T::one(), |w| w[ch]),
                    bv.as_ref().map_or(T::zero(), |b| b[ch]),
                );
                for k in 0..inner {
                    let idx = j * inner + k;
                    ob[idx] = (xb[idx] - mean) * rstd * wc + bc;
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(self.shape()), out).expect("shape");
        let mut parents = vec![self.clone()];
        let has_w = weight.is_some();
        let has_b = bias.is_some();
        if let Some(w) = weight {
            parents.push(w.clone());
        }
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(name, value, parents, move |a| {
            let x = a.parents[0].value().as_standard_layout();
            let xs = x.as_slice().expect("std");
            let g = a.grad.as_standard_layout();
            let gs = g.as_slice().expect("std");
            let wv: Option<Vec<T>> = if has_w {
                Some(a.parents[1].value().iter().copied().collect())
            } else {
                None
            };
            let mut dx = vec![T::zero(); xs.len()];
            let mut dw = vec![T::zero(); channels];
            let mut db = vec![T::zero(); channels];
            let nf = T::lit(block as f64);
            let mut xhat = vec![T::zero(); block];
            let mut gh = vec![T::zero(); block];
            for (bi, ((xb, gb), db_out)) in xs
                .chunks(block)
                .zip(gs.chunks(block))
                .zip(dx.chunks_mut(block))
                .enumerate()
            {
                let grp = bi % groups;
                let (mean, rstd) = moments(xb.iter().copied(), block, eps_t);
                let mut sum_gh = T::zero();
                let mut sum_ghx = T::zero();
                for j in 0..per_group {
                    let ch = grp * per_group + j;
                    let wc = wv.as_ref().map_or(T::one(), |w| w[ch]);
                    for k in 0..inner {
                        let idx = j * inner + k;
                        let xh = (xb[idx] - mean) * rstd;
                        xhat[idx] = xh;
                        gh[idx] = gb[idx] * wc;
                        sum_gh += gh[idx];
                        sum_ghx += gh[idx] * xh;
                        dw[ch] += gb[idx] * xh;
                        db[ch] += gb[idx];
                    }
                }
                let (mg, mgx) = (sum_gh / nf, sum_ghx / nf);
                for idx in 0..block {
                    db_out[idx] = rstd * (gh[idx] - mg - xhat[idx] * mgx);
                }
            }
            let mut grads = vec![Some(
                ArrayD::from_shape_vec(IxDyn(a.parents[0].shape()), dx).expect("shape"),
            )];
            if has_w {
                let shape = a.parents[1].shape().to_vec();
                grads.push(Some(ArrayD::from_shape_vec(IxDyn(&shape), dw).expect("shape")));
            }
            if has_b {
                let shape = a.parents[grads.len()].shape().to_vec();
                grads.push(Some(ArrayD::from_shape_vec(IxDyn(&shape), db).expect("shape")));
            }
            grads
        })
    }
}
