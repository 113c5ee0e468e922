use ndarray::{ArrayD, Axis, IxDyn, Slice};

use super::{reshape_owned, standard};
use crate::{Real, Tensor};

impl<T: Real> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.numel(), "reshape {:?} -> {:?}", self.shape(), shape);
        let value = if self.value().is_standard_layout() {
            self.value()
                .clone()
                .into_shape_with_order(IxDyn(shape))
                .expect("contiguous reshape")
        } else {
            reshape_owned(self.value().to_owned(), shape).into_shared()
        };
        let orig = self.shape().to_vec();
        Tensor::from_op_shared("reshape", value, vec![self.clone()], move |a| {
            vec![Some(reshape_owned(a.grad.clone(), &orig))]
        })
    }

    /// Axis permutation; the result is materialised in row-major order.
    pub fn permute(&self, axes: &[usize]) -> Tensor<T> {
        assert_eq!(axes.len(), self.ndim());
        let value = standard(self.value().view().permuted_axes(IxDyn(axes)).to_owned());
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Tensor::from_op("permute", value, vec![self.clone()], move |a| {
            let g = a.grad.view().permuted_axes(IxDyn(&inverse)).to_owned();
            vec![Some(standard(g))]
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        assert!(start + len <= self.shape()[axis], "narrow out of range");
        let value = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let shape = self.shape().to_vec();
        Tensor::from_op("narrow", standard(value), vec![self.clone()], move |a| {
            let mut g = ArrayD::zeros(IxDyn(&shape));
            g.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(a.grad);
            vec![Some(g)]
        })
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shapes agree");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op("concat", standard(value), parts.to_vec(), move |a| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(a.parents)
                .map(|(&n, p)| {
                    let g = if p.requires_grad() {
                        Some(standard(
                            a.grad
                                .slice_axis(Axis(axis), Slice::from(offset..offset + n))
                                .to_owned(),
                        ))
                    } else {
                        None
                    };
                    offset += n;
                    g
                })
                .collect()
        })
    }

    /// Zero padding; `pads[i] = (before, after)` for axis `i`.
    pub fn pad(&self, pads: &[(usize, usize)]) -> Tensor<T> {
        assert_eq!(pads.len(), self.ndim());
        if pads.iter().all(|&(b, a)| b == 0 && a == 0) {
            return self.clone();
        }
        let out_shape: Vec<usize> = self
            .shape()
            .iter()
            .zip(pads)
            .map(|(&d, &(b, a))| d + b + a)
            .collect();
        let mut value = ArrayD::zeros(IxDyn(&out_shape));
        let shape = self.shape().to_vec();
        {
            let mut view = value.view_mut();
            for (ax, (&(b, _), &d)) in pads.iter().zip(&shape).enumerate() {
                view.slice_axis_inplace(Axis(ax), Slice::from(b..b + d));
            }
            view.assign(self.value());
        }
        let pads = pads.to_vec();
        Tensor::from_op("pad", value, vec![self.clone()], move |a| {
            let mut view = a.grad.view();
            for (ax, (&(b, _), &d)) in pads.iter().zip(&shape).enumerate() {
                view.slice_axis_inplace(Axis(ax), Slice::from(b..b + d));
            }
            vec![Some(standard(view.to_owned()))]
        })
    }

    /// Cyclic shift: `out[i] = in[(i - shift) mod n]` along each listed axis.
    pub fn roll(&self, shifts: &[(usize, isize)]) -> Tensor<T> {
        let value = roll_array(&self.value().to_owned(), shifts);
        let back: Vec<(usize, isize)> = shifts.iter().map(|&(ax, s)| (ax, -s)).collect();
        Tensor::from_op("roll", value, vec![self.clone()], move |a| {
            vec![Some(roll_array(a.grad, &back))]
        })
    }

    /// Gathers entries of axis 0: `out[i] = self[indices[i]]`.
    pub fn index_select0(&self, indices: &[usize]) -> Tensor<T> {
        let rows = self.shape()[0];
        assert!(indices.iter().all(|&i| i < rows), "index out of range");
        let value = standard(self.value().select(Axis(0), indices));
        let idx = indices.to_vec();
        let shape = self.shape().to_vec();
        Tensor::from_op("index_select0", value, vec![self.clone()], move |a| {
            let mut g = ArrayD::zeros(IxDyn(&shape));
            for (i, &src) in idx.iter().enumerate() {
                let mut row = g.index_axis_mut(Axis(0), src);
                row += &a.grad.index_axis(Axis(0), i);
            }
            vec![Some(g)]
        })
    }

    pub fn flatten(&self) -> Tensor<T> {
        self.reshape(&[self.numel()])
    }

    /// Inserts a size-1 axis.
    pub fn unsqueeze(&self, axis: usize) -> Tensor<T> {
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }
}

pub(crate) fn roll_array<T: Real>(a: &ArrayD<T>, shifts: &[(usize, isize)]) -> ArrayD<T> {
    let mut out = a.clone();
    for &(ax, s) in shifts {
        let n = out.shape()[ax] as isize;
        if n == 0 {
            continue;
        }
        let s = s.rem_euclid(n) as usize;
        if s == 0 {
            continue;
        }
        let n = n as usize;
        let head = out.slice_axis(Axis(ax), Slice::from(n - s..n));
        let tail = out.slice_axis(Axis(ax), Slice::from(0..n - s));
        out = standard(ndarray::concatenate(Axis(ax), &[head, tail]).expect("same shapes"));
    }
    out
}
