use ndarray::{ArrayD, Axis, IxDyn};

use crate::{Real, Tensor};

impl<T: Real> Tensor<T> {
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.value().sum();
        let shape = self.shape().to_vec();
        Tensor::from_op(
            "sum_all",
            ArrayD::from_elem(IxDyn(&[]), s),
            vec![self.clone()],
            move |a| {
                let g = *a.grad.iter().next().expect("scalar grad");
                vec![Some(ArrayD::from_elem(IxDyn(&shape), g))]
            },
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = T::lit(self.numel().max(1) as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes_keep(&self, axes: &[usize]) -> Tensor<T> {
        let mut v = self.value().to_owned();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in &sorted {
            v = v.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let shape = self.shape().to_vec();
        Tensor::from_op("sum_axes", v, vec![self.clone()], move |a| {
            let g = a
                .grad
                .broadcast(IxDyn(&shape))
                .expect("grad broadcasts to input")
                .to_owned();
            vec![Some(g)]
        })
    }

    pub fn mean_axes_keep(&self, axes: &[usize]) -> Tensor<T> {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes_keep(axes).scale(T::one() / T::lit(n.max(1) as f64))
    }

    /// Sums over `axes` and drops them.
    pub fn sum_axes(&self, axes: &[usize]) -> Tensor<T> {
        let kept = self.sum_axes_keep(axes);
        let shape: Vec<usize> = self
            .shape()
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        kept.reshape(&shape)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Tensor<T> {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).scale(T::one() / T::lit(n.max(1) as f64))
    }
}
