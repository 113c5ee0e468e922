//! Parameterised layers. Each layer registers its weights under the scope it
//! is built in and tags the ops it runs with that path for MAC accounting.

use crate::param::{Init, Param, Scope};
use crate::{profile, Real, Tensor};

/// Fully connected layer over the last axis.
#[derive(Clone)]
pub struct Linear<T: Real> {
    path: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> Linear<T> {
    /// Weight `[out, in]` with `init`; bias (if any) starts at zero.
    pub fn new(vs: &Scope<T>, inp: usize, out: usize, bias: bool, init: Init) -> Self {
        Linear {
            path: vs.path().to_string(),
            weight: vs.param("weight", &[out, inp], init),
            bias: bias.then(|| vs.param("bias", &[out], Init::Zeros)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let _g = profile::scope(&self.path);
        let b = self.bias.as_ref().map(Param::tensor);
        x.linear(&self.weight.tensor(), b.as_ref())
    }
}

/// Cubic-kernel 3D convolution.
#[derive(Clone)]
pub struct Conv3d<T: Real> {
    path: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Real> Conv3d<T> {
    /// Uniform fan-in initialisation for weight and bias.
    pub fn new(vs: &Scope<T>, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Self {
        let fan_in = cin * k * k * k;
        Conv3d {
            path: vs.path().to_string(),
            weight: vs.param("weight", &[cout, cin, k, k, k], Init::FanIn(fan_in)),
            bias: bias.then(|| vs.param("bias", &[cout], Init::FanIn(fan_in))),
            stride,
            pad,
        }
    }

    /// Explicit initialisation; `bias` of `None` means no bias.
    pub fn with_init(
        vs: &Scope<T>,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        pad: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Self {
        Conv3d {
            path: vs.path().to_string(),
            weight: vs.param("weight", &[cout, cin, k, k, k], weight),
            bias: bias.map(|init| vs.param("bias", &[cout], init)),
            stride,
            pad,
        }
    }

    /// Stride 1 with "same" padding for odd `k`.
    pub fn same(vs: &Scope<T>, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Self::new(vs, cin, cout, k, 1, k / 2, bias)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let _g = profile::scope(&self.path);
        let b = self.bias.as_ref().map(Param::tensor);
        x.conv3d(&self.weight.tensor(), b.as_ref(), self.stride, self.pad)
    }
}

/// Transposed 3D convolution with kernel equal to stride.
#[derive(Clone)]
pub struct ConvTranspose3d<T: Real> {
    path: String,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Real> ConvTranspose3d<T> {
    pub fn new(vs: &Scope<T>, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        let fan_in = cout * k * k * k;
        ConvTranspose3d {
            path: vs.path().to_string(),
            weight: vs.param("weight", &[cin, cout, k, k, k], Init::FanIn(fan_in)),
            bias: bias.then(|| vs.param("bias", &[cout], Init::FanIn(fan_in))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let _g = profile::scope(&self.path);
        let b = self.bias.as_ref().map(Param::tensor);
        x.conv_transpose3d(&self.weight.tensor(), b.as_ref())
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone)]
pub struct LayerNorm<T: Real> {
    pub weight: Option<Param<T>>,
    pub bias: Option<Param<T>>,
    pub eps: f64,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(vs: &Scope<T>, dim: usize) -> Self {
        LayerNorm {
            weight: Some(vs.param("weight", &[dim], Init::Ones)),
            bias: Some(vs.param("bias", &[dim], Init::Zeros)),
            eps: 1e-5,
        }
    }

    /// No learnable parameters.
    pub fn plain() -> Self {
        LayerNorm {
            weight: None,
            bias: None,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let w = self.weight.as_ref().map(Param::tensor);
        let b = self.bias.as_ref().map(Param::tensor);
        x.layer_norm(w.as_ref(), b.as_ref(), self.eps)
    }
}

/// Group normalisation over `[N, C, ...]`. With `groups == C` and no affine
/// parameters this is instance normalisation.
#[derive(Clone)]
pub struct GroupNorm<T: Real> {
    pub groups: usize,
    pub weight: Option<Param<T>>,
    pub bias: Option<Param<T>>,
    pub eps: f64,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(vs: &Scope<T>, groups: usize, channels: usize) -> Self {
        assert_eq!(channels % groups, 0, "{channels} channels, {groups} groups");
        GroupNorm {
            groups,
            weight: Some(vs.param("weight", &[channels], Init::Ones)),
            bias: Some(vs.param("bias", &[channels], Init::Zeros)),
            eps: 1e-5,
        }
    }

    pub fn instance(channels: usize) -> Self {
        GroupNorm {
            groups: channels,
            weight: None,
            bias: None,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let w = self.weight.as_ref().map(Param::tensor);
        let b = self.bias.as_ref().map(Param::tensor);
        x.group_norm(self.groups, w.as_ref(), b.as_ref(), self.eps)
    }
}

/// Largest divisor of `channels` that is at most `max_groups`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}
