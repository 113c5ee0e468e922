use std::ops::{Add, Mul, Neg, Sub};

use ndarray::{ArrayD, Zip};

use super::reduce_to_shape;
use crate::{Real, Tensor};

impl<T: Real> Tensor<T> {
    /// Broadcasting addition.
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        let value = self.value() + other.value();
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op("add", value, vec![self.clone(), other.clone()], move |a| {
            vec![
                Some(reduce_to_shape(a.grad.clone(), &sa)),
                Some(reduce_to_shape(a.grad.clone(), &sb)),
            ]
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        let value = self.value() - other.value();
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op("sub", value, vec![self.clone(), other.clone()], move |a| {
            vec![
                Some(reduce_to_shape(a.grad.clone(), &sa)),
                Some(reduce_to_shape(a.grad.mapv(|v| -v), &sb)),
            ]
        })
    }

    /// Broadcasting elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        let value = self.value() * other.value();
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op("mul", value, vec![self.clone(), other.clone()], move |a| {
            let (x, y) = (a.parents[0].value(), a.parents[1].value());
            let ga = if a.parents[0].requires_grad() {
                Some(reduce_to_shape(a.grad * y, &sa))
            } else {
                None
            };
            let gb = if a.parents[1].requires_grad() {
                Some(reduce_to_shape(a.grad * x, &sb))
            } else {
                None
            };
            vec![ga, gb]
        })
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        let value = self.value() / other.value();
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::from_op("div", value, vec![self.clone(), other.clone()], move |a| {
            let y = a.parents[1].value();
            let ga = reduce_to_shape(a.grad / y, &sa);
            let gb = if a.parents[1].requires_grad() {
                // d(x/y)/dy = -out / y
                let t = a.grad * a.output;
                Some(reduce_to_shape(-(t / y), &sb))
            } else {
                None
            };
            vec![Some(ga), gb]
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let value = self.value().mapv(|v| v * s);
        Tensor::from_op("scale", value, vec![self.clone()], move |a| {
            vec![Some(a.grad.mapv(|g| g * s))]
        })
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let value = self.value().mapv(|v| v + s);
        Tensor::from_op("add_scalar", value, vec![self.clone()], |a| vec![Some(a.grad.clone())])
    }

    /// Applies `f` elementwise with derivative `df(x, f(x))`.
    fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let value = self.value().mapv(f);
        Tensor::from_op(name, value, vec![self.clone()], move |a| {
            let mut g = a.grad.clone();
            Zip::from(&mut g)
                .and(a.parents[0].value())
                .and(a.output)
                .for_each(|g, &x, &y| *g = *g * df(x, y));
            vec![Some(g)]
        })
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary("abs", |x| x.abs(), |x, _| x.signum())
    }

    pub fn powf(&self, p: T) -> Tensor<T> {
        self.unary("powf", move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        self.unary(
            "leaky_relu",
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor<T> {
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let half = T::lit(0.5);
        self.unary(
            "gelu",
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", stable_sigmoid, |_, y| y * (T::one() - y))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary(
            "softplus",
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| stable_sigmoid(x),
        )
    }

    /// Elementwise Huber-style smooth L1: `0.5 x²/β` inside `|x| < β`, `|x| − β/2` outside.
    pub fn smooth_l1(&self, beta: T) -> Tensor<T> {
        let half = T::lit(0.5);
        self.unary(
            "smooth_l1",
            move |x| {
                if x.abs() < beta {
                    half * x * x / beta
                } else {
                    x.abs() - half * beta
                }
            },
            move |x, _| if x.abs() < beta { x / beta } else { x.signum() },
        )
    }

    /// Clamps values; the gradient passes only where the input was inside the range.
    pub fn clamp(&self, lo: T, hi: T) -> Tensor<T> {
        self.unary(
            "clamp",
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// `1 - x`
    pub fn one_minus(&self) -> Tensor<T> {
        self.neg().add_scalar(T::one())
    }
}

pub(crate) fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Elementwise sigmoid of a raw array (no graph).
pub fn sigmoid_array<T: Real>(a: &ArrayD<T>) -> ArrayD<T> {
    a.mapv(stable_sigmoid)
}

impl<T: Real> Add for &Tensor<T> {
    type Output = Tensor<T>;
    fn add(self, rhs: Self) -> Tensor<T> {
        Tensor::add(self, rhs)
    }
}

impl<T: Real> Sub for &Tensor<T> {
    type Output = Tensor<T>;
    fn sub(self, rhs: Self) -> Tensor<T> {
        Tensor::sub(self, rhs)
    }
}

impl<T: Real> Mul for &Tensor<T> {
    type Output = Tensor<T>;
    fn mul(self, rhs: Self) -> Tensor<T> {
        Tensor::mul(self, rhs)
    }
}

impl<T: Real> Neg for &Tensor<T> {
    type Output = Tensor<T>;
    fn neg(self) -> Tensor<T> {
        Tensor::neg(self)
    }
}
