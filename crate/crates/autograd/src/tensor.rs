//! Graph nodes and the reverse pass.
//!
//! A [`Tensor`] is an immutable value plus, when it was produced by a
//! differentiable op, the closure that maps the output gradient to gradients
//! of its parents. The graph is never consumed by [`Tensor::backward`], so the
//! same forward pass can be differentiated for several roots (per-task
//! gradients are taken this way).

use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{ArcArray, ArrayD, IxDyn};

use crate::param::{Param, ParamKey};
use crate::Real;

static NEXT_NODE: AtomicUsize = AtomicUsize::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Disables graph recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

/// Inputs handed to an op's backward closure.
pub struct BackwardArgs<'a, T: Real> {
    pub grad: &'a ArrayD<T>,
    pub output: &'a ArcArray<T, IxDyn>,
    pub parents: &'a [Tensor<T>],
}

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<ArrayD<T>>> + Send + Sync>;

struct GradFn<T: Real> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Real> {
    id: usize,
    value: ArcArray<T, IxDyn>,
    grad_fn: Option<GradFn<T>>,
    param: Option<ParamKey>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Tensor<T: Real>(Arc<Node<T>>);

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("op", &self.0.grad_fn.as_ref().map(|g| g.name))
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    fn leaf(value: ArcArray<T, IxDyn>, requires_grad: bool, param: Option<ParamKey>) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            value,
            grad_fn: None,
            param,
            requires_grad,
        }))
    }

    /// Constant leaf; never receives a gradient.
    pub fn new(value: ArrayD<T>) -> Self {
        Self::leaf(value.into_shared(), false, None)
    }

    pub fn from_shared(value: ArcArray<T, IxDyn>) -> Self {
        Self::leaf(value, false, None)
    }

    /// Leaf whose gradient is reported by [`Gradients::get`].
    pub fn variable(value: ArrayD<T>) -> Self {
        Self::leaf(value.into_shared(), true, None)
    }

    pub fn scalar(v: T) -> Self {
        Self::new(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub(crate) fn param_leaf(value: ArcArray<T, IxDyn>, key: ParamKey) -> Self {
        Self::leaf(value, is_grad_enabled(), Some(key))
    }

    /// Records an op. `backward` receives the output gradient and returns one
    /// optional gradient per parent, each shaped like that parent.
    pub fn from_op<F>(name: &'static str, value: ArrayD<T>, parents: Vec<Tensor<T>>, backward: F) -> Self
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<ArrayD<T>>> + Send + Sync + 'static,
    {
        Self::from_op_shared(name, value.into_shared(), parents, backward)
    }

    pub fn from_op_shared<F>(
        name: &'static str,
        value: ArcArray<T, IxDyn>,
        parents: Vec<Tensor<T>>,
        backward: F,
    ) -> Self
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<ArrayD<T>>> + Send + Sync + 'static,
    {
        let requires = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !requires {
            return Self::from_shared(value);
        }
        Tensor(Arc::new(Node {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            value,
            grad_fn: Some(GradFn {
                name,
                parents,
                backward: Box::new(backward),
            }),
            param: None,
            requires_grad: true,
        }))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &ArcArray<T, IxDyn> {
        &self.0.value
    }

    pub fn to_array(&self) -> ArrayD<T> {
        self.0.value.to_owned()
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn numel(&self) -> usize {
        self.0.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.name)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().expect("one element")
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::from_shared(self.0.value.clone())
    }

    /// Gradients of this scalar with respect to every reachable leaf.
    pub fn backward(&self) -> Gradients<T> {
        assert_eq!(
            self.numel(),
            1,
            "backward() needs a scalar root, got shape {:?}",
            self.shape()
        );
        let seed = ArrayD::from_elem(IxDyn(self.shape()), T::one());
        self.backward_with(seed)
    }

    pub fn backward_with(&self, seed: ArrayD<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(), "seed shape mismatch");
        let mut out = Gradients::default();
        if !self.requires_grad() {
            return out;
        }
        let order = self.topo_order();
        let mut pending: HashMap<usize, ArrayD<T>> = HashMap::new();
        pending.insert(self.id(), seed);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match &node.0.grad_fn {
                Some(gf) => {
                    let args = BackwardArgs {
                        grad: &grad,
                        output: &node.0.value,
                        parents: &gf.parents,
                    };
                    let grads = (gf.backward)(&args);
                    debug_assert_eq!(grads.len(), gf.parents.len(), "op {}", gf.name);
                    for (parent, g) in gf.parents.iter().zip(grads) {
                        let Some(g) = g else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(
                            g.shape(),
                            parent.shape(),
                            "op {} produced a gradient of the wrong shape",
                            gf.name
                        );
                        accumulate(&mut pending, parent.id(), g);
                    }
                }
                None => match node.0.param {
                    Some(key) => accumulate(&mut out.params, key, grad),
                    None => {
                        out.nodes.insert(node.id(), grad);
                    }
                },
            }
        }
        out
    }

    /// Post-order over the nodes that require a gradient (parents first).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((node, child)) = stack.pop() {
            let parents = node.0.grad_fn.as_ref().map(|g| g.parents.as_slice()).unwrap_or(&[]);
            if child < parents.len() {
                let next = parents[child].clone();
                stack.push((node, child + 1));
                if next.requires_grad() && visited.insert(next.id()) {
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}

fn accumulate<K: std::hash::Hash + Eq, T: Real>(map: &mut HashMap<K, ArrayD<T>>, key: K, g: ArrayD<T>) {
    match map.get_mut(&key) {
        Some(acc) => *acc += &g,
        None => {
            map.insert(key, g);
        }
    }
}

/// Result of a reverse pass: gradients of parameters and of variable leaves.
#[derive(Clone, Default)]
pub struct Gradients<T: Real> {
    params: HashMap<ParamKey, ArrayD<T>>,
    nodes: HashMap<usize, ArrayD<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&ArrayD<T>> {
        self.nodes.get(&t.id())
    }

    pub fn param(&self, p: &Param<T>) -> Option<&ArrayD<T>> {
        self.params.get(&p.key())
    }

    pub fn param_by_key(&self, key: ParamKey) -> Option<&ArrayD<T>> {
        self.params.get(&key)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn param_keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.params.keys().copied()
    }

    /// Scales every gradient in place.
    pub fn scale(&mut self, s: T) {
        for g in self.params.values_mut().chain(self.nodes.values_mut()) {
            g.mapv_inplace(|v| v * s);
        }
    }

    /// `Σ_i coeff_i · grads_i`, keyed by parameter.
    pub fn weighted_sum(parts: &[(T, &Gradients<T>)]) -> Gradients<T> {
        let mut out = Gradients::default();
        for (coeff, g) in parts {
            for (k, v) in &g.params {
                let scaled = v.mapv(|x| x * *coeff);
                accumulate(&mut out.params, *k, scaled);
            }
        }
        out
    }

    /// Squared L2 norm over the given parameters (missing gradients count as zero).
    pub fn sq_norm_over(&self, params: &[Param<T>]) -> T {
        params
            .iter()
            .filter_map(|p| self.param(p))
            .map(|g| g.iter().map(|&v| v * v).sum::<T>())
            .sum()
    }

    /// Flattened concatenation of the gradients of `params`, zeros where absent.
    pub fn flatten_over(&self, params: &[Param<T>]) -> Vec<T> {
        let mut out = Vec::new();
        for p in params {
            match self.param(p) {
                Some(g) => out.extend(g.iter().copied()),
                None => out.extend(std::iter::repeat_n(T::zero(), p.numel())),
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .chain(self.nodes.values())
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
