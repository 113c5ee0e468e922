//! Named, mutable model parameters.
//!
//! Every parameter is registered in a [`ParamStore`] under a dotted path
//! (`encoder.stages.0.blocks.1.attn.qkv.weight`). The store is the weight
//! manifest: checkpoints, optimizer groups and parameter counts all go
//! through it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use ndarray::{ArcArray, ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::{Real, Tensor};

static NEXT_PARAM: AtomicUsize = AtomicUsize::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(usize);

struct ParamInner<T: Real> {
    key: ParamKey,
    value: RwLock<ArcArray<T, IxDyn>>,
}

#[derive(Clone)]
pub struct Param<T: Real>(Arc<ParamInner<T>>);

impl<T: Real> std::fmt::Debug for Param<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({:?}, shape={:?})", self.0.key, self.shape())
    }
}

impl<T: Real> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        Param(Arc::new(ParamInner {
            key: ParamKey(NEXT_PARAM.fetch_add(1, Ordering::Relaxed)),
            value: RwLock::new(value.into_shared()),
        }))
    }

    pub fn key(&self) -> ParamKey {
        self.0.key
    }

    /// Graph leaf carrying the current value.
    pub fn tensor(&self) -> Tensor<T> {
        Tensor::param_leaf(self.value(), self.key())
    }

    pub fn value(&self) -> ArcArray<T, IxDyn> {
        self.0.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.read().expect("param lock").shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.read().expect("param lock").len()
    }

    pub fn set(&self, value: ArrayD<T>) {
        let mut guard = self.0.value.write().expect("param lock");
        assert_eq!(guard.shape(), value.shape(), "param shape is fixed");
        *guard = value.into_shared();
    }

    /// In-place update; copies first if a live graph still shares the buffer.
    pub fn update(&self, f: impl FnOnce(&mut ArcArray<T, IxDyn>)) {
        let mut guard = self.0.value.write().expect("param lock");
        f(&mut guard);
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Uniform(f64, f64),
    Normal(f64),
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal(f64),
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual conv/linear default.
    FanIn(usize),
}

struct StoreInner<T: Real> {
    params: Mutex<BTreeMap<String, Param<T>>>,
    order: Mutex<Vec<String>>,
    rng: Mutex<StdRng>,
}

/// Registry of named parameters plus the RNG used to initialise them.
#[derive(Clone)]
pub struct ParamStore<T: Real>(Arc<StoreInner<T>>);

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        ParamStore(Arc::new(StoreInner {
            params: Mutex::new(BTreeMap::new()),
            order: Mutex::new(Vec::new()),
            rng: Mutex::new(StdRng::seed_from_u64(seed)),
        }))
    }

    pub fn root(&self) -> Scope<T> {
        Scope {
            store: self.clone(),
            path: String::new(),
        }
    }

    fn register(&self, name: String, param: Param<T>) {
        let mut params = self.0.params.lock().expect("store lock");
        assert!(
            !params.contains_key(&name),
            "parameter {name} registered twice"
        );
        params.insert(name.clone(), param);
        self.0.order.lock().expect("store lock").push(name);
    }

    pub fn get(&self, name: &str) -> Option<Param<T>> {
        self.0.params.lock().expect("store lock").get(name).cloned()
    }

    /// Parameters in registration order.
    pub fn named(&self) -> Vec<(String, Param<T>)> {
        let params = self.0.params.lock().expect("store lock");
        self.0
            .order
            .lock()
            .expect("store lock")
            .iter()
            .map(|n| (n.clone(), params[n].clone()))
            .collect()
    }

    pub fn params(&self) -> Vec<Param<T>> {
        self.named().into_iter().map(|(_, p)| p).collect()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Param<T>)> {
        self.named()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.with_prefix(prefix).iter().map(|(_, p)| p.numel()).sum()
    }

    /// Name → shape for every parameter, sorted by name.
    pub fn manifest(&self) -> BTreeMap<String, Vec<usize>> {
        self.0
            .params
            .lock()
            .expect("store lock")
            .iter()
            .map(|(n, p)| (n.clone(), p.shape()))
            .collect()
    }

    fn sample(&self, shape: &[usize], init: Init) -> ArrayD<T> {
        let n: usize = shape.iter().product();
        let mut rng = self.0.rng.lock().expect("rng lock");
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Const(c) => vec![T::lit(c); n],
            Init::Uniform(lo, hi) => (0..n).map(|_| T::lit(rng.random_range(lo..hi))).collect(),
            Init::FanIn(fan_in) => {
                let b = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| T::lit(rng.random_range(-b..b))).collect()
            }
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    T::lit(z * std)
                })
                .collect(),
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    if z.abs() <= 2.0 {
                        break T::lit(z * std);
                    }
                })
                .collect(),
        };
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
    }
}

/// A path prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<T: Real> {
    store: ParamStore<T>,
    path: String,
}

impl<T: Real> Scope<T> {
    /// Child scope `path.name`.
    pub fn pp(&self, name: impl AsRef<str>) -> Scope<T> {
        let name = name.as_ref();
        let path = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        };
        Scope {
            store: self.store.clone(),
            path,
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Param<T> {
        let value = self.store.sample(shape, init);
        let p = Param::new(value);
        self.store.register(self.pp(name).path, p.clone());
        p
    }
}
