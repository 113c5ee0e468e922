//! AdamW with per-group learning rates, and a cosine schedule.

use std::collections::HashMap;

use ndarray::{ArrayD, Zip};

use crate::param::{Param, ParamKey};
use crate::serialize::{Archive, ArchiveError};
use crate::{Gradients, Real};

/// Parameters sharing one base learning rate.
#[derive(Clone)]
pub struct ParamGroup<T: Real> {
    pub name: String,
    pub lr: f64,
    pub params: Vec<(String, Param<T>)>,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

struct Moments<T: Real> {
    m: ArrayD<T>,
    v: ArrayD<T>,
}

/// Decoupled-weight-decay Adam.
pub struct AdamW<T: Real> {
    pub groups: Vec<ParamGroup<T>>,
    pub config: AdamWConfig,
    step: u64,
    state: HashMap<ParamKey, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(groups: Vec<ParamGroup<T>>, config: AdamWConfig) -> Self {
        AdamW {
            groups,
            config,
            step: 0,
            state: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; each group's rate is `group.lr * lr_scale`. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, grads: &Gradients<T>, lr_scale: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let eps = T::lit(c.eps);
        for group in &self.groups {
            let lr = group.lr * lr_scale;
            let decay = T::lit(1.0 - lr * c.weight_decay);
            let step_size = T::lit(lr / bc1);
            let inv_sqrt_bc2 = T::lit(1.0 / bc2.sqrt());
            for (_, p) in &group.params {
                let Some(g) = grads.param(p) else { continue };
                let st = self.state.entry(p.key()).or_insert_with(|| Moments {
                    m: ArrayD::zeros(g.raw_dim()),
                    v: ArrayD::zeros(g.raw_dim()),
                });
                Zip::from(&mut st.m).and(&mut st.v).and(g).for_each(|m, v, &g| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                });
                p.update(|w| {
                    Zip::from(w).and(&st.m).and(&st.v).for_each(|w, &m, &v| {
                        *w = *w * decay - step_size * m / (v.sqrt() * inv_sqrt_bc2 + eps);
                    });
                });
            }
        }
    }

    /// Moment buffers keyed `m.<name>` / `v.<name>`, plus the step count.
    pub fn save_state(&self, archive: &mut Archive<T>, prefix: &str) {
        for group in &self.groups {
            for (name, p) in &group.params {
                if let Some(st) = self.state.get(&p.key()) {
                    archive.insert(format!("{prefix}m.{name}"), st.m.clone());
                    archive.insert(format!("{prefix}v.{name}"), st.v.clone());
                }
            }
        }
        archive
            .metadata
            .insert(format!("{prefix}step"), self.step.to_string());
    }

    pub fn load_state(&mut self, archive: &Archive<T>, prefix: &str) -> Result<(), ArchiveError> {
        self.state.clear();
        for group in &self.groups {
            for (name, p) in &group.params {
                let (mk, vk) = (format!("{prefix}m.{name}"), format!("{prefix}v.{name}"));
                if let (Some(m), Some(v)) = (archive.tensors.get(&mk), archive.tensors.get(&vk)) {
                    if m.shape() != p.shape().as_slice() {
                        return Err(ArchiveError::Shape {
                            name: mk,
                            expected: p.shape(),
                            found: m.shape().to_vec(),
                        });
                    }
                    self.state.insert(
                        p.key(),
                        Moments {
                            m: m.clone(),
                            v: v.clone(),
                        },
                    );
                }
            }
        }
        self.step = archive
            .metadata
            .get(&format!("{prefix}step"))
            .and_then(|s| s.parse().ok())
            .unwrap_or(0);
        Ok(())
    }
}

/// Cosine annealing factor in `[min_factor, 1]` for `step` of `total`.
pub fn cosine_factor(step: usize, total: usize, min_factor: f64) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = (step.min(total) as f64) / total as f64;
    min_factor + 0.5 * (1.0 - min_factor) * (1.0 + (std::f64::consts::PI * t).cos())
}
