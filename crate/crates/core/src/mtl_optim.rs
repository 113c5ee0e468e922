//! Loss-weight balancing across the three tasks: GradNorm and the MGDA
//! min-norm solver.
//!
//! Task order everywhere is (segmentation, classification, detection).

use log::warn;
use serde::{Deserialize, Serialize};

pub const NUM_TASKS: usize = 3;

/// Floor applied when a weight update would make a weight non-positive.
pub const MIN_WEIGHT: f64 = 1e-4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MtlError {
    #[error("initial loss of task {0} is not positive")]
    ZeroInitialLoss(usize),
    #[error("gradient norms are not finite")]
    NonFinite,
    #[error("min-norm solver needs at least two gradients")]
    TooFewTasks,
    #[error("all task gradients are zero")]
    ZeroGradients,
    #[error("gradients have different lengths")]
    LengthMismatch,
}

/// Learnable task weights plus GradNorm bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub w: [f64; NUM_TASKS],
    /// Initial losses `L_i(0)`, set once the warm-up window is complete.
    pub l0: Option<[f64; NUM_TASKS]>,
    pub alpha: f64,
    pub step: u64,
    /// Steps averaged into `L_i(0)`.
    pub l0_window: u64,
    l0_sum: [f64; NUM_TASKS],
    l0_count: u64,
}

impl TaskWeights {
    pub fn new(alpha: f64, l0_window: u64) -> Self {
        TaskWeights {
            w: [1.0; NUM_TASKS],
            l0: None,
            alpha,
            step: 0,
            l0_window: l0_window.max(1),
            l0_sum: [0.0; NUM_TASKS],
            l0_count: 0,
        }
    }

    /// Accumulates losses into the `L_i(0)` estimate; returns true once it is fixed.
    pub fn observe_initial(&mut self, losses: [f64; NUM_TASKS]) -> bool {
        if self.l0.is_some() {
            return true;
        }
        for (s, l) in self.l0_sum.iter_mut().zip(losses) {
            *s += l;
        }
        self.l0_count += 1;
        if self.l0_count >= self.l0_window {
            let n = self.l0_count as f64;
            self.l0 = Some(self.l0_sum.map(|s| s / n));
        }
        self.l0.is_some()
    }

    pub fn sum(&self) -> f64 {
        self.w.iter().sum()
    }
}

/// Per-task gradient statistics at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradSnapshot {
    /// `‖∇_W (w_i L_i)‖`.
    pub g: [f64; NUM_TASKS],
    pub gbar: f64,
    pub rtilde: [f64; NUM_TASKS],
    pub r: [f64; NUM_TASKS],
}

/// `G_i = w_i · ‖∇_W L_i‖`, given the unweighted per-task gradient norms.
pub fn grad_norms(raw_norms: [f64; NUM_TASKS], w: [f64; NUM_TASKS]) -> Result<[f64; NUM_TASKS], MtlError> {
    if raw_norms.iter().any(|v| !v.is_finite()) {
        return Err(MtlError::NonFinite);
    }
    Ok([0, 1, 2].map(|i| w[i].abs() * raw_norms[i]))
}

/// Loss ratios `L_i / L_i(0)` and their mean-normalised form.
pub fn training_rates(
    losses: [f64; NUM_TASKS],
    l0: [f64; NUM_TASKS],
) -> Result<([f64; NUM_TASKS], [f64; NUM_TASKS]), MtlError> {
    if let Some(i) = l0.iter().position(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(MtlError::ZeroInitialLoss(i));
    }
    let rtilde = [0, 1, 2].map(|i| losses[i] / l0[i]);
    let mean = rtilde.iter().sum::<f64>() / NUM_TASKS as f64;
    let r = rtilde.map(|v| v / mean);
    Ok((rtilde, r))
}

/// `Σ_i |G_i − Ḡ · r_i^α|`.
pub fn gradnorm_loss(g: [f64; NUM_TASKS], gbar: f64, r: [f64; NUM_TASKS], alpha: f64) -> f64 {
    (0..NUM_TASKS).map(|i| (g[i] - gbar * r[i].powf(alpha)).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNormStep {
    pub snapshot: GradSnapshot,
    pub l_grad: f64,
}

/// One GradNorm update of `weights.w`, then renormalisation to `Σw = T`.
///
/// The targets `Ḡ · r_i^α` are constants, so `∂L_grad/∂w_i =
/// sign(G_i − target_i) · ‖∇_W L_i‖`.
pub fn gradnorm_step(
    weights: &mut TaskWeights,
    losses: [f64; NUM_TASKS],
    raw_norms: [f64; NUM_TASKS],
    lr_w: f64,
) -> Result<GradNormStep, MtlError> {
    let l0 = weights.l0.ok_or(MtlError::ZeroInitialLoss(0))?;
    let g = grad_norms(raw_norms, weights.w)?;
    let gbar = g.iter().sum::<f64>() / NUM_TASKS as f64;
    let (rtilde, r) = training_rates(losses, l0)?;
    let l_grad = gradnorm_loss(g, gbar, r, weights.alpha);
    for i in 0..NUM_TASKS {
        let target = gbar * r[i].powf(weights.alpha);
        let diff = g[i] - target;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        weights.w[i] -= lr_w * sign * raw_norms[i];
        if weights.w[i] <= 0.0 {
            warn!("task {i} weight driven to {:.3e}; clamped to {MIN_WEIGHT}", weights.w[i]);
            weights.w[i] = MIN_WEIGHT;
        }
    }
    let scale = NUM_TASKS as f64 / weights.sum();
    for w in &mut weights.w {
        *w *= scale;
    }
    weights.step += 1;
    Ok(GradNormStep {
        snapshot: GradSnapshot { g, gbar, rtilde, r },
        l_grad,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖Σ c_i g_i‖²` from the Gram matrix.
pub fn minnorm_objective(gram: &[Vec<f64>], c: &[f64]) -> f64 {
    let n = c.len();
    (0..n).map(|i| (0..n).map(|j| c[i] * c[j] * gram[i][j]).sum::<f64>()).sum()
}

/// Minimiser over `γ ∈ [0, 1]` of `‖γ a + (1 − γ) b‖²` given the three dot products.
fn line_search(aa: f64, ab: f64, bb: f64) -> f64 {
    let denom = aa - 2.0 * ab + bb;
    if denom <= 0.0 {
        return 0.0;
    }
    ((bb - ab) / denom).clamp(0.0, 1.0)
}

pub const MGDA_MAX_ITER: usize = 250;
pub const MGDA_TOL: f64 = 1e-6;

/// Convex coefficients approximately minimising `‖Σ c_i g_i‖²`.
///
/// Starts from the best pairwise solution and refines with Frank–Wolfe
/// steps under exact line search.
pub fn mgda_minnorm(grads: &[Vec<f64>]) -> Result<Vec<f64>, MtlError> {
    Ok(mgda_minnorm_trace(grads)?.0)
}

/// As [`mgda_minnorm`], also returning the objective after every iteration.
pub fn mgda_minnorm_trace(grads: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), MtlError> {
    let n = grads.len();
    if n < 2 {
        return Err(MtlError::TooFewTasks);
    }
    if grads.iter().any(|g| g.len() != grads[0].len()) {
        return Err(MtlError::LengthMismatch);
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MtlError::NonFinite);
    }
    if grads.iter().flatten().all(|&v| v == 0.0) {
        return Err(MtlError::ZeroGradients);
    }
    let gram: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| dot(&grads[i], &grads[j])).collect()).collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..n {
        for j in i + 1..n {
            let gamma = line_search(gram[i][i], gram[i][j], gram[j][j]);
            let mut c = vec![0.0; n];
            c[i] = gamma;
            c[j] = 1.0 - gamma;
            let obj = minnorm_objective(&gram, &c);
            if best.as_ref().is_none_or(|(b, _)| obj < *b) {
                best = Some((obj, c));
            }
        }
    }
    let (obj, mut c) = best.expect("n >= 2");
    let mut trace = vec![obj];
    for _ in 0..MGDA_MAX_ITER {
        // ⟨ḡ, g_t⟩ for every vertex t, with ḡ = Σ c_i g_i
        let grad: Vec<f64> = (0..n).map(|t| (0..n).map(|i| c[i] * gram[i][t]).sum()).collect();
        let v = (0..n).min_by(|&a, &b| grad[a].total_cmp(&grad[b])).expect("n >= 2");
        let gg = minnorm_objective(&gram, &c);
        let gamma = line_search(gram[v][v], grad[v], gg);
        let next: Vec<f64> = (0..n).map(|i| (1.0 - gamma) * c[i] + if i == v { gamma } else { 0.0 }).collect();
        let change = c.iter().zip(&next).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        c = next;
        trace.push(minnorm_objective(&gram, &c));
        if change < MGDA_TOL {
            break;
        }
    }
    Ok((c, trace))
}
