use mtmed3d::mtl_optim::{
    gradnorm_loss, gradnorm_step, mgda_minnorm, mgda_minnorm_trace, training_rates, TaskWeights,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force minimum of ‖Σ c_i g_i‖² over a 0.001 grid on the 3-simplex.
fn grid_min(g: &[Vec<f64>]) -> f64 {
    let dim = g[0].len();
    let mut best = f64::INFINITY;
    for a in 0..=1000u32 {
        for b in 0..=(1000 - a) {
            let c = [a as f64 / 1000.0, b as f64 / 1000.0, (1000 - a - b) as f64 / 1000.0];
            let mut s = 0.0;
            for k in 0..dim {
                let v = c[0] * g[0][k] + c[1] * g[1][k] + c[2] * g[2][k];
                s += v * v;
            }
            best = best.min(s);
        }
    }
    best
}

fn objective(g: &[Vec<f64>], c: &[f64]) -> f64 {
    (0..g[0].len())
        .map(|k| (0..3).map(|i| c[i] * g[i][k]).sum::<f64>().powi(2))
        .sum()
}

#[test]
fn mgda_matches_simplex_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let g: Vec<Vec<f64>> = (0..3).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let c = mgda_minnorm(&g).unwrap();
        let gap = (objective(&g, &c) - grid_min(&g)).abs();
        worst = worst.max(gap);
    }
    println!("worst gap {worst:e}");
    assert!(worst <= 1e-3);
}

#[test]
fn mgda_objective_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let g: Vec<Vec<f64>> = (0..3).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (_, trace) = mgda_minnorm_trace(&g).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{trace:?}");
    }
}

#[test]
fn lagging_task_weight_increases() {
    let mut tw = TaskWeights::new(1.5, 1);
    tw.observe_initial([1.0, 1.0, 1.0]);
    let mut prev = tw.w;
    // task 0 lags (highest loss ratio) while all raw gradient norms are equal
    for losses in [[0.9, 0.5, 0.5], [0.85, 0.45, 0.4]] {
        let step = gradnorm_step(&mut tw, losses, [1.0, 1.0, 1.0], 0.025).unwrap();
        let target0 = step.snapshot.gbar * step.snapshot.r[0].powf(1.5);
        assert!(step.snapshot.r[0] > 1.0 && step.snapshot.g[0] < target0);
        assert!(tw.w[0] > prev[0], "{:?} -> {:?}", prev, tw.w);
        assert!(tw.w[1] < prev[1] && tw.w[2] < prev[2]);
        assert!((tw.w.iter().sum::<f64>() - 3.0).abs() < 1e-6);
        prev = tw.w;
    }
}

#[test]
fn gradnorm_loss_zero_on_target() {
    let r = [1.2, 0.9, 0.9];
    let gbar = 0.7;
    let g = r.map(|v: f64| gbar * v.powf(1.5));
    assert!(gradnorm_loss(g, gbar, r, 1.5).abs() < 1e-15);
    // hand computation off target
    let l = gradnorm_loss([1.0, 2.0, 0.5], 1.0, [1.0, 1.0, 1.0], 1.5);
    assert!((l - (0.0 + 1.0 + 0.5)).abs() < 1e-15);
}

#[test]
fn weights_are_clamped_before_renormalising() {
    let mut tw = TaskWeights::new(1.5, 1);
    tw.observe_initial([1.0; 3]);
    gradnorm_step(&mut tw, [0.1, 1.0, 1.0], [100.0, 1.0, 1.0], 1.0).unwrap();
    assert!(tw.w.iter().all(|&w| w > 0.0));
    assert!((tw.w.iter().sum::<f64>() - 3.0).abs() < 1e-6);
}

#[test]
fn initial_losses_average_over_window() {
    let mut tw = TaskWeights::new(1.5, 3);
    assert!(!tw.observe_initial([1.0, 2.0, 3.0]));
    assert!(!tw.observe_initial([3.0, 2.0, 1.0]));
    assert!(tw.observe_initial([2.0, 2.0, 2.0]));
    assert_eq!(tw.l0, Some([2.0, 2.0, 2.0]));
    assert!(tw.observe_initial([9.0; 3]));
    assert_eq!(tw.l0, Some([2.0, 2.0, 2.0]));
}

proptest! {
    #[test]
    fn rates_have_unit_mean(l in prop::array::uniform3(1e-3f64..10.0), l0 in prop::array::uniform3(1e-3f64..10.0)) {
        let (_, r) = training_rates(l, l0).unwrap();
        prop_assert!((r.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn step_preserves_weight_sum(
        l in prop::array::uniform3(1e-3f64..10.0),
        n in prop::array::uniform3(0.0f64..5.0),
        w in prop::array::uniform3(0.1f64..2.0),
        lr in 1e-4f64..0.5,
    ) {
        let mut tw = TaskWeights::new(1.5, 1);
        tw.observe_initial([1.0; 3]);
        let s: f64 = w.iter().sum();
        tw.w = w.map(|v| 3.0 * v / s);
        gradnorm_step(&mut tw, l, n, lr).unwrap();
        prop_assert!((tw.w.iter().sum::<f64>() - 3.0).abs() < 1e-9);
        prop_assert!(tw.w.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn mgda_coefficients_on_simplex(g in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 2..5)) {
        prop_assume!(g.iter().flatten().any(|&v| v != 0.0));
        let c = mgda_minnorm(&g).unwrap();
        prop_assert!(c.iter().all(|&v| v >= 0.0));
        prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn grad_norms_match_quadratic_toy() {
    use autograd::{ParamStore, Init, Tensor};
    use mtmed3d::mtl_optim::grad_norms;
    use ndarray::{arr1, arr2};
    // L = ‖W x − y‖², ∇_W L = 2 (W x − y) xᵀ
    let store = ParamStore::<f64>::new(0);
    let w = store.root().param("w", &[2, 3], Init::Zeros);
    w.set(arr2(&[[0.5, -1.0, 2.0], [1.5, 0.0, -0.5]]).into_dyn());
    let x = arr1(&[1.0, 2.0, -1.0]);
    let y = arr1(&[0.3, -0.7]);
    let r = w.value().into_dimensionality::<ndarray::Ix2>().unwrap().dot(&x) - &y;
    let analytic = 2.0 * r.iter().map(|v| v * v).sum::<f64>().sqrt() * x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let xt = Tensor::new(x.clone().into_dyn());
    let loss = xt.linear(&w.tensor(), None).sub(&Tensor::new(y.into_dyn())).powf(2.0).sum_all();
    let raw = loss.backward().sq_norm_over(std::slice::from_ref(&w)).sqrt();
    assert!((raw - analytic).abs() < 1e-12);
    let g = grad_norms([raw, 0.0, raw], [1.0, 1.0, 2.0]).unwrap();
    assert_eq!(g[1], 0.0);
    assert_eq!(g[2], 2.0 * g[0]);
}
