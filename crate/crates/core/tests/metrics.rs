mod common;

use autograd::{ParamStore, Tensor};
use mtmed3d::datamodel::Grade::{Hgg, Lgg};
use mtmed3d::metrics::{
    average_precision, classification_metrics, dice_metric, hausdorff, layer_macs, map_sweep, sweep_thresholds,
    Efficiency, MetricsReport,
};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// AP sums in a different order than the oracle, so equality is to rounding.
const AP_TOL: f64 = 1e-12;

#[test]
fn ap_and_ar_match_independent_evaluator() {
    let mut rng = StdRng::seed_from_u64(40);
    let mut thresholds = sweep_thresholds();
    thresholds.push(0.5);
    let mut matched_any = false;
    for _ in 0..20 {
        let (dets, gts) = common::random_detection_set(&mut rng);
        for &t in &thresholds {
            let (ap, ar) = average_precision(&dets, &gts, t);
            let (ap_o, ar_o) = common::ap_oracle(&dets, &gts, t);
            assert!((ap - ap_o).abs() <= AP_TOL, "thr {t}: AP {ap} vs {ap_o}");
            assert_eq!(ar, ar_o, "thr {t}");
            matched_any |= ar > 0.0 && ar < 1.0;
        }
    }
    assert!(matched_any, "random sets should include partial recall");
}

#[test]
fn sweep_summary_averages_thresholds() {
    let mut rng = StdRng::seed_from_u64(41);
    let (dets, gts) = common::random_detection_set(&mut rng);
    let s = map_sweep(&dets, &gts);
    let th = sweep_thresholds();
    assert_eq!(th.len(), 9);
    let mean = th.iter().map(|&t| average_precision(&dets, &gts, t).0).sum::<f64>() / 9.0;
    assert!((s.map_sweep - mean).abs() < 1e-15);
    assert_eq!(s.map_50, average_precision(&dets, &gts, 0.5).0);
}

#[test]
fn hausdorff_matches_brute_force() {
    let mut rng = StdRng::seed_from_u64(42);
    for i in 0..50 {
        let shape = (rng.random_range(4..12), rng.random_range(4..12), rng.random_range(4..12));
        let a = common::random_mask(&mut rng, shape);
        let b = common::random_mask(&mut rng, shape);
        for p in [95.0, 100.0, 50.0] {
            let fast = hausdorff(&a.view(), &b.view(), p);
            let slow = common::hd_brute_force(&a, &b, p);
            match (fast, slow) {
                (Some(f), Some(s)) => assert!((f - s).abs() <= 1e-9, "mask {i} p{p}: {f} vs {s}"),
                (f, s) => assert_eq!(f, s),
            }
        }
    }
}

#[test]
fn empty_mask_has_no_hausdorff() {
    let z = Array3::<u8>::zeros((4, 4, 4));
    let mut one = z.clone();
    one[[1, 1, 1]] = 1;
    assert_eq!(hausdorff(&z.view(), &one.view(), 95.0), None);
}

#[test]
fn dice_equals_voxel_counts() {
    let mut rng = StdRng::seed_from_u64(43);
    for _ in 0..50 {
        let a = common::random_mask(&mut rng, (8, 9, 10));
        let b = common::random_mask(&mut rng, (8, 9, 10));
        let both = a.iter().zip(&b).filter(|(x, y)| **x > 0 && **y > 0).count();
        let (na, nb) = (a.iter().filter(|&&v| v > 0).count(), b.iter().filter(|&&v| v > 0).count());
        assert_eq!(dice_metric(&a.view(), &b.view()), 2.0 * both as f64 / (na + nb) as f64);
    }
}

#[test]
fn sensitivity_and_specificity() {
    let m = classification_metrics(&[Hgg, Hgg, Lgg, Lgg, Hgg], &[Hgg, Lgg, Lgg, Lgg, Lgg]);
    assert_eq!(m.acc, 0.6);
    assert_eq!(m.sen, Some(1.0));
    assert_eq!(m.spe, Some(0.5));
    assert!(classification_metrics(&[], &[]).acc.is_nan());
}

#[test]
fn layer_macs_group_by_scope() {
    let store = ParamStore::<f32>::new(0);
    let root = store.root();
    let a = autograd::nn::Conv3d::same(&root.pp("a"), 2, 3, 3, true);
    let b = autograd::nn::Linear::new(&root.pp("b"), 3, 5, true, autograd::Init::FanIn(3));
    let x = Tensor::new(ArrayD::zeros(IxDyn(&[1, 2, 4, 4, 4])));
    autograd::profile::start();
    let y = a.forward(&x);
    let y = a.forward(&y.narrow(1, 0, 2));
    b.forward(&y.mean_axes(&[2, 3, 4]));
    let rows = layer_macs(&autograd::profile::finish());
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].layer.as_str(), rows[0].calls, rows[0].macs), ("a", 2, 2 * 2 * 3 * 27 * 64));
    assert_eq!((rows[1].calls, rows[1].macs), (1, 15));
}

#[test]
fn efficiency_derived_fields() {
    let e = Efficiency::new(10, 1000, 0.5, 3 << 20);
    assert_eq!(e.flops, 2000);
    assert_eq!(e.size_mb, 3.0);
}

fn report() -> MetricsReport {
    MetricsReport {
        num_cases: 2,
        dice: Some([0.9, 0.8, 0.7]),
        hd: Some([Some(1.0), None, Some(2.5)]),
        hd_percentile: 95.0,
        acc: Some(1.0),
        sen: Some(1.0),
        spe: None,
        map_sweep: Some(0.6),
        map_50: Some(0.5),
        mar_sweep: Some(0.7),
        mar_50: Some(0.5),
        efficiency: Efficiency::new(1, 1, 0.1, 4),
    }
}

#[test]
fn report_completeness_and_ranges() {
    let r = report();
    assert!(r.is_complete());
    assert!(r.problems().is_empty());
    assert!((r.selection_score() - (0.8 + 1.0 + 0.6) / 3.0).abs() < 1e-12);
    let bad = MetricsReport { acc: Some(1.5), map_sweep: None, ..r };
    assert!(!bad.is_complete());
    assert_eq!(bad.problems().len(), 1);
}

#[test]
fn report_json_roundtrip() {
    let r = report();
    let back: MetricsReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}
