//! Acceptance criteria 1–9. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stdout (visible without `--nocapture`) and then asserts.
//! Heavy criteria share a lock so they never run concurrently.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;

use autograd::{no_grad, ParamStore, Tensor};
use mtmed3d::datamodel::{BoxF, Detection};
use mtmed3d::decoders::{decode_box, encode_box, iou_3d, nms, Anchor};
use mtmed3d::encoder::{window_partition, window_reverse, AttentionWindowLayout, Encoder, EncoderConfig};
use mtmed3d::metrics::{average_precision, dice_metric, hausdorff, sweep_thresholds, Efficiency};
use mtmed3d::mtl_optim::{gradnorm_loss, gradnorm_step, mgda_minnorm, training_rates, TaskWeights};
use mtmed3d::pipeline::{evaluate_cases, sharing_summary, AblationRun, Balance, MultiTaskModel, RunConfig, Trainer};
use mtmed3d::decoders::Neck;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

static HEAVY: Mutex<()> = Mutex::new(());

const REFERENCE_ENCODER_PARAMS: f64 = 8.063e6;
const ENCODER_PARAM_TOL: f64 = 0.15;
const SHARING_RANGE: (f64, f64) = (0.40, 0.55);
const GRADNORM_TOL: f64 = 1e-6;
const MGDA_TOL: f64 = 1e-3;
const MGDA_GRID_STEPS: usize = 1000;
const AP_TOL: f64 = 1e-12;
const HD_TOL: f64 = 1e-9;
const BOX_TOL: f64 = 1e-5;
const GRADCHECK_TOL: f64 = 1e-3;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_EVAL_EVERY: usize = 40;

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {n}: {detail}");
}

fn heavy() -> std::sync::MutexGuard<'static, ()> {
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

fn cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_mtmed3d"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "mtmed3d {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn criterion_1_encoder_parameter_count() {
    let _g = heavy();
    let store = ParamStore::<f32>::new(0);
    Encoder::new(&store.root().pp("encoder"), &EncoderConfig::default()).unwrap();
    let n = store.num_scalars();
    let out = cli(&["profile", "--preset", "default", "--repeats", "1", "--warmup", "0"]);
    let printed: Option<usize> = out
        .lines()
        .find_map(|l| l.strip_prefix("encoder params: "))
        .and_then(|v| v.trim().parse().ok());
    let dev = n as f64 / REFERENCE_ENCODER_PARAMS - 1.0;
    let pass = printed == Some(n) && dev.abs() <= ENCODER_PARAM_TOL;
    verdict(1, pass, &format!("encoder {n} params ({:+.2}% vs 8.063M), profile printed {printed:?}", 100.0 * dev));
}

#[test]
fn criterion_2_parameter_sharing() {
    let _g = heavy();
    let s = sharing_summary(&RunConfig::default().model).unwrap();
    let r = s.reduction();
    let pass = s.multi < s.singles() && (SHARING_RANGE.0..=SHARING_RANGE.1).contains(&r);
    verdict(
        2,
        pass,
        &format!(
            "multi {} vs seg {} + det {} + cls {} = {}; reduction {:.2}%",
            s.multi,
            s.seg_only,
            s.det_only,
            s.cls_only,
            s.singles(),
            100.0 * r
        ),
    );
}

#[test]
fn criterion_3_gradnorm() {
    let mut rng = StdRng::seed_from_u64(300);
    let pos = |rng: &mut StdRng| [0; 3].map(|_| rng.random_range(0.01..5.0));
    let (mut worst_mean, mut worst_sum, mut worst_target) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let (losses, l0) = (pos(&mut rng), pos(&mut rng));
        let (_, r) = training_rates(losses, l0).unwrap();
        worst_mean = worst_mean.max((r.iter().sum::<f64>() / 3.0 - 1.0).abs());

        // gradient norms exactly on target give zero loss for any Ḡ and α
        let (gbar, alpha) = (rng.random_range(0.1..3.0), rng.random_range(0.0..3.0));
        let g = r.map(|ri| gbar * ri.powf(alpha));
        worst_target = worst_target.max(gradnorm_loss(g, gbar, r, alpha));

        let mut tw = TaskWeights::new(1.5, 1);
        tw.w = pos(&mut rng);
        tw.observe_initial(l0);
        gradnorm_step(&mut tw, losses, pos(&mut rng), rng.random_range(0.001..0.1)).unwrap();
        worst_sum = worst_sum.max((tw.sum() - 3.0).abs());
    }
    // equal progress and equal norms: the update leaves weights alone
    let mut tw = TaskWeights::new(1.5, 1);
    tw.observe_initial([2.0, 1.0, 0.5]);
    let eq = gradnorm_step(&mut tw, [1.0, 0.5, 0.25], [0.7; 3], 0.05).unwrap();
    worst_target = worst_target.max(eq.l_grad);

    // task 2 lags (its loss has not moved); equal gradient norms
    let mut tw = TaskWeights::new(1.5, 1);
    tw.observe_initial([1.0; 3]);
    let before = tw.w[2];
    gradnorm_step(&mut tw, [0.5, 0.5, 1.0], [1.0; 3], 0.025).unwrap();
    let lagging_up = tw.w[2] > before && tw.w[0] < 1.0 && tw.w[1] < 1.0;

    let pass = worst_mean <= GRADNORM_TOL && worst_target <= GRADNORM_TOL && worst_sum <= GRADNORM_TOL && lagging_up;
    verdict(
        3,
        pass,
        &format!(
            "|mean r - 1| {worst_mean:.1e}, L_grad at target {worst_target:.1e}, |sum w - 3| {worst_sum:.1e}, lagging weight {before} -> {:.4}",
            tw.w[2]
        ),
    );
}

#[test]
fn criterion_4_mgda_against_grid() {
    let _g = heavy();
    let mut rng = StdRng::seed_from_u64(400);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let g: Vec<Vec<f64>> = (0..3).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let gram = [0, 1, 2].map(|i| [0, 1, 2].map(|j| dot(&g[i], &g[j])));
        let c = mgda_minnorm(&g).unwrap();
        let obj: f64 = (0..3).map(|i| (0..3).map(|j| c[i] * c[j] * gram[i][j]).sum::<f64>()).sum();
        worst = worst.max((obj - common::simplex_grid_min(&gram, MGDA_GRID_STEPS)).abs());
    }
    verdict(4, worst <= MGDA_TOL, &format!("worst |objective - grid minimum| {worst:.2e} over 50 instances"));
}

#[test]
fn criterion_5_metric_oracles() {
    let mut rng = StdRng::seed_from_u64(500);
    let mut thresholds = sweep_thresholds();
    thresholds.push(0.5);
    let (mut ap_gap, mut ar_mismatch) = (0.0f64, 0usize);
    for _ in 0..20 {
        let (dets, gts) = common::random_detection_set(&mut rng);
        for &t in &thresholds {
            let (ap, ar) = average_precision(&dets, &gts, t);
            let (ap_o, ar_o) = common::ap_oracle(&dets, &gts, t);
            ap_gap = ap_gap.max((ap - ap_o).abs());
            ar_mismatch += (ar != ar_o) as usize;
        }
    }
    let mut hd_gap = 0.0f64;
    let mut hd_undefined_mismatch = 0;
    for _ in 0..50 {
        let shape = (rng.random_range(4..12), rng.random_range(4..12), rng.random_range(4..12));
        let (a, b) = (common::random_mask(&mut rng, shape), common::random_mask(&mut rng, shape));
        match (hausdorff(&a.view(), &b.view(), 95.0), common::hd_brute_force(&a, &b, 95.0)) {
            (Some(f), Some(s)) => hd_gap = hd_gap.max((f - s).abs()),
            (f, s) => hd_undefined_mismatch += (f != s) as usize,
        }
    }
    let mut count_mismatch = 0;
    for _ in 0..50 {
        let (a, b) = (common::random_mask(&mut rng, (8, 8, 8)), common::random_mask(&mut rng, (8, 8, 8)));
        let both = a.iter().zip(&b).filter(|(x, y)| **x > 0 && **y > 0).count();
        let sizes = a.iter().filter(|&&v| v > 0).count() + b.iter().filter(|&&v| v > 0).count();
        count_mismatch += (dice_metric(&a.view(), &b.view()) != 2.0 * both as f64 / sizes as f64) as usize;
        let (ba, bb) = (common::random_box(&mut rng, 8.0), common::random_box(&mut rng, 8.0));
        let (ba, bb) = (snap(ba), snap(bb));
        let (ra, rb) = (raster(&ba), raster(&bb));
        let inter = ra.iter().zip(&rb).filter(|(x, y)| **x && **y).count();
        let union = ra.iter().zip(&rb).filter(|(x, y)| **x || **y).count();
        count_mismatch += (iou_3d(&ba, &bb) != inter as f64 / union as f64) as usize;
    }
    let pass = ap_gap <= AP_TOL && ar_mismatch == 0 && hd_gap <= HD_TOL && hd_undefined_mismatch == 0 && count_mismatch == 0;
    verdict(
        5,
        pass,
        &format!(
            "AP gap {ap_gap:.1e}, AR mismatches {ar_mismatch}; HD95 gap {hd_gap:.1e} on 50 masks; Dice/IoU count mismatches {count_mismatch}"
        ),
    );
}

fn snap(b: BoxF) -> BoxF {
    BoxF { min: b.min.map(f64::floor), max: b.max.map(f64::ceil) }
}

fn raster(b: &BoxF) -> Array3<bool> {
    Array3::from_shape_fn((16, 16, 16), |(z, y, x)| {
        let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
        (0..3).all(|i| b.min[i] <= p[i] && p[i] < b.max[i])
    })
}

#[test]
fn criterion_6_geometry_and_shapes() {
    let _g = heavy();
    let mut rng = StdRng::seed_from_u64(600);
    let mut roundtrip_fail = 0;
    for _ in 0..100 {
        let ext = [0; 3].map(|_| rng.random_range(1..9));
        let win = rng.random_range(1..5);
        let layout = AttentionWindowLayout::new(ext, win, rng.random_bool(0.5));
        let x = common::uniform(&mut rng, &[2, ext[0], ext[1], ext[2], 3], -1.0, 1.0);
        let back = window_reverse(&window_partition(&Tensor::new(x.clone()), &layout), &layout, 2);
        roundtrip_fail += (back.value().to_owned() != x) as usize;
    }

    let cfg = EncoderConfig::default();
    let store = ParamStore::<f32>::new(0);
    let enc = Encoder::new(&store.root().pp("encoder"), &cfg).unwrap();
    let mut shapes_ok = true;
    for s in [64usize, 96] {
        let _ng = no_grad();
        let x = Tensor::new(ArrayD::from_elem(IxDyn(&[1, 4, s, s, s]), 0.5f32));
        let got = enc.encode(&x).unwrap().shapes();
        let want: Vec<Vec<usize>> =
            (0..6).map(|i| vec![1, cfg.pyramid_channels()[i], s >> i, s >> i, s >> i]).collect();
        shapes_ok &= got == want;
    }
    drop(enc);

    let mut box_err = 0.0f64;
    for _ in 0..1000 {
        let a = Anchor {
            center: [0; 3].map(|_| rng.random_range(0.0..96.0)),
            size: [0; 3].map(|_| rng.random_range(2.0..64.0)),
        };
        let gt = common::random_box(&mut rng, 96.0);
        let back = decode_box(&encode_box(&gt, &a).unwrap(), &a);
        for i in 0..3 {
            box_err = box_err.max((back.min[i] - gt.min[i]).abs()).max((back.max[i] - gt.max[i]).abs());
        }
    }

    let mut nms_fail = 0;
    for _ in 0..300 {
        let n = rng.random_range(0..10);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection { box_: common::random_box(&mut rng, 16.0), score: rng.random_range(0.0..1.0) })
            .collect();
        let thr = rng.random_range(0.0..0.8);
        nms_fail += (nms(&dets, thr) != common::nms_by_enumeration(&dets, thr)) as usize;
    }
    let pass = roundtrip_fail == 0 && shapes_ok && box_err <= BOX_TOL && nms_fail == 0;
    verdict(
        6,
        pass,
        &format!(
            "window roundtrip failures {roundtrip_fail}/100, pyramid shapes at 64/96 {}, box codec max error {box_err:.1e} over 1000, NMS mismatches {nms_fail}/300",
            if shapes_ok { "ok" } else { "wrong" }
        ),
    );
}

#[test]
fn criterion_7_gradchecks() {
    let _g = heavy();
    let errs = [
        ("dice", common::dice_gradcheck()),
        ("focal", common::focal_gradcheck()),
        ("smooth-L1", common::smooth_l1_gradcheck()),
        ("tiny encoder", common::tiny_encoder_gradcheck()),
    ];
    let pass = errs.iter().all(|(_, e)| *e < GRADCHECK_TOL);
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(7, pass, &format!("worst relative error: {}", detail.join(", ")));
}

#[test]
fn criterion_8_overfit_eight_phantoms() {
    let _g = heavy();
    let mut cfg = RunConfig::smoke();
    cfg.balance.method = Balance::Gradnorm;
    cfg.optim.epochs = OVERFIT_MAX_STEPS / 8;
    cfg.optim.max_steps = Some(OVERFIT_MAX_STEPS);
    let cases = common::phantoms(8, 32, 7);
    let model = MultiTaskModel::<f32>::new(&cfg.model, cfg.seed).unwrap();
    let mut trainer = Trainer::new(&cfg, model, &cases).unwrap();
    let eff = Efficiency::new(0, 0, 0.0, 0);
    let mut last = String::from("no evaluation");
    let mut pass = false;
    for step in 0..OVERFIT_MAX_STEPS {
        trainer.train_step(&[&cases[step % cases.len()]]).unwrap();
        if (step + 1) % OVERFIT_EVAL_EVERY != 0 {
            continue;
        }
        let (report, per_case) = evaluate_cases(&trainer.model, &cases, 95.0, eff).unwrap();
        let wt = report.dice.unwrap()[0];
        let located = per_case.iter().filter(|c| c.top_iou.unwrap_or(0.0) > 0.5).count();
        let acc = report.acc.unwrap();
        last = format!("after {} steps: Dice(WT) {wt:.3}, top-IoU > 0.5 on {located}/8, accuracy {acc:.3}", step + 1);
        if wt > 0.7 && located >= 6 && acc == 1.0 {
            pass = true;
            break;
        }
    }
    verdict(8, pass, &last);
}

fn write_ablation_config(dir: &Path, data: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::smoke();
    cfg.data.root = data.to_path_buf();
    cfg.optim.epochs = 1;
    cfg.optim.max_steps = Some(2);
    cfg.eval.latency_repeats = 1;
    cfg.eval.latency_warmup = 0;
    let p = dir.join("ablate.yaml");
    std::fs::write(&p, cfg.to_yaml()).unwrap();
    p
}

#[test]
fn criterion_9_ablation_grid() {
    let _g = heavy();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cli(&["synth-data", "--out", data.to_str().unwrap(), "--n", "12", "--extent", "32", "--seed", "3"]);
    let cfg = write_ablation_config(dir.path(), &data);
    let out = dir.path().join("ablation");
    cli(&["ablate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let runs: Vec<AblationRun> =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let mut combos: Vec<(Neck, Balance)> = runs.iter().map(|r| (r.neck, r.balance)).collect();
    combos.sort_by_key(|(n, b)| (n.to_string(), b.to_string()));
    let want = vec![
        (Neck::Fpn, Balance::Gradnorm),
        (Neck::Fpn, Balance::Mgda),
        (Neck::PaNet, Balance::Gradnorm),
        (Neck::PaNet, Balance::Mgda),
    ];
    let complete = runs.iter().filter(|r| r.report.is_complete() && r.report.problems().is_empty()).count();
    let on_disk = runs
        .iter()
        .filter(|r| out.join(format!("{}_{}", r.neck, r.balance)).join("report.json").exists())
        .count();
    let efficiency = runs.iter().all(|r| r.report.efficiency.params > 0 && r.report.efficiency.macs > 0);
    let pass = combos == want && complete == 4 && on_disk == 4 && efficiency;
    verdict(
        9,
        pass,
        &format!("{} runs, {complete} complete reports, {on_disk} report.json files, efficiency filled: {efficiency}", runs.len()),
    );
}
