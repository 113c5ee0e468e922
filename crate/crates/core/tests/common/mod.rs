//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use autograd::{Param, ParamStore, Tensor};
use mtmed3d::dataio::{case_rng, preprocess, synth_case, PhantomSpec};
use mtmed3d::datamodel::{BoxF, Detection, VolumeSample};
use mtmed3d::encoder::{PatchEmbed, PatchMerging, ResBlock, SwinBlock};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Small enough that a perturbation rarely carries a leaky-ReLU input across
/// zero; at 1e-5 one stem weight in the tiny encoder does.
pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative errors, so exact zeros compare cleanly.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn uniform(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Largest relative error between backprop and central differences of the
/// scalar `f` over every element of every input.
pub fn input_gradcheck<F>(inputs: &[ArrayD<f64>], f: F) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let vars: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::variable(a.clone())).collect();
    let out = f(&vars);
    assert_eq!(out.numel(), 1, "gradcheck needs a scalar");
    let grads = out.backward();
    let eval = |xs: &[ArrayD<f64>]| {
        let ts: Vec<Tensor<f64>> = xs.iter().map(|a| Tensor::new(a.clone())).collect();
        f(&ts).item()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).cloned().unwrap_or_else(|| ArrayD::zeros(v.value().raw_dim()));
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].as_slice_mut().unwrap()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].as_slice_mut().unwrap()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.as_slice().unwrap()[j], numeric));
        }
    }
    worst
}

/// As [`input_gradcheck`], over parameter values instead of inputs.
pub fn param_gradcheck<F>(params: &[Param<f64>], f: F) -> f64
where
    F: Fn() -> Tensor<f64>,
{
    let grads = f().backward();
    let mut worst: f64 = 0.0;
    for p in params {
        let base = p.value().to_owned();
        let analytic = grads.param(p).cloned().unwrap_or_else(|| ArrayD::zeros(base.raw_dim()));
        for j in 0..base.len() {
            let mut v = base.clone();
            v.as_slice_mut().unwrap()[j] += FD_STEP;
            p.set(v.clone());
            let up = f().item();
            v.as_slice_mut().unwrap()[j] -= 2.0 * FD_STEP;
            p.set(v);
            let down = f().item();
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.as_slice().unwrap()[j], numeric));
        }
        p.set(base);
    }
    worst
}

/// Stem, patch embedding, one shifted attention block and a merge at
/// `E = 4` on an `8³` input.
pub struct TinyEncoder {
    pub store: ParamStore<f64>,
    stem: ResBlock<f64>,
    embed: PatchEmbed<f64>,
    block: SwinBlock<f64>,
    merge: PatchMerging<f64>,
}

impl TinyEncoder {
    pub const EXTENT: usize = 8;

    pub fn new(seed: u64) -> Self {
        let store = ParamStore::new(seed);
        let root = store.root();
        TinyEncoder {
            stem: ResBlock::new(&root.pp("stem"), 4, 4),
            embed: PatchEmbed::new(&root.pp("patch_embed"), 4, 4, 2),
            block: SwinBlock::new(&root.pp("block"), 4, 1, 2, 4.0, true),
            merge: PatchMerging::new(&root.pp("merge"), 4),
            store,
        }
    }

    /// `Σ stem(x)·r0 + Σ merge(block(embed(x)))·r1` for fixed random `r0`, `r1`.
    pub fn objective(&self, x: &Tensor<f64>, r: &[Tensor<f64>; 2]) -> Tensor<f64> {
        let s = self.stem.forward(x).mul(&r[0]).sum_all();
        let z = self.merge.forward(&self.block.forward(&self.embed.forward(x).unwrap()));
        s.add(&z.mul(&r[1]).sum_all())
    }

    pub fn projections(seed: u64) -> [Tensor<f64>; 2] {
        let mut rng = StdRng::seed_from_u64(seed);
        let e = Self::EXTENT;
        [
            Tensor::new(uniform(&mut rng, &[1, 4, e, e, e], -1.0, 1.0)),
            Tensor::new(uniform(&mut rng, &[1, e / 4, e / 4, e / 4, 8], -1.0, 1.0)),
        ]
    }
}

/// Worst relative error of the tiny encoder's gradient with respect to its
/// input and every parameter.
pub fn tiny_encoder_gradcheck() -> f64 {
    let enc = TinyEncoder::new(3);
    let r = TinyEncoder::projections(4);
    let e = TinyEncoder::EXTENT;
    let x = uniform(&mut StdRng::seed_from_u64(5), &[1, 4, e, e, e], -1.0, 1.0);
    let wrt_input = input_gradcheck(std::slice::from_ref(&x), |t| enc.objective(&t[0], &r));
    let xt = Tensor::new(x);
    let wrt_params = param_gradcheck(&enc.store.params(), || enc.objective(&xt, &r));
    wrt_input.max(wrt_params)
}

/// `n` preprocessed phantoms of extent `s³`.
pub fn phantoms(n: usize, s: usize, seed: u64) -> Vec<VolumeSample> {
    let spec = PhantomSpec::for_extent([s; 3]);
    (0..n)
        .map(|i| {
            let id = format!("P{i}");
            preprocess(&synth_case(&spec, &id, &mut case_rng(seed, &id)), [s; 3], true).unwrap()
        })
        .collect()
}

fn overlap(a: &BoxF, b: &BoxF) -> f64 {
    let mut inter = 1.0;
    for i in 0..3 {
        let lo = if a.min[i] > b.min[i] { a.min[i] } else { b.min[i] };
        let hi = if a.max[i] < b.max[i] { a.max[i] } else { b.max[i] };
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let vol = |x: &BoxF| (x.max[0] - x.min[0]) * (x.max[1] - x.min[1]) * (x.max[2] - x.min[2]);
    inter / (vol(a) + vol(b) - inter)
}

/// Greedy NMS output found by enumeration: the unique subset `K` such that
/// a detection belongs to `K` iff no higher-ranked member of `K` overlaps
/// it by more than `thr`. Rank is descending score, ties by input order.
pub fn nms_by_enumeration(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let n = dets.len();
    assert!(n <= 12, "enumeration is exponential");
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut found = None;
    for subset in 0u32..(1 << n) {
        let member = |r: usize| subset & (1 << r) != 0;
        let consistent = (0..n).all(|r| {
            let free = (0..r).all(|q| !member(q) || overlap(&dets[rank[q]].box_, &dets[rank[r]].box_) <= thr);
            member(r) == free
        });
        if consistent {
            assert!(found.is_none(), "characterisation must be unique");
            found = Some(subset);
        }
    }
    let subset = found.expect("greedy output always exists");
    (0..n).filter(|r| subset & (1 << r) != 0).map(|r| dets[rank[r]]).collect()
}

/// AP and recall at `thr`, written from the definition: rank all detections,
/// match greedily to the best unmatched gt of the same case, and sum
/// `1/n_gt · max(precision at or after k)` over true positives `k`.
pub fn ap_oracle(dets: &[Vec<Detection>], gts: &[Vec<BoxF>], thr: f64) -> (f64, f64) {
    let n_gt: usize = gts.iter().map(|g| g.len()).sum();
    let mut all: Vec<(f64, usize, BoxF)> = Vec::new();
    for (c, ds) in dets.iter().enumerate() {
        for d in ds {
            all.push((d.score, c, d.box_));
        }
    }
    if n_gt == 0 {
        return if all.is_empty() { (1.0, 1.0) } else { (0.0, 1.0) };
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut hit = vec![false; all.len()];
    for (k, (_, c, b)) in all.iter().enumerate() {
        let mut best = None;
        let mut best_iou = thr;
        for (j, g) in gts[*c].iter().enumerate() {
            let v = overlap(b, g);
            if !taken[*c][j] && v >= best_iou && (best.is_none() || v > best_iou) {
                best = Some(j);
                best_iou = v;
            }
        }
        if let Some(j) = best {
            taken[*c][j] = true;
            hit[k] = true;
        }
    }
    let prec: Vec<f64> = (0..all.len())
        .map(|k| hit[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..all.len() {
        if hit[k] {
            let best = prec[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    let tp = hit.iter().filter(|&&h| h).count();
    (ap, tp as f64 / n_gt as f64)
}

fn surface(m: &Array3<u8>) -> Vec<[i64; 3]> {
    let dim = m.dim();
    let n = [dim.0 as i64, dim.1 as i64, dim.2 as i64];
    let at = |p: [i64; 3]| {
        if (0..3).any(|i| p[i] < 0 || p[i] >= n[i]) {
            0
        } else {
            m[[p[0] as usize, p[1] as usize, p[2] as usize]]
        }
    };
    let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
    let mut out = Vec::new();
    for ((z, y, x), &v) in m.indexed_iter() {
        let p = [z as i64, y as i64, x as i64];
        if v != 0 && steps.iter().any(|s| at([p[0] + s[0], p[1] + s[1], p[2] + s[2]]) == 0) {
            out.push(p);
        }
    }
    out
}

fn linear_percentile(mut v: Vec<f64>, p: f64) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
}

/// Percentile Hausdorff distance by all-pairs search over surface voxels
/// (a surface voxel is foreground with a face neighbour that is background or
/// outside the volume).
pub fn hd_brute_force(a: &Array3<u8>, b: &Array3<u8>, p: f64) -> Option<f64> {
    let (sa, sb) = (surface(a), surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let directed = |from: &[[i64; 3]], to: &[[i64; 3]]| {
        let d: Vec<f64> = from
            .iter()
            .map(|u| {
                to.iter()
                    .map(|v| ((u[0] - v[0]).pow(2) + (u[1] - v[1]).pow(2) + (u[2] - v[2]).pow(2)) as f64)
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
        linear_percentile(d, p)
    };
    Some(directed(&sa, &sb).max(directed(&sb, &sa)))
}

/// Random blobby mask: a few boxes and balls plus scattered voxels.
pub fn random_mask(rng: &mut StdRng, shape: (usize, usize, usize)) -> Array3<u8> {
    let mut m = Array3::<u8>::zeros(shape);
    let dims = [shape.0, shape.1, shape.2];
    for _ in 0..rng.random_range(1..4) {
        let c: [f64; 3] = dims.map(|n| rng.random_range(0.0..n as f64));
        let r: [f64; 3] = dims.map(|n| rng.random_range(1.0..(n as f64 / 2.5).max(1.5)));
        let ball = rng.random_bool(0.5);
        for ((z, y, x), v) in m.indexed_iter_mut() {
            let d = [z as f64 - c[0], y as f64 - c[1], x as f64 - c[2]];
            let inside = if ball {
                (0..3).map(|i| (d[i] / r[i]).powi(2)).sum::<f64>() <= 1.0
            } else {
                (0..3).all(|i| d[i].abs() <= r[i])
            };
            if inside {
                *v = 1;
            }
        }
    }
    for v in m.iter_mut() {
        if rng.random_bool(0.01) {
            *v = 1;
        }
    }
    m
}

/// Smallest `‖Σ c_i g_i‖²` over the simplex grid with spacing `1/steps`.
pub fn simplex_grid_min(gram: &[[f64; 3]; 3], steps: usize) -> f64 {
    let h = 1.0 / steps as f64;
    let mut best = f64::INFINITY;
    for i in 0..=steps {
        for j in 0..=steps - i {
            let c = [i as f64 * h, j as f64 * h, (steps - i - j) as f64 * h];
            let mut v = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    v += c[a] * c[b] * gram[a][b];
                }
            }
            best = best.min(v);
        }
    }
    best
}

pub fn random_box(rng: &mut StdRng, extent: f64) -> BoxF {
    let min: [f64; 3] = [0; 3].map(|_| rng.random_range(0.0..extent * 0.8));
    let max = [0, 1, 2].map(|i| min[i] + rng.random_range(1.0..extent * 0.4));
    BoxF { min, max }
}

/// Worst gradcheck error of the soft Dice loss on `[2, 3, 3, 3, 3]` probabilities.
pub fn dice_gradcheck() -> f64 {
    let mut rng = StdRng::seed_from_u64(31);
    let probs = uniform(&mut rng, &[2, 3, 3, 3, 3], 0.05, 0.95);
    let target = Tensor::new(uniform(&mut rng, &[2, 3, 3, 3, 3], 0.0, 1.0).mapv(|v| (v > 0.6) as u8 as f64));
    input_gradcheck(&[probs], |t| mtmed3d::losses::dice_loss(&t[0], &target, 1e-5))
}

/// Worst gradcheck error of the grading focal loss (γ = 2, α = 0.25).
pub fn focal_gradcheck() -> f64 {
    let mut rng = StdRng::seed_from_u64(32);
    let logits = uniform(&mut rng, &[6, 2], -2.0, 2.0);
    let targets: Vec<usize> = (0..6).map(|i| i % 2).collect();
    input_gradcheck(&[logits], |t| mtmed3d::losses::focal_loss(&t[0], &targets, 2.0, 0.25))
}

/// Worst gradcheck error of smooth-L1 (β = 1) in both arguments, with
/// differences spread over both the quadratic and the linear zone.
pub fn smooth_l1_gradcheck() -> f64 {
    let mut rng = StdRng::seed_from_u64(33);
    let pred = uniform(&mut rng, &[5, 6], -3.0, 3.0);
    let target = uniform(&mut rng, &[5, 6], -3.0, 3.0);
    input_gradcheck(&[pred, target], |t| mtmed3d::losses::smooth_l1(&t[0], &t[1], 1.0))
}

/// Random multi-case detection problem: up to 3 gts and 6 detections per case,
/// with some detections jittered from a gt so that matches occur.
pub fn random_detection_set(rng: &mut StdRng) -> (Vec<Vec<Detection>>, Vec<Vec<BoxF>>) {
    let cases = rng.random_range(1..6);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..cases {
        let g: Vec<BoxF> = (0..rng.random_range(0..4)).map(|_| random_box(rng, 32.0)).collect();
        let d: Vec<Detection> = (0..rng.random_range(0..7))
            .map(|_| {
                let box_ = match g.len() {
                    0 => random_box(rng, 32.0),
                    n if rng.random_bool(0.7) => {
                        let b = g[rng.random_range(0..n)];
                        let j = |v: f64, r: &mut StdRng| v + r.random_range(-2.0..2.0);
                        let min = b.min.map(|v| j(v, rng));
                        let max = [0, 1, 2].map(|i| j(b.max[i], rng).max(min[i] + 0.5));
                        BoxF { min, max }
                    }
                    _ => random_box(rng, 32.0),
                };
                Detection { box_, score: rng.random_range(0.0..1.0) }
            })
            .collect();
        dets.push(d);
        gts.push(g);
    }
    (dets, gts)
}
