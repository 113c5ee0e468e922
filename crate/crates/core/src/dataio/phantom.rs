//! Synthetic tumour phantoms: nested ellipsoids on a noisy background.

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::transforms::derive_bbox;
use crate::datamodel::{Grade, VolumeSample};

/// How the grade label follows from phantom geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GradeRule {
    /// HGG iff `|ET| / |WT|` is at least the threshold.
    EtFraction(f64),
}

impl GradeRule {
    pub fn grade(&self, wt: usize, et: usize) -> Grade {
        match *self {
            GradeRule::EtFraction(t) => {
                if wt > 0 && et as f64 / wt as f64 >= t && et > 0 {
                    Grade::Hgg
                } else {
                    Grade::Lgg
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub extent: [usize; 3],
    /// Tumour centre range as a fraction of each axis.
    pub center_range: (f64, f64),
    /// WT semi-axis lengths in voxels, drawn per axis.
    pub wt_radius: (f64, f64),
    /// TC semi-axes as a fraction of WT's.
    pub tc_factor: (f64, f64),
    /// ET semi-axes as a fraction of TC's, for cases drawn with an enhancing core.
    pub et_factor: (f64, f64),
    /// Probability that a case gets an enhancing core.
    pub et_probability: f64,
    pub grade_rule: GradeRule,
    pub noise_sigma: f64,
}

impl PhantomSpec {
    /// Defaults scaled to a volume extent.
    pub fn for_extent(extent: [usize; 3]) -> Self {
        let m = *extent.iter().min().expect("3 axes") as f64;
        PhantomSpec {
            extent,
            center_range: (0.35, 0.65),
            wt_radius: (0.12 * m, 0.24 * m),
            tc_factor: (0.5, 0.75),
            et_factor: (0.45, 0.7),
            et_probability: 0.5,
            grade_rule: GradeRule::EtFraction(0.01),
            noise_sigma: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |(a, b): (f64, f64)| 0.0 <= a && a <= b && b <= 1.0;
        if !unit(self.center_range) || !unit(self.tc_factor) || !unit(self.et_factor) {
            return Err("phantom: centre range and radius factors must be sub-intervals of [0, 1]".into());
        }
        if self.wt_radius.0 <= 0.0 || self.wt_radius.0 > self.wt_radius.1 {
            return Err("phantom: WT radius range must be positive and ordered".into());
        }
        Ok(())
    }
}

/// Baseline intensity per modality (T1, T1ce, T2, FLAIR).
const BASE: [f32; 4] = [0.45, 0.4, 0.35, 0.4];
/// Additive contrast of the oedema (WT \ TC), necrotic core (TC \ ET) and enhancing rim (ET).
const CONTRAST: [[f32; 4]; 3] = [
    [-0.05, 0.0, 0.45, 0.55],
    [-0.2, -0.1, 0.3, 0.15],
    [-0.05, 0.8, 0.15, 0.25],
];

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates one phantom. Regions are concentric ellipsoids, so WT ⊇ TC ⊇ ET
/// holds by construction.
pub fn synth_case<R: Rng + ?Sized>(spec: &PhantomSpec, case_id: &str, rng: &mut R) -> VolumeSample {
    let [d, h, w] = spec.extent;
    let center = spec.extent.map(|n| draw(rng, spec.center_range) * n as f64);
    let wt_r = [0; 3].map(|_| draw(rng, spec.wt_radius));
    let tc_f = draw(rng, spec.tc_factor);
    let with_et = rng.random::<f64>() < spec.et_probability;
    let et_f = if with_et { draw(rng, spec.et_factor) } else { 0.0 };
    let tc_r = wt_r.map(|r| r * tc_f);
    let et_r = tc_r.map(|r| r * et_f);

    let inside = |r: [f64; 3], p: [f64; 3]| {
        r.iter().all(|&v| v > 0.0)
            && (0..3).map(|i| ((p[i] - center[i]) / r[i]).powi(2)).sum::<f64>() <= 1.0
    };
    let mut mask = Array4::<u8>::zeros((3, d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let region = [inside(wt_r, p), inside(tc_r, p), inside(et_r, p)];
                for (c, &r) in region.iter().enumerate() {
                    mask[[c, z, y, x]] = r as u8;
                }
            }
        }
    }
    // A very thin draw can miss every voxel centre; keep at least the centre voxel.
    if mask.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 0) {
        let c = center.map(|v| v as usize);
        mask[[0, c[0].min(d - 1), c[1].min(h - 1), c[2].min(w - 1)]] = 1;
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let mut image = Array4::<f32>::zeros((4, d, h, w));
    for ((c, z, y, x), v) in image.indexed_iter_mut() {
        let mut val = BASE[c];
        let (wt, tc, et) = (mask[[0, z, y, x]], mask[[1, z, y, x]], mask[[2, z, y, x]]);
        if et > 0 {
            val += CONTRAST[2][c];
        } else if tc > 0 {
            val += CONTRAST[1][c];
        } else if wt > 0 {
            val += CONTRAST[0][c];
        }
        *v = val + noise.sample(rng) as f32;
    }

    let wt_count = mask.index_axis(ndarray::Axis(0), 0).iter().filter(|&&v| v > 0).count();
    let et_count = mask.index_axis(ndarray::Axis(0), 2).iter().filter(|&&v| v > 0).count();
    let box_ = derive_bbox(&mask.index_axis(ndarray::Axis(0), 0)).expect("WT is nonempty");
    VolumeSample {
        case_id: case_id.to_string(),
        image,
        mask,
        grade: spec.grade_rule.grade(wt_count, et_count),
        box_,
    }
}
