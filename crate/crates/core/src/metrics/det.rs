//! Detection precision and recall over a set of cases.

use log::info;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BoxF, Detection};
use crate::decoders::iou_3d;

/// IoU thresholds 0.10, 0.15, …, 0.50.
pub fn sweep_thresholds() -> Vec<f64> {
    (0..9).map(|k| (10 + 5 * k) as f64 / 100.0).collect()
}

/// AP (all-point interpolation) and recall at the given IoU threshold.
///
/// Detections from all cases are ranked together by score; each is matched
/// to the unmatched gt of its own case with the highest IoU, if that IoU
/// reaches `iou_thr`. With no gts at all the result is `(1, 1)` when there
/// are also no detections and `(0, 1)` otherwise.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BoxF>], iou_thr: f64) -> (f64, f64) {
    assert_eq!(dets.len(), gts.len(), "one detection list per case");
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    let n_det: usize = dets.iter().map(Vec::len).sum();
    if n_gt == 0 {
        info!("no ground-truth boxes; AP/AR set by convention");
        return if n_det == 0 { (1.0, 1.0) } else { (0.0, 1.0) };
    }
    let mut ranked: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(c, ds)| ds.iter().map(move |d| (c, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(ranked.len());
    for (case, d) in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[*case].iter().enumerate() {
            if used[*case][j] {
                continue;
            }
            let iou = iou_3d(&d.box_, g);
            if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[*case][j] = true;
        }
        tp_flags.push(best.is_some());
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(ranked.len());
    let mut precision = Vec::with_capacity(ranked.len());
    for &is_tp in &tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // precision envelope: best precision at any equal or higher recall
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (&r, &p) in recall.iter().zip(&precision) {
        if r != prev_r {
            ap += (r - prev_r) * p;
            prev_r = r;
        }
    }
    (ap, tp as f64 / n_gt as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map_sweep: f64,
    pub map_50: f64,
    pub mar_sweep: f64,
    pub mar_50: f64,
}

pub fn map_sweep(dets: &[Vec<Detection>], gts: &[Vec<BoxF>]) -> MapSummary {
    let th = sweep_thresholds();
    let runs: Vec<(f64, f64)> = th.iter().map(|&t| average_precision(dets, gts, t)).collect();
    let n = th.len() as f64;
    let (ap50, ar50) = average_precision(dets, gts, 0.5);
    MapSummary {
        map_sweep: runs.iter().map(|r| r.0).sum::<f64>() / n,
        map_50: ap50,
        mar_sweep: runs.iter().map(|r| r.1).sum::<f64>() / n,
        mar_50: ar50,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(o: f64, s: f64) -> BoxF {
        BoxF { min: [o; 3], max: [o + s; 3] }
    }

    #[test]
    fn single_good_detection() {
        let gt = vec![vec![cube(0.0, 10.0)]];
        let det = vec![vec![Detection { box_: cube(0.0, 8.5), score: 0.9 }]];
        // IoU 0.614
        assert_eq!(average_precision(&det, &gt, 0.5), (1.0, 1.0));
        assert_eq!(average_precision(&[vec![]], &gt, 0.5), (0.0, 0.0));
        assert_eq!(average_precision(&[vec![]], &[vec![]], 0.5), (1.0, 1.0));
    }

    #[test]
    fn iou_point_three_two_passes_five_of_nine() {
        // inner cube of side 0.32^(1/3)·10 inside a 10-cube has IoU 0.32
        let side = 0.32f64.powf(1.0 / 3.0) * 10.0;
        let gt = vec![vec![cube(0.0, 10.0)]; 4];
        let det = vec![vec![Detection { box_: cube(0.0, side), score: 0.8 }]; 4];
        let s = map_sweep(&det, &gt);
        assert_eq!(s.map_50, 0.0);
        assert!((s.map_sweep - 5.0 / 9.0).abs() < 1e-12);
    }
}
