//! Anchor geometry: generation, delta coding, matching, IoU and NMS.

use crate::datamodel::{BoxF, Detection};

use super::DecoderError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl Anchor {
    pub fn to_box(&self) -> BoxF {
        BoxF {
            min: [0, 1, 2].map(|i| self.center[i] - 0.5 * self.size[i]),
            max: [0, 1, 2].map(|i| self.center[i] + 0.5 * self.size[i]),
        }
    }
}

/// One cubic anchor per scale at every cell of every level, ordered
/// level-major, then `z, y, x`, then scale. `levels[l]` is `(extent, stride)`.
pub fn generate_anchors(levels: &[([usize; 3], usize)], scales: &[Vec<f64>]) -> Vec<Anchor> {
    let mut out = Vec::new();
    for (l, &(extent, stride)) in levels.iter().enumerate() {
        let st = stride as f64;
        for z in 0..extent[0] {
            for y in 0..extent[1] {
                for x in 0..extent[2] {
                    let center = [z, y, x].map(|v| (v as f64 + 0.5) * st);
                    for &s in &scales[l] {
                        out.push(Anchor {
                            center,
                            size: [s * st; 3],
                        });
                    }
                }
            }
        }
    }
    out
}

/// Offsets of `gt` relative to `anchor`: `(Δcenter / size_a, ln(size / size_a))` per axis.
pub fn encode_box(gt: &BoxF, anchor: &Anchor) -> Result<[f64; 6], DecoderError> {
    let (c, s) = (gt.center(), gt.size());
    if s.iter().chain(&anchor.size).any(|&v| v <= 0.0) {
        return Err(DecoderError::NonPositiveSize);
    }
    let mut d = [0.0; 6];
    for i in 0..3 {
        d[i] = (c[i] - anchor.center[i]) / anchor.size[i];
        d[i + 3] = (s[i] / anchor.size[i]).ln();
    }
    Ok(d)
}

pub fn decode_box(d: &[f64; 6], anchor: &Anchor) -> BoxF {
    let mut b = BoxF { min: [0.0; 3], max: [0.0; 3] };
    for i in 0..3 {
        let c = anchor.center[i] + d[i] * anchor.size[i];
        let s = anchor.size[i] * d[i + 3].exp();
        b.min[i] = c - 0.5 * s;
        b.max[i] = c + 0.5 * s;
    }
    b
}

pub fn iou_3d(a: &BoxF, b: &BoxF) -> f64 {
    let inter: f64 = (0..3)
        .map(|i| (a.max[i].min(b.max[i]) - a.min[i].max(b.min[i])).max(0.0))
        .product();
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

/// Thresholds IoU with the single gt box; the best anchor is always positive.
pub fn match_anchors(anchors: &[Anchor], gt: &BoxF, iou_pos: f64, iou_neg: f64) -> Vec<AnchorLabel> {
    let ious: Vec<f64> = anchors.iter().map(|a| iou_3d(&a.to_box(), gt)).collect();
    let mut labels: Vec<AnchorLabel> = ious
        .iter()
        .map(|&v| {
            if v >= iou_pos {
                AnchorLabel::Positive
            } else if v < iou_neg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    let best = ious
        .iter()
        .enumerate()
        .fold(None, |acc: Option<(usize, f64)>, (i, &v)| match acc {
            Some((_, b)) if b >= v => acc,
            _ => Some((i, v)),
        });
    if let Some((i, _)) = best {
        labels[i] = AnchorLabel::Positive;
    }
    labels
}

/// Greedy suppression in descending score order (ties keep input order).
pub fn nms(dets: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.iter().all(|k| iou_3d(&k.box_, &dets[i].box_) <= iou_thr) {
            kept.push(dets[i]);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(min: [f64; 3], max: [f64; 3]) -> BoxF {
        BoxF { min, max }
    }

    #[test]
    fn anchor_count_for_96() {
        let levels: Vec<_> = [24, 12, 6, 3].iter().zip([4, 8, 16, 32]).map(|(&e, s)| ([e; 3], s)).collect();
        let a = generate_anchors(&levels, &vec![vec![4.0]; 4]);
        assert_eq!(a.len(), 15_795);
        assert!(a.iter().all(|a| a.center.iter().all(|&c| c > 0.0 && c < 96.0)));
        assert_eq!(a, generate_anchors(&levels, &vec![vec![4.0]; 4]));
    }

    #[test]
    fn zero_deltas_give_anchor() {
        let a = Anchor { center: [5.0, 6.0, 7.0], size: [4.0, 4.0, 4.0] };
        assert_eq!(decode_box(&[0.0; 6], &a), a.to_box());
        assert_eq!(encode_box(&a.to_box(), &a).unwrap(), [0.0; 6]);
        assert!(encode_box(&b([0.0; 3], [0.0, 1.0, 1.0]), &a).is_err());
    }

    #[test]
    fn iou_half_overlap() {
        let x = b([0.0; 3], [2.0; 3]);
        let y = b([1.0, 0.0, 0.0], [3.0, 2.0, 2.0]);
        assert!((iou_3d(&x, &y) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou_3d(&x, &x), 1.0);
        assert_eq!(iou_3d(&x, &b([5.0; 3], [6.0; 3])), 0.0);
    }

    #[test]
    fn tiny_gt_gets_one_forced_positive() {
        let levels = vec![([4; 3], 4)];
        let anchors = generate_anchors(&levels, &[vec![4.0]]);
        let gt = b([1.0; 3], [2.0; 3]);
        let labels = match_anchors(&anchors, &gt, 0.5, 0.4);
        assert_eq!(labels.iter().filter(|&&l| l == AnchorLabel::Positive).count(), 1);
        assert_eq!(labels[0], AnchorLabel::Positive);
    }

    #[test]
    fn nms_duplicates_and_disjoint() {
        let d = |s: f64, o: f64| Detection { box_: b([o; 3], [o + 2.0; 3]), score: s };
        let kept = nms(&[d(0.8, 0.0), d(0.9, 0.0)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(nms(&[d(0.8, 0.0), d(0.9, 5.0)], 0.5).len(), 2);
    }
}
