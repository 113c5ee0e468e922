//! Task losses and their weighted sum.

use autograd::{Real, Tensor};
use log::warn;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::datamodel::BoxF;
use crate::decoders::{encode_box, match_anchors, Anchor, AnchorLabel, DetOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub focal_gamma: f64,
    /// Weight of the HGG class in the grading focal loss.
    pub focal_alpha: f64,
    /// Derive `focal_alpha` from the training set's class balance instead.
    pub focal_alpha_from_frequency: bool,
    pub det_focal_gamma: f64,
    pub det_focal_alpha: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            dice_smooth: 1e-5,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            focal_alpha_from_frequency: false,
            det_focal_gamma: 2.0,
            det_focal_alpha: 0.25,
            smooth_l1_beta: 1.0,
        }
    }
}

/// Inverse-frequency weight for the HGG class: the LGG share of the data.
pub fn frequency_alpha(n_hgg: usize, n_lgg: usize) -> f64 {
    let n = n_hgg + n_lgg;
    if n == 0 {
        0.5
    } else {
        n_lgg as f64 / n as f64
    }
}

/// Soft Dice loss averaged over samples and channels. `probs` and `target`
/// are `[N, C, ...]`.
pub fn dice_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Tensor<T> {
    assert_eq!(probs.shape(), target.shape(), "dice_loss shape mismatch");
    let axes: Vec<usize> = (2..probs.ndim()).collect();
    let s = T::lit(smooth);
    let inter = probs.mul(target).sum_axes(&axes).scale(T::lit(2.0)).add_scalar(s);
    let denom = probs.sum_axes(&axes).add(&target.sum_axes(&axes)).add_scalar(s);
    inter.div(&denom).one_minus().mean_all()
}

/// Focal loss on `[N, K]` logits; `alpha` weights class 1 (HGG) and
/// `1 − alpha` the others. Mean over the batch.
pub fn focal_loss<T: Real>(logits: &Tensor<T>, targets: &[usize], gamma: f64, alpha: f64) -> Tensor<T> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(n, targets.len(), "one target per row");
    let mut onehot = ArrayD::<T>::zeros(IxDyn(&[n, k]));
    let mut at = ArrayD::<T>::zeros(IxDyn(&[n]));
    for (i, &t) in targets.iter().enumerate() {
        onehot[[i, t]] = T::one();
        at[[i]] = T::lit(if t == 1 { alpha } else { 1.0 - alpha });
    }
    let logpt = logits.log_softmax().mul(&Tensor::new(onehot)).sum_axes(&[1]);
    let modulator = logpt.exp().one_minus().powf(T::lit(gamma));
    modulator.mul(&logpt).mul(&Tensor::new(at)).neg().mean_all()
}

/// Elementwise Huber-style loss averaged over all elements; 0 (with a
/// warning) when there is nothing to average.
pub fn smooth_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, beta: f64) -> Tensor<T> {
    assert_eq!(pred.shape(), target.shape(), "smooth_l1 shape mismatch");
    if pred.numel() == 0 {
        warn!("smooth_l1 called with no positive anchors; returning 0");
        return Tensor::scalar(T::zero());
    }
    pred.sub(target).smooth_l1(T::lit(beta)).mean_all()
}

/// Sigmoid focal loss summed over anchors with nonzero `weight`, divided by `norm`.
pub fn sigmoid_focal<T: Real>(
    logits: &Tensor<T>,
    targets: &ArrayD<T>,
    weight: &ArrayD<T>,
    gamma: f64,
    alpha: f64,
    norm: f64,
) -> Tensor<T> {
    let t = Tensor::new(targets.clone());
    let p = logits.sigmoid();
    // BCE with logits: softplus(x) − x·t
    let ce = logits.softplus().sub(&logits.mul(&t));
    let pt = p.mul(&t).add(&p.one_minus().mul(&t.one_minus()));
    let at = targets.mapv(|v| T::lit(alpha) * v + T::lit(1.0 - alpha) * (T::one() - v));
    let w = Tensor::new(at * weight);
    pt.one_minus()
        .powf(T::lit(gamma))
        .mul(&ce)
        .mul(&w)
        .sum_all()
        .scale(T::lit(1.0 / norm.max(1.0)))
}

/// Per-anchor training targets for one sample.
pub struct DetTargets<T: Real> {
    pub labels: Vec<AnchorLabel>,
    /// 1 for positives.
    pub objectness: ArrayD<T>,
    /// 0 for ignored anchors.
    pub weight: ArrayD<T>,
    pub positives: Vec<usize>,
    /// Encoded deltas of the positives, `[P, 6]`.
    pub deltas: ArrayD<T>,
}

pub fn det_targets<T: Real>(anchors: &[Anchor], gt: &BoxF, iou_pos: f64, iou_neg: f64) -> DetTargets<T> {
    let labels = match_anchors(anchors, gt, iou_pos, iou_neg);
    let n = anchors.len();
    let mut objectness = ArrayD::<T>::zeros(IxDyn(&[n]));
    let mut weight = ArrayD::<T>::zeros(IxDyn(&[n]));
    let mut positives = Vec::new();
    let mut deltas = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive => {
                objectness[[i]] = T::one();
                weight[[i]] = T::one();
                positives.push(i);
                let d = encode_box(gt, &anchors[i]).expect("gt and anchors have positive size");
                deltas.extend(d.iter().map(|&v| T::lit(v)));
            }
            AnchorLabel::Negative => weight[[i]] = T::one(),
            AnchorLabel::Ignore => {}
        }
    }
    let p = positives.len();
    DetTargets {
        labels,
        objectness,
        weight,
        positives,
        deltas: ArrayD::from_shape_vec(IxDyn(&[p, 6]), deltas).expect("6 per positive"),
    }
}

/// Objectness focal loss (normalised by the positive count) plus smooth-L1
/// on positive deltas, averaged over the batch.
pub fn detection_loss<T: Real>(out: &DetOutput<T>, targets: &[DetTargets<T>], cfg: &LossConfig) -> Tensor<T> {
    let n = out.logits.shape()[0];
    assert_eq!(n, targets.len(), "one target set per sample");
    let a = out.logits.shape()[1];
    let mut total: Option<Tensor<T>> = None;
    for (i, t) in targets.iter().enumerate() {
        let logits = out.logits.narrow(0, i, 1).reshape(&[a]);
        let cls = sigmoid_focal(
            &logits,
            &t.objectness,
            &t.weight,
            cfg.det_focal_gamma,
            cfg.det_focal_alpha,
            t.positives.len() as f64,
        );
        let deltas = out.deltas.narrow(0, i, 1).reshape(&[a, 6]).index_select0(&t.positives);
        let reg = smooth_l1(&deltas, &Tensor::new(t.deltas.clone()), cfg.smooth_l1_beta);
        let l = cls.add(&reg);
        total = Some(match total {
            Some(acc) => acc.add(&l),
            None => l,
        });
    }
    total.expect("nonempty batch").scale(T::lit(1.0 / n as f64))
}

/// Scalar losses of one step and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub seg: f64,
    pub cls: f64,
    pub det: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn parts(&self) -> [f64; 3] {
        [self.seg, self.cls, self.det]
    }
}

/// `w1·L_seg + w2·L_cls + w3·L_det`, in the task order (seg, cls, det).
pub fn total_loss(parts: [f64; 3], w: [f64; 3]) -> LossBundle {
    LossBundle {
        seg: parts[0],
        cls: parts[1],
        det: parts[2],
        total: w[0] * parts[0] + w[1] * parts[1] + w[2] * parts[2],
    }
}

/// Differentiable weighted sum; tasks whose part is `None` are skipped.
pub fn weighted_total<T: Real>(parts: &[Option<Tensor<T>>; 3], w: &[Tensor<T>; 3]) -> Tensor<T> {
    let mut acc: Option<Tensor<T>> = None;
    for (p, wi) in parts.iter().zip(w) {
        if let Some(p) = p {
            let term = p.mul(wi);
            acc = Some(match acc {
                Some(a) => a.add(&term),
                None => term,
            });
        }
    }
    acc.unwrap_or_else(|| Tensor::scalar(T::zero()))
}
