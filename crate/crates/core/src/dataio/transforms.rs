use log::warn;
use ndarray::{s, Array4, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::datamodel::{BoundingBox3D, VolumeSample};

/// Tight half-open bound of the nonzero voxels.
pub fn derive_bbox(mask: &ArrayView3<'_, u8>) -> Result<BoundingBox3D, DataError> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        any = true;
        for (i, c) in [z, y, x].into_iter().enumerate() {
            lo[i] = lo[i].min(c);
            hi[i] = hi[i].max(c + 1);
        }
    }
    if any {
        Ok(BoundingBox3D::new(lo, hi))
    } else {
        Err(DataError::NoForeground)
    }
}

/// Per-channel z-score over nonzero voxels; zeros stay zero. A channel whose
/// nonzero voxels have no spread becomes all zeros.
pub fn normalize(image: &Array4<f32>) -> Array4<f32> {
    let mut out = image.clone();
    for (c, mut ch) in out.outer_iter_mut().enumerate() {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for &v in ch.iter().filter(|&&v| v != 0.0) {
            n += 1;
            sum += v as f64;
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        let var = ch
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        if var <= f64::EPSILON * mean.abs().max(1.0) {
            warn!("normalize: channel {c} has zero variance on its support; zeroed");
            ch.fill(0.0);
            continue;
        }
        let sd = var.sqrt();
        ch.mapv_inplace(|v| if v != 0.0 { ((v as f64 - mean) / sd) as f32 } else { 0.0 });
    }
    out
}

/// Offsets of a centred crop: `floor((extent - size) / 2)` per axis.
pub fn center_offsets(extent: [usize; 3], size: [usize; 3]) -> Result<[usize; 3], DataError> {
    if (0..3).any(|i| size[i] > extent[i] || size[i] == 0) {
        return Err(DataError::CropTooLarge { extent, size });
    }
    Ok([0, 1, 2].map(|i| (extent[i] - size[i]) / 2))
}

/// Centred crop of image and mask; the box is re-derived from the cropped WT.
/// A crop that removes all of WT yields [`DataError::Unusable`].
pub fn center_crop(sample: &VolumeSample, size: [usize; 3]) -> Result<VolumeSample, DataError> {
    let o = center_offsets(sample.spatial_shape(), size)?;
    let sl = s![.., o[0]..o[0] + size[0], o[1]..o[1] + size[1], o[2]..o[2] + size[2]];
    let image = sample.image.slice(sl).to_owned();
    let mask = sample.mask.slice(sl).to_owned();
    let box_ = derive_bbox(&mask.index_axis(Axis(0), 0))
        .map_err(|_| DataError::Unusable(sample.case_id.clone()))?;
    Ok(VolumeSample {
        case_id: sample.case_id.clone(),
        image,
        mask,
        grade: sample.grade,
        box_,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Flip probability for each of the three spatial axes.
    pub flip_prob: [f64; 3],
    pub rotate_prob: f64,
    /// Allowed quarter turns in the axial `(y, x)` plane.
    pub rotate_quarters: Vec<u8>,
    pub intensity_shift_range: (f64, f64),
    pub intensity_scale_range: (f64, f64),
    /// Spatial size of the centre crop applied before augmentation.
    pub crop_size: [usize; 3],
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: [0.5; 3],
            rotate_prob: 0.75,
            rotate_quarters: vec![1, 2, 3],
            intensity_shift_range: (-0.1, 0.1),
            intensity_scale_range: (-0.1, 0.1),
            crop_size: [96; 3],
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: [0.0; 3],
            rotate_prob: 0.0,
            rotate_quarters: vec![1, 2, 3],
            intensity_shift_range: (0.0, 0.0),
            intensity_scale_range: (0.0, 0.0),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !self.flip_prob.iter().all(|&p| p_ok(p)) || !p_ok(self.rotate_prob) {
            return Err("augment: probabilities must lie in [0, 1]".into());
        }
        if self.intensity_shift_range.0 > self.intensity_shift_range.1
            || self.intensity_scale_range.0 > self.intensity_scale_range.1
        {
            return Err("augment: empty intensity range".into());
        }
        if self.rotate_prob > 0.0 && self.rotate_quarters.is_empty() {
            return Err("augment: rotation enabled with no allowed angles".into());
        }
        Ok(())
    }
}

fn rebox(mut s: VolumeSample) -> VolumeSample {
    s.box_ = derive_bbox(&s.wt()).expect("spatial transforms keep WT nonempty");
    s
}

/// Mirrors image and mask along spatial axis `axis` (0 = z, 1 = y, 2 = x).
pub fn flip_axis(sample: &VolumeSample, axis: usize) -> VolumeSample {
    let mut s = sample.clone();
    s.image.invert_axis(Axis(axis + 1));
    s.mask.invert_axis(Axis(axis + 1));
    s.image = s.image.as_standard_layout().into_owned();
    s.mask = s.mask.as_standard_layout().into_owned();
    rebox(s)
}

/// Rotates by `quarters` × 90° in the axial `(y, x)` plane.
pub fn rotate_axial(sample: &VolumeSample, quarters: u8) -> VolumeSample {
    let mut s = sample.clone();
    for _ in 0..quarters % 4 {
        // (y, x) -> (x, W-1-y): swap the two axes, then mirror the new y
        s.image.swap_axes(2, 3);
        s.image.invert_axis(Axis(2));
        s.mask.swap_axes(2, 3);
        s.mask.invert_axis(Axis(2));
    }
    s.image = s.image.as_standard_layout().into_owned();
    s.mask = s.mask.as_standard_layout().into_owned();
    rebox(s)
}

/// Random flips, axial rotation and per-channel intensity shift/scale. Draws
/// happen in a fixed order so a seeded `rng` reproduces the output exactly.
pub fn augment<R: Rng + ?Sized>(sample: &VolumeSample, cfg: &AugmentConfig, rng: &mut R) -> VolumeSample {
    let mut s = sample.clone();
    for axis in 0..3 {
        if rng.random::<f64>() < cfg.flip_prob[axis] {
            s = flip_axis(&s, axis);
        }
    }
    if rng.random::<f64>() < cfg.rotate_prob && !cfg.rotate_quarters.is_empty() {
        let k = cfg.rotate_quarters[rng.random_range(0..cfg.rotate_quarters.len())];
        s = rotate_axial(&s, k);
    }
    let draw = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
    for mut ch in s.image.outer_iter_mut() {
        let shift = draw(rng, cfg.intensity_shift_range) as f32;
        let scale = 1.0 + draw(rng, cfg.intensity_scale_range) as f32;
        if shift != 0.0 || scale != 1.0 {
            ch.mapv_inplace(|v| (v + shift) * scale);
        }
    }
    s
}
