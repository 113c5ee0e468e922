//! Domain types shared by every module.
//!
//! Spatial arrays are indexed `(z, y, x)`; channels come first. Boxes are
//! half-open in voxel index space.

use ndarray::{s, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

/// Number of image channels (T1, T1ce, T2, FLAIR).
pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];
/// Mask channels, outermost region first.
pub const REGIONS: [&str; 3] = ["WT", "TC", "ET"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Grade {
    #[serde(rename = "LGG")]
    Lgg,
    #[serde(rename = "HGG")]
    Hgg,
}

impl Grade {
    /// Class index used by the classifier: LGG = 0, HGG = 1.
    pub fn index(self) -> usize {
        match self {
            Grade::Lgg => 0,
            Grade::Hgg => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Grade::Hgg
        } else {
            Grade::Lgg
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Grade::Lgg => "LGG",
            Grade::Hgg => "HGG",
        }
    }
}

impl std::str::FromStr for Grade {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "HGG" => Ok(Grade::Hgg),
            "LGG" => Ok(Grade::Lgg),
            other => Err(format!("unknown grade {other:?}")),
        }
    }
}

impl std::fmt::Display for Grade {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned integer box; voxel `v` is inside iff `min <= v < max` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox3D {
    pub min_corner: [usize; 3],
    pub max_corner: [usize; 3],
}

impl BoundingBox3D {
    pub fn new(min_corner: [usize; 3], max_corner: [usize; 3]) -> Self {
        BoundingBox3D { min_corner, max_corner }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.max_corner[i].saturating_sub(self.min_corner[i]))
    }

    pub fn volume(&self) -> usize {
        self.extent().iter().product()
    }

    pub fn is_well_ordered(&self) -> bool {
        (0..3).all(|i| self.min_corner[i] < self.max_corner[i])
    }

    pub fn fits(&self, shape: [usize; 3]) -> bool {
        (0..3).all(|i| self.max_corner[i] <= shape[i])
    }

    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|i| self.min_corner[i] <= v[i] && v[i] < self.max_corner[i])
    }

    pub fn to_real(&self) -> BoxF {
        BoxF {
            min: self.min_corner.map(|v| v as f64),
            max: self.max_corner.map(|v| v as f64),
        }
    }
}

/// Real-valued box (corners may be fractional before rounding).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxF {
    pub fn volume(&self) -> f64 {
        (0..3).map(|i| (self.max[i] - self.min[i]).max(0.0)).product()
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.min[i] + self.max[i]))
    }

    pub fn size(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.max[i] - self.min[i])
    }

    pub fn is_well_ordered(&self) -> bool {
        (0..3).all(|i| self.min[i] <= self.max[i])
    }

    /// Clips to `[0, shape)` per axis.
    pub fn clip(&self, shape: [usize; 3]) -> BoxF {
        let c = |v: f64, i: usize| v.clamp(0.0, shape[i] as f64);
        BoxF {
            min: [0, 1, 2].map(|i| c(self.min[i], i)),
            max: [0, 1, 2].map(|i| c(self.max[i], i)),
        }
    }

    /// Nearest integer corners.
    pub fn round(&self) -> BoundingBox3D {
        BoundingBox3D {
            min_corner: self.min.map(|v| v.round().max(0.0) as usize),
            max_corner: self.max.map(|v| v.round().max(0.0) as usize),
        }
    }
}

/// One case: image `[4, D, H, W]`, region mask `[3, D, H, W]` with values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub case_id: String,
    pub image: Array4<f32>,
    pub mask: Array4<u8>,
    pub grade: Grade,
    pub box_: BoundingBox3D,
}

impl VolumeSample {
    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    pub fn wt(&self) -> ArrayView3<'_, u8> {
        self.mask.index_axis(Axis(0), 0)
    }
}

/// Classifier output for one case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradePrediction {
    /// `(LGG, HGG)` logits.
    pub logits: [f64; 2],
    /// Softmax probability of HGG.
    pub probability: f64,
}

impl GradePrediction {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let (e0, e1) = ((logits[0] - m).exp(), (logits[1] - m).exp());
        GradePrediction {
            logits,
            probability: e1 / (e0 + e1),
        }
    }

    pub fn grade(&self) -> Grade {
        if self.probability >= 0.5 {
            Grade::Hgg
        } else {
            Grade::Lgg
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box_: BoxF,
    pub score: f64,
}

/// Checks every sample invariant; returns one message per violation.
pub fn validate_sample(s: &VolumeSample) -> Vec<String> {
    let mut out = Vec::new();
    let ish = s.image.shape();
    let msh = s.mask.shape();
    if ish[0] != 4 {
        out.push(format!("image: expected 4 channels, found {}", ish[0]));
    }
    if msh[0] != 3 {
        out.push(format!("mask: expected 3 channels, found {}", msh[0]));
        return out;
    }
    if ish[1..] != msh[1..] {
        out.push(format!("shape: image {:?} vs mask {:?}", &ish[1..], &msh[1..]));
    }
    if s.mask.iter().any(|&v| v > 1) {
        out.push("mask: non-binary values".into());
    }
    let (wt, tc, et) = (
        s.mask.slice(s![0, .., .., ..]),
        s.mask.slice(s![1, .., .., ..]),
        s.mask.slice(s![2, .., .., ..]),
    );
    if ndarray::Zip::from(&tc).and(&wt).fold(false, |bad, &t, &w| bad || (t > 0 && w == 0)) {
        out.push("nesting: TC ⊄ WT".into());
    }
    if ndarray::Zip::from(&et).and(&tc).fold(false, |bad, &e, &t| bad || (e > 0 && t == 0)) {
        out.push("nesting: ET ⊄ TC".into());
    }
    match crate::dataio::derive_bbox(&wt) {
        Ok(b) if b != s.box_ => out.push(format!("box: {:?} differs from WT bound {:?}", s.box_, b)),
        Ok(_) => {}
        Err(_) => out.push("box inconsistent with empty WT".into()),
    }
    if !s.box_.is_well_ordered() {
        out.push("box: min corner not below max corner".into());
    }
    out
}
