//! Volume ingestion, label grouping, box derivation, preprocessing,
//! augmentation and synthetic phantom datasets.

mod nifti_io;
mod phantom;
mod transforms;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use nifti_io::{group_labels, load_case, load_image, write_case, write_label_map};
pub use phantom::{synth_case, GradeRule, PhantomSpec};
pub use transforms::{
    augment, center_crop, center_offsets, derive_bbox, flip_axis, normalize, rotate_axial, AugmentConfig,
};

use crate::datamodel::{BoundingBox3D, Grade, VolumeSample};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("mask has no foreground voxels")]
    NoForeground,
    #[error("crop size {size:?} exceeds volume extent {extent:?}")]
    CropTooLarge { extent: [usize; 3], size: [usize; 3] },
    #[error("case {0}: crop removes the whole tumour")]
    Unusable(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: spatial shape {found:?} differs from {expected:?}")]
    ShapeMismatch {
        path: PathBuf,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path}: unknown label value {value}")]
    UnknownLabel { path: PathBuf, value: f32 },
    #[error("{path}: {message}")]
    Nifti { path: PathBuf, message: String },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// File name of the per-dataset case list.
pub const MANIFEST_FILE: &str = "manifest.csv";

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub grade: Grade,
    pub min_z: usize,
    pub min_y: usize,
    pub min_x: usize,
    pub max_z: usize,
    pub max_y: usize,
    pub max_x: usize,
}

impl ManifestEntry {
    pub fn from_sample(s: &VolumeSample) -> Self {
        let (lo, hi) = (s.box_.min_corner, s.box_.max_corner);
        ManifestEntry {
            case_id: s.case_id.clone(),
            grade: s.grade,
            min_z: lo[0],
            min_y: lo[1],
            min_x: lo[2],
            max_z: hi[0],
            max_y: hi[1],
            max_x: hi[2],
        }
    }

    pub fn box_(&self) -> BoundingBox3D {
        BoundingBox3D::new([self.min_z, self.min_y, self.min_x], [self.max_z, self.max_y, self.max_x])
    }
}

pub fn write_manifest(root: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let path = root.join(MANIFEST_FILE);
    let err = |e: csv::Error| DataError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    for e in entries {
        w.serialize(e).map_err(err)?;
    }
    w.flush().map_err(|source| DataError::Io {
        path: path.clone(),
        source,
    })
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(DataError::MissingFile(path));
    }
    let err = |e: csv::Error| DataError::Manifest {
        path: path.clone(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(&path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}

/// Independent RNG stream per case, keyed by the dataset seed and case id.
pub fn case_rng(seed: u64, case_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(case_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Writes `n` phantoms (one folder per case) plus the manifest under `root`.
pub fn synth_dataset(root: &Path, n: usize, spec: &PhantomSpec, seed: u64) -> Result<Vec<ManifestEntry>, DataError> {
    std::fs::create_dir_all(root).map_err(|source| DataError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("Phantom_{i:04}");
        let s = synth_case(spec, &id, &mut case_rng(seed, &id));
        write_case(&s, &root.join(&id))?;
        entries.push(ManifestEntry::from_sample(&s));
    }
    write_manifest(root, &entries)?;
    Ok(entries)
}

/// Loads every case listed in the manifest under `root`.
pub fn load_dataset(root: &Path) -> Result<Vec<VolumeSample>, DataError> {
    read_manifest(root)?
        .iter()
        .map(|e| load_case(&root.join(&e.case_id), &e.case_id).map(|mut s| {
            s.grade = e.grade;
            s
        }))
        .collect()
}

/// Centre crop and normalisation of an unlabelled image, matching [`preprocess`].
pub fn preprocess_image(image: &ndarray::Array4<f32>, crop: [usize; 3], normalize_after_crop: bool) -> Result<ndarray::Array4<f32>, DataError> {
    let s = image.shape();
    let o = center_offsets([s[1], s[2], s[3]], crop)?;
    let cut = |im: &ndarray::Array4<f32>| {
        im.slice(ndarray::s![.., o[0]..o[0] + crop[0], o[1]..o[1] + crop[1], o[2]..o[2] + crop[2]]).to_owned()
    };
    Ok(if normalize_after_crop {
        normalize(&cut(image))
    } else {
        cut(&normalize(image))
    })
}

/// Crop then (optionally) normalise: the fixed preprocessing applied to every case.
pub fn preprocess(sample: &VolumeSample, crop: [usize; 3], normalize_after_crop: bool) -> Result<VolumeSample, DataError> {
    if normalize_after_crop {
        let mut c = center_crop(sample, crop)?;
        c.image = normalize(&c.image);
        Ok(c)
    } else {
        let mut s = sample.clone();
        s.image = normalize(&s.image);
        center_crop(&s, crop)
    }
}
