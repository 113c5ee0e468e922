//! BraTS-layout NIfTI reading and writing.
//!
//! A case folder holds `<id>_t1.nii.gz`, `<id>_t1ce.nii.gz`, `<id>_t2.nii.gz`,
//! `<id>_flair.nii.gz` and `<id>_seg.nii.gz`. Volumes are reoriented to RAS and
//! their axes reversed so arrays are indexed `(z, y, x)`.

use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{Array3, Array4, ArrayD, Axis, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::transforms::derive_bbox;
use super::DataError;
use crate::datamodel::{Grade, VolumeSample, MODALITIES};

fn volume_path(dir: &Path, case_id: &str, suffix: &str) -> Result<PathBuf, DataError> {
    let gz = dir.join(format!("{case_id}_{suffix}.nii.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    let plain = dir.join(format!("{case_id}_{suffix}.nii"));
    if plain.exists() {
        return Ok(plain);
    }
    Err(DataError::MissingFile(gz))
}

/// Voxel-to-world 3×3 block: sform if set, else qform, else the voxel sizes.
fn orientation(h: &NiftiHeader) -> [[f64; 3]; 3] {
    let pix = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64];
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        return rows.map(|r| [r[0] as f64, r[1] as f64, r[2] as f64]);
    }
    if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let scale = [pix[0], pix[1], pix[2] * qfac];
        return r.map(|row| [row[0] * scale[0], row[1] * scale[1], row[2] * scale[2]]);
    }
    [[pix[0], 0.0, 0.0], [0.0, pix[1], 0.0], [0.0, 0.0, pix[2]]]
}

/// Permutes and flips voxel axes of an `[i, j, k]` array so they point R, A, S.
fn to_ras(data: ArrayD<f32>, m: &[[f64; 3]; 3], path: &Path) -> Result<Array3<f32>, DataError> {
    let data = data
        .into_dimensionality::<Ix3>()
        .map_err(|_| DataError::Nifti {
            path: path.to_path_buf(),
            message: "expected a 3D volume".into(),
        })?;
    // world axis each voxel axis is most aligned with
    let mut perm = [usize::MAX; 3];
    let mut flip = [false; 3];
    for j in 0..3 {
        let i = (0..3)
            .max_by(|&a, &b| m[a][j].abs().total_cmp(&m[b][j].abs()))
            .expect("three axes");
        if perm[i] != usize::MAX {
            return Err(DataError::Nifti {
                path: path.to_path_buf(),
                message: "degenerate orientation".into(),
            });
        }
        perm[i] = j;
        flip[i] = m[i][j] < 0.0;
    }
    let mut out = data.permuted_axes(perm);
    for (i, &f) in flip.iter().enumerate() {
        if f {
            out.invert_axis(Axis(i));
        }
    }
    Ok(out)
}

fn read_volume(path: &Path) -> Result<Array3<f32>, DataError> {
    let nerr = |e: nifti::NiftiError| DataError::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let obj = ReaderOptions::new().read_file(path).map_err(nerr)?;
    let m = orientation(obj.header());
    let mut arr = obj.into_volume().into_ndarray::<f32>().map_err(nerr)?;
    // drop trailing singleton axes (e.g. a time axis of length 1)
    while arr.ndim() > 3 && arr.shape()[arr.ndim() - 1] == 1 {
        let last = arr.ndim() - 1;
        arr = arr.index_axis_move(Axis(last), 0);
    }
    let ras = to_ras(arr, &m, path)?;
    // [x, y, z] -> [z, y, x]
    Ok(ras.reversed_axes().as_standard_layout().into_owned())
}

/// Groups raw labels {1, 2, 4} into WT (1, 2, 4), TC (1, 4) and ET (4).
pub fn group_labels(labels: &Array3<f32>, path: &Path) -> Result<Array4<u8>, DataError> {
    let (d, h, w) = labels.dim();
    let mut mask = Array4::<u8>::zeros((3, d, h, w));
    for ((z, y, x), &v) in labels.indexed_iter() {
        let (wt, tc, et) = match v {
            v if v == 0.0 => continue,
            v if v == 1.0 => (1, 1, 0),
            v if v == 2.0 => (1, 0, 0),
            v if v == 4.0 => (1, 1, 1),
            value => {
                return Err(DataError::UnknownLabel {
                    path: path.to_path_buf(),
                    value,
                })
            }
        };
        mask[[0, z, y, x]] = wt;
        mask[[1, z, y, x]] = tc;
        mask[[2, z, y, x]] = et;
    }
    Ok(mask)
}

/// Inverse of [`group_labels`] for nested masks.
fn ungroup(mask: &Array4<u8>) -> Array3<u8> {
    let (_, d, h, w) = mask.dim();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        match (mask[[0, z, y, x]], mask[[1, z, y, x]], mask[[2, z, y, x]]) {
            (_, _, 1) => 4,
            (_, 1, _) => 1,
            (1, _, _) => 2,
            _ => 0,
        }
    })
}

const GRADE_FILE: &str = "grade.txt";

/// Grade from a `grade.txt` next to the volumes, or from an enclosing
/// `HGG`/`LGG` folder.
fn find_grade(dir: &Path) -> Option<Grade> {
    if let Ok(text) = std::fs::read_to_string(dir.join(GRADE_FILE)) {
        if let Ok(g) = text.parse() {
            return Some(g);
        }
    }
    dir.ancestors()
        .filter_map(|p| p.file_name()?.to_str())
        .find_map(|n| n.parse().ok())
}

fn check_shape(shape: &mut Option<Vec<usize>>, found: &[usize], path: &Path) -> Result<(), DataError> {
    match shape {
        Some(s) if s.as_slice() != found => Err(DataError::ShapeMismatch {
            path: path.to_path_buf(),
            expected: s.clone(),
            found: found.to_vec(),
        }),
        Some(_) => Ok(()),
        None => {
            *shape = Some(found.to_vec());
            Ok(())
        }
    }
}

/// The four modalities of a case as `[4, D, H, W]`; no label file is read.
pub fn load_image(dir: &Path, case_id: &str) -> Result<Array4<f32>, DataError> {
    let mut channels = Vec::with_capacity(4);
    let mut shape = None;
    for m in MODALITIES {
        let path = volume_path(dir, case_id, m)?;
        let v = read_volume(&path)?;
        check_shape(&mut shape, v.shape(), &path)?;
        channels.push(v);
    }
    let views: Vec<_> = channels.iter().map(|c| c.view().insert_axis(Axis(0))).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal shapes checked"))
}

/// Reads one case folder. Fails on a missing modality, mismatched shapes or
/// an unknown label value.
pub fn load_case(dir: &Path, case_id: &str) -> Result<VolumeSample, DataError> {
    let image = load_image(dir, case_id)?;
    let seg_path = volume_path(dir, case_id, "seg")?;
    let labels = read_volume(&seg_path)?;
    check_shape(&mut Some(image.shape()[1..].to_vec()), labels.shape(), &seg_path)?;
    let mask = group_labels(&labels, &seg_path)?;
    let box_ = derive_bbox(&mask.index_axis(Axis(0), 0)).unwrap_or_else(|_| {
        warn!("case {case_id}: empty WT; box set to the first voxel");
        crate::datamodel::BoundingBox3D::new([0; 3], [1; 3])
    });
    let grade = find_grade(dir).unwrap_or_else(|| {
        warn!("case {case_id}: no grade found next to the volumes; assuming HGG");
        Grade::Hgg
    });
    Ok(VolumeSample {
        case_id: case_id.to_string(),
        image,
        mask,
        grade,
        box_,
    })
}

macro_rules! writer {
    ($name:ident, $t:ty) => {
        fn $name(path: &Path, data: &Array3<$t>) -> Result<(), DataError> {
            let header = NiftiHeader::default();
            WriterOptions::new(path)
                .reference_header(&header)
                .write_nifti(&data.view().reversed_axes())
                .map_err(|e| DataError::Nifti {
                    path: path.to_path_buf(),
                    message: e.to_string(),
                })
        }
    };
}

writer!(write_f32, f32);
writer!(write_u8, u8);

/// Writes region masks `[3, D, H, W]` as a single {0, 1, 2, 4} label volume.
pub fn write_label_map(path: &Path, mask: &Array4<u8>) -> Result<(), DataError> {
    write_u8(path, &ungroup(mask))
}

/// Writes a case in the layout [`load_case`] reads (labels re-encoded as {1, 2, 4}).
pub fn write_case(sample: &VolumeSample, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let id = &sample.case_id;
    for (c, m) in MODALITIES.iter().enumerate() {
        let vol = sample.image.index_axis(Axis(0), c).to_owned();
        write_f32(&dir.join(format!("{id}_{m}.nii.gz")), &vol)?;
    }
    write_u8(&dir.join(format!("{id}_seg.nii.gz")), &ungroup(&sample.mask))?;
    std::fs::write(dir.join(GRADE_FILE), sample.grade.as_str()).map_err(|source| DataError::Io {
        path: dir.join(GRADE_FILE),
        source,
    })
}
