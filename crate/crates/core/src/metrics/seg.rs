//! Overlap and boundary-distance metrics on binary volumes.

use ndarray::{Array3, ArrayView3};

/// `2|P∩G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice_metric(pred: &ArrayView3<u8>, gt: &ArrayView3<u8>) -> f64 {
    assert_eq!(pred.shape(), gt.shape(), "dice_metric shape mismatch");
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        let (a, b) = (a > 0, b > 0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

/// Foreground voxels with a background face neighbour or on the volume border.
pub fn boundary(mask: &ArrayView3<u8>) -> Vec<[usize; 3]> {
    let (d, h, w) = mask.dim();
    let mut out = Vec::new();
    for ((z, y, x), &v) in mask.indexed_iter() {
        if v == 0 {
            continue;
        }
        let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
        if edge
            || mask[[z - 1, y, x]] == 0
            || mask[[z + 1, y, x]] == 0
            || mask[[z, y - 1, x]] == 0
            || mask[[z, y + 1, x]] == 0
            || mask[[z, y, x - 1]] == 0
            || mask[[z, y, x + 1]] == 0
        {
            out.push([z, y, x]);
        }
    }
    out
}

const FAR: f64 = f64::INFINITY;

/// Exact squared distance transform along one line (lower envelope of parabolas).
fn edt_line(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq == FAR {
            continue;
        }
        loop {
            let Some(&p) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let (qf, pf) = (q as f64, p as f64);
            let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
            if s <= *z.last().expect("paired with v") {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site.
pub fn squared_edt(sites: &Array3<bool>) -> Array3<f64> {
    let mut dist = sites.mapv(|s| if s { 0.0 } else { FAR });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = dist.shape()[axis];
        let mut f = vec![0.0; len];
        let mut out = vec![0.0; len];
        for mut lane in dist.lanes_mut(ndarray::Axis(axis)) {
            for (a, b) in f.iter_mut().zip(lane.iter()) {
                *a = *b;
            }
            edt_line(&f, &mut out, &mut v, &mut z);
            for (a, b) in lane.iter_mut().zip(&out) {
                *a = *b;
            }
        }
    }
    dist
}

/// Linear-interpolated percentile of unsorted values.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

fn directed(from: &[[usize; 3]], to_dist: &Array3<f64>, p: f64) -> f64 {
    let mut d: Vec<f64> = from.iter().map(|&[z, y, x]| to_dist[[z, y, x]].sqrt()).collect();
    percentile(&mut d, p)
}

/// Symmetric percentile Hausdorff distance between mask boundaries, in
/// voxels. `None` when either mask is empty.
pub fn hausdorff(pred: &ArrayView3<u8>, gt: &ArrayView3<u8>, percentile: f64) -> Option<f64> {
    assert_eq!(pred.shape(), gt.shape(), "hausdorff shape mismatch");
    let (bp, bg) = (boundary(pred), boundary(gt));
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let sites = |b: &[[usize; 3]]| {
        let mut s = Array3::from_elem(pred.raw_dim(), false);
        for &[z, y, x] in b {
            s[[z, y, x]] = true;
        }
        s
    };
    let dp = squared_edt(&sites(&bp));
    let dg = squared_edt(&sites(&bg));
    Some(directed(&bp, &dg, percentile).max(directed(&bg, &dp, percentile)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_points_five_apart() {
        let mut a = Array3::<u8>::zeros((1, 1, 8));
        let mut b = a.clone();
        a[[0, 0, 1]] = 1;
        b[[0, 0, 6]] = 1;
        for p in [50.0, 95.0, 100.0] {
            assert_eq!(hausdorff(&a.view(), &b.view(), p), Some(5.0));
        }
        assert_eq!(hausdorff(&a.view(), &a.view(), 95.0), Some(0.0));
        assert_eq!(hausdorff(&a.view(), &Array3::zeros((1, 1, 8)).view(), 95.0), None);
    }

    #[test]
    fn dice_conventions() {
        let z = Array3::<u8>::zeros((2, 2, 2));
        let mut a = z.clone();
        a[[0, 0, 0]] = 1;
        let mut b = z.clone();
        b[[1, 1, 1]] = 1;
        assert_eq!(dice_metric(&z.view(), &z.view()), 1.0);
        assert_eq!(dice_metric(&a.view(), &z.view()), 0.0);
        assert_eq!(dice_metric(&a.view(), &b.view()), 0.0);
        assert_eq!(dice_metric(&a.view(), &a.view()), 1.0);
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let m = Array3::<u8>::ones((3, 3, 3));
        assert_eq!(boundary(&m.view()).len(), 26);
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 50.0), 2.5);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
    }
}
