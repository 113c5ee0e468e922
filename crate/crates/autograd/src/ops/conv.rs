//! 3D convolution, transposed convolution, pooling and upsampling over
//! `[N, C, D, H, W]` tensors.
//!
//! Convolutions lower to matrix products through im2col. The column buffer is
//! built a few output depth-planes at a time so large volumes stay within a
//! fixed memory budget.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use crate::{profile, Real, Tensor};

/// Upper bound on column-buffer elements per chunk.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    od: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn new(cin: usize, dims: [usize; 3], k: usize, stride: usize, pad: usize) -> Self {
        let out = |n: usize| {
            assert!(n + 2 * pad >= k, "kernel {k} larger than padded input {n}+2*{pad}");
            (n + 2 * pad - k) / stride + 1
        };
        Geom {
            cin,
            d: dims[0],
            h: dims[1],
            w: dims[2],
            k,
            stride,
            pad,
            od: out(dims[0]),
            oh: out(dims[1]),
            ow: out(dims[2]),
        }
    }

    fn in_len(&self) -> usize {
        self.d * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.od * self.oh * self.ow
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output depth-plane ranges whose column buffers fit the budget.
    fn chunks(&self) -> Vec<(usize, usize)> {
        let per_plane = self.rows() * self.oh * self.ow;
        let planes = (COL_BUDGET / per_plane.max(1)).clamp(1, self.od);
        (0..self.od)
            .step_by(planes)
            .map(|z0| (z0, (z0 + planes).min(self.od)))
            .collect()
    }

    /// Input coordinate for output index `o` and kernel offset `kk`, if inside.
    #[inline]
    fn src(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }

    /// Output x-range `[lo, hi)` whose input column for kernel offset `kx` is inside.
    #[inline]
    fn valid(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        let hi = if self.w + self.pad > kx { (self.w + self.pad - kx).div_ceil(s).min(self.ow) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Fills `cols` (`[rows, planes*oh*ow]`) for output planes `z0..z1`.
    fn im2col<T: Real>(&self, x: &[T], z0: usize, z1: usize, cols: &mut [T]) {
        let cs = (z1 - z0) * self.oh * self.ow;
        let k = self.k;
        for ci in 0..self.cin {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((ci * k + kz) * k + ky) * k + kx;
                        let dst = &mut cols[row * cs..(row + 1) * cs];
                        let mut idx = 0;
                        for oz in z0..z1 {
                            let Some(iz) = self.src(oz, kz, self.d) else {
                                dst[idx..idx + self.oh * self.ow].fill(T::zero());
                                idx += self.oh * self.ow;
                                continue;
                            };
                            for oy in 0..self.oh {
                                let Some(iy) = self.src(oy, ky, self.h) else {
                                    dst[idx..idx + self.ow].fill(T::zero());
                                    idx += self.ow;
                                    continue;
                                };
                                let base = ((ci * self.d + iz) * self.h + iy) * self.w;
                                let (lo, hi) = self.valid(kx);
                                let row = &mut dst[idx..idx + self.ow];
                                row[..lo].fill(T::zero());
                                row[hi..].fill(T::zero());
                                if self.stride == 1 {
                                    let start = base + lo + kx - self.pad;
                                    row[lo..hi].copy_from_slice(&x[start..start + hi - lo]);
                                } else {
                                    for (ox, v) in row.iter_mut().enumerate().take(hi).skip(lo) {
                                        *v = x[base + ox * self.stride + kx - self.pad];
                                    }
                                }
                                idx += self.ow;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geom::im2col`]: scatters `cols` back into `dx`, accumulating.
    fn col2im<T: Real>(&self, cols: &[T], z0: usize, z1: usize, dx: &mut [T]) {
        let cs = (z1 - z0) * self.oh * self.ow;
        let k = self.k;
        for ci in 0..self.cin {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((ci * k + kz) * k + ky) * k + kx;
                        let src = &cols[row * cs..(row + 1) * cs];
                        let mut idx = 0;
                        for oz in z0..z1 {
                            let Some(iz) = self.src(oz, kz, self.d) else {
                                idx += self.oh * self.ow;
                                continue;
                            };
                            for oy in 0..self.oh {
                                let Some(iy) = self.src(oy, ky, self.h) else {
                                    idx += self.ow;
                                    continue;
                                };
                                let base = ((ci * self.d + iz) * self.h + iy) * self.w;
                                let (lo, hi) = self.valid(kx);
                                let row = &src[idx..idx + self.ow];
                                if self.stride == 1 {
                                    let start = base + lo + kx - self.pad;
                                    for (d, &v) in dx[start..start + hi - lo].iter_mut().zip(&row[lo..hi]) {
                                        *d += v;
                                    }
                                } else {
                                    for (ox, &v) in row.iter().enumerate().take(hi).skip(lo) {
                                        dx[base + ox * self.stride + kx - self.pad] += v;
                                    }
                                }
                                idx += self.ow;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn spatial3(shape: &[usize]) -> [usize; 3] {
    assert_eq!(shape.len(), 5, "expected [N, C, D, H, W], got {shape:?}");
    [shape[2], shape[3], shape[4]]
}

impl<T: Real> Tensor<T> {
    /// Cubic-kernel 3D convolution. `w` is `[Cout, Cin, k, k, k]`.
    pub fn conv3d(&self, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize, pad: usize) -> Tensor<T> {
        let xs = self.shape();
        let ws = w.shape();
        assert_eq!(ws.len(), 5, "conv3d weight must be rank 5");
        assert_eq!(ws[2], ws[3]);
        assert_eq!(ws[2], ws[4]);
        let (n, cin, cout, k) = (xs[0], xs[1], ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv3d: input has {cin} channels, weight expects {}", ws[1]);
        let g = Geom::new(cin, spatial3(xs), k, stride, pad);
        let rows = g.rows();

        let x = self.value().as_standard_layout();
        let xsl = x.as_slice().expect("standard");
        let wv = w.value().as_standard_layout();
        let w2 = ArrayView2::from_shape((cout, rows), wv.as_slice().expect("standard")).expect("weight");
        let mut y = vec![T::zero(); n * cout * g.out_len()];
        let chunks = g.chunks();
        let mut cols = Vec::new();
        for ni in 0..n {
            let xn = &xsl[ni * cin * g.in_len()..(ni + 1) * cin * g.in_len()];
            let yn = &mut y[ni * cout * g.out_len()..(ni + 1) * cout * g.out_len()];
            let mut yn = ArrayViewMut2::from_shape((cout, g.out_len()), yn).expect("output");
            if g.pointwise() {
                let xm = ArrayView2::from_shape((cin, g.in_len()), xn).expect("input");
                general_mat_mul(T::one(), &w2, &xm, T::zero(), &mut yn);
                continue;
            }
            for &(z0, z1) in &chunks {
                let cs = (z1 - z0) * g.oh * g.ow;
                cols.resize(rows * cs, T::zero());
                g.im2col(xn, z0, z1, &mut cols);
                let cm = ArrayView2::from_shape((rows, cs), &cols[..]).expect("cols");
                let c0 = z0 * g.oh * g.ow;
                let mut ys = yn.slice_mut(s![.., c0..c0 + cs]);
                general_mat_mul(T::one(), &w2, &cm, T::zero(), &mut ys);
            }
        }
        if let Some(b) = b {
            let bv: Vec<T> = b.value().iter().copied().collect();
            assert_eq!(bv.len(), cout, "conv3d bias length");
            for (i, chunk) in y.chunks_mut(g.out_len()).enumerate() {
                let bi = bv[i % cout];
                chunk.iter_mut().for_each(|v| *v += bi);
            }
        }
        profile::record("conv3d", (n * cout * rows * g.out_len()) as u64);
        let out_shape = [n, cout, g.od, g.oh, g.ow];
        let value = ArrayD::from_shape_vec(IxDyn(&out_shape), y).expect("shape");

        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Tensor::from_op("conv3d", value, parents, move |a| {
            let gy = a.grad.as_standard_layout();
            let gys = gy.as_slice().expect("standard");
            let x = a.parents[0].value().as_standard_layout();
            let xsl = x.as_slice().expect("standard");
            let wv = a.parents[1].value().as_standard_layout();
            let w2 = ArrayView2::from_shape((cout, rows), wv.as_slice().expect("standard")).expect("weight");
            let need_x = a.parents[0].requires_grad();
            let need_w = a.parents[1].requires_grad();
            let mut dx = if need_x { vec![T::zero(); xsl.len()] } else { Vec::new() };
            let mut dw = ndarray::Array2::<T>::zeros((cout, rows));
            let mut cols = Vec::new();
            let mut dcols = Vec::new();
            for ni in 0..n {
                let xn = &xsl[ni * cin * g.in_len()..(ni + 1) * cin * g.in_len()];
                let gyn = &gys[ni * cout * g.out_len()..(ni + 1) * cout * g.out_len()];
                let gyn = ArrayView2::from_shape((cout, g.out_len()), gyn).expect("grad");
                if g.pointwise() {
                    if need_w {
                        let xm = ArrayView2::from_shape((cin, g.in_len()), xn).expect("input");
                        general_mat_mul(T::one(), &gyn, &xm.t(), T::one(), &mut dw);
                    }
                    if need_x {
                        let dxn = &mut dx[ni * cin * g.in_len()..(ni + 1) * cin * g.in_len()];
                        let mut dxm = ArrayViewMut2::from_shape((cin, g.in_len()), dxn).expect("dx");
                        general_mat_mul(T::one(), &w2.t(), &gyn, T::zero(), &mut dxm);
                    }
                    continue;
                }
                for &(z0, z1) in &chunks {
                    let cs = (z1 - z0) * g.oh * g.ow;
                    let c0 = z0 * g.oh * g.ow;
                    let gys = gyn.slice(s![.., c0..c0 + cs]);
                    if need_w {
                        cols.resize(rows * cs, T::zero());
                        g.im2col(xn, z0, z1, &mut cols);
                        let cm = ArrayView2::from_shape((rows, cs), &cols[..]).expect("cols");
                        general_mat_mul(T::one(), &gys, &cm.t(), T::one(), &mut dw);
                    }
                    if need_x {
                        dcols.resize(rows * cs, T::zero());
                        {
                            let mut dm = ArrayViewMut2::from_shape((rows, cs), &mut dcols[..]).expect("dcols");
                            general_mat_mul(T::one(), &w2.t(), &gys, T::zero(), &mut dm);
                        }
                        let dxn = &mut dx[ni * cin * g.in_len()..(ni + 1) * cin * g.in_len()];
                        g.col2im(&dcols, z0, z1, dxn);
                    }
                }
            }
            let x_shape = a.parents[0].shape().to_vec();
            let mut out = vec![
                need_x.then(|| ArrayD::from_shape_vec(IxDyn(&x_shape), dx).expect("shape")),
                need_w.then(|| {
                    dw.into_dyn()
                        .into_shape_with_order(IxDyn(a.parents[1].shape()))
                        .expect("shape")
                }),
            ];
            if a.parents.len() == 3 {
                let mut db = vec![T::zero(); cout];
                for (i, chunk) in gys.chunks(g.out_len()).enumerate() {
                    db[i % cout] += chunk.iter().copied().sum::<T>();
                }
                out.push(Some(ArrayD::from_shape_vec(IxDyn(&[cout]), db).expect("shape")));
            }
            out
        })
    }

    /// Transposed convolution whose kernel equals its stride (non-overlapping
    /// upsampling). `w` is `[Cin, Cout, k, k, k]`.
    pub fn conv_transpose3d(&self, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
        let xs = self.shape().to_vec();
        let ws = w.shape().to_vec();
        assert_eq!(ws.len(), 5, "conv_transpose3d weight must be rank 5");
        let (n, cin, cout, k) = (xs[0], xs[1], ws[1], ws[2]);
        assert_eq!(ws[0], cin, "conv_transpose3d channel mismatch");
        let [d, h, wd] = spatial3(&xs);
        let sp = d * h * wd;
        let kk = k * k * k;
        let out_shape = [n, cout, d * k, h * k, wd * k];

        // M[n] = W2ᵀ · X[n] with W2 = [Cin, Cout·k³], then scatter kernel taps.
        let x = self.value().as_standard_layout();
        let x3 = x.view().into_shape_with_order((n, cin, sp)).expect("input");
        let wv = w.value().as_standard_layout();
        let w2 = wv.view().into_shape_with_order((cin, cout * kk)).expect("weight");
        let mut m = ndarray::Array3::<T>::zeros((n, cout * kk, sp));
        for ni in 0..n {
            let mut mn = m.slice_mut(s![ni, .., ..]);
            general_mat_mul(T::one(), &w2.t(), &x3.slice(s![ni, .., ..]), T::zero(), &mut mn);
        }
        profile::record("conv_transpose3d", (n * cin * cout * kk * sp) as u64);
        let y = m
            .into_shape_with_order(IxDyn(&[n, cout, k, k, k, d, h, wd]))
            .expect("taps")
            .permuted_axes(IxDyn(&[0, 1, 5, 2, 6, 3, 7, 4]))
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(&out_shape))
            .expect("output");
        let y = match b {
            Some(b) => {
                let bv = b.value().view().into_shape_with_order((1, cout, 1, 1, 1)).expect("bias");
                y + &bv
            }
            None => y,
        };

        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        Tensor::from_op("conv_transpose3d", y, parents, move |a| {
            let gm = a
                .grad
                .view()
                .into_shape_with_order(IxDyn(&[n, cout, d, k, h, k, wd, k]))
                .expect("grad")
                .permuted_axes(IxDyn(&[0, 1, 3, 5, 7, 2, 4, 6]))
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((n, cout * kk, sp))
                .expect("taps");
            let x = a.parents[0].value().as_standard_layout();
            let x3 = x.view().into_shape_with_order((n, cin, sp)).expect("input");
            let wv = a.parents[1].value().as_standard_layout();
            let w2 = wv.view().into_shape_with_order((cin, cout * kk)).expect("weight");
            let dx = a.parents[0].requires_grad().then(|| {
                let mut dx = ndarray::Array3::<T>::zeros((n, cin, sp));
                for ni in 0..n {
                    let mut o = dx.slice_mut(s![ni, .., ..]);
                    general_mat_mul(T::one(), &w2, &gm.slice(s![ni, .., ..]), T::zero(), &mut o);
                }
                dx.into_dyn().into_shape_with_order(IxDyn(&xs)).expect("shape")
            });
            let dw = a.parents[1].requires_grad().then(|| {
                let mut dw = ndarray::Array2::<T>::zeros((cin, cout * kk));
                for ni in 0..n {
                    general_mat_mul(
                        T::one(),
                        &x3.slice(s![ni, .., ..]),
                        &gm.slice(s![ni, .., ..]).t(),
                        T::one(),
                        &mut dw,
                    );
                }
                dw.into_dyn().into_shape_with_order(IxDyn(&ws)).expect("shape")
            });
            let mut out = vec![dx, dw];
            if a.parents.len() == 3 {
                let db = gm
                    .into_shape_with_order((n, cout, kk * sp))
                    .expect("taps")
                    .sum_axis(ndarray::Axis(2))
                    .sum_axis(ndarray::Axis(0));
                out.push(Some(db.into_dyn()));
            }
            out
        })
    }

    /// Max pooling with a cubic window; padded positions never win.
    pub fn max_pool3d(&self, k: usize, stride: usize, pad: usize) -> Tensor<T> {
        let xs = self.shape().to_vec();
        let (n, c) = (xs[0], xs[1]);
        let g = Geom::new(1, spatial3(&xs), k, stride, pad);
        let x = self.value().as_standard_layout();
        let xsl = x.as_slice().expect("standard");
        let mut y = Vec::with_capacity(n * c * g.out_len());
        let mut arg = Vec::with_capacity(y.capacity());
        for plane in 0..n * c {
            let base = plane * g.in_len();
            for oz in 0..g.od {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for kz in 0..k {
                            let Some(iz) = g.src(oz, kz, g.d) else { continue };
                            for ky in 0..k {
                                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                                for kx in 0..k {
                                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                                    let i = base + (iz * g.h + iy) * g.w + ix;
                                    if best_i == usize::MAX || xsl[i] > best {
                                        best = xsl[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        y.push(best);
                        arg.push(best_i);
                    }
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, g.od, g.oh, g.ow]), y).expect("shape");
        Tensor::from_op("max_pool3d", value, vec![self.clone()], move |a| {
            let mut dx = vec![T::zero(); xs.iter().product()];
            for (gv, &i) in a.grad.iter().zip(&arg) {
                dx[i] += *gv;
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&xs), dx).expect("shape"))]
        })
    }

    /// Average pooling with window = stride = `k` and no padding.
    pub fn avg_pool3d(&self, k: usize) -> Tensor<T> {
        let xs = self.shape().to_vec();
        let (n, c) = (xs[0], xs[1]);
        let g = Geom::new(1, spatial3(&xs), k, k, 0);
        let x = self.value().as_standard_layout();
        let xsl = x.as_slice().expect("standard");
        let inv = T::one() / T::lit((k * k * k) as f64);
        let taps = move |oz: usize, oy: usize, ox: usize| {
            (0..k).flat_map(move |kz| {
                (0..k).flat_map(move |ky| {
                    (0..k).map(move |kx| ((oz * k + kz) * g.h + oy * k + ky) * g.w + ox * k + kx)
                })
            })
        };
        let mut y = Vec::with_capacity(n * c * g.out_len());
        for plane in 0..n * c {
            let base = plane * g.in_len();
            for oz in 0..g.od {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let s: T = taps(oz, oy, ox).map(|i| xsl[base + i]).sum();
                        y.push(s * inv);
                    }
                }
            }
        }
        let value = ArrayD::from_shape_vec(IxDyn(&[n, c, g.od, g.oh, g.ow]), y).expect("shape");
        Tensor::from_op("avg_pool3d", value, vec![self.clone()], move |a| {
            let mut dx = vec![T::zero(); xs.iter().product()];
            let gy = a.grad.as_standard_layout();
            let mut it = gy.iter();
            for plane in 0..n * c {
                let base = plane * g.in_len();
                for oz in 0..g.od {
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let gv = *it.next().expect("grad length") * inv;
                            for i in taps(oz, oy, ox) {
                                dx[base + i] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&xs), dx).expect("shape"))]
        })
    }

    /// Nearest-neighbour resize of the spatial axes to `size`:
    /// `out[i] = in[floor(i * in_len / out_len)]` per axis.
    pub fn upsample_nearest(&self, size: [usize; 3]) -> Tensor<T> {
        let xs = self.shape().to_vec();
        let [d, h, w] = spatial3(&xs);
        let (n, c) = (xs[0], xs[1]);
        let map = |o: usize, inn: usize, out: usize| o * inn / out;
        let mut index = Vec::with_capacity(size.iter().product());
        for z in 0..size[0] {
            for y in 0..size[1] {
                for x in 0..size[2] {
                    index.push((map(z, d, size[0]) * h + map(y, h, size[1])) * w + map(x, w, size[2]));
                }
            }
        }
        let x = self.value().as_standard_layout();
        let xsl = x.as_slice().expect("standard");
        let in_len = d * h * w;
        let mut out = Vec::with_capacity(n * c * index.len());
        for plane in 0..n * c {
            out.extend(index.iter().map(|&i| xsl[plane * in_len + i]));
        }
        let value =
            ArrayD::from_shape_vec(IxDyn(&[n, c, size[0], size[1], size[2]]), out).expect("shape");
        Tensor::from_op("upsample_nearest", value, vec![self.clone()], move |a| {
            let gy = a.grad.as_standard_layout();
            let gs = gy.as_slice().expect("standard");
            let mut dx = vec![T::zero(); n * c * in_len];
            for (plane, gp) in gs.chunks(index.len()).enumerate() {
                for (&i, &gv) in index.iter().zip(gp) {
                    dx[plane * in_len + i] += gv;
                }
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&xs), dx).expect("shape"))]
        })
    }
}
