//! Shared hierarchical encoder: a residual conv stem at input resolution, a
//! patch embedding, and four stages of windowed self-attention blocks each
//! followed by patch merging.
//!
//! Swin internals run channels-last (`[N, D, H, W, C]`); every pyramid level
//! is returned channels-first (`[N, C, D, H, W]`).

use autograd::nn::{Conv3d, GroupNorm, LayerNorm, Linear};
use autograd::{profile, Init, Param, Real, Scope, Tensor};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EncoderError {
    #[error("encoder config: {0}")]
    Config(String),
    #[error("input extent {extent:?} is not divisible by {factor}")]
    IndivisibleExtent { extent: Vec<usize>, factor: usize },
    #[error("expected input [N, {channels}, D, H, W], got {shape:?}")]
    InputShape { channels: usize, shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub mlp_ratio: f64,
    /// Stochastic depth rate. Only 0 is supported.
    pub drop_path: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 4,
            embed_dim: 48,
            patch_size: 2,
            window_size: 7,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![3, 6, 12, 24],
            mlp_ratio: 4.0,
            drop_path: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.depths.len() != 4 || self.num_heads.len() != 4 {
            return bad(format!(
                "need 4 stages, got {} depths and {} head counts",
                self.depths.len(),
                self.num_heads.len()
            ));
        }
        if let Some(d) = self.depths.iter().find(|&&d| d % 2 != 0) {
            return bad(format!("stage depth {d} is odd; blocks come in unshifted/shifted pairs"));
        }
        for (i, &h) in self.num_heads.iter().enumerate() {
            let c = self.embed_dim << i;
            if h == 0 || c % h != 0 {
                return bad(format!("stage {i}: {c} channels not divisible by {h} heads"));
            }
        }
        if self.patch_size == 0 || self.window_size == 0 || self.in_channels == 0 {
            return bad("patch size, window size and input channels must be positive".into());
        }
        if self.mlp_ratio <= 0.0 {
            return bad(format!("mlp_ratio {} must be positive", self.mlp_ratio));
        }
        if self.drop_path != 0.0 {
            return bad("drop_path > 0 is not supported".into());
        }
        Ok(())
    }

    /// Input extents must be divisible by this.
    pub fn extent_factor(&self) -> usize {
        self.patch_size << 4
    }

    /// Channels of pyramid levels 0..=5.
    pub fn pyramid_channels(&self) -> [usize; 6] {
        let e = self.embed_dim;
        [e, e, 2 * e, 4 * e, 8 * e, 16 * e]
    }
}

/// Geometry of one windowed attention pass over a `D×H×W` token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionWindowLayout {
    pub extent: [usize; 3],
    pub window: usize,
    pub padded_extent: [usize; 3],
    pub window_grid: [usize; 3],
    /// Cyclic shift per axis; 0 on axes that fit in one window.
    pub shift: [usize; 3],
}

impl AttentionWindowLayout {
    pub fn new(extent: [usize; 3], window: usize, shifted: bool) -> Self {
        let padded_extent = extent.map(|n| n.div_ceil(window) * window);
        let shift = extent.map(|n| if shifted && n > window { window / 2 } else { 0 });
        AttentionWindowLayout {
            extent,
            window,
            padded_extent,
            window_grid: padded_extent.map(|n| n / window),
            shift,
        }
    }

    pub fn num_windows(&self) -> usize {
        self.window_grid.iter().product()
    }

    pub fn window_volume(&self) -> usize {
        self.window.pow(3)
    }

    fn is_padded(&self) -> bool {
        self.padded_extent != self.extent
    }

    fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    /// Additive attention mask `[nW, q, n]` (q is 1 for a key-only mask), or
    /// `None` when every token may attend to every other in its window.
    ///
    /// Keys from a different pre-shift region get `-100`; padded keys get
    /// `-1e4`.
    pub fn attention_mask<T: Real>(&self) -> Option<ArrayD<T>> {
        if !self.is_padded() && !self.is_shifted() {
            return None;
        }
        let w = self.window;
        let n = self.window_volume();
        let [pd, ph, pw] = self.padded_extent;
        // region id and validity of every position of the rolled, padded grid
        let region = |q: usize, axis: usize| -> usize {
            let (p, s) = (self.padded_extent[axis], self.shift[axis]);
            if s == 0 {
                0
            } else if q < p - w {
                0
            } else if q < p - s {
                1
            } else {
                2
            }
        };
        let valid = |q: usize, axis: usize| (q + self.shift[axis]) % self.padded_extent[axis] < self.extent[axis];
        let mut ids = Vec::with_capacity(pd * ph * pw);
        let mut ok = Vec::with_capacity(pd * ph * pw);
        for z in 0..pd {
            for y in 0..ph {
                for x in 0..pw {
                    ids.push(region(z, 0) * 9 + region(y, 1) * 3 + region(x, 2));
                    ok.push(valid(z, 0) && valid(y, 1) && valid(x, 2));
                }
            }
        }
        let [gd, gh, gw] = self.window_grid;
        let flat = |z: usize, y: usize, x: usize| (z * ph + y) * pw + x;
        let rows = if self.is_shifted() { n } else { 1 };
        let (neg_region, neg_pad) = (T::lit(-100.0), T::lit(-1e4));
        let mut mask = ArrayD::<T>::zeros(IxDyn(&[self.num_windows(), rows, n]));
        let mut win = 0;
        let mut members = Vec::with_capacity(n);
        for a in 0..gd {
            for b in 0..gh {
                for c in 0..gw {
                    members.clear();
                    for z in 0..w {
                        for y in 0..w {
                            for x in 0..w {
                                members.push(flat(a * w + z, b * w + y, c * w + x));
                            }
                        }
                    }
                    for i in 0..rows {
                        for (j, &k) in members.iter().enumerate() {
                            mask[[win, i, j]] = if !ok[k] {
                                neg_pad
                            } else if rows > 1 && ids[members[i]] != ids[k] {
                                neg_region
                            } else {
                                T::zero()
                            };
                        }
                    }
                    win += 1;
                }
            }
        }
        Some(mask)
    }
}

/// Pads, applies the layout's cyclic shift and cuts `[N, D, H, W, C]` into
/// windows `[N·nW, w³, C]`.
pub fn window_partition<T: Real>(x: &Tensor<T>, layout: &AttentionWindowLayout) -> Tensor<T> {
    let [n, d, h, w, c] = dims5(x);
    assert_eq!([d, h, w], layout.extent, "tensor does not match layout");
    let [pd, ph, pw] = layout.padded_extent;
    let x = x.pad(&[(0, 0), (0, pd - d), (0, ph - h), (0, pw - w), (0, 0)]);
    let x = if layout.is_shifted() {
        let s = layout.shift.map(|v| -(v as isize));
        x.roll(&[(1, s[0]), (2, s[1]), (3, s[2])])
    } else {
        x
    };
    let win = layout.window;
    let [gd, gh, gw] = layout.window_grid;
    x.reshape(&[n, gd, win, gh, win, gw, win, c])
        .permute(&[0, 1, 3, 5, 2, 4, 6, 7])
        .reshape(&[n * layout.num_windows(), layout.window_volume(), c])
}

/// Inverse of [`window_partition`]: reassembles, undoes the shift and drops padding.
pub fn window_reverse<T: Real>(windows: &Tensor<T>, layout: &AttentionWindowLayout, batch: usize) -> Tensor<T> {
    let c = windows.shape()[2];
    let win = layout.window;
    let [gd, gh, gw] = layout.window_grid;
    let [pd, ph, pw] = layout.padded_extent;
    let x = windows
        .reshape(&[batch, gd, gh, gw, win, win, win, c])
        .permute(&[0, 1, 4, 2, 5, 3, 6, 7])
        .reshape(&[batch, pd, ph, pw, c]);
    let x = if layout.is_shifted() {
        let s = layout.shift.map(|v| v as isize);
        x.roll(&[(1, s[0]), (2, s[1]), (3, s[2])])
    } else {
        x
    };
    let [d, h, w] = layout.extent;
    if layout.is_padded() {
        x.narrow(1, 0, d).narrow(2, 0, h).narrow(3, 0, w)
    } else {
        x
    }
}

fn dims5<T: Real>(x: &Tensor<T>) -> [usize; 5] {
    x.shape().try_into().expect("rank-5 tensor")
}

/// Index into the `(2w−1)³` relative position table for every query/key pair of a window.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let coords: Vec<[usize; 3]> = (0..window.pow(3))
        .map(|i| [i / (window * window), (i / window) % window, i % window])
        .collect();
    let span = 2 * window - 1;
    let mut out = Vec::with_capacity(coords.len() * coords.len());
    for a in &coords {
        for b in &coords {
            let r = [0, 1, 2].map(|k| a[k] + window - 1 - b[k]);
            out.push((r[0] * span + r[1]) * span + r[2]);
        }
    }
    out
}

/// Multi-head self-attention inside windows, with learned relative position bias.
pub struct WindowAttention<T: Real> {
    path: String,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub bias_table: Param<T>,
    heads: usize,
    window: usize,
    rel_index: Vec<usize>,
}

impl<T: Real> WindowAttention<T> {
    pub fn new(vs: &Scope<T>, dim: usize, heads: usize, window: usize) -> Self {
        let span = 2 * window - 1;
        WindowAttention {
            path: vs.path().to_string(),
            qkv: Linear::new(&vs.pp("qkv"), dim, 3 * dim, true, Init::FanIn(dim)),
            proj: Linear::new(&vs.pp("proj"), dim, dim, true, Init::FanIn(dim)),
            bias_table: vs.param("relative_position_bias_table", &[span.pow(3), heads], Init::TruncNormal(0.02)),
            heads,
            window,
            rel_index: relative_position_index(window),
        }
    }

    /// `x`: `[B, n, C]` windows, `B = batch · nW`. `mask`: `[nW, q, n]`.
    pub fn forward(&self, x: &Tensor<T>, mask: Option<&ArrayD<T>>) -> Tensor<T> {
        let _g = profile::scope(&self.path);
        let (b, n, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert_eq!(n, self.window.pow(3), "window volume");
        let (h, hd) = (self.heads, c / self.heads);
        let qkv = self
            .qkv
            .forward(x)
            .reshape(&[b, n, 3, h, hd])
            .permute(&[2, 0, 3, 1, 4]);
        let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[b * h, n, hd]);
        let (q, k, v) = (part(0), part(1), part(2));
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let scores = q.scale(scale).bmm(&k, true).reshape(&[b, h, n, n]);
        let bias = self
            .bias_table
            .tensor()
            .index_select0(&self.rel_index)
            .reshape(&[n, n, h])
            .permute(&[2, 0, 1]);
        let mut scores = scores.add(&bias);
        if let Some(m) = mask {
            let nw = m.shape()[0];
            let rows = m.shape()[1];
            let m = Tensor::new(m.clone().into_shape_with_order(IxDyn(&[1, nw, 1, rows, n])).expect("mask shape"));
            scores = scores.reshape(&[b / nw, nw, h, n, n]).add(&m).reshape(&[b, h, n, n]);
        }
        let attn = scores.softmax().reshape(&[b * h, n, n]);
        let out = attn
            .bmm(&v, false)
            .reshape(&[b, h, n, hd])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, n, c]);
        self.proj.forward(&out)
    }
}

/// Two-layer perceptron with exact GELU.
pub struct Mlp<T: Real> {
    pub linear1: Linear<T>,
    pub linear2: Linear<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new(vs: &Scope<T>, dim: usize, hidden: usize) -> Self {
        Mlp {
            linear1: Linear::new(&vs.pp("linear1"), dim, hidden, true, Init::FanIn(dim)),
            linear2: Linear::new(&vs.pp("linear2"), hidden, dim, true, Init::FanIn(hidden)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.linear2.forward(&self.linear1.forward(x).gelu())
    }
}

/// `z' = (S)W-MSA(LN(z)) + z`, then `z = MLP(LN(z')) + z'`.
pub struct SwinBlock<T: Real> {
    pub norm1: LayerNorm<T>,
    pub attn: WindowAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    window: usize,
    shifted: bool,
}

impl<T: Real> SwinBlock<T> {
    pub fn new(vs: &Scope<T>, dim: usize, heads: usize, window: usize, mlp_ratio: f64, shifted: bool) -> Self {
        SwinBlock {
            norm1: LayerNorm::new(&vs.pp("norm1"), dim),
            attn: WindowAttention::new(&vs.pp("attn"), dim, heads, window),
            norm2: LayerNorm::new(&vs.pp("norm2"), dim),
            mlp: Mlp::new(&vs.pp("mlp"), dim, (dim as f64 * mlp_ratio).round() as usize),
            window,
            shifted,
        }
    }

    pub fn layout(&self, extent: [usize; 3]) -> AttentionWindowLayout {
        AttentionWindowLayout::new(extent, self.window, self.shifted)
    }

    /// `x`: `[N, D, H, W, C]`.
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, d, h, w, _] = dims5(x);
        let layout = self.layout([d, h, w]);
        let mask = layout.attention_mask::<T>();
        let windows = window_partition(&self.norm1.forward(x), &layout);
        let attn = self.attn.forward(&windows, mask.as_ref());
        let x = x.add(&window_reverse(&attn, &layout, n));
        x.add(&self.mlp.forward(&self.norm2.forward(&x)))
    }
}

/// Groups each 2×2×2 neighbourhood into one token: LN over 8C, then a
/// bias-free projection to 2C. Odd extents are zero-padded.
pub struct PatchMerging<T: Real> {
    pub norm: LayerNorm<T>,
    pub reduction: Linear<T>,
}

impl<T: Real> PatchMerging<T> {
    pub fn new(vs: &Scope<T>, dim: usize) -> Self {
        PatchMerging {
            norm: LayerNorm::new(&vs.pp("norm"), 8 * dim),
            reduction: Linear::new(&vs.pp("reduction"), 8 * dim, 2 * dim, false, Init::FanIn(8 * dim)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, d, h, w, c] = dims5(x);
        let x = x.pad(&[(0, 0), (0, d % 2), (0, h % 2), (0, w % 2), (0, 0)]);
        let (d2, h2, w2) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
        let grouped = x
            .reshape(&[n, d2, 2, h2, 2, w2, 2, c])
            .permute(&[0, 1, 3, 5, 2, 4, 6, 7])
            .reshape(&[n, d2, h2, w2, 8 * c]);
        self.reduction.forward(&self.norm.forward(&grouped))
    }
}

/// Non-overlapping `p³` patches projected to `E` channels by a strided conv.
pub struct PatchEmbed<T: Real> {
    pub proj: Conv3d<T>,
    patch: usize,
}

impl<T: Real> PatchEmbed<T> {
    pub fn new(vs: &Scope<T>, cin: usize, dim: usize, patch: usize) -> Self {
        PatchEmbed {
            proj: Conv3d::new(&vs.pp("proj"), cin, dim, patch, patch, 0, true),
            patch,
        }
    }

    /// `[N, C, S, S, S]` → channels-last `[N, S/p, S/p, S/p, E]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, EncoderError> {
        let sp = &x.shape()[2..];
        if sp.iter().any(|&s| s % self.patch != 0) {
            return Err(EncoderError::IndivisibleExtent {
                extent: sp.to_vec(),
                factor: self.patch,
            });
        }
        Ok(self.proj.forward(x).permute(&[0, 2, 3, 4, 1]))
    }
}

/// Residual block of two `3³` convs with instance norm and leaky ReLU, plus a
/// `1³` conv on the skip path when the channel count changes.
pub struct ResBlock<T: Real> {
    pub conv1: Conv3d<T>,
    pub conv2: Conv3d<T>,
    pub norm1: GroupNorm<T>,
    pub norm2: GroupNorm<T>,
    pub skip: Option<(Conv3d<T>, GroupNorm<T>)>,
}

const LEAK: f64 = 0.01;

impl<T: Real> ResBlock<T> {
    pub fn new(vs: &Scope<T>, cin: usize, cout: usize) -> Self {
        ResBlock {
            conv1: Conv3d::same(&vs.pp("conv1"), cin, cout, 3, false),
            conv2: Conv3d::same(&vs.pp("conv2"), cout, cout, 3, false),
            norm1: GroupNorm::instance(cout),
            norm2: GroupNorm::instance(cout),
            skip: (cin != cout).then(|| (Conv3d::same(&vs.pp("conv3"), cin, cout, 1, false), GroupNorm::instance(cout))),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let slope = T::lit(LEAK);
        let y = self.norm1.forward(&self.conv1.forward(x)).leaky_relu(slope);
        let y = self.norm2.forward(&self.conv2.forward(&y));
        let skip = match &self.skip {
            Some((conv, norm)) => norm.forward(&conv.forward(x)),
            None => x.clone(),
        };
        y.add(&skip).leaky_relu(slope)
    }
}

/// Six feature maps, channels-first; level `i` has extent `S / 2^i`.
#[derive(Clone)]
pub struct FeaturePyramid<T: Real> {
    pub stages: Vec<Tensor<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.stages.iter().map(|s| s.shape().to_vec()).collect()
    }

    /// Same pyramid with every level cut from the graph.
    pub fn detached(&self) -> Self {
        FeaturePyramid {
            stages: self.stages.iter().map(Tensor::detach).collect(),
        }
    }
}

pub struct Stage<T: Real> {
    pub blocks: Vec<SwinBlock<T>>,
    pub downsample: PatchMerging<T>,
}

pub struct Encoder<T: Real> {
    pub config: EncoderConfig,
    pub stem: ResBlock<T>,
    pub patch_embed: PatchEmbed<T>,
    pub layers: Vec<Stage<T>>,
    path: String,
}

impl<T: Real> Encoder<T> {
    /// Registers all weights under `vs` (conventionally the `encoder` scope).
    pub fn new(vs: &Scope<T>, config: &EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let e = config.embed_dim;
        let layers = (0..4)
            .map(|i| {
                let ls = vs.pp("layers").pp(i.to_string());
                let dim = e << i;
                let blocks = (0..config.depths[i])
                    .map(|j| {
                        let bs = ls.pp("blocks").pp(j.to_string());
                        SwinBlock::new(&bs, dim, config.num_heads[i], config.window_size, config.mlp_ratio, j % 2 == 1)
                    })
                    .collect();
                Stage {
                    blocks,
                    downsample: PatchMerging::new(&ls.pp("downsample"), dim),
                }
            })
            .collect();
        Ok(Encoder {
            config: config.clone(),
            stem: ResBlock::new(&vs.pp("stem"), config.in_channels, e),
            patch_embed: PatchEmbed::new(&vs.pp("patch_embed"), config.in_channels, e, config.patch_size),
            layers,
            path: vs.path().to_string(),
        })
    }

    /// Parameters of the last attention block of the deepest stage.
    pub fn last_block_params(&self) -> Vec<Param<T>> {
        let stage = self.layers.iter().rev().find(|s| !s.blocks.is_empty());
        let Some(b) = stage.and_then(|s| s.blocks.last()) else {
            return Vec::new();
        };
        let lin = |l: &Linear<T>| std::iter::once(l.weight.clone()).chain(l.bias.clone()).collect::<Vec<_>>();
        let mut out = Vec::new();
        out.extend(b.norm1.weight.clone());
        out.extend(b.norm1.bias.clone());
        out.extend(lin(&b.attn.qkv));
        out.push(b.attn.bias_table.clone());
        out.extend(lin(&b.attn.proj));
        out.extend(b.norm2.weight.clone());
        out.extend(b.norm2.bias.clone());
        out.extend(lin(&b.mlp.linear1));
        out.extend(lin(&b.mlp.linear2));
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), EncoderError> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.config.in_channels {
            return Err(EncoderError::InputShape {
                channels: self.config.in_channels,
                shape: s.to_vec(),
            });
        }
        let f = self.config.extent_factor();
        if s[2..].iter().any(|&v| v % f != 0) {
            return Err(EncoderError::IndivisibleExtent {
                extent: s[2..].to_vec(),
                factor: f,
            });
        }
        Ok(())
    }

    /// `[N, C_in, S, S, S]` → six-level pyramid.
    pub fn encode(&self, x: &Tensor<T>) -> Result<FeaturePyramid<T>, EncoderError> {
        self.check_input(x)?;
        let _g = profile::scope(&self.path);
        let out_norm = LayerNorm::<T>::plain();
        let to_cf = |t: &Tensor<T>| out_norm.forward(t).permute(&[0, 4, 1, 2, 3]);
        let mut stages = vec![self.stem.forward(x)];
        let mut z = self.patch_embed.forward(x)?;
        stages.push(to_cf(&z));
        for stage in &self.layers {
            for b in &stage.blocks {
                z = b.forward(&z);
            }
            z = stage.downsample.forward(&z);
            stages.push(to_cf(&z));
        }
        Ok(FeaturePyramid { stages })
    }
}
