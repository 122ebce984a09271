//! Pre-norm Vision Transformer with hand-written backpropagation.
//!
//! The encoder maps a [`TokenSequence`] to the final-layer-normed `[CLS]`
//! vector. Sequences in one batch must share a length; the linear layers then
//! run as single `(B·n) × d` matrix products and attention runs per sample.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::Stream;
use crate::views::TokenSequence;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
/// Fixed pixel standardization applied before the patch projection.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Side of the largest token grid, i.e. positional-embedding slots per side.
    pub max_grid: usize,
}

impl ViTConfig {
    /// Desk-scale default: 4 layers, width 128, for 64-pixel views with 8-pixel patches.
    pub fn nano() -> Self {
        Self {
            layers: 4,
            hidden_dim: 128,
            mlp_dim: 256,
            heads: 4,
            patch_size: 8,
            max_grid: 8,
        }
    }

    pub fn small() -> Self {
        Self {
            layers: 12,
            hidden_dim: 384,
            mlp_dim: 1536,
            heads: 6,
            patch_size: 16,
            max_grid: 14,
        }
    }

    pub fn base() -> Self {
        Self {
            layers: 12,
            hidden_dim: 768,
            mlp_dim: 3072,
            heads: 12,
            patch_size: 16,
            max_grid: 14,
        }
    }

    pub fn large() -> Self {
        Self {
            layers: 24,
            hidden_dim: 1024,
            mlp_dim: 4096,
            heads: 16,
            patch_size: 16,
            max_grid: 14,
        }
    }

    /// `vit-nano`, `vit-s`, `vit-b` or `vit-l`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vit-nano" => Some(Self::nano()),
            "vit-s" => Some(Self::small()),
            "vit-b" => Some(Self::base()),
            "vit-l" => Some(Self::large()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Length of one flattened RGB patch.
    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Positional slots: one per grid cell plus the `[CLS]` slot.
    pub fn slots(&self) -> usize {
        self.max_grid * self.max_grid + 1
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("mlp_dim", self.mlp_dim),
            ("heads", self.heads),
            ("patch_size", self.patch_size),
            ("max_grid", self.max_grid),
        ] {
            if v == 0 {
                return Err(Error::config(format!("encoder.{name}"), "must be positive"));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "encoder.heads",
                format!("hidden_dim {} is not divisible by {} heads", self.hidden_dim, self.heads),
            ));
        }
        Ok(())
    }
}

/// Exact number of scalar parameters in [`EncoderParams`] for `config`.
pub fn parameter_count(config: &ViTConfig) -> usize {
    let d = config.hidden_dim;
    let m = config.mlp_dim;
    let patch = config.token_dim() * d + d;
    let cls = d;
    let pos = config.slots() * d;
    let block = 2 * (2 * d) // two layer norms
        + d * 3 * d + 3 * d // qkv
        + d * d + d // attention output
        + d * m + m // mlp in
        + m * d + d; // mlp out
    let final_norm = 2 * d;
    patch + cls + pos + config.layers * block + final_norm
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Uniform access to every tensor of a parameter structure, in a fixed order.
pub trait Parameters<T: Scalar> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)>;
    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)>;

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        for (_, mut t) in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn squared_norm(&self) -> T {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|&v| v * v).sum::<T>())
            .sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `in × out`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(inp: usize, out: usize, rng: &mut Stream) -> Self {
        Self {
            weight: trunc_normal((inp, out), INIT_STD, rng),
            bias: Array1::zeros(out),
        }
    }

    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient.
    fn backward(&self, x: &ArrayView2<T>, dy: &Array2<T>, grad: &mut Linear<T>) -> Array2<T> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    fn accumulate(&self, x: &ArrayView2<T>, dy: &Array2<T>, grad: &mut Linear<T>) {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    fn push<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.view_mut().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub scale: Array1<T>,
    pub offset: Array1<T>,
}

struct NormTape<T> {
    xhat: Array2<T>,
    rstd: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    fn init(d: usize) -> Self {
        Self {
            scale: Array1::ones(d),
            offset: Array1::zeros(d),
        }
    }

    fn forward(&self, x: &Array2<T>) -> (Array2<T>, NormTape<T>) {
        let d = T::from_usize(x.ncols()).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            *r = T::one() / (var + eps).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let mut y = &xhat * &self.scale;
        y += &self.offset;
        (y, NormTape { xhat, rstd })
    }

    fn backward(&self, tape: &NormTape<T>, dy: &Array2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.scale += &(dy * &tape.xhat).sum_axis(Axis(0));
        grad.offset += &dy.sum_axis(Axis(0));
        let d = T::from_usize(dy.ncols()).unwrap();
        let mut dx = dy * &self.scale;
        for ((mut row, xh), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(tape.xhat.rows())
            .zip(tape.rstd.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum::<T>() / d;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|g, &x| *g = r * (*g - mean_g - x * mean_gx));
        }
        dx
    }

    fn push<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((format!("{prefix}.scale"), self.scale.view().into_dyn()));
        out.push((format!("{prefix}.offset"), self.offset.view().into_dyn()));
    }

    fn push_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((format!("{prefix}.scale"), self.scale.view_mut().into_dyn()));
        out.push((format!("{prefix}.offset"), self.offset.view_mut().into_dyn()));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// All learnable parameters of one encoder. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: ViTConfig,
    pub patch_embed: Linear<T>,
    pub cls_token: Array1<T>,
    /// `slots × d`; slot 0 belongs to `[CLS]`.
    pub pos_embed: Array2<T>,
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

fn trunc_normal<T: Scalar>(shape: (usize, usize), std: f64, rng: &mut Stream) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 3.0 {
            break T::lit(z * std);
        }
    })
}

impl<T: Scalar> EncoderParams<T> {
    /// Normal weights (std 0.02, cut at three standard deviations), zero biases,
    /// unit layer-norm scales.
    pub fn init(config: ViTConfig, rng: &mut Stream) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let patch_embed = Linear::init(config.token_dim(), d, rng);
        let cls_token = trunc_normal((1, d), INIT_STD, rng).remove_axis(Axis(0));
        let pos_embed = trunc_normal((config.slots(), d), INIT_STD, rng);
        let blocks = (0..config.layers)
            .map(|_| Block {
                norm1: LayerNorm::init(d),
                qkv: Linear::init(d, 3 * d, rng),
                proj: Linear::init(d, d, rng),
                norm2: LayerNorm::init(d),
                fc1: Linear::init(d, config.mlp_dim, rng),
                fc2: Linear::init(config.mlp_dim, d, rng),
            })
            .collect();
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm: LayerNorm::init(d),
        })
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        let c1 = |a: &Array1<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        let c2 = |a: &Array2<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        let lin = |l: &Linear<T>| Linear {
            weight: c2(&l.weight),
            bias: c1(&l.bias),
        };
        let ln = |l: &LayerNorm<T>| LayerNorm {
            scale: c1(&l.scale),
            offset: c1(&l.offset),
        };
        EncoderParams {
            config: self.config,
            patch_embed: lin(&self.patch_embed),
            cls_token: c1(&self.cls_token),
            pos_embed: c2(&self.pos_embed),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1: ln(&b.norm1),
                    qkv: lin(&b.qkv),
                    proj: lin(&b.proj),
                    norm2: ln(&b.norm2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            norm: ln(&self.norm),
        }
    }
}

impl<T: Scalar> Parameters<T> for EncoderParams<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.patch_embed.push("patch_embed", &mut out);
        out.push(("cls_token".into(), self.cls_token.view().into_dyn()));
        out.push(("pos_embed".into(), self.pos_embed.view().into_dyn()));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            b.norm1.push(&format!("{p}.norm1"), &mut out);
            b.qkv.push(&format!("{p}.qkv"), &mut out);
            b.proj.push(&format!("{p}.proj"), &mut out);
            b.norm2.push(&format!("{p}.norm2"), &mut out);
            b.fc1.push(&format!("{p}.fc1"), &mut out);
            b.fc2.push(&format!("{p}.fc2"), &mut out);
        }
        self.norm.push("norm", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.patch_embed.push_mut("patch_embed", &mut out);
        out.push(("cls_token".into(), self.cls_token.view_mut().into_dyn()));
        out.push(("pos_embed".into(), self.pos_embed.view_mut().into_dyn()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            b.norm1.push_mut(&format!("{p}.norm1"), &mut out);
            b.qkv.push_mut(&format!("{p}.qkv"), &mut out);
            b.proj.push_mut(&format!("{p}.proj"), &mut out);
            b.norm2.push_mut(&format!("{p}.norm2"), &mut out);
            b.fc1.push_mut(&format!("{p}.fc1"), &mut out);
            b.fc2.push_mut(&format!("{p}.fc2"), &mut out);
        }
        self.norm.push_mut("norm", &mut out);
        out
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; faster than the libm `tanh`.
fn fast_tanh<T: Scalar>(y: T) -> T {
    let e = (T::lit(2.0) * y).exp();
    T::one() - T::lit(2.0) / (e + T::one())
}

/// Tanh approximation of GELU.
fn gelu<T: Scalar>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * u * (T::one() + fast_tanh(c * (u + a * u * u * u)))
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = fast_tanh(c * (u + a * u * u * u));
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * u * u)
}

fn softmax_rows_inplace<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

#[inline]
fn axpy<T: Scalar>(out: &mut [T], alpha: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Copies the `n × width` block at rows `base..base+n`, columns `col..col+width`
/// of a row-major matrix with row length `stride` into `out` as `width × n`.
fn transpose_into<T: Scalar>(out: &mut [T], src: &[T], base: usize, n: usize, stride: usize, col: usize, width: usize) {
    for j in 0..n {
        let row = &src[(base + j) * stride + col..][..width];
        for (c, &v) in row.iter().enumerate() {
            out[c * n + j] = v;
        }
    }
}

struct BlockTape<T> {
    norm1: NormTape<T>,
    h1: Array2<T>,
    qkv: Array2<T>,
    /// One `n × n` attention matrix per (sample, head).
    attn: Vec<Array2<T>>,
    ctx: Array2<T>,
    norm2: NormTape<T>,
    h2: Array2<T>,
    pre_act: Array2<T>,
    act: Array2<T>,
}

/// Activations kept by a forward pass for the matching backward pass.
pub struct Tape<T> {
    batch: usize,
    /// Tokens per sample including `[CLS]`.
    seq_len: usize,
    tokens: Array2<T>,
    /// Positional slot of every row of `tokens`.
    slots: Vec<usize>,
    blocks: Vec<BlockTape<T>>,
    norm: NormTape<T>,
}

impl<T: Scalar> EncoderParams<T> {
    fn slot_of(&self, pos: usize, grid_side: usize) -> usize {
        1 + (pos / grid_side) * self.config.max_grid + pos % grid_side
    }

    fn check_batch(&self, seqs: &[TokenSequence]) -> Result<usize> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::Batching("empty batch".into()))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::Batching("sequences must hold at least one token".into()));
        }
        for (i, s) in seqs.iter().enumerate() {
            if s.len() != len {
                return Err(Error::Batching(format!(
                    "sequence {i} has {} tokens, sequence 0 has {len}",
                    s.len()
                )));
            }
            if s.token_dim() != self.config.token_dim() {
                return Err(Error::Dimension(format!(
                    "token dim {} does not match patch size {} (expected {})",
                    s.token_dim(),
                    self.config.patch_size,
                    self.config.token_dim()
                )));
            }
            if s.grid_side > self.config.max_grid {
                return Err(Error::Dimension(format!(
                    "grid side {} exceeds max_grid {}",
                    s.grid_side, self.config.max_grid
                )));
            }
            if s.positions.iter().any(|&p| p >= s.grid_side * s.grid_side) {
                return Err(Error::Dimension("token position outside its grid".into()));
            }
        }
        Ok(len)
    }

    /// Embeds one `[CLS]` per sample, returns `(B·n) × d` with `n = L + 1`.
    fn embed(&self, seqs: &[TokenSequence], len: usize) -> (Array2<T>, Array2<T>, Vec<usize>) {
        let b = seqs.len();
        let d = self.config.hidden_dim;
        let n = len + 1;
        let mut tokens = Array2::<T>::zeros((b * len, self.config.token_dim()));
        let mut slots = Vec::with_capacity(b * len);
        for (i, s) in seqs.iter().enumerate() {
            let mut dst = tokens.slice_mut(s![i * len..(i + 1) * len, ..]);
            Zip::from(&mut dst)
                .and(&s.tokens)
                .for_each(|d, &v| *d = T::lit((v as f64 - PIXEL_MEAN) / PIXEL_STD));
            slots.extend(s.positions.iter().map(|&p| self.slot_of(p, s.grid_side)));
        }
        let emb = self.patch_embed.forward(&tokens.view());
        let mut x = Array2::<T>::zeros((b * n, d));
        let cls = &self.cls_token + &self.pos_embed.row(0);
        for i in 0..b {
            x.row_mut(i * n).assign(&cls);
            for t in 0..len {
                let r = i * len + t;
                let mut row = x.row_mut(i * n + 1 + t);
                row.assign(&emb.row(r));
                row += &self.pos_embed.row(slots[r]);
            }
        }
        (x, tokens, slots)
    }

    fn attention(&self, qkv: &Array2<T>, batch: usize, n: usize, keep: bool) -> (Array2<T>, Vec<Array2<T>>) {
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let w = 3 * d;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qkv = qkv.as_standard_layout();
        let src = qkv.as_slice().unwrap();
        let mut ctx = vec![T::zero(); batch * n * d];
        let mut attn = Vec::with_capacity(if keep { batch * heads } else { 0 });
        let mut kt = vec![T::zero(); dh * n];
        let mut scores = Array2::<T>::zeros((n, n));
        for b in 0..batch {
            let base = b * n;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                transpose_into(&mut kt, src, base, n, w, ko, dh);
                let sc = scores.as_slice_mut().unwrap();
                sc.fill(T::zero());
                for i in 0..n {
                    let q = &src[(base + i) * w + qo..][..dh];
                    let row = &mut sc[i * n..(i + 1) * n];
                    for (c, &qc) in q.iter().enumerate() {
                        axpy(row, qc * scale, &kt[c * n..(c + 1) * n]);
                    }
                }
                softmax_rows_inplace(&mut scores);
                let sc = scores.as_slice().unwrap();
                for i in 0..n {
                    let out = &mut ctx[(base + i) * d + h * dh..][..dh];
                    for j in 0..n {
                        axpy(out, sc[i * n + j], &src[(base + j) * w + vo..][..dh]);
                    }
                }
                if keep {
                    attn.push(scores.clone());
                }
            }
        }
        (Array2::from_shape_vec((batch * n, d), ctx).unwrap(), attn)
    }

    fn attention_backward(&self, tape: &BlockTape<T>, dctx: &Array2<T>, batch: usize, n: usize) -> Array2<T> {
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let w = 3 * d;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let qkv = tape.qkv.as_standard_layout();
        let src = qkv.as_slice().unwrap();
        let dctx = dctx.as_standard_layout();
        let dout = dctx.as_slice().unwrap();
        let mut dqkv = vec![T::zero(); batch * n * w];
        let mut vt = vec![T::zero(); dh * n];
        let mut ds = vec![T::zero(); n * n];
        for b in 0..batch {
            let base = b * n;
            for h in 0..heads {
                let a = tape.attn[b * heads + h].as_slice().unwrap();
                let (qo, ko, vo, co) = (h * dh, d + h * dh, 2 * d + h * dh, h * dh);
                transpose_into(&mut vt, src, base, n, w, vo, dh);
                ds.fill(T::zero());
                for i in 0..n {
                    let g = &dout[(base + i) * d + co..][..dh];
                    let row = &mut ds[i * n..(i + 1) * n];
                    for (c, &gc) in g.iter().enumerate() {
                        axpy(row, gc, &vt[c * n..(c + 1) * n]);
                    }
                    // dv_j += a_ij · g_i
                    for j in 0..n {
                        axpy(&mut dqkv[(base + j) * w + vo..][..dh], a[i * n + j], g);
                    }
                }
                // softmax backward
                for i in 0..n {
                    let p = &a[i * n..(i + 1) * n];
                    let row = &mut ds[i * n..(i + 1) * n];
                    let dot = row.iter().zip(p).map(|(&x, &y)| x * y).sum::<T>();
                    for (g, &p) in row.iter_mut().zip(p) {
                        *g = p * (*g - dot) * scale;
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let sij = ds[i * n + j];
                        axpy(&mut dqkv[(base + i) * w + qo..][..dh], sij, &src[(base + j) * w + ko..][..dh]);
                        axpy(&mut dqkv[(base + j) * w + ko..][..dh], sij, &src[(base + i) * w + qo..][..dh]);
                    }
                }
            }
        }
        Array2::from_shape_vec((batch * n, w), dqkv).unwrap()
    }

    fn forward_impl(&self, seqs: &[TokenSequence], keep: bool) -> Result<(Array2<T>, Option<Tape<T>>)> {
        let len = self.check_batch(seqs)?;
        let batch = seqs.len();
        let n = len + 1;
        let (mut x, tokens, slots) = self.embed(seqs, len);
        let mut block_tapes = Vec::with_capacity(if keep { self.blocks.len() } else { 0 });
        for (li, block) in self.blocks.iter().enumerate() {
            let (h1, norm1) = block.norm1.forward(&x);
            let qkv = block.qkv.forward(&h1.view());
            let (ctx, attn) = self.attention(&qkv, batch, n, keep);
            x += &block.proj.forward(&ctx.view());
            let (h2, norm2) = block.norm2.forward(&x);
            let pre_act = block.fc1.forward(&h2.view());
            let act = pre_act.mapv(gelu);
            x += &block.fc2.forward(&act.view());
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!("encoder blocks.{li}"),
                    step: None,
                });
            }
            if keep {
                block_tapes.push(BlockTape {
                    norm1,
                    h1,
                    qkv,
                    attn,
                    ctx,
                    norm2,
                    h2,
                    pre_act,
                    act,
                });
            }
        }
        let cls_rows: Vec<usize> = (0..batch).map(|i| i * n).collect();
        let cls = x.select(Axis(0), &cls_rows);
        let (z, norm) = self.norm.forward(&cls);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                location: "encoder norm".into(),
                step: None,
            });
        }
        let tape = keep.then(|| Tape {
            batch,
            seq_len: n,
            tokens,
            slots,
            blocks: block_tapes,
            norm,
        });
        Ok((z, tape))
    }

    /// `[CLS]` embedding of a single sequence.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Array1<T>> {
        let (z, _) = self.forward_impl(std::slice::from_ref(seq), false)?;
        Ok(z.row(0).to_owned())
    }

    /// `B × d` embeddings of equally long sequences.
    pub fn encode_batch(&self, seqs: &[TokenSequence]) -> Result<Array2<T>> {
        Ok(self.forward_impl(seqs, false)?.0)
    }

    /// Forward pass that records what [`EncoderParams::backward`] needs.
    pub fn forward_tape(&self, seqs: &[TokenSequence]) -> Result<(Array2<T>, Tape<T>)> {
        let (z, tape) = self.forward_impl(seqs, true)?;
        Ok((z, tape.expect("tape requested")))
    }

    /// Backpropagates `dz` (`B × d`) and accumulates parameter gradients into `grad`.
    pub fn backward(&self, tape: &Tape<T>, dz: &Array2<T>, grad: &mut EncoderParams<T>) -> Result<()> {
        let batch = tape.batch;
        let n = tape.seq_len;
        let d = self.config.hidden_dim;
        if dz.dim() != (batch, d) {
            return Err(Error::Dimension(format!(
                "upstream gradient has shape {:?}, expected {:?}",
                dz.dim(),
                (batch, d)
            )));
        }
        let dcls = self.norm.backward(&tape.norm, dz, &mut grad.norm);
        let mut dx = Array2::<T>::zeros((batch * n, d));
        for i in 0..batch {
            dx.row_mut(i * n).assign(&dcls.row(i));
        }
        for ((block, bt), bgrad) in self
            .blocks
            .iter()
            .zip(&tape.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            // mlp branch
            let dact = block.fc2.backward(&bt.act.view(), &dx, &mut bgrad.fc2);
            let mut dpre = dact;
            Zip::from(&mut dpre)
                .and(&bt.pre_act)
                .for_each(|g, &u| *g *= gelu_grad(u));
            let dh2 = block.fc1.backward(&bt.h2.view(), &dpre, &mut bgrad.fc1);
            dx += &block.norm2.backward(&bt.norm2, &dh2, &mut bgrad.norm2);
            // attention branch
            let dctx = block.proj.backward(&bt.ctx.view(), &dx, &mut bgrad.proj);
            let dqkv = self.attention_backward(bt, &dctx, batch, n);
            let dh1 = block.qkv.backward(&bt.h1.view(), &dqkv, &mut bgrad.qkv);
            dx += &block.norm1.backward(&bt.norm1, &dh1, &mut bgrad.norm1);
        }
        // embedding
        let len = n - 1;
        let mut demb = Array2::<T>::zeros((batch * len, d));
        for i in 0..batch {
            let mut cls_g = grad.cls_token.view_mut();
            cls_g += &dx.row(i * n);
            let mut pos0 = grad.pos_embed.row_mut(0);
            pos0 += &dx.row(i * n);
            for t in 0..len {
                let r = i * len + t;
                let src = dx.row(i * n + 1 + t);
                demb.row_mut(r).assign(&src);
                let mut pos = grad.pos_embed.row_mut(tape.slots[r]);
                pos += &src;
            }
        }
        self.patch_embed
            .accumulate(&tape.tokens.view(), &demb, &mut grad.patch_embed);
        Ok(())
    }

    /// Loss value and exact parameter gradients for a loss over the batch embeddings.
    ///
    /// `loss` receives the `B × d` embeddings and returns the scalar loss with
    /// its gradient with respect to those embeddings.
    pub fn gradients<F>(&self, seqs: &[TokenSequence], loss: F) -> Result<(T, EncoderParams<T>)>
    where
        F: FnOnce(&Array2<T>) -> Result<(T, Array2<T>)>,
    {
        let (z, tape) = self.forward_tape(seqs)?;
        let (value, dz) = loss(&z)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                location: "loss".into(),
                step: None,
            });
        }
        let mut grad = self.zeros_like();
        self.backward(&tape, &dz, &mut grad)?;
        Ok((value, grad))
    }
}
