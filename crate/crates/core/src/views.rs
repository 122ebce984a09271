//! Augmentation, patchification and anchor masking.
//!
//! A [`ViewSet`] holds one unmasked target view plus `1 + n_focal` anchor
//! views: the randomly masked global view first, then the focal crops. Masked
//! tokens are dropped from the sequence; `positions` keeps the grid slot of
//! every surviving token.

use ndarray::{s, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::Image;
use crate::error::{Error, Result};
use crate::num::round_count;
use crate::rng::{RngKey, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorJitter {
    pub enabled: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            enabled: true,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizontalFlip {
    pub enabled: bool,
    pub probability: f32,
}

impl Default for HorizontalFlip {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianBlur {
    pub enabled: bool,
    pub probability: f32,
    pub sigma_min: f32,
    pub sigma_max: f32,
}

impl Default for GaussianBlur {
    fn default() -> Self {
        Self {
            enabled: true,
            probability: 0.5,
            sigma_min: 0.1,
            sigma_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResizedCrop {
    pub scale_min: f32,
    pub scale_max: f32,
    pub ratio_min: f32,
    pub ratio_max: f32,
    pub output_size: usize,
}

impl Default for ResizedCrop {
    fn default() -> Self {
        Self {
            scale_min: 0.3,
            scale_max: 1.0,
            ratio_min: 3.0 / 4.0,
            ratio_max: 4.0 / 3.0,
            output_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub color_jitter: ColorJitter,
    pub horizontal_flip: HorizontalFlip,
    pub gaussian_blur: GaussianBlur,
    pub random_resized_crop: ResizedCrop,
}

impl AugmentConfig {
    /// Small-crop settings used for focal anchor views.
    pub fn focal(output_size: usize) -> Self {
        Self {
            random_resized_crop: ResizedCrop {
                scale_min: 0.05,
                scale_max: 0.3,
                output_size,
                ..ResizedCrop::default()
            },
            ..Self::default()
        }
    }

    /// Every augmentation off and a full-image crop: `augment` only resizes.
    pub fn identity(output_size: usize) -> Self {
        Self {
            color_jitter: ColorJitter {
                enabled: false,
                ..ColorJitter::default()
            },
            horizontal_flip: HorizontalFlip {
                enabled: false,
                ..HorizontalFlip::default()
            },
            gaussian_blur: GaussianBlur {
                enabled: false,
                ..GaussianBlur::default()
            },
            random_resized_crop: ResizedCrop {
                scale_min: 1.0,
                scale_max: 1.0,
                ratio_min: 1.0,
                ratio_max: 1.0,
                output_size,
            },
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        let prob = |name: &str, p: f32| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(format!("{field}.{name}"), "probability must lie in [0, 1]"))
            }
        };
        prob("horizontal_flip.probability", self.horizontal_flip.probability)?;
        prob("gaussian_blur.probability", self.gaussian_blur.probability)?;
        let cj = &self.color_jitter;
        for (name, v) in [
            ("brightness", cj.brightness),
            ("contrast", cj.contrast),
            ("saturation", cj.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(
                    format!("{field}.color_jitter.{name}"),
                    "max delta must lie in [0, 1]",
                ));
            }
        }
        let gb = &self.gaussian_blur;
        if !(gb.sigma_min > 0.0 && gb.sigma_min <= gb.sigma_max) {
            return Err(Error::config(
                format!("{field}.gaussian_blur"),
                "need 0 < sigma_min <= sigma_max",
            ));
        }
        let rc = &self.random_resized_crop;
        if !(rc.scale_min > 0.0 && rc.scale_min <= rc.scale_max && rc.scale_max <= 1.0) {
            return Err(Error::config(
                format!("{field}.random_resized_crop"),
                "scale range must satisfy 0 < min <= max <= 1",
            ));
        }
        if !(rc.ratio_min > 0.0 && rc.ratio_min <= rc.ratio_max) {
            return Err(Error::config(
                format!("{field}.random_resized_crop"),
                "aspect ratio range must satisfy 0 < min <= max",
            ));
        }
        if rc.output_size == 0 {
            return Err(Error::config(
                format!("{field}.random_resized_crop.output_size"),
                "must be positive",
            ));
        }
        Ok(())
    }
}

/// Everything needed to turn one image into a [`ViewSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    /// Applied independently to the target and to the global anchor.
    pub global: AugmentConfig,
    pub focal: AugmentConfig,
    pub patch_size: usize,
    pub keep_fraction: f64,
    pub n_focal: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            global: AugmentConfig::default(),
            focal: AugmentConfig::focal(32),
            patch_size: 8,
            keep_fraction: 0.5,
            n_focal: 4,
        }
    }
}

impl ViewConfig {
    pub fn global_size(&self) -> usize {
        self.global.random_resized_crop.output_size
    }

    pub fn focal_size(&self) -> usize {
        self.focal.random_resized_crop.output_size
    }

    pub fn global_tokens(&self) -> usize {
        (self.global_size() / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate("views.global")?;
        self.focal.validate("views.focal")?;
        if self.patch_size == 0 {
            return Err(Error::config("views.patch_size", "must be positive"));
        }
        if !self.global_size().is_multiple_of(self.patch_size) {
            return Err(Error::Divisibility {
                size: self.global_size(),
                patch: self.patch_size,
            });
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::config("views.keep_fraction", "must lie in (0, 1]"));
        }
        if round_count(self.keep_fraction * self.global_tokens() as f64) == 0 {
            return Err(Error::EmptySequence {
                len: self.global_tokens(),
                keep_fraction: self.keep_fraction,
            });
        }
        if self.n_focal > 0 {
            if self.focal_size() >= self.global_size() {
                return Err(Error::config(
                    "views.focal.random_resized_crop.output_size",
                    "focal crops must be smaller than the global view",
                ));
            }
            if !self.focal_size().is_multiple_of(self.patch_size) {
                return Err(Error::Divisibility {
                    size: self.focal_size(),
                    patch: self.patch_size,
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Image operations
// ---------------------------------------------------------------------------

/// Bilinear resample of the box `(top, left, height, width)` to `out × out`.
pub fn resize_box(img: &Image, top: f32, left: f32, height: f32, width: f32, out: usize) -> Image {
    let (h, w, c) = img.dim();
    let sy = height / out as f32;
    let sx = width / out as f32;
    let mut res = Image::zeros((out, out, c));
    for oy in 0..out {
        let fy = (top + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out {
            let fx = (left + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..c {
                let top_row = img[[y0, x0, ch]] * (1.0 - wx) + img[[y0, x1, ch]] * wx;
                let bottom_row = img[[y1, x0, ch]] * (1.0 - wx) + img[[y1, x1, ch]] * wx;
                res[[oy, ox, ch]] = top_row * (1.0 - wy) + bottom_row * wy;
            }
        }
    }
    res
}

/// Deterministic evaluation view: centered square crop resized to `size`.
pub fn center_view(img: &Image, size: usize) -> Image {
    let (h, w, _) = img.dim();
    let side = h.min(w);
    let top = (h - side) / 2;
    let left = (w - side) / 2;
    resize_box(img, top as f32, left as f32, side as f32, side as f32, size)
}

fn sample_crop(h: usize, w: usize, cfg: &ResizedCrop, rng: &mut Stream) -> (usize, usize, usize, usize) {
    let area = (h * w) as f32;
    let (log_lo, log_hi) = (cfg.ratio_min.ln(), cfg.ratio_max.ln());
    for _ in 0..10 {
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.random_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let ratio = if log_hi > log_lo {
            rng.random_range(log_lo..=log_hi).exp()
        } else {
            cfg.ratio_min
        };
        let target = scale * area;
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let side = h.min(w);
    ((h - side) / 2, (w - side) / 2, side, side)
}

pub fn flip_horizontal(img: &Image) -> Image {
    img.slice(s![.., ..;-1, ..]).to_owned()
}

fn clamp_unit(img: &mut Image) {
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn adjust_brightness(img: &mut Image, factor: f32) {
    img.mapv_inplace(|v| v * factor);
    clamp_unit(img);
}

fn adjust_contrast(img: &mut Image, factor: f32) {
    let (h, w, _) = img.dim();
    let mut mean = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            mean += luma(img[[y, x, 0]], img[[y, x, 1]], img[[y, x, 2]]);
        }
    }
    mean /= (h * w) as f32;
    img.mapv_inplace(|v| (v - mean) * factor + mean);
    clamp_unit(img);
}

fn adjust_saturation(img: &mut Image, factor: f32) {
    for mut px in img.lanes_mut(Axis(2)) {
        let g = luma(px[0], px[1], px[2]);
        px.mapv_inplace(|v| ((v - g) * factor + g).clamp(0.0, 1.0));
    }
}

pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w, c) = img.dim();
    let mut tmp = Image::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * img[[y, xx, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Image::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[[yy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Random resized crop, then flip, colour jitter and blur as enabled.
pub fn augment(image: &Image, config: &AugmentConfig, rng: &mut Stream) -> Image {
    let (h, w, _) = image.dim();
    let crop = &config.random_resized_crop;
    let (top, left, ch, cw) = sample_crop(h, w, crop, rng);
    let mut out = resize_box(image, top as f32, left as f32, ch as f32, cw as f32, crop.output_size);

    let flip = &config.horizontal_flip;
    if flip.enabled && rng.random::<f32>() < flip.probability {
        out = flip_horizontal(&out);
    }

    let cj = &config.color_jitter;
    if cj.enabled {
        let mut order = [0usize, 1, 2];
        order.shuffle(rng);
        let factor = |delta: f32, rng: &mut Stream| {
            if delta > 0.0 {
                rng.random_range(1.0 - delta..=1.0 + delta)
            } else {
                1.0
            }
        };
        for op in order {
            match op {
                0 => {
                    let f = factor(cj.brightness, rng);
                    adjust_brightness(&mut out, f)
                }
                1 => {
                    let f = factor(cj.contrast, rng);
                    adjust_contrast(&mut out, f)
                }
                _ => {
                    let f = factor(cj.saturation, rng);
                    adjust_saturation(&mut out, f)
                }
            }
        }
    }

    let gb = &config.gaussian_blur;
    if gb.enabled && rng.random::<f32>() < gb.probability {
        let sigma = if gb.sigma_max > gb.sigma_min {
            rng.random_range(gb.sigma_min..=gb.sigma_max)
        } else {
            gb.sigma_min
        };
        out = gaussian_blur(&out, sigma);
    }
    clamp_unit(&mut out);
    out
}

// ---------------------------------------------------------------------------
// Token sequences
// ---------------------------------------------------------------------------

/// Patch vectors of one view plus where each patch sits on the view's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `L × patch² · 3`, patch pixels in (row, column, channel) order.
    pub tokens: Array2<f32>,
    /// Raster index of every kept token on the `grid_side × grid_side` grid; strictly increasing.
    pub positions: Vec<usize>,
    pub grid_side: usize,
    /// One flag per grid slot.
    pub kept: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn is_unmasked(&self) -> bool {
        self.kept.iter().all(|&k| k)
    }

    /// Checks the structural invariants.
    pub fn check(&self) -> Result<()> {
        let kept_count = self.kept.iter().filter(|&&k| k).count();
        if self.kept.len() != self.grid_side * self.grid_side
            || kept_count != self.positions.len()
            || self.tokens.nrows() != self.positions.len()
        {
            return Err(Error::Dimension("token sequence mask/positions disagree".into()));
        }
        if !self.positions.windows(2).all(|w| w[0] < w[1])
            || self.positions.iter().any(|&p| !self.kept[p])
        {
            return Err(Error::Dimension("positions must be strictly increasing kept slots".into()));
        }
        Ok(())
    }

    /// Keeps the tokens at the given row indices (which must be increasing).
    pub fn select(&self, rows: &[usize]) -> TokenSequence {
        let tokens = self.tokens.select(Axis(0), rows);
        let positions: Vec<usize> = rows.iter().map(|&r| self.positions[r]).collect();
        let mut kept = vec![false; self.kept.len()];
        for &p in &positions {
            kept[p] = true;
        }
        TokenSequence {
            tokens,
            positions,
            grid_side: self.grid_side,
            kept,
        }
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<TokenSequence> {
    let (h, w, c) = image.dim();
    if h != w {
        return Err(Error::Dimension(format!("patchify expects a square image, got {h}x{w}")));
    }
    if patch_size == 0 || h % patch_size != 0 {
        return Err(Error::Divisibility {
            size: h,
            patch: patch_size,
        });
    }
    let side = h / patch_size;
    let dim = patch_size * patch_size * c;
    let mut tokens = Array2::zeros((side * side, dim));
    for gy in 0..side {
        for gx in 0..side {
            let mut row = tokens.row_mut(gy * side + gx);
            let mut k = 0;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for ch in 0..c {
                        row[k] = image[[gy * patch_size + py, gx * patch_size + px, ch]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(TokenSequence {
        tokens,
        positions: (0..side * side).collect(),
        grid_side: side,
        kept: vec![true; side * side],
    })
}

/// Inverse of [`patchify`]; dropped patches come back as zeros.
pub fn unpatchify(seq: &TokenSequence, patch_size: usize) -> Result<Image> {
    let dim = seq.token_dim();
    if patch_size == 0 || !dim.is_multiple_of(patch_size * patch_size) {
        return Err(Error::Dimension(format!(
            "token dim {dim} does not match patch size {patch_size}"
        )));
    }
    let c = dim / (patch_size * patch_size);
    let size = seq.grid_side * patch_size;
    let mut img = Image::zeros((size, size, c));
    for (row, &pos) in seq.positions.iter().enumerate() {
        let (gy, gx) = (pos / seq.grid_side, pos % seq.grid_side);
        let mut k = 0;
        for py in 0..patch_size {
            for px in 0..patch_size {
                for ch in 0..c {
                    img[[gy * patch_size + py, gx * patch_size + px, ch]] = seq.tokens[[row, k]];
                    k += 1;
                }
            }
        }
    }
    Ok(img)
}

/// Number of tokens a mask with `keep_fraction` keeps out of `len`.
pub fn keep_count(len: usize, keep_fraction: f64) -> usize {
    round_count(keep_fraction * len as f64)
}

/// Keeps `round(keep_fraction · L)` tokens chosen uniformly without replacement.
pub fn random_mask(seq: &TokenSequence, keep_fraction: f64, rng: &mut Stream) -> Result<TokenSequence> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::config("keep_fraction", "must lie in (0, 1]"));
    }
    let len = seq.len();
    let keep = keep_count(len, keep_fraction);
    if keep == 0 {
        return Err(Error::EmptySequence { len, keep_fraction });
    }
    if keep == len {
        return Ok(seq.clone());
    }
    let mut rows = index::sample(rng, len, keep).into_vec();
    rows.sort_unstable();
    Ok(seq.select(&rows))
}

/// `n_focal` independently cropped and augmented small views.
pub fn focal_views(
    image: &Image,
    n_focal: usize,
    config: &AugmentConfig,
    patch_size: usize,
    rng: &mut Stream,
) -> Result<Vec<TokenSequence>> {
    let crop = config.random_resized_crop.output_size;
    if patch_size == 0 || !crop.is_multiple_of(patch_size) {
        return Err(Error::Divisibility {
            size: crop,
            patch: patch_size,
        });
    }
    (0..n_focal)
        .map(|_| patchify(&augment(image, config, rng), patch_size))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub target: TokenSequence,
    /// Masked global view first, then the focal views.
    pub anchors: Vec<TokenSequence>,
}

impl ViewSet {
    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }
}

/// Builds the target and anchor views of one image. Each part draws from its
/// own child of `key`, so the parts are independent of one another.
pub fn make_viewset(image: &Image, config: &ViewConfig, key: &RngKey) -> Result<ViewSet> {
    let target_img = augment(image, &config.global, &mut key.with("target").stream());
    let target = patchify(&target_img, config.patch_size)?;

    let anchor_img = augment(image, &config.global, &mut key.with("anchor").stream());
    let anchor = patchify(&anchor_img, config.patch_size)?;
    let masked = random_mask(&anchor, config.keep_fraction, &mut key.with("mask").stream())?;

    let mut anchors = Vec::with_capacity(1 + config.n_focal);
    anchors.push(masked);
    if config.n_focal > 0 {
        if config.focal_size() >= config.global_size() {
            return Err(Error::config(
                "views.focal.random_resized_crop.output_size",
                "focal crops must be smaller than the global view",
            ));
        }
        anchors.extend(focal_views(
            image,
            config.n_focal,
            &config.focal,
            config.patch_size,
            &mut key.with("focal").stream(),
        )?);
    }
    Ok(ViewSet { target, anchors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array3;

    fn test_image(size: usize) -> Image {
        Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
            ((y * 7 + x * 3 + c * 11) % 17) as f32 / 16.0
        })
    }

    #[test]
    fn identity_config_returns_input() {
        let img = test_image(16);
        let out = augment(&img, &AugmentConfig::identity(16), &mut stream(0, "a"));
        assert_eq!(out, img);
    }

    #[test]
    fn forced_flip_reverses_columns_and_is_involution() {
        let img = test_image(12);
        let mut cfg = AugmentConfig::identity(12);
        cfg.horizontal_flip = HorizontalFlip {
            enabled: true,
            probability: 1.0,
        };
        let out = augment(&img, &cfg, &mut stream(0, "f"));
        for y in 0..12 {
            for x in 0..12 {
                for c in 0..3 {
                    assert_eq!(out[[y, x, c]], img[[y, 11 - x, c]]);
                }
            }
        }
        assert_eq!(flip_horizontal(&out), img);
    }

    #[test]
    fn augment_output_shape_and_range() {
        let img = test_image(64);
        let cfg = AugmentConfig::focal(32);
        for i in 0..20 {
            let out = augment(&img, &cfg, &mut stream(i, "r"));
            assert_eq!(out.dim(), (32, 32, 3));
            assert!(out.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::from_elem((8, 8, 3), 0.25);
        let out = gaussian_blur(&img, 0.8);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn patchify_counts() {
        assert_eq!(patchify(&test_image(64), 8).unwrap().len(), 64);
        assert_eq!(patchify(&test_image(32), 8).unwrap().len(), 16);
        assert!(matches!(
            patchify(&test_image(30), 8),
            Err(Error::Divisibility { size: 30, patch: 8 })
        ));
    }

    #[test]
    fn mask_then_unpatchify_keeps_selected_pixels() {
        let img = test_image(16);
        let seq = patchify(&img, 4).unwrap();
        let masked = random_mask(&seq, 0.5, &mut stream(3, "m")).unwrap();
        masked.check().unwrap();
        assert_eq!(masked.len(), 8);
        let back = unpatchify(&masked, 4).unwrap();
        for &p in &masked.positions {
            let (gy, gx) = (p / 4, p % 4);
            assert_eq!(
                back.slice(s![gy * 4..gy * 4 + 4, gx * 4..gx * 4 + 4, ..]),
                img.slice(s![gy * 4..gy * 4 + 4, gx * 4..gx * 4 + 4, ..])
            );
        }
    }

    #[test]
    fn mask_rejects_empty_and_bad_fraction() {
        let seq = patchify(&test_image(16), 4).unwrap();
        assert!(matches!(
            random_mask(&seq, 0.01, &mut stream(0, "m")),
            Err(Error::EmptySequence { .. })
        ));
        assert!(random_mask(&seq, 0.0, &mut stream(0, "m")).is_err());
        assert!(random_mask(&seq, 1.5, &mut stream(0, "m")).is_err());
        assert_eq!(random_mask(&seq, 1.0, &mut stream(0, "m")).unwrap(), seq);
    }

    #[test]
    fn focal_views_shape() {
        let img = test_image(64);
        let views = focal_views(&img, 4, &AugmentConfig::focal(32), 8, &mut stream(1, "f")).unwrap();
        assert_eq!(views.len(), 4);
        assert!(views.iter().all(|v| v.len() == 16 && v.grid_side == 4));
        assert!(focal_views(&img, 0, &AugmentConfig::focal(32), 8, &mut stream(1, "f"))
            .unwrap()
            .is_empty());
        assert!(matches!(
            focal_views(&img, 2, &AugmentConfig::focal(30), 8, &mut stream(1, "f")),
            Err(Error::Divisibility { .. })
        ));
    }

    #[test]
    fn viewset_default_layout() {
        let img = test_image(64);
        let cfg = ViewConfig::default();
        let vs = make_viewset(&img, &cfg, &RngKey::new(9)).unwrap();
        assert_eq!(vs.n_anchors(), 5);
        assert!(vs.target.is_unmasked());
        assert_eq!(vs.target.len(), 64);
        assert_eq!(vs.anchors[0].len(), 32);
        assert!(vs.anchors[1..].iter().all(|a| a.len() == 16));
        let again = make_viewset(&img, &cfg, &RngKey::new(9)).unwrap();
        assert_eq!(vs, again);
    }

    #[test]
    fn view_config_validation() {
        let cfg = ViewConfig {
            keep_fraction: 0.0,
            ..ViewConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = ViewConfig::default();
        cfg.global.horizontal_flip.probability = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ViewConfig::default();
        cfg.focal.random_resized_crop.output_size = 64;
        assert!(cfg.validate().is_err());
        assert!(ViewConfig::default().validate().is_ok());
    }
}
