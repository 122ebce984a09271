//! Downstream evaluation: frozen features, linear probe, fine-tuning, the
//! multi-stage temporal convolution model, F1 metrics and the low-shot harness.
//!
//! Every protocol splits by video (60/20/20 train/val/test from a seeded
//! shuffle), selects the epoch with the best validation macro-F1 (ties go to
//! the lower validation cross-entropy) and reports on the test videos.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_images, DatasetManifest};
use crate::encoder::{EncoderParams, Parameters};
use crate::error::{Error, Result};
use crate::num::{round_count, Scalar};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::RngKey;
use crate::views::{center_view, patchify, TokenSequence};

pub const FEATURE_CACHE_VERSION: u32 = 1;
const FEATURE_MAGIC: &[u8; 8] = b"MSNFEAT\0";
const EXTRACT_CHUNK: usize = 64;

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Frozen per-frame embeddings of one video, in frame order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// `T × d`.
    pub embeddings: Array2<f32>,
    pub labels: Vec<usize>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Deterministic evaluation tokens: center crop resized to `view_size`.
pub fn frame_tokens(image: &crate::dataio::Image, view_size: usize, patch_size: usize) -> Result<TokenSequence> {
    patchify(&center_view(image, view_size), patch_size)
}

fn manifest_labels(manifest: &DatasetManifest, idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let e = &manifest.entries[i];
            e.label.ok_or_else(|| {
                Error::Domain(format!(
                    "frame {}/{} has no label; evaluation needs a labeled manifest",
                    e.video_id, e.frame_index
                ))
            })
        })
        .collect()
}

/// Encodes every frame with `params` (the target encoder of a checkpoint),
/// grouped by video in frame order.
pub fn extract_features(params: &EncoderParams<f32>, manifest: &DatasetManifest, view_size: usize) -> Result<Vec<FeatureSequence>> {
    let patch = params.config.patch_size;
    if !view_size.is_multiple_of(patch) {
        return Err(Error::Divisibility { size: view_size, patch });
    }
    let d = params.config.hidden_dim;
    let mut out = Vec::new();
    for (video_id, idx) in manifest.frames_by_video() {
        let labels = manifest_labels(manifest, &idx)?;
        let mut embeddings = Array2::<f32>::zeros((idx.len(), d));
        for (c, chunk) in idx.chunks(EXTRACT_CHUNK).enumerate() {
            let batch = load_images(manifest, chunk)?;
            let seqs = (0..batch.len())
                .map(|i| frame_tokens(&batch.image(i), view_size, patch))
                .collect::<Result<Vec<_>>>()?;
            let z = params.encode_batch(&seqs)?;
            let start = c * EXTRACT_CHUNK;
            embeddings.slice_mut(s![start..start + chunk.len(), ..]).assign(&z);
        }
        out.push(FeatureSequence {
            video_id,
            embeddings,
            labels,
        });
    }
    Ok(out)
}

fn cache_file(dir: &Path, video_id: &str) -> Result<PathBuf> {
    if video_id.is_empty() || video_id.contains(['/', '\\']) || video_id == "." || video_id == ".." {
        return Err(Error::Domain(format!("video id {video_id:?} cannot name a cache file")));
    }
    Ok(dir.join(format!("{video_id}.feat")))
}

/// Serialized form of one sequence: magic, version, id, `T`, `d`, then
/// `T·d` little-endian `f32` values.
pub fn feature_bytes(seq: &FeatureSequence) -> Vec<u8> {
    let (t, d) = seq.embeddings.dim();
    let mut buf = Vec::with_capacity(32 + seq.video_id.len() + 4 * t * d);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.video_id.len() as u16).to_le_bytes());
    buf.extend_from_slice(seq.video_id.as_bytes());
    buf.extend_from_slice(&(t as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in seq.embeddings.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn write_feature_cache(dir: &Path, seqs: &[FeatureSequence]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for seq in seqs {
        let path = cache_file(dir, &seq.video_id)?;
        fs::write(&path, feature_bytes(seq)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn parse_feature_file(path: &Path, buf: &[u8]) -> Result<(String, Array2<f32>)> {
    let bad = |reason: &str| Error::Decode {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = buf.get(*pos..*pos + n).ok_or_else(|| bad("truncated feature file"))?;
        *pos += n;
        Ok(s)
    };
    let mut pos = 0;
    if take(&mut pos, 8)? != FEATURE_MAGIC {
        return Err(bad("not a feature cache file"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != FEATURE_CACHE_VERSION {
        return Err(bad(&format!("unsupported feature cache version {version}")));
    }
    let n = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let id = String::from_utf8(take(&mut pos, n)?.to_vec()).map_err(|_| bad("video id is not UTF-8"))?;
    let t = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let raw = take(&mut pos, 4 * t * d)?;
    if pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((id, Array2::from_shape_vec((t, d), data).unwrap()))
}

/// Reads cached features for every video of `manifest`; labels come from the manifest.
pub fn read_feature_cache(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<FeatureSequence>> {
    let mut out = Vec::new();
    for (video_id, idx) in manifest.frames_by_video() {
        let path = cache_file(dir, &video_id)?;
        let buf = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (id, embeddings) = parse_feature_file(&path, &buf)?;
        if id != video_id || embeddings.nrows() != idx.len() {
            return Err(Error::Decode {
                path,
                reason: format!(
                    "cache holds {id} with {} frames, manifest has {video_id} with {} frames",
                    embeddings.nrows(),
                    idx.len()
                ),
            });
        }
        out.push(FeatureSequence {
            video_id,
            embeddings,
            labels: manifest_labels(manifest, &idx)?,
        });
    }
    Ok(out)
}

/// Loads the cache when every video is present, otherwise extracts and writes it.
pub fn cached_features(
    params: &EncoderParams<f32>,
    manifest: &DatasetManifest,
    view_size: usize,
    dir: &Path,
) -> Result<Vec<FeatureSequence>> {
    let complete = manifest
        .video_ids()
        .iter()
        .all(|v| cache_file(dir, v).map(|p| p.is_file()).unwrap_or(false));
    if complete {
        return read_feature_cache(dir, manifest);
    }
    let seqs = extract_features(params, manifest, view_size)?;
    write_feature_cache(dir, &seqs)?;
    Ok(seqs)
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// 60/20/20 split of the sorted video ids after a seeded shuffle; every part
/// gets at least one video.
pub fn split_videos(ids: &[String], seed: u64) -> Result<VideoSplit> {
    let mut ids: Vec<String> = ids.to_vec();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < 3 {
        return Err(Error::DegenerateSplit(format!(
            "{n} videos cannot fill train, validation and test splits"
        )));
    }
    ids.shuffle(&mut RngKey::new(seed).with("split").stream());
    let n_test = round_count(0.2 * n as f64).max(1);
    let n_val = round_count(0.2 * n as f64).max(1);
    let test = ids.split_off(n - n_test);
    let val = ids.split_off(n - n_test - n_val);
    Ok(VideoSplit { train: ids, val, test })
}

fn select<'a>(features: &'a [FeatureSequence], ids: &[String]) -> Result<Vec<&'a FeatureSequence>> {
    ids.iter()
        .map(|id| {
            features
                .iter()
                .find(|f| &f.video_id == id)
                .ok_or_else(|| Error::Domain(format!("no features for video {id}")))
        })
        .collect()
}

fn stack(seqs: &[&FeatureSequence]) -> Result<(Array2<f32>, Vec<usize>)> {
    let d = seqs.first().map(|s| s.embeddings.ncols()).unwrap_or(0);
    let rows: usize = seqs.iter().map(|s| s.len()).sum();
    let mut x = Array2::zeros((rows, d));
    let mut y = Vec::with_capacity(rows);
    let mut r = 0;
    for s in seqs {
        if s.embeddings.ncols() != d {
            return Err(Error::Dimension("feature sequences disagree on dimension".into()));
        }
        x.slice_mut(s![r..r + s.len(), ..]).assign(&s.embeddings);
        y.extend_from_slice(&s.labels);
        r += s.len();
    }
    Ok((x, y))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

fn check_pairs(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Domain("F1 needs at least one sample".into()));
    }
    if let Some(&c) = predictions.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::Domain(format!("class {c} outside 0..{n_classes}")));
    }
    Ok(())
}

/// F1 of every class; `None` for a class absent from both predictions and labels.
pub fn per_class_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<Vec<Option<f64>>> {
    check_pairs(predictions, labels, n_classes)?;
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    Ok((0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            (denom > 0).then(|| 2.0 * tp[c] as f64 / denom as f64)
        })
        .collect())
}

/// Unweighted mean of per-class F1 over the classes that occur.
pub fn macro_f1(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    let f1 = per_class_f1(predictions, labels, n_classes)?;
    let present: Vec<f64> = f1.into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Mean over videos of the macro-F1 restricted to each video's ground-truth classes.
pub fn video_f1(videos: &[(Vec<usize>, Vec<usize>)], n_classes: usize) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::Domain("video F1 needs at least one video".into()));
    }
    let mut total = 0.0;
    for (preds, labels) in videos {
        let f1 = per_class_f1(preds, labels, n_classes)?;
        let mut present = vec![false; n_classes];
        for &l in labels {
            present[l] = true;
        }
        let scores: Vec<f64> = (0..n_classes)
            .filter(|&c| present[c])
            .map(|c| f1[c].unwrap_or(0.0))
            .collect();
        total += scores.iter().sum::<f64>() / scores.len() as f64;
    }
    Ok(total / videos.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub macro_f1: f64,
    pub video_f1: Option<f64>,
    pub per_class_f1: Vec<Option<f64>>,
    pub n_samples: usize,
}

/// Frame-level and per-video scores of `(predictions, labels)` pairs, one per video.
pub fn evaluate(videos: &[(Vec<usize>, Vec<usize>)], n_classes: usize) -> Result<MetricsReport> {
    let preds: Vec<usize> = videos.iter().flat_map(|v| v.0.iter().copied()).collect();
    let labels: Vec<usize> = videos.iter().flat_map(|v| v.1.iter().copied()).collect();
    Ok(MetricsReport {
        macro_f1: macro_f1(&preds, &labels, n_classes)?,
        video_f1: Some(video_f1(videos, n_classes)?),
        per_class_f1: per_class_f1(&preds, &labels, n_classes)?,
        n_samples: labels.len(),
    })
}

// ---------------------------------------------------------------------------
// Linear head
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 1e-2,
            weight_decay: 1e-4,
            batch_size: 265,
            epochs: 100,
        }
    }
}

impl ProbeConfig {
    /// Defaults for the temporal model, where a batch is a set of videos.
    pub fn temporal() -> Self {
        Self {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            batch_size: 8,
            epochs: 30,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("{field}.learning_rate"), "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("{field}.weight_decay"), "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(format!("{field}.batch_size"), "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config(format!("{field}.epochs"), "must be positive"));
        }
        Ok(())
    }
}

/// Per-dimension standardization fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f32>,
    pub inv_std: Array1<f32>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f32>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty features");
        let var = x.var_axis(Axis(0), 0.0);
        let inv_std = var.mapv(|v| 1.0 / (v + 1e-6).sqrt());
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        (x - &self.mean) * &self.inv_std
    }
}

/// Affine classifier, `d × C` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl LinearHead {
    pub fn zeros(d: usize, n_classes: usize) -> Self {
        Self {
            weight: Array2::zeros((d, n_classes)),
            bias: Array1::zeros(n_classes),
        }
    }

    pub fn logits(&self, x: &ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn predict(&self, x: &ArrayView2<f32>) -> Vec<usize> {
        argmax_rows(&self.logits(x))
    }

    fn tensors(&self) -> Vec<ArrayViewD<'_, f32>> {
        vec![self.weight.view().into_dyn(), self.bias.view().into_dyn()]
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f32>> {
        vec![self.weight.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }
}

pub fn argmax_rows<T: Scalar>(x: &Array2<T>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Mean softmax cross-entropy over rows and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> (T, Array2<T>) {
    let n = T::from_usize(labels.len()).unwrap();
    let mut probs = crate::objective::softmax_rows(logits);
    let mut loss = T::zero();
    for (mut row, &l) in probs.rows_mut().into_iter().zip(labels) {
        loss -= row[l].max(T::lit(1e-30)).ln();
        row[l] -= T::one();
        row.mapv_inplace(|v| v / n);
    }
    (loss / n, probs)
}

fn minibatches(n: usize, batch: usize, key: &RngKey) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut key.stream());
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn distinct_classes(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Result of a linear probe.
#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub head: LinearHead,
    pub standardizer: Standardizer,
    pub val_macro_f1: f64,
    pub best_epoch: usize,
    /// Test-split metrics of the selected head.
    pub report: MetricsReport,
    pub split: VideoSplit,
}

/// Validation score used for epoch selection.
struct Selection {
    macro_f1: f64,
    loss: f64,
}

impl Selection {
    fn of_logits(logits: &Array2<f32>, labels: &[usize], n_classes: usize) -> Result<Self> {
        Ok(Self {
            macro_f1: macro_f1(&argmax_rows(logits), labels, n_classes)?,
            loss: f64::from(softmax_cross_entropy(logits, labels).0),
        })
    }

    fn improves(&self, incumbent: Option<&Selection>) -> bool {
        incumbent.is_none_or(|b| self.macro_f1 > b.macro_f1 || (self.macro_f1 == b.macro_f1 && self.loss < b.loss))
    }
}

/// Trains a linear head on frozen features with the video split derived from `seed`.
pub fn linear_probe(features: &[FeatureSequence], n_classes: usize, config: &ProbeConfig, seed: u64) -> Result<ProbeOutcome> {
    let ids: Vec<String> = features.iter().map(|f| f.video_id.clone()).collect();
    let split = split_videos(&ids, seed)?;
    probe_on_split(features, &split, n_classes, config, seed)
}

/// Linear probe on an explicit split.
pub fn probe_on_split(
    features: &[FeatureSequence],
    split: &VideoSplit,
    n_classes: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    config.validate("probe")?;
    let (train_x, train_y) = stack(&select(features, &split.train)?)?;
    if train_x.ncols() == 0 {
        return Err(Error::Dimension("zero-dimensional features".into()));
    }
    if distinct_classes(&train_y) < 2 {
        return Err(Error::DegenerateSplit("training split holds fewer than two classes".into()));
    }
    let standardizer = Standardizer::fit(&train_x);
    let train_x = standardizer.apply(&train_x);
    let val: Vec<&FeatureSequence> = select(features, &split.val)?;
    let (val_x, val_y) = stack(&val)?;
    let val_x = standardizer.apply(&val_x);

    let mut head = LinearHead::zeros(train_x.ncols(), n_classes);
    let mut opt = Optimizer::new(config.optimizer, &head.tensors());
    let mut best: Option<(Selection, LinearHead, usize)> = None;
    let key = RngKey::new(seed).with("probe");
    for epoch in 0..config.epochs {
        for batch in minibatches(train_x.nrows(), config.batch_size, &key.with_u64(epoch as u64)) {
            let xb = train_x.select(Axis(0), &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let (_, dlogits) = softmax_cross_entropy(&head.logits(&xb.view()), &yb);
            let gw = xb.t().dot(&dlogits);
            let gb = dlogits.sum_axis(Axis(0));
            opt.step(
                head.tensors_mut(),
                vec![gw.view().into_dyn(), gb.view().into_dyn()],
                config.learning_rate,
                config.weight_decay,
            )?;
        }
        let sel = Selection::of_logits(&head.logits(&val_x.view()), &val_y, n_classes)?;
        if sel.improves(best.as_ref().map(|b| &b.0)) {
            best = Some((sel, head.clone(), epoch));
        }
    }
    let (Selection { macro_f1: val_macro_f1, .. }, head, best_epoch) = best.expect("at least one epoch");
    let test = select(features, &split.test)?;
    let videos = test
        .iter()
        .map(|s| (head.predict(&standardizer.apply(&s.embeddings).view()), s.labels.clone()))
        .collect::<Vec<_>>();
    Ok(ProbeOutcome {
        report: evaluate(&videos, n_classes)?,
        head,
        standardizer,
        val_macro_f1,
        best_epoch,
        split: split.clone(),
    })
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub probe: ProbeConfig,
    /// Encoder learning rate as a multiple of the head learning rate.
    pub encoder_lr_scale: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            probe: ProbeConfig {
                epochs: 10,
                ..ProbeConfig::default()
            },
            encoder_lr_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub val_macro_f1: f64,
    pub best_epoch: usize,
    pub report: MetricsReport,
    pub encoder: EncoderParams<f32>,
    pub head: LinearHead,
}

fn frame_sets(
    manifest: &DatasetManifest,
    ids: &[String],
    view_size: usize,
    patch: usize,
) -> Result<Vec<(Vec<TokenSequence>, Vec<usize>)>> {
    let frames = manifest.frames_by_video();
    ids.iter()
        .map(|id| {
            let idx = frames
                .get(id)
                .ok_or_else(|| Error::Domain(format!("video {id} not in manifest")))?;
            let batch = load_images(manifest, idx)?;
            let seqs = (0..batch.len())
                .map(|i| frame_tokens(&batch.image(i), view_size, patch))
                .collect::<Result<Vec<_>>>()?;
            Ok((seqs, manifest_labels(manifest, idx)?))
        })
        .collect()
}

fn encode_all(params: &EncoderParams<f32>, seqs: &[TokenSequence]) -> Result<Array2<f32>> {
    let mut out = Array2::zeros((seqs.len(), params.config.hidden_dim));
    for (c, chunk) in seqs.chunks(EXTRACT_CHUNK).enumerate() {
        let z = params.encode_batch(chunk)?;
        out.slice_mut(s![c * EXTRACT_CHUNK..c * EXTRACT_CHUNK + chunk.len(), ..])
            .assign(&z);
    }
    Ok(out)
}

/// Trains the encoder and a linear head end to end on center views. The
/// standardization is fitted once on the initial training features and then
/// held fixed, so an encoder scale of zero reduces to [`linear_probe`].
pub fn finetune(
    params: &EncoderParams<f32>,
    manifest: &DatasetManifest,
    view_size: usize,
    config: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    config.probe.validate("finetune.probe")?;
    if !(config.encoder_lr_scale >= 0.0 && config.encoder_lr_scale.is_finite()) {
        return Err(Error::config("finetune.encoder_lr_scale", "must be non-negative"));
    }
    let n_classes = manifest.n_classes();
    let split = split_videos(&manifest.video_ids(), seed)?;
    let patch = params.config.patch_size;
    if !view_size.is_multiple_of(patch) {
        return Err(Error::Divisibility { size: view_size, patch });
    }
    let train = frame_sets(manifest, &split.train, view_size, patch)?;
    let val = frame_sets(manifest, &split.val, view_size, patch)?;
    let test = frame_sets(manifest, &split.test, view_size, patch)?;
    let train_seqs: Vec<TokenSequence> = train.iter().flat_map(|v| v.0.iter().cloned()).collect();
    let train_y: Vec<usize> = train.iter().flat_map(|v| v.1.iter().copied()).collect();
    if distinct_classes(&train_y) < 2 {
        return Err(Error::DegenerateSplit("training split holds fewer than two classes".into()));
    }
    let val_seqs: Vec<TokenSequence> = val.iter().flat_map(|v| v.0.iter().cloned()).collect();
    let val_y: Vec<usize> = val.iter().flat_map(|v| v.1.iter().copied()).collect();

    let mut encoder = params.clone();
    let initial = encode_all(&encoder, &train_seqs)?;
    let standardizer = Standardizer::fit(&initial);
    let frozen = config.encoder_lr_scale == 0.0;
    let frozen_x = frozen.then(|| standardizer.apply(&initial));

    let mut head = LinearHead::zeros(encoder.config.hidden_dim, n_classes);
    let mut head_opt = Optimizer::new(config.probe.optimizer, &head.tensors());
    let enc_views: Vec<ArrayViewD<'_, f32>> = encoder.tensors().into_iter().map(|(_, t)| t).collect();
    let mut enc_opt = Optimizer::new(config.probe.optimizer, &enc_views);
    drop(enc_views);
    let lr = config.probe.learning_rate;
    let wd = config.probe.weight_decay;
    let key = RngKey::new(seed).with("probe");
    let mut best: Option<(Selection, usize, EncoderParams<f32>, LinearHead)> = None;
    let mut val_x = standardizer.apply(&encode_all(&encoder, &val_seqs)?);
    for epoch in 0..config.probe.epochs {
        for batch in minibatches(train_seqs.len(), config.probe.batch_size, &key.with_u64(epoch as u64)) {
            let yb: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            if let Some(x) = &frozen_x {
                let xb = x.select(Axis(0), &batch);
                let (_, dl) = softmax_cross_entropy(&head.logits(&xb.view()), &yb);
                let (gw, gb) = (xb.t().dot(&dl), dl.sum_axis(Axis(0)));
                head_opt.step(head.tensors_mut(), vec![gw.view().into_dyn(), gb.view().into_dyn()], lr, wd)?;
                continue;
            }
            let seqs: Vec<TokenSequence> = batch.iter().map(|&i| train_seqs[i].clone()).collect();
            let (z, tape) = encoder.forward_tape(&seqs)?;
            let xb = standardizer.apply(&z);
            let (_, dl) = softmax_cross_entropy(&head.logits(&xb.view()), &yb);
            let (gw, gb) = (xb.t().dot(&dl), dl.sum_axis(Axis(0)));
            let dz = dl.dot(&head.weight.t()) * &standardizer.inv_std;
            let mut grad = encoder.zeros_like();
            encoder.backward(&tape, &dz, &mut grad)?;
            head_opt.step(head.tensors_mut(), vec![gw.view().into_dyn(), gb.view().into_dyn()], lr, wd)?;
            let enc_params: Vec<ArrayViewMutD<'_, f32>> = encoder.tensors_mut().into_iter().map(|(_, t)| t).collect();
            let enc_grads: Vec<ArrayViewD<'_, f32>> = grad.tensors().into_iter().map(|(_, t)| t).collect();
            enc_opt.step(enc_params, enc_grads, lr * config.encoder_lr_scale, wd)?;
        }
        if !frozen {
            val_x = standardizer.apply(&encode_all(&encoder, &val_seqs)?);
        }
        let sel = Selection::of_logits(&head.logits(&val_x.view()), &val_y, n_classes)?;
        if sel.improves(best.as_ref().map(|b| &b.0)) {
            best = Some((sel, epoch, encoder.clone(), head.clone()));
        }
    }
    let (Selection { macro_f1: val_macro_f1, .. }, best_epoch, encoder, head) = best.expect("at least one epoch");
    let videos = test
        .iter()
        .map(|(seqs, labels)| {
            let x = standardizer.apply(&encode_all(&encoder, seqs)?);
            Ok((head.predict(&x.view()), labels.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FinetuneOutcome {
        val_macro_f1,
        best_epoch,
        report: evaluate(&videos, n_classes)?,
        encoder,
        head,
    })
}

// ---------------------------------------------------------------------------
// MS-TCN
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MSTCNConfig {
    pub stages: usize,
    pub layers_per_stage: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    /// Dropout on each residual branch during training.
    pub dropout: f64,
}

impl Default for MSTCNConfig {
    fn default() -> Self {
        Self {
            stages: 2,
            layers_per_stage: 8,
            hidden_channels: 64,
            kernel_size: 3,
            dropout: 0.5,
        }
    }
}

impl MSTCNConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stages", self.stages),
            ("layers_per_stage", self.layers_per_stage),
            ("hidden_channels", self.hidden_channels),
        ] {
            if v == 0 {
                return Err(Error::config(format!("downstream.mstcn.{name}"), "must be at least 1"));
            }
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("downstream.mstcn.kernel_size", "must be odd"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("downstream.mstcn.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Frames seen by one output frame of a single stage.
    pub fn stage_receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * ((1usize << self.layers_per_stage) - 1)
    }
}

/// Temporal convolution over `T × C_in` sequences; taps are centered.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<T> {
    /// `k × C_in × C_out`.
    pub weight: Array3<T>,
    pub bias: Array1<T>,
    pub dilation: usize,
}

impl<T: Scalar> Conv1d<T> {
    fn init(k: usize, inp: usize, out: usize, dilation: usize, rng: &mut crate::rng::Stream) -> Self {
        let bound = 1.0 / ((k * inp) as f64).sqrt();
        let mut u = || T::lit(rng.random_range(-bound..bound));
        Self {
            weight: Array3::from_shape_simple_fn((k, inp, out), &mut u),
            bias: Array1::from_shape_simple_fn(out, &mut u),
            dilation,
        }
    }

    fn offset(&self, j: usize) -> isize {
        let k = self.weight.dim().0 as isize;
        (j as isize - (k - 1) / 2) * self.dilation as isize
    }

    /// Output rows `t` that read input row `t + o`.
    fn span(t_len: usize, o: isize) -> Option<(usize, usize)> {
        let lo = (-o).max(0) as usize;
        let hi = (t_len as isize - o.max(0)).max(0) as usize;
        (lo < hi).then_some((lo, hi))
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let t_len = x.nrows();
        let mut y = Array2::from_shape_fn((t_len, self.bias.len()), |(_, c)| self.bias[c]);
        for j in 0..self.weight.dim().0 {
            let o = self.offset(j);
            if let Some((lo, hi)) = Self::span(t_len, o) {
                let src = x.slice(s![(lo as isize + o) as usize..(hi as isize + o) as usize, ..]);
                let mut dst = y.slice_mut(s![lo..hi, ..]);
                general_mat_mul(T::one(), &src, &self.weight.index_axis(Axis(0), j), T::one(), &mut dst);
            }
        }
        y
    }

    fn backward(&self, x: &Array2<T>, dy: &Array2<T>, grad: &mut Conv1d<T>) -> Array2<T> {
        let t_len = x.nrows();
        let mut dx = Array2::zeros(x.raw_dim());
        grad.bias += &dy.sum_axis(Axis(0));
        for j in 0..self.weight.dim().0 {
            let o = self.offset(j);
            if let Some((lo, hi)) = Self::span(t_len, o) {
                let (a, b) = ((lo as isize + o) as usize, (hi as isize + o) as usize);
                let src = x.slice(s![a..b, ..]);
                let g = dy.slice(s![lo..hi, ..]);
                let mut gw = grad.weight.index_axis_mut(Axis(0), j);
                general_mat_mul(T::one(), &src.t(), &g, T::one(), &mut gw);
                let mut dsrc = dx.slice_mut(s![a..b, ..]);
                general_mat_mul(T::one(), &g, &self.weight.index_axis(Axis(0), j).t(), T::one(), &mut dsrc);
            }
        }
        dx
    }
}

/// Dilated convolution, ReLU, 1×1 convolution, residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualLayer<T> {
    pub dilated: Conv1d<T>,
    pub pointwise: Conv1d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub input: Conv1d<T>,
    pub layers: Vec<ResidualLayer<T>>,
    pub output: Conv1d<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MSTCNParams<T> {
    pub config: MSTCNConfig,
    pub stages: Vec<Stage<T>>,
}

impl<T: Scalar> MSTCNParams<T> {
    /// Uniform `±1/sqrt(fan_in)` weights and biases.
    pub fn init(config: MSTCNConfig, in_dim: usize, n_classes: usize, rng: &mut crate::rng::Stream) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_channels;
        let stages = (0..config.stages)
            .map(|s| Stage {
                input: Conv1d::init(1, if s == 0 { in_dim } else { n_classes }, h, 1, rng),
                layers: (0..config.layers_per_stage)
                    .map(|l| ResidualLayer {
                        dilated: Conv1d::init(config.kernel_size, h, h, 1 << l, rng),
                        pointwise: Conv1d::init(1, h, h, 1, rng),
                    })
                    .collect(),
                output: Conv1d::init(1, h, n_classes, 1, rng),
            })
            .collect();
        Ok(Self { config, stages })
    }

    pub fn n_classes(&self) -> usize {
        self.stages[0].output.bias.len()
    }

    pub fn in_dim(&self) -> usize {
        self.stages[0].input.weight.dim().1
    }
}

fn push_conv<'a, T>(c: &'a Conv1d<T>, name: String, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
    out.push((format!("{name}.weight"), c.weight.view().into_dyn()));
    out.push((format!("{name}.bias"), c.bias.view().into_dyn()));
}

fn push_conv_mut<'a, T>(c: &'a mut Conv1d<T>, name: String, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
    out.push((format!("{name}.weight"), c.weight.view_mut().into_dyn()));
    out.push((format!("{name}.bias"), c.bias.view_mut().into_dyn()));
}

impl<T: Scalar> Parameters<T> for MSTCNParams<T> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter().enumerate() {
            push_conv(&st.input, format!("stages.{i}.input"), &mut out);
            for (l, layer) in st.layers.iter().enumerate() {
                push_conv(&layer.dilated, format!("stages.{i}.layers.{l}.dilated"), &mut out);
                push_conv(&layer.pointwise, format!("stages.{i}.layers.{l}.pointwise"), &mut out);
            }
            push_conv(&st.output, format!("stages.{i}.output"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        for (i, st) in self.stages.iter_mut().enumerate() {
            push_conv_mut(&mut st.input, format!("stages.{i}.input"), &mut out);
            for (l, layer) in st.layers.iter_mut().enumerate() {
                push_conv_mut(&mut layer.dilated, format!("stages.{i}.layers.{l}.dilated"), &mut out);
                push_conv_mut(&mut layer.pointwise, format!("stages.{i}.layers.{l}.pointwise"), &mut out);
            }
            push_conv_mut(&mut st.output, format!("stages.{i}.output"), &mut out);
        }
        out
    }
}

struct LayerTape<T> {
    input: Array2<T>,
    pre_relu: Array2<T>,
    hidden: Array2<T>,
    mask: Option<Array2<T>>,
}

struct StageTape<T> {
    input: Array2<T>,
    layers: Vec<LayerTape<T>>,
    last: Array2<T>,
}

fn stage_forward<T: Scalar>(
    stage: &Stage<T>,
    x: &Array2<T>,
    keep: bool,
    mut dropout: Option<(f64, &mut crate::rng::Stream)>,
) -> (Array2<T>, Option<StageTape<T>>) {
    let mut a = stage.input.forward(x);
    let mut layers = Vec::new();
    for layer in &stage.layers {
        let pre = layer.dilated.forward(&a);
        let hidden = pre.mapv(|v| v.max(T::zero()));
        let mut branch = layer.pointwise.forward(&hidden);
        let mask = dropout.as_mut().map(|(p, rng)| {
            let scale = T::lit(1.0 / (1.0 - *p));
            Array2::from_shape_simple_fn(branch.raw_dim(), || if rng.random::<f64>() < *p { T::zero() } else { scale })
        });
        if let Some(m) = &mask {
            branch *= m;
        }
        let next = &a + &branch;
        if keep {
            layers.push(LayerTape {
                input: std::mem::replace(&mut a, next),
                pre_relu: pre,
                hidden,
                mask,
            });
        } else {
            a = next;
        }
    }
    let logits = stage.output.forward(&a);
    let tape = keep.then(|| StageTape {
        input: x.clone(),
        layers,
        last: a,
    });
    (logits, tape)
}

fn stage_backward<T: Scalar>(stage: &Stage<T>, tape: &StageTape<T>, dlogits: &Array2<T>, grad: &mut Stage<T>) -> Array2<T> {
    let mut da = stage.output.backward(&tape.last, dlogits, &mut grad.output);
    for ((layer, lt), lg) in stage.layers.iter().zip(&tape.layers).zip(grad.layers.iter_mut()).rev() {
        let dbranch = match &lt.mask {
            Some(m) => &da * m,
            None => da.clone(),
        };
        let mut dh = layer.pointwise.backward(&lt.hidden, &dbranch, &mut lg.pointwise);
        Zip::from(&mut dh)
            .and(&lt.pre_relu)
            .for_each(|g, &p| if p <= T::zero() { *g = T::zero() });
        da += &layer.dilated.backward(&lt.input, &dh, &mut lg.dilated);
    }
    stage.input.backward(&tape.input, &da, &mut grad.input)
}

/// Per-stage logits, `stages × T × C`. Later stages read the softmax of the
/// previous stage.
pub fn mstcn_forward<T: Scalar>(params: &MSTCNParams<T>, features: &Array2<T>) -> Result<Array3<T>> {
    check_features(params, features)?;
    let t_len = features.nrows();
    let mut out = Array3::zeros((params.stages.len(), t_len, params.n_classes()));
    let mut x = features.clone();
    for (s, stage) in params.stages.iter().enumerate() {
        let (logits, _) = stage_forward(stage, &x, false, None);
        out.index_axis_mut(Axis(0), s).assign(&logits);
        x = crate::objective::softmax_rows(&logits);
    }
    Ok(out)
}

fn check_features<T: Scalar>(params: &MSTCNParams<T>, features: &Array2<T>) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::Dimension("temporal model needs T >= 1 frames".into()));
    }
    if features.ncols() != params.in_dim() {
        return Err(Error::Dimension(format!(
            "feature dim {} does not match model input dim {}",
            features.ncols(),
            params.in_dim()
        )));
    }
    Ok(())
}

/// Sum over stages of the mean frame cross-entropy, with exact gradients.
pub fn mstcn_loss_and_grad<T: Scalar>(params: &MSTCNParams<T>, features: &Array2<T>, labels: &[usize]) -> Result<(T, MSTCNParams<T>)> {
    mstcn_train_loss(params, features, labels, None)
}

/// As [`mstcn_loss_and_grad`], optionally with residual dropout at rate `p`.
pub fn mstcn_train_loss<T: Scalar>(
    params: &MSTCNParams<T>,
    features: &Array2<T>,
    labels: &[usize],
    mut dropout: Option<(f64, &mut crate::rng::Stream)>,
) -> Result<(T, MSTCNParams<T>)> {
    check_features(params, features)?;
    if labels.len() != features.nrows() {
        return Err(Error::Dimension("one label per frame required".into()));
    }
    let mut tapes = Vec::with_capacity(params.stages.len());
    let mut probs_in = Vec::with_capacity(params.stages.len());
    let mut dlogits = Vec::with_capacity(params.stages.len());
    let mut loss = T::zero();
    let mut x = features.clone();
    for stage in &params.stages {
        let (logits, tape) = stage_forward(stage, &x, true, dropout.as_mut().map(|(p, rng)| (*p, &mut **rng)));
        let (l, dl) = softmax_cross_entropy(&logits, labels);
        loss += l;
        tapes.push(tape.expect("tape requested"));
        dlogits.push(dl);
        probs_in.push(x);
        x = crate::objective::softmax_rows(&logits);
    }
    let mut grad = params.zeros_like();
    // gradient reaching the softmax output of stage s (input of stage s+1)
    let mut carry: Option<Array2<T>> = None;
    for s in (0..params.stages.len()).rev() {
        let mut dl = dlogits[s].clone();
        if let Some(dp) = carry.take() {
            // softmax backward: the next stage's input is softmax(logits_s)
            let p = &probs_in[s + 1];
            for ((mut g, pr), dpr) in dl.rows_mut().into_iter().zip(p.rows()).zip(dp.rows()) {
                let dot = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                Zip::from(&mut g)
                    .and(&pr)
                    .and(&dpr)
                    .for_each(|g, &p, &d| *g += p * (d - dot));
            }
        }
        let dx = stage_backward(&params.stages[s], &tapes[s], &dl, &mut grad.stages[s]);
        if s > 0 {
            carry = Some(dx);
        }
    }
    Ok((loss, grad))
}

/// Final-stage argmax per frame.
pub fn mstcn_predict(params: &MSTCNParams<f32>, features: &Array2<f32>) -> Result<Vec<usize>> {
    let logits = mstcn_forward(params, features)?;
    Ok(argmax_rows(&logits.index_axis(Axis(0), logits.dim().0 - 1).to_owned()))
}

#[derive(Clone, Debug)]
pub struct TemporalOutcome {
    pub params: MSTCNParams<f32>,
    pub standardizer: Standardizer,
    pub val_macro_f1: f64,
    pub best_epoch: usize,
    pub report: MetricsReport,
    pub split: VideoSplit,
}

/// Trains MS-TCN on frozen per-video features; a batch is a set of videos.
pub fn temporal_train(
    features: &[FeatureSequence],
    n_classes: usize,
    mstcn: &MSTCNConfig,
    config: &ProbeConfig,
    seed: u64,
) -> Result<TemporalOutcome> {
    let ids: Vec<String> = features.iter().map(|f| f.video_id.clone()).collect();
    let split = split_videos(&ids, seed)?;
    temporal_on_split(features, &split, n_classes, mstcn, config, seed)
}

pub fn temporal_on_split(
    features: &[FeatureSequence],
    split: &VideoSplit,
    n_classes: usize,
    mstcn: &MSTCNConfig,
    config: &ProbeConfig,
    seed: u64,
) -> Result<TemporalOutcome> {
    config.validate("temporal")?;
    let train = select(features, &split.train)?;
    let (train_x, train_y) = stack(&train)?;
    if train_x.ncols() == 0 {
        return Err(Error::Dimension("zero-dimensional features".into()));
    }
    if distinct_classes(&train_y) < 2 {
        return Err(Error::DegenerateSplit("training split holds fewer than two classes".into()));
    }
    let standardizer = Standardizer::fit(&train_x);
    let prep = |seqs: Vec<&FeatureSequence>| -> Vec<(Array2<f32>, Vec<usize>)> {
        seqs.into_iter()
            .map(|s| (standardizer.apply(&s.embeddings), s.labels.clone()))
            .collect()
    };
    let train = prep(train);
    let val = prep(select(features, &split.val)?);
    let test = prep(select(features, &split.test)?);

    let key = RngKey::new(seed).with("temporal");
    let mut params = MSTCNParams::<f32>::init(*mstcn, train_x.ncols(), n_classes, &mut key.with("init").stream())?;
    let views: Vec<ArrayViewD<'_, f32>> = params.tensors().into_iter().map(|(_, t)| t).collect();
    let mut opt = Optimizer::new(config.optimizer, &views);
    drop(views);
    let mut best: Option<(Selection, usize, MSTCNParams<f32>)> = None;
    for epoch in 0..config.epochs {
        for batch in minibatches(train.len(), config.batch_size, &key.with("order").with_u64(epoch as u64)) {
            let scale = 1.0 / batch.len() as f32;
            let mut total = params.zeros_like();
            for &v in &batch {
                let mut rng = key.with("dropout").with_u64(epoch as u64).with_u64(v as u64).stream();
                let dropout = (mstcn.dropout > 0.0).then_some((mstcn.dropout, &mut rng));
                let (loss, g) = mstcn_train_loss(&params, &train[v].0, &train[v].1, dropout)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        location: "temporal loss".into(),
                        step: Some(epoch as u64),
                    });
                }
                for ((_, mut acc), (_, gi)) in total.tensors_mut().into_iter().zip(g.tensors()) {
                    acc.scaled_add(scale, &gi);
                }
            }
            let grads: Vec<ArrayViewD<'_, f32>> = total.tensors().into_iter().map(|(_, t)| t).collect();
            let ps: Vec<ArrayViewMutD<'_, f32>> = params.tensors_mut().into_iter().map(|(_, t)| t).collect();
            opt.step(ps, grads, config.learning_rate, config.weight_decay)?;
        }
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut loss = 0.0;
        for (x, y) in &val {
            let out = mstcn_forward(&params, x)?;
            let last = out.index_axis(Axis(0), out.dim().0 - 1).to_owned();
            loss += f64::from(softmax_cross_entropy(&last, y).0) * y.len() as f64;
            preds.extend(argmax_rows(&last));
            labels.extend_from_slice(y);
        }
        let sel = Selection {
            macro_f1: macro_f1(&preds, &labels, n_classes)?,
            loss: loss / labels.len().max(1) as f64,
        };
        if sel.improves(best.as_ref().map(|b| &b.0)) {
            best = Some((sel, epoch, params.clone()));
        }
    }
    let (Selection { macro_f1: val_macro_f1, .. }, best_epoch, params) = best.expect("at least one epoch");
    let videos = test
        .iter()
        .map(|(x, y)| Ok((mstcn_predict(&params, x)?, y.clone())))
        .collect::<Result<Vec<_>>>()?;
    Ok(TemporalOutcome {
        report: evaluate(&videos, n_classes)?,
        params,
        standardizer,
        val_macro_f1,
        best_epoch,
        split: split.clone(),
    })
}

// ---------------------------------------------------------------------------
// Low-shot
// ---------------------------------------------------------------------------

/// `round(fraction · n)` whole videos drawn without replacement, in input order.
pub fn lowshot_videos(ids: &[String], fraction: f64, seed: u64) -> Result<Vec<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = round_count(fraction * ids.len() as f64);
    if k == 0 {
        return Err(Error::TooSmall(format!(
            "fraction {fraction} of {} videos rounds to zero",
            ids.len()
        )));
    }
    if k >= ids.len() {
        return Ok(ids.to_vec());
    }
    let mut rng = RngKey::new(seed).with("lowshot").stream();
    let mut picked = rand::seq::index::sample(&mut rng, ids.len(), k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| ids[i].clone()).collect())
}

/// Sub-manifest holding every frame of the sampled videos.
pub fn lowshot_split(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let videos = lowshot_videos(&manifest.video_ids(), fraction, seed)?;
    Ok(manifest.restrict_to_videos(&videos))
}

/// Seed of one (fraction, repetition) cell.
pub fn lowshot_seed(seed: u64, fraction: f64, repetition: usize) -> u64 {
    RngKey::new(seed)
        .with("lowshot-cell")
        .with_u64(fraction.to_bits())
        .with_u64(repetition as u64)
        .stream()
        .next_u64()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowShotRow {
    pub fraction: f64,
    pub n_videos: usize,
    pub mean_f1: f64,
    /// Sample standard deviation over repetitions; zero for a single repetition.
    pub std_f1: f64,
    pub scores: Vec<f64>,
}

/// Epochs that give a probe on `cell_frames` training frames at least as many
/// optimizer steps as `epochs` over `full_frames`.
pub fn lowshot_epochs(epochs: usize, full_frames: usize, cell_frames: usize, batch_size: usize) -> usize {
    let steps = |frames: usize| frames.div_ceil(batch_size).max(1);
    (epochs * steps(full_frames)).div_ceil(steps(cell_frames))
}

/// Linear probes on subsampled training videos. Validation and test videos are
/// fixed by `seed`; each (fraction, repetition) cell samples its own training
/// subset while the probe itself always trains with `seed`. Every cell gets the
/// optimizer steps of the full-data probe, so small fractions are not
/// undertrained.
pub fn lowshot_curve(
    features: &[FeatureSequence],
    n_classes: usize,
    fractions: &[f64],
    repetitions: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<Vec<LowShotRow>> {
    if repetitions == 0 {
        return Err(Error::config("downstream.repetitions", "must be at least 1"));
    }
    let ids: Vec<String> = features.iter().map(|f| f.video_id.clone()).collect();
    let split = split_videos(&ids, seed)?;
    let frames = |videos: &[String]| -> usize {
        features.iter().filter(|f| videos.contains(&f.video_id)).map(|f| f.len()).sum()
    };
    let full_frames = frames(&split.train);
    let cells: Vec<(usize, usize)> = (0..fractions.len())
        .flat_map(|f| (0..repetitions).map(move |r| (f, r)))
        .collect();
    let scores = cells
        .par_iter()
        .map(|&(f, r)| {
            let train = lowshot_videos(&split.train, fractions[f], lowshot_seed(seed, fractions[f], r))?;
            let n = train.len();
            let cell_config = ProbeConfig {
                epochs: lowshot_epochs(config.epochs, full_frames, frames(&train), config.batch_size),
                ..config.clone()
            };
            let sub = VideoSplit {
                train,
                val: split.val.clone(),
                test: split.test.clone(),
            };
            let out = probe_on_split(features, &sub, n_classes, &cell_config, seed)?;
            Ok((n, out.report.macro_f1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fractions
        .iter()
        .enumerate()
        .map(|(f, &fraction)| {
            let cell = &scores[f * repetitions..(f + 1) * repetitions];
            let vals: Vec<f64> = cell.iter().map(|c| c.1).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let std = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            LowShotRow {
                fraction,
                n_videos: cell[0].0,
                mean_f1: mean,
                std_f1: std,
                scores: vals,
            }
        })
        .collect())
}

/// Comma-separated `fraction,n_videos,mean_f1,std_f1` table.
pub fn lowshot_csv(rows: &[LowShotRow]) -> String {
    let mut out = String::from("fraction,n_videos,mean_f1,std_f1\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.fraction, r.n_videos, r.mean_f1, r.std_f1));
    }
    out
}

/// Writes one JSON object per line.
pub fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::io(path, e.into()))?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
