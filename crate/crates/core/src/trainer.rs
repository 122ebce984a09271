//! Self-supervised pretraining: AdamW on the anchor encoder and prototypes,
//! an EMA target encoder, warmup-cosine learning rate and a cosine momentum
//! schedule.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataio::{load_images, DatasetManifest, Image, ImageBatch};
use crate::encoder::{EncoderParams, Parameters, ViTConfig};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::optim::{self, OptimizerKind};
use crate::objective::{anchor_gradients, entropy, sinkhorn, LossBreakdown, ObjectiveConfig, ProbMatrix, PrototypeBank};
use crate::rng::RngKey;
use crate::views::{make_viewset, TokenSequence, ViewConfig, ViewSet};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MomentumSchedule {
    pub start: f64,
    pub end: f64,
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub ema_momentum: MomentumSchedule,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 20,
            warmup_epochs: 1,
            ema_momentum: MomentumSchedule { start: 0.996, end: 1.0 },
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("trainer.learning_rate", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("trainer.weight_decay", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("trainer.batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("trainer.epochs", "must be at least 1"));
        }
        let m = self.ema_momentum;
        if !(0.0 <= m.start && m.start <= m.end && m.end <= 1.0) {
            return Err(Error::config(
                "trainer.ema_momentum",
                format!("need 0 <= start <= end <= 1, got start={}, end={}", m.start, m.end),
            ));
        }
        Ok(())
    }
}

/// Everything a pretraining step needs besides the state and the images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub views: ViewConfig,
    pub objective: ObjectiveConfig,
}

impl PretrainConfig {
    pub fn validate(&self, vit: &ViTConfig) -> Result<()> {
        self.train.validate()?;
        self.views.validate()?;
        self.objective.validate()?;
        vit.validate()?;
        if vit.patch_size != self.views.patch_size {
            return Err(Error::config(
                "views.patch_size",
                format!("{} differs from encoder patch size {}", self.views.patch_size, vit.patch_size),
            ));
        }
        let grid = self.views.global_size() / self.views.patch_size;
        if grid > vit.max_grid {
            return Err(Error::config(
                "encoder.max_grid",
                format!("global views need a {grid}-token grid side, max_grid is {}", vit.max_grid),
            ));
        }
        Ok(())
    }
}

/// Step counts that drive both schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn new(n_images: usize, config: &TrainConfig) -> Self {
        let per_epoch = n_images.div_ceil(config.batch_size) as u64;
        Self {
            total_steps: per_epoch * config.epochs as u64,
            warmup_steps: per_epoch * config.warmup_epochs as u64,
        }
    }

    /// Linear warmup to `base`, then cosine decay to zero at the last step.
    pub fn learning_rate(&self, base: f64, step: u64) -> f64 {
        if step < self.warmup_steps {
            return base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span <= 1 {
            return base;
        }
        let t = ((step - self.warmup_steps) as f64 / (span - 1) as f64).min(1.0);
        0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
    }

    /// Cosine increase from `start` at step 0 to `end` at the last step.
    pub fn momentum(&self, m: MomentumSchedule, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return m.end;
        }
        let t = (step as f64 / (self.total_steps - 1) as f64).min(1.0);
        m.end - (m.end - m.start) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// First and second moment estimates, one pair per learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<T> {
    pub names: Vec<String>,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> AdamMoments<T> {
    pub fn zeros(tensors: &[(String, ArrayViewD<'_, T>)]) -> Self {
        let names = tensors.iter().map(|(n, _)| n.clone()).collect();
        let z: Vec<ArrayD<T>> = tensors.iter().map(|(_, t)| ArrayD::zeros(t.raw_dim())).collect();
        Self {
            names,
            m: z.clone(),
            v: z,
        }
    }

    /// One AdamW update. `t` counts updates from 1.
    pub fn update(
        &mut self,
        params: Vec<ArrayViewMutD<'_, T>>,
        grads: Vec<ArrayViewD<'_, T>>,
        t: u64,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        optim::update(OptimizerKind::AdamW, params, grads, &mut self.m, &mut self.v, t, lr, weight_decay)
    }
}

/// `target ← momentum·target + (1 − momentum)·anchor`, scalar by scalar.
pub fn ema_update<T: Scalar, P: Parameters<T>>(target: &mut P, anchor: &P, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Domain(format!("momentum {momentum} outside [0, 1]")));
    }
    let src = anchor.tensors();
    let mut dst = target.tensors_mut();
    if src.len() != dst.len() {
        return Err(Error::Dimension("target and anchor have different tensor counts".into()));
    }
    if momentum == 1.0 {
        return Ok(());
    }
    let mom = T::lit(momentum);
    let rest = T::lit(1.0 - momentum);
    for ((name, t), (_, a)) in dst.iter_mut().zip(&src) {
        if t.shape() != a.shape() {
            return Err(Error::Dimension(format!("{name}: shape {:?} vs {:?}", t.shape(), a.shape())));
        }
        Zip::from(t).and(a).for_each(|t, &a| *t = mom * *t + rest * a);
    }
    Ok(())
}

/// Anchor encoder, EMA target, prototypes and optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub anchor: EncoderParams<T>,
    pub target: EncoderParams<T>,
    pub bank: PrototypeBank<T>,
    pub moments: AdamMoments<T>,
    pub step: u64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state; the target starts as a copy of the anchor.
    pub fn init(vit: ViTConfig, objective: &ObjectiveConfig, schedule: Schedule, seed: u64) -> Result<Self> {
        let root = RngKey::new(seed).with("init");
        let anchor = EncoderParams::init(vit, &mut root.with("encoder").stream())?;
        let bank = PrototypeBank::init(objective, vit.hidden_dim, &mut root.with("prototypes").stream())?;
        let mut state = Self {
            target: anchor.clone(),
            anchor,
            bank,
            moments: AdamMoments {
                names: Vec::new(),
                m: Vec::new(),
                v: Vec::new(),
            },
            step: 0,
            schedule,
            seed,
        };
        state.moments = AdamMoments::zeros(&state.learnable());
        Ok(state)
    }

    pub fn key(&self) -> RngKey {
        RngKey::new(self.seed)
    }

    /// Anchor encoder tensors followed by the prototypes, with prefixed names.
    pub fn learnable(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out: Vec<_> = self
            .anchor
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("anchor.{n}"), t))
            .collect();
        out.extend(self.bank.tensors().into_iter().map(|(n, t)| (format!("bank.{n}"), t)));
        out
    }

    fn learnable_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out: Vec<_> = self.anchor.tensors_mut().into_iter().map(|(_, t)| t).collect();
        out.extend(self.bank.tensors_mut().into_iter().map(|(_, t)| t));
        out
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub cross_entropy: f64,
    pub me_max: f64,
    pub total: f64,
    /// Entropy of the mean anchor assignment, in nats.
    pub usage_entropy: f64,
    pub grad_norm: f64,
    pub momentum: f64,
    #[serde(skip)]
    pub learning_rate: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl StepReport {
    pub fn loss(&self) -> LossBreakdown {
        LossBreakdown {
            cross_entropy: self.cross_entropy,
            me_max: self.me_max,
            lambda: if self.me_max == 0.0 {
                0.0
            } else {
                (self.cross_entropy - self.total) / self.me_max
            },
            total: self.total,
        }
    }
}

/// View sets for every image of a batch. Each image draws from its own stream
/// keyed by (seed, image id, step).
pub fn batch_views(key: &RngKey, step: u64, batch: &ImageBatch, views: &ViewConfig) -> Result<Vec<ViewSet>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    (0..batch.len())
        .into_par_iter()
        .map(|i| make_viewset(&batch.image(i), views, &key.with("views").with(&batch.ids[i]).with_u64(step)))
        .collect()
}

/// Anchor rows grouped by sequence length. Row `i·M + m` is view `m` of image `i`.
fn anchor_groups(views: &[ViewSet]) -> Result<(usize, BTreeMap<usize, Vec<usize>>)> {
    let m = views[0].n_anchors();
    if views.iter().any(|v| v.n_anchors() != m) {
        return Err(Error::Batching("view sets disagree on the number of anchors".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, vs) in views.iter().enumerate() {
        for (j, a) in vs.anchors.iter().enumerate() {
            groups.entry(a.len()).or_default().push(i * m + j);
        }
    }
    Ok((m, groups))
}

fn anchor_seq(views: &[ViewSet], m: usize, row: usize) -> &TokenSequence {
    &views[row / m].anchors[row % m]
}

/// Loss and collapse diagnostics of the current state on fixed views, without
/// touching any parameter.
pub fn evaluate_views<T: Scalar>(state: &TrainState<T>, views: &[ViewSet], objective: &ObjectiveConfig) -> Result<LossBreakdown> {
    let targets: Vec<TokenSequence> = views.iter().map(|v| v.target.clone()).collect();
    let zt = state.target.encode_batch(&targets)?;
    let pt = sinkhorn(&state.bank.target_probs(&zt)?, objective.sinkhorn_iters);
    let (m, groups) = anchor_groups(views)?;
    let mut za = Array2::<T>::zeros((views.len() * m, state.anchor.config.hidden_dim));
    for rows in groups.values() {
        let seqs: Vec<TokenSequence> = rows.iter().map(|&r| anchor_seq(views, m, r).clone()).collect();
        let z = state.anchor.encode_batch(&seqs)?;
        for (k, &r) in rows.iter().enumerate() {
            za.row_mut(r).assign(&z.row(k));
        }
    }
    let pa = state.bank.anchor_probs(&za)?;
    crate::objective::msn_loss(&pa, &pt, objective.lambda)
}

/// Loss and exact gradients for the anchor encoder and the prototypes. The
/// target branch is encoded without a tape: its probabilities enter the loss
/// as constants.
#[derive(Clone, Debug)]
pub struct MsnGradients<T> {
    pub loss: LossBreakdown,
    pub encoder: EncoderParams<T>,
    pub prototypes: Array2<T>,
    pub anchor_probs: ProbMatrix<T>,
}

pub fn msn_gradients<T: Scalar>(
    state: &TrainState<T>,
    views: &[ViewSet],
    objective: &ObjectiveConfig,
) -> Result<MsnGradients<T>> {
    let non_finite = |location: &str| Error::NonFinite {
        location: location.into(),
        step: None,
    };
    if !state.bank.prototypes.iter().all(|v| v.is_finite()) {
        return Err(non_finite("prototypes"));
    }
    let targets: Vec<TokenSequence> = views.iter().map(|v| v.target.clone()).collect();
    let zt = state.target.encode_batch(&targets)?;
    let pt = sinkhorn(&state.bank.target_probs(&zt)?, objective.sinkhorn_iters);
    if !pt.rows.iter().all(|v| v.is_finite()) {
        return Err(non_finite("target probabilities"));
    }

    // anchors: one taped forward pass per sequence length
    let (m, groups) = anchor_groups(views)?;
    let d = state.anchor.config.hidden_dim;
    let mut za = Array2::<T>::zeros((views.len() * m, d));
    let mut tapes = Vec::with_capacity(groups.len());
    for rows in groups.values() {
        let seqs: Vec<TokenSequence> = rows.iter().map(|&r| anchor_seq(views, m, r).clone()).collect();
        let (z, tape) = state.anchor.forward_tape(&seqs)?;
        for (k, &r) in rows.iter().enumerate() {
            za.row_mut(r).assign(&z.row(k));
        }
        tapes.push(tape);
    }

    let g = anchor_gradients(&state.bank, &za, &pt, objective.lambda)?;
    let mut encoder = state.anchor.zeros_like();
    for (rows, tape) in groups.values().zip(&tapes) {
        let dz = g.embeddings.select(Axis(0), rows);
        state.anchor.backward(tape, &dz, &mut encoder)?;
    }
    Ok(MsnGradients {
        loss: g.loss,
        encoder,
        prototypes: g.prototypes,
        anchor_probs: g.probs,
    })
}

/// One optimization step on precomputed views.
pub fn train_step_on_views<T: Scalar>(
    state: &mut TrainState<T>,
    views: &[ViewSet],
    config: &PretrainConfig,
) -> Result<StepReport> {
    let started = Instant::now();
    let step = state.step;
    let non_finite = |location: &str| Error::NonFinite {
        location: location.into(),
        step: Some(step),
    };

    let MsnGradients {
        loss,
        encoder: enc_grad,
        prototypes: proto_grad,
        anchor_probs,
    } = msn_gradients(state, views, &config.objective).map_err(|e| with_step(e, step))?;
    if !loss.total.is_finite() {
        return Err(non_finite("loss"));
    }
    let grad_sq = enc_grad.squared_norm().to_f64_lossy()
        + proto_grad.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
    let grad_norm = grad_sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(non_finite("gradients"));
    }

    let lr = state.schedule.learning_rate(config.train.learning_rate, step);
    let momentum = state.schedule.momentum(config.train.ema_momentum, step);
    let mut grads: Vec<ArrayViewD<'_, T>> = enc_grad.tensors().into_iter().map(|(_, t)| t).collect();
    grads.push(proto_grad.view().into_dyn());
    let mut moments = std::mem::replace(
        &mut state.moments,
        AdamMoments {
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        },
    );
    let updated = moments.update(state.learnable_mut(), grads, step + 1, lr, config.train.weight_decay);
    state.moments = moments;
    updated?;
    if !state.anchor.all_finite() || !state.bank.prototypes.iter().all(|v| v.is_finite()) {
        return Err(non_finite("parameters after update"));
    }
    ema_update(&mut state.target, &state.anchor, momentum)?;
    state.step += 1;

    let usage_entropy = entropy(anchor_probs.mean_row().view())?.to_f64_lossy();
    Ok(StepReport {
        step,
        cross_entropy: loss.cross_entropy,
        me_max: loss.me_max,
        total: loss.total,
        usage_entropy,
        grad_norm,
        momentum,
        learning_rate: lr,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { location, .. } => Error::NonFinite {
            location,
            step: Some(step),
        },
        other => other,
    }
}

/// Builds the views for `batch` and takes one step.
pub fn train_step<T: Scalar>(state: &mut TrainState<T>, batch: &ImageBatch, config: &PretrainConfig) -> Result<StepReport> {
    let views = batch_views(&state.key(), state.step, batch, &config.views)?;
    train_step_on_views(state, &views, config)
}

/// Image order of one epoch.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngKey::new(seed).with("shuffle").with_u64(epoch).stream());
    order
}

/// Outcome of [`pretrain`].
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub reports: Vec<StepReport>,
}

/// Options for [`pretrain`] beyond the configuration.
#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<TrainState<f32>>,
    /// Called after every step.
    pub progress: Option<fn(&StepReport)>,
}

/// Full pretraining run. Writes `metrics.jsonl`, optional per-epoch
/// checkpoints and `checkpoint_final.bin` into `out`.
pub fn pretrain(
    manifest: &DatasetManifest,
    vit: ViTConfig,
    config: &PretrainConfig,
    out: &Path,
    options: PretrainOptions,
) -> Result<PretrainOutput> {
    config.validate(&vit)?;
    if manifest.is_empty() {
        return Err(Error::EmptyBatch);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n = manifest.len();
    let all: Vec<usize> = (0..n).collect();
    let images: Vec<Image> = {
        let batch = load_images(manifest, &all)?;
        (0..batch.len()).map(|i| batch.image(i)).collect()
    };
    let schedule = Schedule::new(n, &config.train);
    let mut state = match options.resume {
        Some(s) => {
            if s.anchor.config != vit {
                return Err(Error::Checkpoint("resumed checkpoint has a different encoder config".into()));
            }
            TrainState { schedule, ..s }
        }
        None => TrainState::<f32>::init(vit, &config.objective, schedule, config.train.seed)?,
    };

    let metrics_path = out.join(METRICS_FILE);
    let metrics_file = if state.step == 0 {
        File::create(&metrics_path)
    } else {
        std::fs::OpenOptions::new().append(true).create(true).open(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(metrics_file);

    let per_epoch = n.div_ceil(config.train.batch_size) as u64;
    let mut reports = Vec::new();
    while state.step < schedule.total_steps {
        let epoch = state.step / per_epoch;
        let within = (state.step % per_epoch) as usize;
        let order = epoch_order(config.train.seed, epoch, n);
        let start = within * config.train.batch_size;
        let idx = &order[start..(start + config.train.batch_size).min(n)];
        let imgs: Vec<Image> = idx.iter().map(|&i| images[i].clone()).collect();
        let ids = idx.iter().map(|&i| crate::dataio::entry_id(&manifest.entries[i])).collect();
        let batch = ImageBatch::from_images(&imgs, ids)?;
        let report = train_step(&mut state, &batch, config)?;
        serde_json::to_writer(&mut log, &report).map_err(|e| Error::io(&metrics_path, e.into()))?;
        log.write_all(b"\n").map_err(|e| Error::io(&metrics_path, e))?;
        if let Some(f) = options.progress {
            f(&report);
        }
        reports.push(report);
        let finished_epoch = state.step % per_epoch == 0;
        let every = config.train.checkpoint_every as u64;
        if finished_epoch && every > 0 && (state.step / per_epoch).is_multiple_of(every) && state.step < schedule.total_steps {
            let path = out.join(format!("checkpoint_epoch{}.bin", state.step / per_epoch));
            checkpoint::save(&path, &state)?;
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    let checkpoint = out.join(FINAL_CHECKPOINT);
    checkpoint::save(&checkpoint, &state)?;
    Ok(PretrainOutput {
        checkpoint,
        metrics: metrics_path,
        reports,
    })
}
