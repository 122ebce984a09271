//! Subcommand implementations. Every artifact lands under the run directory:
//!
//! ```text
//! <run>/config.resolved.json
//! <run>/data/                      synthetic dataset
//! <run>/pretrain/                  metrics.jsonl, summary.json, checkpoints
//! <run>/features/<digest>/         per-video feature cache of one checkpoint
//! <run>/{probe,finetune,temporal}/ metrics.jsonl, metrics.txt
//! <run>/lowshot/                   lowshot.csv, metrics.jsonl
//! <run>/ablate/<axis>/             one run directory per cell, summary.csv
//! <run>/report.md
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use msn_core::checkpoint;
use msn_core::dataio::{generate_synthetic, load_manifest, load_synth_spec, DatasetManifest, MANIFEST_FILE};
use msn_core::downstream::{
    cached_features, finetune, linear_probe, lowshot_csv, lowshot_curve, temporal_train, write_jsonl, FeatureSequence,
};
use msn_core::encoder::EncoderParams;
use msn_core::trainer::{pretrain, PretrainOptions, StepReport, FINAL_CHECKPOINT, METRICS_FILE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{parse_config, RunConfig};
use crate::report::{self, MetricsRecord};
use crate::{Axis, CliError, Command, Options};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const PRETRAIN_DIR: &str = "pretrain";
pub const SUMMARY_FILE: &str = "summary.json";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// A validated configuration bound to its run directory.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Loads the config, applies flag overrides and validates before anything
    /// touches the filesystem.
    pub fn from_options(options: &Options) -> Result<Self, CliError> {
        let mut config = match &options.config {
            Some(path) => parse_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = options.seed {
            config.trainer.seed = seed;
            config.downstream.seed = seed;
        }
        config.validate()?;
        let config = config.resolved()?;
        let dir = options.run.clone().unwrap_or_else(|| config.run_dir());
        Ok(Self { config, dir })
    }

    /// Creates the run directory and echoes the effective configuration.
    pub fn prepare(&self) -> Result<(), CliError> {
        create_dir(&self.dir)?;
        let path = self.dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.config.to_json()).map_err(|e| io_err(&path, e))
    }

    /// The configured manifest, or the synthetic dataset of this run
    /// (generated on first use).
    pub fn manifest(&self) -> Result<DatasetManifest, CliError> {
        if let Some(path) = &self.config.data.manifest {
            return Ok(load_manifest(path)?);
        }
        let dir = self.dir.join("data");
        if dir.join(MANIFEST_FILE).exists() && load_synth_spec(&dir)?.as_ref() == Some(&self.config.data.synth) {
            return Ok(load_manifest(&dir.join(MANIFEST_FILE))?);
        }
        Ok(generate_synthetic(&self.config.data.synth, &dir)?)
    }

    pub fn default_checkpoint(&self) -> PathBuf {
        self.dir.join(PRETRAIN_DIR).join(FINAL_CHECKPOINT)
    }
}

/// Target encoder of a checkpoint plus a short content digest.
pub fn load_encoder(path: &Path) -> Result<(EncoderParams<f32>, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let state = checkpoint::from_bytes(&bytes)?;
    let digest = Sha256::digest(&bytes);
    let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    Ok((state.target, hex))
}

/// Features of every frame, cached per checkpoint digest and view size.
pub fn features(run: &Run, manifest: &DatasetManifest, checkpoint: &Path) -> Result<Vec<FeatureSequence>, CliError> {
    let (encoder, digest) = load_encoder(checkpoint)?;
    let view = run.config.downstream.view_size;
    let dir = run.dir.join("features").join(format!("{digest}-v{view}"));
    Ok(cached_features(&encoder, manifest, view, &dir)?)
}

fn progress(r: &StepReport) {
    if r.step.is_multiple_of(50) {
        eprintln!(
            "step {:>6}  ce {:.4}  me-max {:.4}  usage {:.3}",
            r.step, r.cross_entropy, r.me_max, r.usage_entropy
        );
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub epochs: usize,
    pub prototypes: usize,
    pub final_cross_entropy: f64,
    /// Mean over the last epoch of the anchor usage entropy, in nats.
    pub final_usage_entropy: f64,
    /// `final_usage_entropy / ln K`.
    pub usage_ratio: f64,
}

/// Summarizes a pretraining metrics log.
pub fn summarize_pretraining(metrics: &Path, steps_per_epoch: usize, config: &RunConfig) -> Result<PretrainSummary, CliError> {
    let text = std::fs::read_to_string(metrics).map_err(|e| io_err(metrics, e))?;
    let reports = text
        .lines()
        .map(serde_json::from_str::<StepReport>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io_err(metrics, e))?;
    let last = reports.last().ok_or_else(|| io_err(metrics, "empty metrics log"))?;
    let tail = &reports[reports.len().saturating_sub(steps_per_epoch.max(1))..];
    let usage = tail.iter().map(|r| r.usage_entropy).sum::<f64>() / tail.len() as f64;
    let k = config.objective.prototypes;
    Ok(PretrainSummary {
        steps: last.step,
        epochs: config.trainer.epochs,
        prototypes: k,
        final_cross_entropy: tail.iter().map(|r| r.cross_entropy).sum::<f64>() / tail.len() as f64,
        final_usage_entropy: usage,
        usage_ratio: usage / (k as f64).ln(),
    })
}

/// Pretrains into `<run>/pretrain` and writes `summary.json`.
pub fn run_pretrain(run: &Run, manifest: &DatasetManifest, resume: Option<&Path>) -> Result<PretrainSummary, CliError> {
    let vit = run.config.vit()?;
    let out = run.dir.join(PRETRAIN_DIR);
    let resume = resume.map(checkpoint::load).transpose()?;
    pretrain(
        manifest,
        vit,
        &run.config.pretrain_config(),
        &out,
        PretrainOptions {
            resume,
            progress: Some(progress),
        },
    )?;
    let per_epoch = manifest.len().div_ceil(run.config.trainer.batch_size);
    let summary = summarize_pretraining(&out.join(METRICS_FILE), per_epoch, &run.config)?;
    let path = out.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(summary)
}

/// Linear probe on the features of `checkpoint`; writes `<run>/probe`.
pub fn run_probe(run: &Run, manifest: &DatasetManifest, checkpoint: &Path) -> Result<MetricsRecord, CliError> {
    let feats = features(run, manifest, checkpoint)?;
    let d = &run.config.downstream;
    let out = linear_probe(&feats, manifest.n_classes(), &d.probe, d.seed)?;
    let record = MetricsRecord::new("probe", &out.report, out.val_macro_f1, out.best_epoch, d.seed);
    println!("{}", report::write_metrics(&run.dir.join("probe"), &record)?);
    Ok(record)
}

pub fn run_temporal(run: &Run, manifest: &DatasetManifest, checkpoint: &Path) -> Result<MetricsRecord, CliError> {
    let feats = features(run, manifest, checkpoint)?;
    let d = &run.config.downstream;
    let out = temporal_train(&feats, manifest.n_classes(), &d.mstcn, &d.temporal, d.seed)?;
    let record = MetricsRecord::new("temporal", &out.report, out.val_macro_f1, out.best_epoch, d.seed);
    println!("{}", report::write_metrics(&run.dir.join("temporal"), &record)?);
    Ok(record)
}

pub fn run_finetune(run: &Run, manifest: &DatasetManifest, checkpoint: &Path) -> Result<MetricsRecord, CliError> {
    let (encoder, _) = load_encoder(checkpoint)?;
    let d = &run.config.downstream;
    let out = finetune(&encoder, manifest, d.view_size, &d.finetune, d.seed)?;
    let record = MetricsRecord::new("finetune", &out.report, out.val_macro_f1, out.best_epoch, d.seed);
    println!("{}", report::write_metrics(&run.dir.join("finetune"), &record)?);
    Ok(record)
}

pub fn run_lowshot(run: &Run, manifest: &DatasetManifest, checkpoint: &Path) -> Result<Vec<msn_core::downstream::LowShotRow>, CliError> {
    let feats = features(run, manifest, checkpoint)?;
    let d = &run.config.downstream;
    let rows = lowshot_curve(&feats, manifest.n_classes(), &d.fractions, d.repetitions, &d.probe, d.seed)?;
    let dir = run.dir.join("lowshot");
    create_dir(&dir)?;
    let csv = dir.join(report::LOWSHOT_CSV);
    std::fs::write(&csv, lowshot_csv(&rows)).map_err(|e| io_err(&csv, e))?;
    write_jsonl(&dir.join(report::METRICS_JSONL), &rows)?;
    println!("{}", report::lowshot_table(&rows));
    Ok(rows)
}

/// The cells of one ablation axis, each a full configuration.
pub fn ablation_cells(axis: Axis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let cell = |label: String, edit: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        edit(&mut c);
        c.run_name = label.clone();
        (label, c)
    };
    match axis {
        Axis::Prototypes => [10, 100, 1000, 10000]
            .into_iter()
            .map(|k| cell(format!("k{k}"), &|c| c.objective.prototypes = k))
            .collect(),
        Axis::Mask => [0u32, 50, 70, 90]
            .into_iter()
            .map(|m| cell(format!("mask{m}"), &|c| c.views.keep_fraction = 1.0 - f64::from(m) / 100.0))
            .collect(),
        Axis::Focal => [0, 2, 4, 8]
            .into_iter()
            .map(|n| cell(format!("focal{n}"), &|c| c.views.n_focal = n))
            .collect(),
        Axis::Augmentation => [(true, true, true), (true, true, false), (true, false, true), (false, true, true)]
            .into_iter()
            .map(|(jitter, flip, blur)| {
                let names: Vec<&str> = [(jitter, "jitter"), (flip, "flip"), (blur, "blur")]
                    .into_iter()
                    .filter_map(|(on, n)| on.then_some(n))
                    .collect();
                cell(names.join("+"), &|c| {
                    for aug in [&mut c.views.global, &mut c.views.focal] {
                        aug.color_jitter.enabled = jitter;
                        aug.horizontal_flip.enabled = flip;
                        aug.gaussian_blur.enabled = blur;
                    }
                })
            })
            .collect(),
        Axis::Collapse => {
            let iters = base.objective.sinkhorn_iters.max(1);
            let lambda = if base.objective.lambda > 0.0 { base.objective.lambda } else { 1.0 };
            vec![
                cell("sk+memax".into(), &|c| {
                    c.objective.sinkhorn_iters = iters;
                    c.objective.lambda = lambda;
                }),
                cell("sk".into(), &|c| {
                    c.objective.sinkhorn_iters = iters;
                    c.objective.lambda = 0.0;
                }),
                cell("none".into(), &|c| {
                    c.objective.sinkhorn_iters = 0;
                    c.objective.lambda = 0.0;
                }),
            ]
        }
        // Training lengths 10/100/200/500 relative to a 200-epoch default.
        Axis::Epochs => [10usize, 100, 200, 500]
            .into_iter()
            .map(|e| {
                let epochs = ((base.trainer.epochs * e) as f64 / 200.0).round().max(1.0) as usize;
                cell(format!("len{e}"), &|c| c.trainer.epochs = epochs)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub cell: String,
    pub epochs: usize,
    pub prototypes: usize,
    pub usage_entropy: f64,
    pub usage_ratio: f64,
    pub macro_f1: f64,
    pub video_f1: Option<f64>,
    pub val_macro_f1: f64,
}

pub fn run_ablation(run: &Run, axis: Axis) -> Result<Vec<AblationRow>, CliError> {
    let cells = ablation_cells(axis, &run.config);
    for (label, c) in &cells {
        c.validate()
            .map_err(|e| CliError::Config(format!("ablation cell {label}: {e}")))?;
    }
    run.prepare()?;
    let manifest = run.manifest()?;
    let root = run.dir.join("ablate").join(axis.name());
    let mut rows = Vec::new();
    for (label, config) in cells {
        eprintln!("ablation {} / {label}", axis.name());
        let cell = Run {
            config,
            dir: root.join(&label),
        };
        cell.prepare()?;
        let summary = run_pretrain(&cell, &manifest, None)?;
        let probe = run_probe(&cell, &manifest, &cell.default_checkpoint())?;
        rows.push(AblationRow {
            axis: axis.name().into(),
            cell: label,
            epochs: summary.epochs,
            prototypes: summary.prototypes,
            usage_entropy: summary.final_usage_entropy,
            usage_ratio: summary.usage_ratio,
            macro_f1: probe.macro_f1,
            video_f1: probe.video_f1,
            val_macro_f1: probe.val_macro_f1,
        });
    }
    let mut csv = String::from("axis,cell,epochs,prototypes,usage_entropy,usage_ratio,macro_f1,val_macro_f1\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.axis, r.cell, r.epochs, r.prototypes, r.usage_entropy, r.usage_ratio, r.macro_f1, r.val_macro_f1
        );
    }
    let path = root.join("summary.csv");
    std::fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;
    write_jsonl(&root.join("summary.jsonl"), &rows)?;
    print!("{csv}");
    Ok(rows)
}

fn checkpoint_for(run: &Run, options: &Options) -> Result<PathBuf, CliError> {
    let path = options.checkpoint.clone().unwrap_or_else(|| run.default_checkpoint());
    if !path.is_file() {
        return Err(CliError::Io(format!(
            "checkpoint {} not found (run `pretrain` first or pass --checkpoint)",
            path.display()
        )));
    }
    Ok(path)
}

pub fn execute(command: &Command, options: &Options) -> Result<(), CliError> {
    if let Command::Report = command {
        let dir = match &options.run {
            Some(d) => d.clone(),
            None => Run::from_options(options)?.dir,
        };
        let text = report::consolidated(&dir)?;
        let path = dir.join(report::REPORT_FILE);
        std::fs::write(&path, &text).map_err(|e| io_err(&path, e))?;
        print!("{text}");
        return Ok(());
    }
    let run = Run::from_options(options)?;
    match command {
        Command::Synth => {
            if run.config.data.manifest.is_some() {
                return Err(CliError::Config("data.manifest is set; there is nothing to synthesize".into()));
            }
            run.prepare()?;
            let m = run.manifest()?;
            println!("{} frames in {} videos -> {}", m.len(), m.video_ids().len(), run.dir.join("data").display());
        }
        Command::Pretrain => {
            if let Some(p) = &options.checkpoint {
                if !p.is_file() {
                    return Err(CliError::Io(format!("checkpoint {} not found", p.display())));
                }
            }
            run.prepare()?;
            let m = run.manifest()?;
            let s = run_pretrain(&run, &m, options.checkpoint.as_deref())?;
            println!(
                "{} steps; final cross-entropy {:.4}; usage entropy {:.3} ({:.3} of ln K)",
                s.steps, s.final_cross_entropy, s.final_usage_entropy, s.usage_ratio
            );
        }
        Command::Extract => {
            let ckpt = checkpoint_for(&run, options)?;
            run.prepare()?;
            let m = run.manifest()?;
            let feats = features(&run, &m, &ckpt)?;
            println!("{} videos, {} frames encoded", feats.len(), feats.iter().map(|f| f.len()).sum::<usize>());
        }
        Command::Probe => {
            let ckpt = checkpoint_for(&run, options)?;
            run.prepare()?;
            run_probe(&run, &run.manifest()?, &ckpt)?;
        }
        Command::Finetune => {
            let ckpt = checkpoint_for(&run, options)?;
            run.prepare()?;
            run_finetune(&run, &run.manifest()?, &ckpt)?;
        }
        Command::Temporal => {
            let ckpt = checkpoint_for(&run, options)?;
            run.prepare()?;
            run_temporal(&run, &run.manifest()?, &ckpt)?;
        }
        Command::Lowshot => {
            let ckpt = checkpoint_for(&run, options)?;
            run.prepare()?;
            run_lowshot(&run, &run.manifest()?, &ckpt)?;
        }
        Command::Ablate { axis } => {
            run_ablation(&run, *axis)?;
        }
        Command::Report => unreachable!("handled above"),
    }
    Ok(())
}
