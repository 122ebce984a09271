//! Run configuration: one JSON document covering every stage of a run.

use std::path::{Path, PathBuf};

use msn_core::dataio::SynthSpec;
use msn_core::downstream::{FinetuneConfig, MSTCNConfig, ProbeConfig};
use msn_core::encoder::ViTConfig;
use msn_core::objective::ObjectiveConfig;
use msn_core::trainer::{PretrainConfig, TrainConfig};
use msn_core::views::ViewConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "MSN_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const DEFAULT_PRESET: &str = "vit-nano";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_name: String,
    /// Parent of the run directory; falls back to `$MSN_OUTPUT_ROOT`, then `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub encoder: EncoderSection,
    pub views: ViewConfig,
    pub objective: ObjectiveConfig,
    pub trainer: TrainConfig,
    pub downstream: DownstreamSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "default".into(),
            output_dir: None,
            data: DataSection::default(),
            encoder: EncoderSection::default(),
            views: ViewConfig::default(),
            objective: ObjectiveConfig::default(),
            trainer: TrainConfig::default(),
            downstream: DownstreamSection::default(),
        }
    }
}

/// Either an existing labeled manifest or a synthetic dataset generated into
/// the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
}

/// A named preset with optional per-field overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub preset: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlp_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_grid: Option<usize>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            preset: DEFAULT_PRESET.into(),
            layers: None,
            hidden_dim: None,
            mlp_dim: None,
            heads: None,
            patch_size: None,
            max_grid: None,
        }
    }
}

impl EncoderSection {
    pub fn resolve(&self) -> Result<ViTConfig, CliError> {
        let base = ViTConfig::preset(&self.preset).ok_or_else(|| {
            CliError::Config(format!(
                "encoder.preset: unknown preset `{}` (expected vit-nano, vit-s, vit-b or vit-l)",
                self.preset
            ))
        })?;
        Ok(ViTConfig {
            layers: self.layers.unwrap_or(base.layers),
            hidden_dim: self.hidden_dim.unwrap_or(base.hidden_dim),
            mlp_dim: self.mlp_dim.unwrap_or(base.mlp_dim),
            heads: self.heads.unwrap_or(base.heads),
            patch_size: self.patch_size.unwrap_or(base.patch_size),
            max_grid: self.max_grid.unwrap_or(base.max_grid),
        })
    }

    /// The same encoder with every field spelled out.
    fn expanded(&self) -> Result<Self, CliError> {
        let v = self.resolve()?;
        Ok(Self {
            preset: self.preset.clone(),
            layers: Some(v.layers),
            hidden_dim: Some(v.hidden_dim),
            mlp_dim: Some(v.mlp_dim),
            heads: Some(v.heads),
            patch_size: Some(v.patch_size),
            max_grid: Some(v.max_grid),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamSection {
    /// Seed for splits, probe minibatches and model initialization.
    pub seed: u64,
    /// Side of the center view encoded for every frame.
    pub view_size: usize,
    pub probe: ProbeConfig,
    pub temporal: ProbeConfig,
    pub mstcn: MSTCNConfig,
    pub finetune: FinetuneConfig,
    pub fractions: Vec<f64>,
    pub repetitions: usize,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        Self {
            seed: 0,
            view_size: 64,
            probe: ProbeConfig::default(),
            temporal: ProbeConfig::temporal(),
            mstcn: MSTCNConfig::default(),
            finetune: FinetuneConfig::default(),
            fractions: vec![0.12, 0.25, 0.5, 0.75, 1.0],
            repetitions: 3,
        }
    }
}

impl RunConfig {
    pub fn vit(&self) -> Result<ViTConfig, CliError> {
        self.encoder.resolve()
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            train: self.trainer.clone(),
            views: self.views.clone(),
            objective: self.objective.clone(),
        }
    }

    /// Checks every section; the first problem is reported with its field path.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) || self.run_name == "." || self.run_name == ".." {
            return Err(CliError::Config(format!(
                "run_name: `{}` must be a non-empty single path component",
                self.run_name
            )));
        }
        let vit = self.vit()?;
        self.pretrain_config().validate(&vit)?;
        if self.data.manifest.is_none() {
            self.data.synth.validate()?;
        }
        let d = &self.downstream;
        d.probe.validate("downstream.probe")?;
        d.temporal.validate("downstream.temporal")?;
        d.finetune.probe.validate("downstream.finetune.probe")?;
        if !(d.finetune.encoder_lr_scale >= 0.0 && d.finetune.encoder_lr_scale.is_finite()) {
            return Err(CliError::Config("downstream.finetune.encoder_lr_scale: must be finite and non-negative".into()));
        }
        d.mstcn.validate()?;
        if d.fractions.is_empty() || d.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(CliError::Config("downstream.fractions: need at least one fraction, each in (0, 1]".into()));
        }
        if d.repetitions == 0 {
            return Err(CliError::Config("downstream.repetitions: must be at least 1".into()));
        }
        if d.view_size == 0 || !d.view_size.is_multiple_of(vit.patch_size) || d.view_size / vit.patch_size > vit.max_grid {
            return Err(CliError::Config(format!(
                "downstream.view_size: {} must be a multiple of patch size {} with at most {} patches per side",
                d.view_size, vit.patch_size, vit.max_grid
            )));
        }
        Ok(())
    }

    /// Directory holding every artifact of this run.
    pub fn run_dir(&self) -> PathBuf {
        let root = self
            .output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        root.join(&self.run_name)
    }

    /// The effective configuration, with the encoder spelled out.
    pub fn resolved(&self) -> Result<Self, CliError> {
        Ok(Self {
            encoder: self.encoder.expanded()?,
            ..self.clone()
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Parses and validates a config document; `origin` names it in errors.
pub fn parse_config_str(text: &str, origin: &str) -> Result<RunConfig, CliError> {
    let config: RunConfig = serde_json::from_str(text).map_err(|e| {
        let line = text.lines().nth(e.line().saturating_sub(1)).unwrap_or("").trim();
        CliError::Config(format!("{origin}:{}:{}: {e}\n    {line}", e.line(), e.column()))
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_config_str(&text, &path.display().to_string())
}
