//! Experiment configuration: one TOML file with sections; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::synth::SynthCitySpec;
use super::HarnessError;
use crate::backbone::{BackboneConfig, Branches, FreezeMode, ModelConfig, PoiMode, Schedule, DEFAULT_PROMPT};
use crate::features::FeatureConfig;
use crate::ingest::formats::VirtualGrid;
use crate::ingest::{DatasetOptions, WindowSpec};
use crate::poi::PoiConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directories; empty means the `[synth]` city.
    pub dirs: Vec<PathBuf>,
    /// Geometry for location tables given as grid indices only.
    pub grid: Option<VirtualGrid>,
    pub cell_m: f64,
    pub ratios: [f64; 3],
    pub duration_ceiling_min: f64,
    /// In zero-shot runs, also refit duration bounds on the target city.
    pub refit_durations: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = DatasetOptions::default();
        Self {
            dirs: Vec::new(),
            grid: None,
            cell_m: 500.0,
            ratios: d.ratios,
            duration_ceiling_min: d.duration_ceiling_min,
            refit_durations: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub poi_mode: PoiMode,
    pub d_poi: usize,
    pub prompt: bool,
    pub prompt_text: String,
    pub token_table_trainable: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            poi_mode: PoiMode::Semantic,
            d_poi: 8,
            prompt: true,
            prompt_text: DEFAULT_PROMPT.to_string(),
            token_table_trainable: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub no_prompt: bool,
    /// Linear map of the raw POI profile instead of description embeddings.
    pub no_poi: bool,
    pub no_time: bool,
    pub no_duration: bool,
    pub history_only: bool,
    pub current_only: bool,
    pub full_finetune: bool,
}

impl AblationFlags {
    pub fn is_base(&self) -> bool {
        *self == Self::default()
    }
}

/// Single-flag variants of a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoPrompt,
    NoPoi,
    NoTime,
    NoDuration,
    HistoryOnly,
    CurrentOnly,
    FullFinetune,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Self::NoPrompt,
        Self::NoPoi,
        Self::NoTime,
        Self::NoDuration,
        Self::HistoryOnly,
        Self::CurrentOnly,
        Self::FullFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoPrompt => "no_prompt",
            Self::NoPoi => "no_poi",
            Self::NoTime => "no_time",
            Self::NoDuration => "no_duration",
            Self::HistoryOnly => "history_only",
            Self::CurrentOnly => "current_only",
            Self::FullFinetune => "full_finetune",
        }
    }

    pub fn apply(self, flags: &mut AblationFlags) {
        match self {
            Self::NoPrompt => flags.no_prompt = true,
            Self::NoPoi => flags.no_poi = true,
            Self::NoTime => flags.no_time = true,
            Self::NoDuration => flags.no_duration = true,
            Self::HistoryOnly => flags.history_only = true,
            Self::CurrentOnly => flags.current_only = true,
            Self::FullFinetune => flags.full_finetune = true,
        }
    }
}

/// Space in which predicted coordinates are matched to locations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalSpace {
    /// Mercator meters.
    #[default]
    Mercator,
    /// Per-axis normalized coordinates of the evaluated city.
    Normalized,
}

impl RetrievalSpace {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mercator => "mercator",
            Self::Normalized => "normalized",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub retrieval_space: RetrievalSpace,
    /// Evaluation workers; 0 reads `NEXTLOC_THREADS` and defaults to 1.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![1, 5, 10], retrieval_space: RetrievalSpace::Mercator, threads: 0 }
    }
}

impl EvalConfig {
    pub fn worker_count(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        std::env::var("NEXTLOC_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0).unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthCitySpec,
    pub window: WindowSpec,
    pub model: ModelSection,
    pub features: FeatureConfig,
    pub backbone: BackboneConfig,
    pub poi: PoiConfig,
    pub train: Schedule,
    pub ablation: AblationFlags,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataConfig::default(),
            synth: SynthCitySpec::toybench(),
            window: WindowSpec::default(),
            model: ModelSection::default(),
            features: FeatureConfig::default(),
            backbone: BackboneConfig::default(),
            poi: PoiConfig::default(),
            train: Schedule::default(),
            ablation: AblationFlags::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| HarnessError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// SHA-256 of the canonical rendering.
    pub fn digest(&self) -> String {
        crate::nn::params::hex(&Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            window: self.window,
            ratios: self.data.ratios,
            duration_ceiling_min: self.data.duration_ceiling_min,
        }
    }

    /// Model layout after applying the ablation flags.
    pub fn model_config(&self, poi_categories: usize) -> ModelConfig {
        let a = &self.ablation;
        let mut backbone = self.backbone;
        if a.full_finetune {
            backbone.freeze_mode = FreezeMode::FullFinetune;
        }
        let branches = match (a.history_only, a.current_only) {
            (true, _) => Branches::HistoryOnly,
            (_, true) => Branches::CurrentOnly,
            _ => Branches::Both,
        };
        ModelConfig {
            history_len: self.window.history_len,
            current_len: self.window.current_len,
            poi_categories,
            poi_mode: if a.no_poi { PoiMode::Linear } else { self.model.poi_mode },
            d_poi: self.model.d_poi,
            use_prompt: self.model.prompt && !a.no_prompt,
            prompt_text: self.model.prompt_text.clone(),
            branches,
            token_table_trainable: self.model.token_table_trainable,
            features: FeatureConfig {
                use_time: self.features.use_time && !a.no_time,
                use_duration: self.features.use_duration && !a.no_duration,
                ..self.features
            },
            backbone,
            poi: self.poi,
        }
    }

    /// Rejects conflicting or malformed settings; no data is touched.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.ablation.history_only && self.ablation.current_only {
            return bad("history_only and current_only are mutually exclusive".into());
        }
        let ks = &self.eval.ks;
        if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("eval.ks must be positive and strictly ascending, got {ks:?}"));
        }
        self.window.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let r = self.data.ratios;
        if r.iter().any(|v| !(*v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("data.ratios must be positive and sum to 1, got {r:?}"));
        }
        if !(self.data.duration_ceiling_min > 0.0) {
            return bad("data.duration_ceiling_min must be > 0".into());
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.batch_size == 0 || t.eval_batch == 0 || t.max_epochs == 0 {
            return bad("train: lr, batch_size, eval_batch and max_epochs must be positive".into());
        }
        if self.data.dirs.is_empty() {
            self.synth.validate()?;
        }
        self.model_config(5).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Same experiment with one more ablation flag set.
    pub fn with_ablation(&self, a: Ablation) -> Self {
        let mut cfg = self.clone();
        a.apply(&mut cfg.ablation);
        cfg
    }
}
