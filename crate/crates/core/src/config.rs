//! Experiment configuration (TOML) with defaults and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, CodecPreset};
use crate::criteria::Criterion;
use crate::error::{Error, Result};
use crate::nas::SearchConfig;
use crate::optim::LrSchedule;

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_ROOT_ENV: &str = "LICPRUNE_OUTPUT_ROOT";

/// Length of a training stage, either in optimizer steps or in passes over
/// the training images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Duration {
    Steps(usize),
    Epochs(f64),
}

impl Duration {
    /// Step count for a corpus of `images` images at `batch` images per step.
    pub fn steps(self, images: usize, batch: usize) -> usize {
        match self {
            Duration::Steps(n) => n,
            Duration::Epochs(e) => {
                let per_epoch = images.div_ceil(batch.max(1));
                (e * per_epoch as f64).ceil() as usize
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_dir: PathBuf,
    /// Images used for the search's loss measurements and criterion features.
    /// Falls back to `train_dir`.
    pub calib_dir: Option<PathBuf>,
    pub eval_dir: PathBuf,
    /// Images fed to feature-guided criteria.
    pub feature_images: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: PathBuf::from("data/train"),
            calib_dir: None,
            eval_dir: PathBuf::from("data/eval"),
            feature_images: 10,
        }
    }
}

impl DataConfig {
    pub fn calib_dir(&self) -> &Path {
        self.calib_dir.as_deref().unwrap_or(&self.train_dir)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub baseline: Duration,
    pub prune_finetune: Duration,
    pub pq_pre: Duration,
    pub pq_post: Duration,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate for every finetuning stage after the baseline.
    pub finetune_lr: f64,
    pub lr_schedule: LrSchedule,
    pub crop_size: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            baseline: Duration::Steps(3000),
            prune_finetune: Duration::Steps(600),
            pq_pre: Duration::Steps(200),
            pq_post: Duration::Steps(400),
            batch_size: 8,
            lr: 1e-3,
            finetune_lr: 3e-4,
            lr_schedule: LrSchedule::Cosine,
            crop_size: 64,
            clip_norm: Some(1.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Per-layer ratios from the tolerance search.
    Nas,
    /// One ratio for every layer, chosen to hit the target sparsity.
    Fixed,
}

/// What a pruning run removes and how it chooses ratios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub mode: PruneMode,
    /// Prune filter channels in addition to filters.
    pub channels: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { mode: PruneMode::Nas, channels: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    /// Consulted by the joint pruning and quantization pipeline only; when
    /// false it runs exactly like the plain pruning pipeline.
    pub enabled: bool,
    pub bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig { enabled: true, bits: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub preset: CodecPreset,
    pub lambdas: Vec<f64>,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub search: SearchConfig,
    pub prune: PruneConfig,
    pub quant: QuantConfig,
}

pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0018, 0.0035, 0.0067, 0.0130, 0.0250];

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            preset: CodecPreset::Desk,
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            search: SearchConfig::default(),
            prune: PruneConfig::default(),
            quant: QuantConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Full-size codec with epoch-based schedules: 90 baseline epochs at
    /// batch 16 on 256x256 crops, 60 finetuning epochs after pruning, and
    /// 20 + 40 epochs around quantization.
    pub fn full() -> Self {
        ExperimentConfig {
            preset: CodecPreset::Full,
            schedule: ScheduleConfig {
                baseline: Duration::Epochs(90.0),
                prune_finetune: Duration::Epochs(60.0),
                pq_pre: Duration::Epochs(20.0),
                pq_post: Duration::Epochs(40.0),
                batch_size: 16,
                lr: 1e-4,
                finetune_lr: 1e-4,
                lr_schedule: LrSchedule::Cosine,
                crop_size: 256,
                clip_norm: Some(1.0),
                seed: 0,
            },
            search: SearchConfig::full(),
            ..ExperimentConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {})", cfg.version, CONFIG_VERSION)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig::preset(self.preset)
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lambdas.is_empty() {
            return bad("lambda list is empty".into());
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return bad(format!("lambda {} must be positive", l));
        }
        let mut sorted = self.lambdas.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() != self.lambdas.len() {
            return bad("lambda list contains duplicates".into());
        }
        let factor = self.codec().total_factor();
        let s = &self.schedule;
        if s.crop_size == 0 || s.crop_size % factor != 0 {
            return bad(format!("crop size {} is not a multiple of the downsampling factor {}", s.crop_size, factor));
        }
        if s.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(s.lr > 0.0) || !(s.finetune_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.data.feature_images == 0 {
            return bad("feature_images must be at least 1".into());
        }
        if !(1..=16).contains(&self.quant.bits) {
            return bad(format!("bit width {} outside 1..=16", self.quant.bits));
        }
        self.search.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Adds the on-disk checks: every referenced directory exists.
    pub fn validate_paths(&self) -> Result<()> {
        for (what, p) in [
            ("train_dir", self.data.train_dir.as_path()),
            ("calib_dir", self.data.calib_dir()),
            ("eval_dir", self.data.eval_dir.as_path()),
        ] {
            if !p.is_dir() {
                return Err(Error::Config(format!("{} {} does not exist", what, p.display())));
            }
        }
        Ok(())
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.output_dir.clone(),
        }
    }
}

/// Overrides taken from the command line; `None` leaves the file or default
/// value in place.
#[derive(Clone, Debug, Default)]
pub struct ConfigOverrides {
    pub preset: Option<CodecPreset>,
    pub lambdas: Option<Vec<f64>>,
    pub output_dir: Option<PathBuf>,
    pub train_dir: Option<PathBuf>,
    pub calib_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub criterion: Option<Criterion>,
    pub s_target: Option<f64>,
    pub mode: Option<PruneMode>,
    pub channels: Option<bool>,
    pub group_size: Option<usize>,
    pub bits: Option<u32>,
    pub seed: Option<u64>,
    pub baseline_steps: Option<usize>,
    pub finetune_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub crop_size: Option<usize>,
}

impl ConfigOverrides {
    /// Applies the overrides. An explicit output directory also wins over
    /// the environment variable.
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.preset {
            cfg.preset = v;
        }
        if let Some(v) = &self.lambdas {
            cfg.lambdas = v.clone();
        }
        match &self.output_dir {
            Some(v) => cfg.output_dir = v.clone(),
            None => cfg.output_dir = cfg.resolved_output_dir(),
        }
        if let Some(v) = &self.train_dir {
            cfg.data.train_dir = v.clone();
        }
        if let Some(v) = &self.calib_dir {
            cfg.data.calib_dir = Some(v.clone());
        }
        if let Some(v) = &self.eval_dir {
            cfg.data.eval_dir = v.clone();
        }
        if let Some(v) = self.criterion {
            cfg.search.criterion = v;
        }
        if let Some(v) = self.s_target {
            cfg.search.s_target = v;
        }
        if let Some(v) = self.mode {
            cfg.prune.mode = v;
        }
        if let Some(v) = self.channels {
            cfg.prune.channels = v;
        }
        if let Some(v) = self.group_size {
            cfg.search.group_size = v;
        }
        if let Some(v) = self.bits {
            cfg.quant.bits = v;
        }
        if let Some(v) = self.seed {
            cfg.schedule.seed = v;
            cfg.search.seed = v;
        }
        if let Some(v) = self.baseline_steps {
            cfg.schedule.baseline = Duration::Steps(v);
        }
        if let Some(v) = self.finetune_steps {
            cfg.schedule.prune_finetune = Duration::Steps(v);
        }
        if let Some(v) = self.batch_size {
            cfg.schedule.batch_size = v;
        }
        if let Some(v) = self.crop_size {
            cfg.schedule.crop_size = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        ExperimentConfig::full().validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "lambdas = [0.01]\n[schedule]\nbaseline = { epochs = 2.5 }\n[search]\ns_target = 0.45\n",
        )
        .unwrap();
        assert_eq!(cfg.lambdas, vec![0.01]);
        assert_eq!(cfg.schedule.baseline, Duration::Epochs(2.5));
        assert_eq!(cfg.schedule.baseline.steps(10, 4), 8);
        assert_eq!(cfg.search.s_target, 0.45);
        assert_eq!(cfg.search.delta, SearchConfig::default().delta);
        assert_eq!(cfg.schedule.crop_size, ScheduleConfig::default().crop_size);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.lambdas.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.schedule.crop_size = 48;
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_toml("version = 7").is_err());
        assert!(ExperimentConfig::from_toml("lambdas = \"x\"").is_err());
    }

    #[test]
    fn cli_overrides_win() {
        let mut cfg = ExperimentConfig::from_toml("[search]\ns_target = 0.45\n").unwrap();
        let o = ConfigOverrides { s_target: Some(0.6), output_dir: Some("x".into()), ..Default::default() };
        o.apply(&mut cfg);
        assert_eq!(cfg.search.s_target, 0.6);
        assert_eq!(cfg.output_dir, PathBuf::from("x"));
    }
}
