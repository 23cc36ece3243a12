//! Run configuration: every tunable in one TOML document, with a stable
//! content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::control::ControllerConfig;
use crate::denoiser::ModelConfig;
use crate::error::{Error, Result};
use crate::pipeline::{FinetuneConfig, SamplerConfig};
use crate::schedule::{build_schedule, BetaSpacing, NoiseSchedule};
use crate::train::TrainConfig;

pub const HOME_ENV: &str = "CAPVID_HOME";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            spacing: BetaSpacing::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, ddim_steps: usize) -> Result<NoiseSchedule> {
        build_schedule(
            self.total_steps,
            self.beta_start,
            self.beta_end,
            self.spacing,
            ddim_steps,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_clips: usize,
    pub seed: u64,
    pub n_frames: usize,
    pub resolution: usize,
    pub val_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_clips: 2000,
            seed: 0,
            n_frames: 8,
            resolution: 64,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// `encoder` or `pixels`.
    pub feature_extractor: String,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            feature_extractor: "encoder".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Output root; `CAPVID_HOME` overrides an empty value.
    pub home: String,
    pub corpus: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub controller: ControllerConfig,
    pub finetune: FinetuneConfig,
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub paths: PathsConfig,
}

/// JSON with object keys in sorted order and no whitespace.
pub fn canonical_json<S: Serialize>(value: &S) -> String {
    // serde_json's default map is ordered by key
    let v = serde_json::to_value(value).expect("config serializes");
    v.to_string()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        self.schedule.build(0)?;
        if self.metrics.feature_extractor != "encoder" && self.metrics.feature_extractor != "pixels" {
            return Err(Error::Config(format!(
                "metrics.feature_extractor must be `encoder` or `pixels`, got `{}`",
                self.metrics.feature_extractor
            )));
        }
        if self.model.image_size != self.corpus.resolution {
            return Err(Error::Config(format!(
                "model.image_size {} differs from corpus.resolution {}",
                self.model.image_size, self.corpus.resolution
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(canonical_json(self).as_bytes())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build(self.sampler.ddim_steps)
    }

    /// Output root: `paths.home`, else `$CAPVID_HOME`, else `./capvid`.
    pub fn home(&self) -> PathBuf {
        if !self.paths.home.is_empty() {
            return PathBuf::from(&self.paths.home);
        }
        std::env::var_os(HOME_ENV).map_or_else(|| PathBuf::from("capvid"), PathBuf::from)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.resolve(&self.paths.corpus, "corpus")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.paths.checkpoint, "model.ckpt")
    }

    fn resolve(&self, p: &str, default: &str) -> PathBuf {
        match p {
            "" => self.home().join(default),
            p => self.home().join(p),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.sampler.ddim_steps, 50);
        assert_eq!(cfg.controller.cross_replace_ratio, 0.8);
        assert_eq!(cfg.controller.attention_threshold, 0.3);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_toml("[controller]\ncross_replace_ration = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("cross_replace_ration"), "{err}");
        let err = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_toml("seed = 3\n[sampler]\nddim_steps = 20\nguidance_scale = 2.0\n").unwrap();
        let b = RunConfig::from_toml("seed = 3\n[sampler]\nguidance_scale = 2.0\nddim_steps = 20\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[controller]\nattention_threshold = 1.5\n").is_err());
        assert!(RunConfig::from_toml("[metrics]\nfeature_extractor = \"clip\"\n").is_err());
    }

    #[test]
    fn paths_resolve_under_home() {
        let mut cfg = RunConfig::default();
        cfg.paths.home = "/tmp/x".into();
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("/tmp/x/model.ckpt"));
        cfg.paths.corpus = "data".into();
        assert_eq!(cfg.corpus_dir(), PathBuf::from("/tmp/x/data"));
    }
}
