//! Run configuration: a TOML document with one section per module. Flags override
//! file values, file values override defaults.

use std::path::{Path, PathBuf};

use irm_core::dataset::DEFAULT_SIGMA;
use irm_core::model::ModelConfig;
use irm_core::pipeline::InferConfig;
use irm_core::reasoner::{BackendConfig, BackendKind};
use irm_core::train::TrainConfig;
use irm_core::ExecMode;
use serde::{Deserialize, Serialize};

use crate::exit::CliError;

pub const DEFAULT_SEEDS: [u64; 3] = [2024, 2025, 2026];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub sigma: f64,
    pub filter_temporal: bool,
    pub filter_wh: bool,
    /// Label clue relations with the judge backend after building.
    pub annotate: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA, filter_temporal: true, filter_wh: true, annotate: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    /// Token-F1 grading, no backend calls.
    #[default]
    Mock,
    /// Grade through the configured chat backend.
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub judge: JudgeKind,
    /// Fraction of extra unrelated clues injected for robustness runs.
    pub noise_ratio: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { judge: JudgeKind::Mock, noise_ratio: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub seeds: usize,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { seeds: 20, tolerance: irm_core::checks::DEFAULT_TOLERANCE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds used by `--all-seeds` runs.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Use the rayon pool for per-item work when the build supports it.
    pub parallel: bool,
    pub dataset: DatasetSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub backend: BackendConfig,
    pub eval: EvalSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEEDS[0],
            seeds: DEFAULT_SEEDS.to_vec(),
            out_dir: PathBuf::from("runs"),
            parallel: true,
            dataset: DatasetSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            infer: InferConfig::default(),
            backend: BackendConfig::default(),
            eval: EvalSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

/// Global flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub iterations: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(dir) = &overrides.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(kind) = overrides.backend {
            config.backend.kind = kind;
        }
        if let Some(k) = overrides.iterations {
            config.infer.iterations = k;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        if !(self.dataset.sigma > 0.0 && self.dataset.sigma.is_finite()) {
            return bad(format!("dataset.sigma must be > 0, got {}", self.dataset.sigma));
        }
        self.model.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.backend.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        for (name, value) in [
            ("infer.frame_count", self.infer.frame_count),
            ("train.frame_count", self.train.frame_count),
            ("train.batch_size", self.train.batch_size),
            ("train.vocab_size", self.train.vocab_size),
            ("gradcheck.seeds", self.gradcheck.seeds),
        ] {
            if value == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.train.learning_rate > 0.0) {
            return bad(format!("train.learning_rate must be > 0, got {}", self.train.learning_rate));
        }
        if !(0.0..=10.0).contains(&self.eval.noise_ratio) {
            return bad(format!("eval.noise_ratio out of range: {}", self.eval.noise_ratio));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        Ok(())
    }

    pub fn exec_mode(&self) -> ExecMode {
        if self.parallel { ExecMode::Parallel } else { ExecMode::Sequential }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        let text = toml::to_string(&config).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), config);
        assert_eq!(config.seeds, vec![2024, 2025, 2026]);
        assert_eq!(config.dataset.sigma, 20.0);
        assert_eq!(config.infer.frame_count, 8);
    }

    #[test]
    fn sections_are_partial_and_strict() {
        let c = RunConfig::from_toml("seed = 7\n[dataset]\nsigma = 10.0\n[infer]\niterations = 2\n").unwrap();
        assert_eq!((c.seed, c.dataset.sigma, c.infer.iterations), (7, 10.0, 2));
        assert!(c.dataset.filter_wh);
        assert!(RunConfig::from_toml("[dataset]\nsigmaa = 1.0\n").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\n[infer]\niterations = 2\n").unwrap();
        let o = Overrides { seed: Some(9), iterations: Some(3), ..Overrides::default() };
        let c = RunConfig::load(Some(&path), &o).unwrap();
        assert_eq!((c.seed, c.infer.iterations), (9, 3));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = RunConfig::default();
        c.dataset.sigma = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.d_model = 0;
        assert!(c.validate().is_err());
    }
}
