//! Run configuration: one TOML file with CLI overrides on top. Flags win
//! over the file, the file wins over defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SynthConfig;
use crate::federation::{Mode, PipelineConfig};
use crate::privacy::{AttackInit, ScenarioKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// One rating CSV per domain, domain id = position.
    pub domain_csvs: Vec<PathBuf>,
    /// Directory of prepared split CSVs (`domain_<id>.csv`).
    pub splits_dir: Option<PathBuf>,
    /// Drop users with fewer rows than this before implicitization.
    pub min_user_interactions: usize,
    /// Fail the load on any malformed row.
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domain_csvs: Vec::new(),
            splits_dir: None,
            min_user_interactions: 1,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub scenario: ScenarioKind,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub restarts: usize,
    pub step_size: f64,
    pub init: AttackInit,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilons: vec![4.0, 8.0, 16.0, 32.0, 64.0],
            delta: 1e-5,
            scenario: ScenarioKind::Star,
            seeds: vec![0, 1, 2],
            iterations: 400,
            restarts: 3,
            step_size: 0.05,
            init: AttackInit::Oracle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub mode: Mode,
    /// Worker-thread cap; 0 uses the runtime default.
    pub threads: usize,
    pub pipeline: PipelineConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub attack: AttackSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("runs/out"),
            mode: Mode::Full,
            threads: 0,
            pipeline: PipelineConfig::default(),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            attack: AttackSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        Ok(cfg.resolved())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("serializable config")
    }

    /// Push the root seed and mode into the nested sections so one knob
    /// drives the whole run.
    pub fn resolved(mut self) -> Self {
        self.pipeline.seed = self.seed;
        self.pipeline.mode = self.mode;
        self.synth.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.synth.validate()?;
        if self.attack.epsilons.is_empty() || self.attack.seeds.is_empty() {
            return Err(Error::Config("attack grid must not be empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.pipeline.dim, 8);
        assert_eq!(cfg.pipeline.n_layers, 2);
        assert_eq!(cfg.pipeline.batch_size, 256);
        assert_eq!(cfg.pipeline.learning_rate, 0.01);
        assert_eq!(cfg.pipeline.weights.alpha, 0.01);
        assert_eq!(cfg.pipeline.weights.beta, 0.01);
        assert_eq!(cfg.pipeline.dp.epsilon, 8.0);
        assert_eq!(cfg.pipeline.dp.delta, 1e-5);
        assert_eq!(cfg.pipeline.ks, vec![5, 10]);
        assert_eq!(cfg.pipeline.k_negatives, 4);
        assert_eq!(cfg.pipeline.eval_negatives, 99);
        assert_eq!(cfg.attack.epsilons, vec![4.0, 8.0, 16.0, 32.0, 64.0]);
    }

    #[test]
    fn toml_roundtrip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.seed = 7;
        cfg.mode = Mode::AblateT;
        let cfg = cfg.resolved();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("banana = 3\n").unwrap_err();
        assert!(err.to_string().contains("banana"), "{err}");
        let err = RunConfig::from_toml_str("[pipeline]\nfoo = 1\n").unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 9\n[pipeline]\nt_rounds = 5\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pipeline.seed, 9); // resolved from root
        assert_eq!(cfg.pipeline.t_rounds, 5);
        assert_eq!(cfg.pipeline.dim, 8);
    }

    #[test]
    fn root_mode_propagates() {
        let cfg = RunConfig::from_toml_str("mode = \"ablate-M\"\n").unwrap();
        assert_eq!(cfg.mode, Mode::AblateM);
        assert_eq!(cfg.pipeline.mode, Mode::AblateM);
    }
}
