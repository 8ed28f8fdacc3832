use std::fs;
use std::path::{Path, PathBuf};

use npfx::eval::MaskConfig;
use npfx::metrics::MetricConfig;
use npfx::model::{ModelConfig, TrainConfig};
use npfx::odesolve::SolverConfig;
use npfx::synthdata::DomainSpec;
use npfx::{Error, Result};
use serde::{Deserialize, Serialize};

/// Seed fallback when neither the flag nor the config sets one.
pub const SEED_ENV: &str = "NPFX_SEED";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub windows: usize,
    pub window_len: usize,
}

impl Default for GenSection {
    fn default() -> Self {
        Self {
            windows: 500,
            window_len: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImputeSection {
    pub reverse_order: bool,
    /// Inference solver; the model's stored solver when absent.
    pub solver: Option<SolverConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub baselines: String,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            baselines: "mean,locf,em,of,ot".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElasticitySection {
    pub tolerances: Vec<f64>,
}

impl Default for ElasticitySection {
    fn default() -> Self {
        Self {
            tolerances: vec![1e-5, 1e-3, 0.5],
        }
    }
}

/// Every setting of a run; flags override the file, and the resolved
/// document is echoed into each report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub timestamps: bool,
    pub domain: DomainSpec,
    pub generate: GenSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mask: MaskConfig,
    pub impute: ImputeSection,
    pub bench: BenchSection,
    pub elasticity: ElasticitySection,
    pub metrics: MetricConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            jobs: None,
            timestamps: true,
            domain: DomainSpec::domain_a(),
            generate: GenSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mask: MaskConfig::default(),
            impute: ImputeSection::default(),
            bench: BenchSection::default(),
            elasticity: ElasticitySection::default(),
            metrics: MetricConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fixes the seed (flag, then config, then environment, then 0) and copies
    /// it into the training and masking sections.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")))?,
            ),
            Err(_) => None,
        };
        let seed = flag.or(self.seed).or(env).unwrap_or(0);
        self.seed = Some(seed);
        self.train.seed = seed;
        self.mask.seed = seed;
        Ok(seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.impute.solver {
            s.validate()?;
        }
        if !(self.mask.drop_rate > 0.0 && self.mask.drop_rate < 1.0) {
            return Err(Error::Config(format!("mask drop rate must be in (0, 1), got {}", self.mask.drop_rate)));
        }
        if self.generate.windows == 0 || self.generate.window_len < 2 {
            return Err(Error::Config("generation needs at least one window of two frames".into()));
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}
