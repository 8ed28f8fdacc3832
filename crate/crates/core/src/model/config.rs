use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odesolve::SolverConfig;
use crate::synthdata::Mode;

/// Architecture, loss weights and the inference solver of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub embed_channels: usize,
    pub latent_channels: usize,
    /// Latent grid is `height / downsample` by `width / downsample`; a power of two.
    pub downsample: usize,
    pub dynamics_hidden: usize,
    pub head_channels: usize,
    /// Largest flow speed in pixels per normalized time unit (one median frame interval).
    pub max_speed: f64,
    /// Initial bias of the composition-mask logit; large values start the decoder near frame copying.
    pub mask_bias_init: f64,
    pub lambda_shrinkage: f64,
    pub lambda_residual: f64,
    pub lambda_content: f64,
    pub shrinkage_a: f64,
    pub shrinkage_c: f64,
    /// Default solver for imputation.
    pub solver: SolverConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            embed_channels: 4,
            latent_channels: 8,
            downsample: 4,
            dynamics_hidden: 8,
            head_channels: 4,
            max_speed: 4.0,
            mask_bias_init: 3.0,
            lambda_shrinkage: 0.05,
            lambda_residual: 0.5,
            lambda_content: 1.0,
            shrinkage_a: 10.0,
            shrinkage_c: 0.2,
            solver: SolverConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let ds = self.downsample;
        if ds == 0 || !ds.is_power_of_two() {
            return Err(Error::config(format!("downsample factor must be a power of two, got {ds}")));
        }
        if self.height == 0 || self.width == 0 || self.height % ds != 0 || self.width % ds != 0 {
            return Err(Error::config(format!(
                "frame {}x{} is not divisible by downsample factor {ds}",
                self.height, self.width
            )));
        }
        if [self.channels, self.embed_channels, self.latent_channels, self.dynamics_hidden, self.head_channels].contains(&0) {
            return Err(Error::config("model channel counts must be positive"));
        }
        if [self.lambda_shrinkage, self.lambda_residual, self.lambda_content].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if !(self.shrinkage_a > 0.0) || !(self.shrinkage_c >= 0.0) {
            return Err(Error::config("shrinkage loss needs a > 0 and c >= 0"));
        }
        if !(self.max_speed > 0.0) {
            return Err(Error::config("max_speed must be positive"));
        }
        self.solver.validate()
    }

    /// `log2(downsample)`.
    pub(crate) fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub(crate) fn latent_hw(&self) -> (usize, usize) {
        (self.height / self.downsample, self.width / self.downsample)
    }
}

/// Optimization schedule and masking protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub decay: f64,
    pub drop_rate: f64,
    pub mode: TrainMode,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Solver used inside training unrolls.
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            learning_rate: 1e-3,
            decay: 0.99,
            drop_rate: 0.5,
            mode: TrainMode::Interpolation,
            seed: 0,
            clip_norm: 5.0,
            solver: SolverConfig::rk4(0.5),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.drop_rate > 0.0 && self.drop_rate < 1.0) {
            return Err(Error::config(format!("drop rate must be in (0, 1), got {}", self.drop_rate)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::config("learning rate must be positive and clip norm nonnegative"));
        }
        self.solver.validate()
    }
}

/// Masking protocol used while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[serde(alias = "interp")]
    Interpolation,
    #[serde(alias = "extrap")]
    Extrapolation,
    /// Alternates interpolation and extrapolation masks window by window.
    Mixed,
}

impl TrainMode {
    /// Mask mode for window `index` of an epoch.
    pub fn mask_mode(self, index: usize) -> Mode {
        match self {
            Self::Interpolation => Mode::Interpolation,
            Self::Extrapolation => Mode::Extrapolation,
            Self::Mixed if index % 2 == 0 => Mode::Interpolation,
            Self::Mixed => Mode::Extrapolation,
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interp" | "interpolation" => Ok(Self::Interpolation),
            "extrap" | "extrapolation" => Ok(Self::Extrapolation),
            "mixed" => Ok(Self::Mixed),
            other => Err(Error::config(format!("unknown training mode `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn indivisible_frame_rejected() {
        let cfg = ModelConfig { height: 30, ..ModelConfig::default() };
        assert!(cfg.validate().unwrap_err().to_string().contains("divisible"));
    }

    #[test]
    fn negative_weight_rejected() {
        let cfg = ModelConfig { lambda_residual: -1.0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn train_ranges() {
        assert!(TrainConfig { drop_rate: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { decay: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { decay: 1.0, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"hieght": 3}"#).is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "mode": "extrap"}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.mode, TrainMode::Extrapolation);
    }
}
