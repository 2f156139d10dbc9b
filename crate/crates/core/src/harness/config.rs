use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamConfig;
use crate::error::{Error, Result};
use crate::reasoner::ReasonerConfig;
use crate::render::SUPPORTED_SIZES;
use crate::space::{FactorSpace, SpaceConfig};
use crate::vae::{Architecture, DiscriminatorConfig, TcEstimator};

/// Which panels the decoder reconstructs during joint training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconScope {
    /// The eight context panels plus the correct answer.
    #[default]
    All,
    Answer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Learned,
    /// Ground-truth codes plus `nuisance` zero dimensions; only the reasoner trains.
    Oracle { nuisance: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub space: SpaceConfig,
    /// Number of rule attributes per puzzle.
    pub rules: usize,
    pub image_size: usize,
    pub latent_dim: usize,
    pub architecture: Architecture,
    pub lambda1: f64,
    /// TC weight.
    pub gamma: f64,
    pub epsilon: f64,
    /// Puzzles per joint step.
    pub batch_size: usize,
    /// Single images per warm-start step.
    pub warm_batch_size: usize,
    pub adam: AdamConfig,
    pub discriminator_lr: f64,
    pub warm_start_steps: u64,
    pub joint_steps: u64,
    pub reasoner_weight: f64,
    pub reasoner: ReasonerConfig,
    pub discriminator: DiscriminatorConfig,
    pub tc_estimator: TcEstimator,
    pub recon_scope: ReconScope,
    pub encoder: EncoderKind,
    pub seed: u64,
    /// Emit a log record every this many steps (0 disables logging).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            space: SpaceConfig::preset("toy2"),
            rules: 1,
            image_size: 16,
            latent_dim: 10,
            architecture: Architecture::Dense { hidden: 256 },
            lambda1: 1.0,
            gamma: 10.0,
            epsilon: 0.05,
            batch_size: 64,
            warm_batch_size: 64,
            adam: AdamConfig::default(),
            discriminator_lr: 1e-5,
            warm_start_steps: 2_000,
            joint_steps: 20_000,
            reasoner_weight: 1.0,
            reasoner: ReasonerConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            tc_estimator: TcEstimator::Discriminator,
            recon_scope: ReconScope::All,
            encoder: EncoderKind::Learned,
            seed: 1,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Narrower networks and smaller batches sized for one laptop core.
    pub fn desk() -> Self {
        Self {
            architecture: Architecture::Dense { hidden: 128 },
            batch_size: 16,
            warm_batch_size: 64,
            reasoner: ReasonerConfig { hidden: 64, dropout: 0.5 },
            discriminator: DiscriminatorConfig { hidden: 64, layers: 3 },
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Latent width actually used by the model.
    pub fn code_dim(&self, space: &FactorSpace) -> usize {
        match self.encoder {
            EncoderKind::Learned => self.latent_dim,
            EncoderKind::Oracle { nuisance } => space.num_factors() + nuisance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        let space = FactorSpace::build(&self.space)?;
        if self.rules == 0 || self.rules > space.num_factors() {
            return bad(format!(
                "rules must be in 1..={}, got {}",
                space.num_factors(),
                self.rules
            ));
        }
        if !SUPPORTED_SIZES.contains(&self.image_size) {
            return bad(format!("image_size must be one of {SUPPORTED_SIZES:?}"));
        }
        if self.code_dim(&space) < self.rules {
            return bad("latent_dim is smaller than the rule count".into());
        }
        if let Architecture::Dense { hidden: 0 } = self.architecture {
            return bad("dense hidden width must be positive".into());
        }
        if self.batch_size < 2 || self.warm_batch_size < 2 {
            return bad("batch sizes must be at least 2".into());
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("gamma", self.gamma),
            ("reasoner_weight", self.reasoner_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("adam.lr", self.adam.lr),
            ("discriminator_lr", self.discriminator_lr),
            ("adam.eps", self.adam.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.reasoner.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if self.reasoner.hidden == 0 || self.discriminator.hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg = TrainConfig::from_json(r#"{"gamma": 20, "seed": 3}"#).unwrap();
        assert_eq!(cfg.gamma, 20.0);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = TrainConfig {
            encoder: EncoderKind::Oracle { nuisance: 4 },
            ..TrainConfig::desk()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_json(r#"{"gamma": -1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"rules": 3}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"image_size": 20}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"batch_size": 1}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"gama": 1}"#).is_err());
    }
}
