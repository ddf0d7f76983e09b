//! Run configuration: one TOML file covering the network, loss, data
//! generator, and training loop. Every field has a default, so an empty
//! file is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::GeneratorConfig;
use crate::dtgrm::DtgrmConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Seed for parameter init, sequence order and frame exchange.
    pub seed: u64,
    /// Percentage of frames exchanged per sequence per epoch.
    pub eta: f64,
    /// 32 or 64; checkpoints record which was used.
    pub precision: u32,
    pub out_dir: String,
    pub n_train: usize,
    pub n_test: usize,
    /// Epochs between held-out metric reports; the final epoch always
    /// reports.
    pub val_every: usize,
    pub self_supervision: bool,
    pub backbone: BackboneConfig,
    pub dtgrm: DtgrmConfig,
    pub loss: LossWeights,
    pub data: GeneratorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 100,
            learning_rate: 5e-4,
            seed: 0,
            eta: 20.0,
            precision: 32,
            out_dir: "out".to_string(),
            n_train: 30,
            n_test: 10,
            val_every: 10,
            self_supervision: true,
            backbone: BackboneConfig::default(),
            dtgrm: DtgrmConfig::default(),
            loss: LossWeights::default(),
            data: GeneratorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=100.0).contains(&self.eta) {
            return Err(Error::Config("eta must lie in [0, 100]".into()));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config("precision must be 32 or 64".into()));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be positive".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be positive".into()));
        }
        self.backbone.validate()?;
        self.dtgrm.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Loss weights as trained: self-supervision off zeroes the
    /// exchange terms.
    pub fn effective_loss(&self) -> LossWeights {
        if self.self_supervision {
            self.loss
        } else {
            self.loss.without_self_supervision()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_config() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.learning_rate, 5e-4);
        assert_eq!(cfg.eta, 20.0);
        assert_eq!(cfg.n_train, 30);
        assert_eq!(cfg.n_test, 10);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.epochs = 7;
        cfg.dtgrm.num_stages = 1;
        cfg.loss.omega = 0.3;
        cfg.data.num_classes = 4;
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::from_toml(
            "epochs = 3\n\n[dtgrm]\nnum_stages = 1\ngraph_variant = \"s-only\"\n",
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.dtgrm.num_stages, 1);
        assert_eq!(cfg.backbone, BackboneConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("episodes = 3").is_err());
        assert!(RunConfig::from_toml("precision = 16").is_err());
        assert!(RunConfig::from_toml("eta = 120.0").is_err());
        assert!(RunConfig::from_toml("learning_rate = 0.0").is_err());
    }

    #[test]
    fn self_supervision_toggle_zeroes_exchange_weights() {
        let mut cfg = RunConfig::default();
        cfg.self_supervision = false;
        let w = cfg.effective_loss();
        assert_eq!(w.lambda_e, 0.0);
        assert_eq!(w.lambda_c, 0.0);
        assert_eq!(w.omega, cfg.loss.omega);
    }
}
