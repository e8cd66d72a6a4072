//! Run configuration: a flat TOML file of experiment knobs. Command-line
//! flags override file values; unknown keys are rejected.

use std::path::Path;

use serde::Deserialize;

use crate::aggregate::{AggregatorConfig, AggregatorKind};
use crate::encoder::TrainConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub aggregator: String,
    pub gem_p: f64,
    pub rmac_levels: usize,
    pub rmac_overlap: f64,
    pub out_dim: usize,
    pub temperature: f64,
    pub ap_bins: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub instances: usize,
    pub views: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let agg = AggregatorConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            aggregator: agg.kind.name().to_string(),
            gem_p: agg.gem_p,
            rmac_levels: agg.rmac_levels,
            rmac_overlap: agg.rmac_overlap,
            out_dim: 16,
            temperature: train.temperature,
            ap_bins: train.ap_bins,
            batch_size: train.batch_size,
            steps: train.steps,
            lr: train.lr,
            instances: 16,
            views: 8,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.aggregator_config()?.validate()?;
        if self.out_dim == 0 {
            return Err(Error::InvalidArgument("out_dim must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument("temperature must be > 0".into()));
        }
        if self.ap_bins < 2 {
            return Err(Error::InvalidArgument("ap_bins must be >= 2".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("lr must be > 0".into()));
        }
        if self.instances == 0 || self.views == 0 {
            return Err(Error::InvalidArgument(
                "instances and views must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn aggregator_config(&self) -> Result<AggregatorConfig> {
        let kind: AggregatorKind = self.aggregator.parse()?;
        Ok(AggregatorConfig {
            kind,
            gem_p: self.gem_p,
            rmac_levels: self.rmac_levels,
            rmac_overlap: self.rmac_overlap,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            seed: self.seed,
            temperature: self.temperature,
            ap_bins: self.ap_bins,
            lr: self.lr,
            aggregator: self.aggregator_config()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_toml_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.aggregator, "gem");
        assert_eq!(cfg.out_dim, 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus_key = 1").is_err());
    }

    #[test]
    fn partial_override() {
        let cfg: RunConfig = toml::from_str("aggregator = \"mac\"\nseed = 7").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.aggregator_config().unwrap().kind.name(), "mac");
        assert_eq!(cfg.batch_size, RunConfig::default().batch_size);
    }

    #[test]
    fn bad_aggregator_rejected() {
        let cfg: RunConfig = toml::from_str("aggregator = \"vlad\"").unwrap();
        assert!(cfg.validate().is_err());
    }
}
