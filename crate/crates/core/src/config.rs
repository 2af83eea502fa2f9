//! Flat key-value run configuration (TOML syntax, no tables).
//!
//! Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::model::{LabelSpace, OffsetClass};
use crate::net::NetworkSpec;
use crate::sampler::{InferenceSettings, ScheduleKind};
use crate::trainer::{GradientScale, SamplingVariant, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,

    // dataset
    pub labels: usize,
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub test_count: usize,

    // model
    /// "desk", "wide" or "4-connected".
    pub offsets: String,
    /// "desk" or "full".
    pub network: String,

    // pretraining
    pub pretrain_iters: usize,
    pub pretrain_rate: f64,
    pub pretrain_momentum: f64,

    // CRF training
    /// "cd1", "cd2", "cd5", ... or "pcd".
    pub variant: String,
    /// Only the pairwise tables are trained.
    pub separate: bool,
    pub iterations: usize,
    pub base_rate: f64,
    pub table_rate: f64,
    pub decay: f64,
    pub momentum: f64,
    pub table_momentum: f64,
    pub gradient_scale: GradientScale,
    pub train_schedule: ScheduleKind,
    pub eval_interval: usize,
    pub eval_samples: usize,

    // inference
    pub burn_in: usize,
    pub samples: usize,
    pub thinning: usize,
    pub schedule: ScheduleKind,

    // paths
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        let inf = InferenceSettings::default();
        RunConfig {
            seed: 0,
            labels: 6,
            height: 48,
            width: 32,
            train_count: 200,
            test_count: 50,
            offsets: "desk".into(),
            network: "desk".into(),
            pretrain_iters: 4000,
            pretrain_rate: 0.01,
            pretrain_momentum: 0.99,
            variant: t.variant.to_string(),
            separate: false,
            iterations: t.max_iterations,
            base_rate: t.base_rate,
            table_rate: t.table_rate,
            decay: t.decay,
            momentum: t.momentum,
            table_momentum: t.table_momentum,
            gradient_scale: t.gradient_scale,
            train_schedule: t.schedule,
            eval_interval: t.eval_interval,
            eval_samples: t.eval_samples,
            burn_in: inf.burn_in,
            samples: inf.samples,
            thinning: inf.thinning,
            schedule: inf.schedule,
            data_dir: "data".into(),
            checkpoint: "model.ccrf".into(),
            out_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CrfError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        LabelSpace::new(self.labels).map_err(|_| CrfError::Config("labels must be at least 1".into()))
    }

    pub fn offset_classes(&self) -> Result<Vec<OffsetClass>> {
        match self.offsets.as_str() {
            "desk" => Ok(OffsetClass::desk_preset()),
            "wide" => Ok(OffsetClass::wide_preset()),
            "4-connected" => Ok(vec![OffsetClass { dx: 1, dy: 0 }, OffsetClass { dx: 0, dy: 1 }]),
            other => Err(CrfError::Config(format!("unknown offsets preset {other:?}"))),
        }
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        let labels = self.label_space()?;
        match self.network.as_str() {
            "desk" => Ok(NetworkSpec::desk(labels)),
            "full" => Ok(NetworkSpec::full(labels)),
            other => Err(CrfError::Config(format!("unknown network preset {other:?}"))),
        }
    }

    pub fn inference(&self) -> InferenceSettings {
        InferenceSettings {
            burn_in: self.burn_in,
            samples: self.samples,
            thinning: self.thinning,
            schedule: self.schedule,
        }
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig> {
        let config = TrainerConfig {
            variant: self.variant.parse::<SamplingVariant>()?,
            base_rate: self.base_rate,
            table_rate: self.table_rate,
            decay: self.decay,
            momentum: self.momentum,
            table_momentum: self.table_momentum,
            max_iterations: self.iterations,
            freeze_unaries: self.separate,
            seed: self.seed,
            schedule: self.train_schedule,
            gradient_scale: self.gradient_scale,
            eval_interval: self.eval_interval,
            eval_samples: self.eval_samples,
            inference: self.inference(),
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse("learning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, CrfError::Config(m) if m.contains("learning_rate")));
    }

    #[test]
    fn overrides_and_round_trip() {
        let c = RunConfig::parse("seed = 7\nvariant = \"cd5\"\nseparate = true\nschedule = \"raster-sequential\"\n").unwrap();
        assert_eq!(c.seed, 7);
        let t = c.trainer_config().unwrap();
        assert_eq!(t.variant, SamplingVariant::ContrastiveDivergence(5));
        assert!(t.freeze_unaries);
        assert_eq!(c.inference().schedule, ScheduleKind::RasterSequential);
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn bad_values() {
        assert!(RunConfig::parse("variant = \"mcmc\"").unwrap().trainer_config().is_err());
        assert!(RunConfig::parse("offsets = \"hex\"").unwrap().offset_classes().is_err());
        assert!(RunConfig::parse("seed = \"x\"").is_err());
    }
}
