//! Run configuration.
//!
//! Config files are TOML written as flat dotted `key = value` lines, e.g.
//!
//! ```toml
//! model.variant = "bertswin"
//! loss.kind = "phys"
//! loss.phys.lambda_soft = 0.5
//! optimizer.kind = "gcond"
//! optimizer.gcond.eta_gamma = 5e-4
//! data.seed = 7
//! schedule.steps = 200
//! schedule.early_stop.patience = 4
//! ```
//!
//! Every table is optional and falls back to the desk defaults; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{MvcWeights, PhysWeights};
use crate::model::ModelConfig;
use crate::optim::{AdamHyper, GcondHyper};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Masked-patch mean squared error.
    L2,
    /// Block MVC loss over the scored voxels.
    Mvc,
    /// Region-weighted MVC over the full, soft-tissue and bone-shell regions.
    Phys,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub sub_patch: usize,
    pub mvc: MvcWeights,
    pub phys: PhysWeights,
    /// Score MVC terms over every voxel instead of masked patches only.
    pub all_patches: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::L2,
            sub_patch: 4,
            mvc: MvcWeights::default(),
            phys: PhysWeights::default(),
            all_patches: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gcond,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub gcond: GcondHyper,
    pub adamw: AdamHyper,
}

/// Desk step sizes, one per optimizer and shared by every cell so a
/// comparison never hides a per-cell tuning advantage. See the README for the
/// sweep they came from.
pub const DESK_ETA_GAMMA: f64 = 5e-4;
pub const DESK_ADAMW_LR: f64 = 1e-2;

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Gcond,
            gcond: GcondHyper {
                eta_gamma: DESK_ETA_GAMMA,
                ..GcondHyper::default()
            },
            adamw: AdamHyper {
                lr: DESK_ADAMW_LR,
                ..AdamHyper::default()
            },
        }
    }
}

impl OptimizerConfig {
    /// Learning rate of the active optimizer (`eta_gamma` for GCond).
    pub fn lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Gcond => self.gcond.eta_gamma,
            OptimizerKind::Adamw => self.adamw.lr,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        match self.kind {
            OptimizerKind::Gcond => self.gcond.eta_gamma = lr,
            OptimizerKind::Adamw => self.adamw.lr = lr,
        }
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 16,
            n_val: 4,
            batch: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValMetric {
    MaskedL2,
    Loss,
    MvcSoft,
    MvcSurf,
}

/// Stop after `patience` consecutive validations that fail to lower the
/// best value of `metric` by more than `threshold`. `patience = 0` disables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStop {
    pub metric: ValMetric,
    pub patience: usize,
    pub threshold: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            metric: ValMetric::MaskedL2,
            patience: 0,
            threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Optimizer steps. One pass over the training set is
    /// `ceil(n_train / batch)` steps, so the desk default of 200 is 100 passes.
    pub steps: u64,
    /// Validate every `val_every` steps and after the last one; 0 disables.
    pub val_every: u64,
    pub early_stop: EarlyStop,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            val_every: 25,
            early_stop: EarlyStop::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    /// Directory for the config copy, metrics and checkpoint; none keeps
    /// everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Adds `wall_ms` to metrics records. Off by default so streams stay
    /// byte-comparable across runs.
    pub record_wall_time: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config does not serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.mvc.validate()?;
        self.loss.phys.validate()?;
        self.optimizer.gcond.validate()?;
        self.optimizer.adamw.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let vol = self.model.volume_size;
        if self.loss.sub_patch < 2 || !vol.is_multiple_of(self.loss.sub_patch) {
            return bad(format!(
                "loss.sub_patch {} must be >= 2 and divide {vol}",
                self.loss.sub_patch
            ));
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_val == 0 || d.batch == 0 || d.batch > d.n_train {
            return bad(format!(
                "data needs n_train >= batch >= 1 and n_val >= 1, got {} / {} / {}",
                d.n_train, d.batch, d.n_val
            ));
        }
        if self.schedule.steps == 0 {
            return bad("schedule.steps must be positive".into());
        }
        let es = &self.schedule.early_stop;
        if !(es.threshold >= 0.0 && es.threshold.is_finite()) {
            return bad(format!(
                "early_stop.threshold must be finite and >= 0, got {}",
                es.threshold
            ));
        }
        if es.patience > 0 && self.schedule.val_every == 0 {
            return bad("early stopping needs schedule.val_every > 0".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = RunConfig::from_toml(
            "model.variant = \"vit_sparse\"\nloss.kind = \"phys\"\noptimizer.kind = \"adamw\"\n\
             optimizer.adamw.lr = 0.01\ndata.seed = 9\nschedule.early_stop.patience = 3\n",
        )
        .unwrap();
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.loss.kind, LossKind::Phys);
        assert_eq!(cfg.optimizer.lr(), 0.01);
        assert_eq!(cfg.data.seed, 9);
        assert_eq!(cfg.schedule.early_stop.patience, 3);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_invalid_keys_are_config_errors() {
        for text in [
            "model.depht = 3",
            "data.batch = 0",
            "loss.sub_patch = 3",
            "schedule.steps = -1",
        ] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert!(e.is_config(), "{text}: {e}");
        }
    }
}
