//! The run configuration document and the desk-scale protocol.
//!
//! One JSON file with optional sections; anything omitted takes its default.
//!
//! ```json
//! {
//!   "battery":  { "capacity_ah": 6.75 },
//!   "expert":   { "horizon": 4 },
//!   "episode":  { "n_steps": 200, "rest_steps": 30 },
//!   "rollout":  { "n_w": 20 },
//!   "policy":   { "lstm": [128, 64, 32, 16], "dense": [100, 100, 50, 10] },
//!   "train":    { "learning_rate": 0.0005 },
//!   "dagger":   { "n_iterations": 15 },
//!   "evaluation": { "episodes": 100 }
//! }
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::battery::BatteryParams;
use crate::dagger::{DaggerConfig, Pipeline};
use crate::dataset::{RolloutConfig, SamplingConfig};
use crate::error::{Error, Result};
use crate::eval::EvalSetup;
use crate::expert::ExpertConfig;
use crate::par::Exec;
use crate::policy::{Architecture, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub lstm: Vec<usize>,
    pub dense: Vec<usize>,
}

impl Default for PolicySection {
    fn default() -> Self {
        let full = Architecture::full(0, &Default::default());
        Self {
            lstm: full.lstm,
            dense: full.dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub episodes: usize,
    pub timing_states: usize,
    pub horizons: Vec<usize>,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            episodes: 100,
            timing_states: 30,
            horizons: vec![1, 2, 4, 8, 16],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub battery: BatteryParams,
    pub expert: ExpertConfig,
    pub episode: SamplingConfig,
    pub rollout: RolloutConfig,
    pub policy: PolicySection,
    pub train: TrainConfig,
    pub dagger: DaggerConfig,
    /// Behavioral-cloning episode count; defaults to the DAGGER total.
    pub bc_episodes: Option<usize>,
    pub evaluation: EvaluationSection,
}

/// Episode counts, hidden widths and DAGGER rounds for a desk-scale factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalePlan {
    pub episodes: f64,
    pub hidden: f64,
    pub max_iterations: usize,
}

impl ScalePlan {
    /// Episodes scale by `s`, hidden widths and the minibatch by `min(1, 5s)`,
    /// and the round count is capped at `ceil(100 s)`. At 0.05 that is 5 % of
    /// the episodes, a quarter of every width and of the batch, and 5 rounds.
    pub fn new(s: f64) -> Result<Self> {
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::InvalidConfig(format!("scale must be in (0, 1], got {s}")));
        }
        Ok(Self {
            episodes: s,
            hidden: (5.0 * s).min(1.0),
            max_iterations: (100.0 * s).ceil() as usize,
        })
    }
}

fn scale_count(n: usize, f: f64) -> usize {
    ((n as f64 * f).ceil() as usize).max(1)
}

impl RunConfig {
    /// Parses a config document. Keys of the battery section override the
    /// default cell, so a partial section is accepted there too.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut doc: serde_json::Value = serde_json::from_str(text)?;
        if let Some(battery) = doc.get_mut("battery").filter(|b| b.is_object()) {
            if let serde_json::Value::Object(keys) = battery.take() {
                let mut merged = serde_json::to_value(BatteryParams::default())?;
                if let serde_json::Value::Object(base) = &mut merged {
                    base.extend(keys);
                }
                *battery = merged;
            }
        }
        let cfg: Self = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::InvalidConfig(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.battery.validate()?;
        self.dagger.validate()?;
        if self.evaluation.episodes == 0 {
            return Err(Error::InvalidConfig("evaluation.episodes must be >= 1".into()));
        }
        self.pipeline(Exec::Sequential).validate()
    }

    /// Seeds every stochastic stage from one master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dagger.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        let plan = ScalePlan::new(s)?;
        let mut out = self.clone();
        let bc = self.bc_episodes();
        out.dagger.episodes_initial = scale_count(self.dagger.episodes_initial, plan.episodes);
        out.dagger.episodes_per_iter = scale_count(self.dagger.episodes_per_iter, plan.episodes);
        out.dagger.n_iterations = self.dagger.n_iterations.min(plan.max_iterations);
        out.bc_episodes = self.bc_episodes.map(|_| scale_count(bc, plan.episodes));
        out.train.batch_size = scale_count(self.train.batch_size, plan.hidden);
        let arch = self.arch().scaled(plan.hidden);
        out.policy = PolicySection {
            lstm: arch.lstm,
            dense: arch.dense,
        };
        Ok(out)
    }

    pub fn bc_episodes(&self) -> usize {
        self.bc_episodes.unwrap_or_else(|| self.dagger.total_episodes())
    }

    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            base_params: self.battery.clone(),
            ..self.episode.clone()
        }
    }

    pub fn arch(&self) -> Architecture {
        Architecture {
            n_w: self.rollout.n_w,
            lstm: self.policy.lstm.clone(),
            dense: self.policy.dense.clone(),
            i_min: self.expert.bounds.i_min,
            i_max: self.expert.bounds.i_max,
        }
    }

    pub fn pipeline(&self, exec: Exec) -> Pipeline {
        Pipeline {
            sampling: self.sampling(),
            expert: self.expert.clone(),
            rollout: self.rollout,
            arch: self.arch(),
            train: self.train.clone(),
            exec,
        }
    }

    pub fn eval_setup(&self, exec: Exec) -> EvalSetup {
        EvalSetup {
            sampling: self.sampling(),
            expert: self.expert.clone(),
            rollout: self.rollout,
            exec,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.bc_episodes(), 2000);
    }

    #[test]
    fn unknown_keys_rejected_in_every_section() {
        for doc in [
            r#"{"nope": 1}"#,
            r#"{"expert": {"horizn": 3}}"#,
            r#"{"dagger": {"n_iter": 3}}"#,
            r#"{"episode": {"base_params": {}}}"#,
        ] {
            assert!(RunConfig::from_json(doc).is_err(), "{doc}");
        }
    }

    #[test]
    fn battery_section_reaches_sampling() {
        let cfg = RunConfig::from_json(r#"{"battery": {"c_core": 70.0}}"#).unwrap();
        assert_eq!(cfg.sampling().base_params.c_core, 70.0);
    }

    #[test]
    fn inconsistent_step_rejected() {
        assert!(RunConfig::from_json(r#"{"expert": {"ts": 5.0}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"episode": {"rest_steps": 5}}"#).is_err());
    }

    #[test]
    fn desk_scale_protocol() {
        let s = RunConfig::default().scaled(0.05).unwrap();
        assert_eq!(s.dagger.episodes_initial, 25);
        assert_eq!(s.dagger.episodes_per_iter, 5);
        assert_eq!(s.dagger.n_iterations, 5);
        assert_eq!(s.bc_episodes(), 50);
        assert_eq!(s.policy.lstm, vec![32, 16, 8, 4]);
        assert_eq!(s.policy.dense, vec![25, 25, 13, 3]);
        assert_eq!(s.train.batch_size, 64);
        assert_eq!(RunConfig::default().scaled(1.0).unwrap(), RunConfig::default());
        assert!(RunConfig::default().scaled(0.0).is_err());
    }
}
