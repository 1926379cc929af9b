//! DAGGER and the behavioral-cloning baseline.
//!
//! Round 0 rolls out the pure expert to build `D_0`. Round `i >= 1` rolls out
//! the mixture of the expert and the policy trained on `D_{i-1}` with
//! probability `beta_i` of taking the expert branch, labels every visited
//! state with the expert, and appends the rows. A fresh policy is trained on
//! each aggregate; the one trained on `D_{n_D}` is returned.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Actor, Dataset, EpisodeSummary, RolloutConfig, SamplingConfig};
use crate::error::{Error, Result};
use crate::expert::ExpertConfig;
use crate::par::Exec;
use crate::policy::{self, Architecture, PolicyModel, Preprocess, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Expert,
    Learner,
}

/// Takes the expert branch with probability `beta`. Exactly one uniform
/// draw is consumed per call and only the chosen closure runs.
pub fn mixed_policy_action<R, E, L>(beta: f64, expert: E, learner: L, rng: &mut R) -> (f64, Branch)
where
    R: Rng + ?Sized,
    E: FnOnce() -> f64,
    L: FnOnce() -> f64,
{
    if rng.gen::<f64>() < beta {
        (expert(), Branch::Expert)
    } else {
        (learner(), Branch::Learner)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaggerConfig {
    pub n_iterations: usize,
    pub beta0: f64,
    pub beta_decay: f64,
    pub episodes_initial: usize,
    pub episodes_per_iter: usize,
    pub seed: u64,
    /// Stop early once the relative loss improvement between rounds drops
    /// below this.
    pub plateau_threshold: Option<f64>,
    /// Continue training from the previous round's parameters.
    pub warm_start: bool,
    /// Refit feature standardization on every aggregate instead of keeping
    /// the statistics of `D_0`.
    pub refit_preprocess: bool,
}

impl Default for DaggerConfig {
    fn default() -> Self {
        Self {
            n_iterations: 15,
            beta0: 1.0,
            beta_decay: 0.5,
            episodes_initial: 500,
            episodes_per_iter: 100,
            seed: 0,
            plateau_threshold: None,
            warm_start: false,
            refit_preprocess: false,
        }
    }
}

pub const DEFAULT_PLATEAU_THRESHOLD: f64 = 1e-4;

impl DaggerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.beta0)
            && (0.0..=1.0).contains(&self.beta_decay)
            && self.episodes_initial >= 1
            && self.plateau_threshold.map_or(true, |t| t >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid dagger config: {self:?}")))
        }
    }

    pub fn total_episodes(&self) -> usize {
        self.episodes_initial + self.n_iterations * self.episodes_per_iter
    }
}

/// `beta_i` for rounds `0..=n_iterations`; round 0 uses `beta0`.
pub fn beta_schedule(cfg: &DaggerConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.n_iterations + 1);
    let mut beta = cfg.beta0;
    for _ in 0..=cfg.n_iterations {
        out.push(beta);
        beta *= cfg.beta_decay;
    }
    out
}

/// Everything both pipelines share: simulator sampling, expert, windowing,
/// network shape and optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub sampling: SamplingConfig,
    pub expert: ExpertConfig,
    pub rollout: RolloutConfig,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub exec: Exec,
}

impl Pipeline {
    pub fn validate(&self) -> Result<()> {
        self.expert.validate()?;
        self.train.validate()?;
        self.arch.validate()?;
        if self.arch.n_w != self.rollout.n_w {
            return Err(Error::WindowMismatch(self.arch.n_w, self.rollout.n_w));
        }
        if self.arch.i_min != self.expert.bounds.i_min || self.arch.i_max != self.expert.bounds.i_max {
            return Err(Error::InvalidConfig(
                "policy output range must equal the expert current bounds".into(),
            ));
        }
        if self.sampling.ts != self.expert.ts {
            return Err(Error::InvalidConfig(format!(
                "episode step {} s differs from the expert step {} s",
                self.sampling.ts, self.expert.ts
            )));
        }
        if self.sampling.rest_steps < self.rollout.n_w {
            return Err(Error::InvalidConfig(format!(
                "rest_steps ({}) must be >= n_w ({})",
                self.sampling.rest_steps, self.rollout.n_w
            )));
        }
        Ok(())
    }

    fn train_round(&self, data: &Dataset, pre: Preprocess, round: usize, warm: Option<&PolicyModel>) -> Result<(PolicyModel, TrainReport)> {
        let seed = self.train.seed.wrapping_add(round as u64);
        let model = match warm {
            Some(m) => {
                let mut m = m.clone();
                m.set_preprocess(pre);
                m
            }
            None => {
                let mut m = PolicyModel::init(self.arch.clone(), pre, seed)?;
                m.set_output_prior(mean_label(data));
                m
            }
        };
        let cfg = TrainConfig { seed, ..self.train.clone() };
        policy::train(model, data, &cfg, self.exec)
    }
}

fn mean_label(data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.rows().map(|r| r.label_current).sum::<f64>() / data.len() as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutStats {
    pub episodes: usize,
    pub temp_violations: usize,
    pub volt_violations: usize,
    pub expert_steps: usize,
    pub learner_steps: usize,
    pub unconverged_solves: usize,
    pub mean_terminal_soc_error: f64,
}

impl RolloutStats {
    pub fn from_summaries(s: &[EpisodeSummary]) -> Self {
        let mut out = RolloutStats {
            episodes: s.len(),
            ..Default::default()
        };
        for e in s {
            out.temp_violations += e.temp_violations;
            out.volt_violations += e.volt_violations;
            out.expert_steps += e.expert_steps;
            out.learner_steps += e.learner_steps;
            out.unconverged_solves += e.unconverged_solves;
            out.mean_terminal_soc_error += e.terminal_soc_error;
        }
        if !s.is_empty() {
            out.mean_terminal_soc_error /= s.len() as f64;
        }
        out
    }
}

/// One round: the rollout that produced the new rows and the policy trained
/// on the resulting aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub beta: f64,
    pub new_rows: usize,
    pub dataset_rows: usize,
    pub dataset_episodes: usize,
    pub rollout: RolloutStats,
    pub train: TrainReport,
}

impl IterationReport {
    /// Loss used for plateau detection: best validation loss when a split
    /// exists, otherwise the last training loss.
    pub fn loss(&self) -> f64 {
        let t = &self.train;
        t.val_loss
            .get(t.best_epoch)
            .or(t.train_loss.last())
            .copied()
            .unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DaggerReport {
    pub iterations: Vec<IterationReport>,
    pub stopped_on_plateau: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeState {
    completed: usize,
    preprocess: Preprocess,
    config: DaggerConfig,
}

pub const AGGREGATE_NAME: &str = "aggregate";
const STATE_FILE: &str = "dagger_state.json";
pub const FINAL_CHECKPOINT: &str = "policy_final.ckpt";

pub fn iteration_checkpoint(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("iter{i:02}.ckpt"))
}

pub fn iteration_report(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("iter{i:02}.report.json"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct DaggerOutcome {
    pub model: PolicyModel,
    pub report: DaggerReport,
    pub dataset: Dataset,
}

struct Progress {
    data: Dataset,
    pre: Preprocess,
    model: PolicyModel,
    report: DaggerReport,
    next: usize,
}

fn load_progress(pipeline: &Pipeline, cfg: &DaggerConfig, dir: &Path) -> Result<Option<Progress>> {
    let state_path = dir.join(STATE_FILE);
    if !state_path.exists() {
        return Ok(None);
    }
    let state: ResumeState = read_json(&state_path)?;
    if state.config.seed != cfg.seed
        || state.config.episodes_initial != cfg.episodes_initial
        || state.config.episodes_per_iter != cfg.episodes_per_iter
        || state.config.beta0 != cfg.beta0
        || state.config.beta_decay != cfg.beta_decay
    {
        return Err(Error::InvalidConfig(format!(
            "{}: saved run used a different dagger config",
            state_path.display()
        )));
    }
    let data = Dataset::load(dir, AGGREGATE_NAME)?;
    let model = policy::load_checkpoint_expecting(&iteration_checkpoint(dir, state.completed), &pipeline.arch)?;
    let iterations = (0..=state.completed)
        .map(|i| read_json(&iteration_report(dir, i)))
        .collect::<Result<Vec<IterationReport>>>()?;
    Ok(Some(Progress {
        data,
        pre: state.preprocess,
        model,
        report: DaggerReport {
            iterations,
            stopped_on_plateau: false,
        },
        next: state.completed + 1,
    }))
}

/// Runs DAGGER. With `out_dir`, writes `iterNN.ckpt`, `iterNN.report.json`,
/// the running aggregate, and `policy_final.ckpt`; with `resume`, continues
/// after the last fully saved round found there.
pub fn run_dagger(pipeline: &Pipeline, cfg: &DaggerConfig, out_dir: Option<&Path>, resume: bool) -> Result<DaggerOutcome> {
    pipeline.validate()?;
    cfg.validate()?;
    let betas = beta_schedule(cfg);

    let resumed = match (resume, out_dir) {
        (true, Some(dir)) => load_progress(pipeline, cfg, dir)?,
        _ => None,
    };
    let mut progress = match resumed {
        Some(p) => p,
        None => round_zero(pipeline, cfg, out_dir).map_err(|e| Error::Iteration {
            iteration: 0,
            source: Box::new(e),
        })?,
    };

    for i in progress.next..=cfg.n_iterations {
        if progress.report.stopped_on_plateau {
            break;
        }
        dagger_round(pipeline, cfg, out_dir, i, betas[i], &mut progress).map_err(|e| Error::Iteration {
            iteration: i,
            source: Box::new(e),
        })?;
        if let (Some(th), [.., prev, last]) = (cfg.plateau_threshold, progress.report.iterations.as_slice()) {
            let (a, b) = (prev.loss(), last.loss());
            if a.is_finite() && b.is_finite() && (a - b) / a.abs().max(f64::MIN_POSITIVE) < th {
                progress.report.stopped_on_plateau = true;
            }
        }
    }

    if let Some(dir) = out_dir {
        policy::save_checkpoint(&progress.model, &dir.join(FINAL_CHECKPOINT))?;
        write_json(&dir.join("dagger.report.json"), &progress.report)?;
    }
    Ok(DaggerOutcome {
        model: progress.model,
        report: progress.report,
        dataset: progress.data,
    })
}

fn save_round(dir: &Path, cfg: &DaggerConfig, p: &Progress, i: usize) -> Result<()> {
    p.data.save(dir, AGGREGATE_NAME)?;
    policy::save_checkpoint(&p.model, &iteration_checkpoint(dir, i))?;
    write_json(&iteration_report(dir, i), p.report.iterations.last().expect("round report"))?;
    let state = ResumeState {
        completed: i,
        preprocess: p.pre,
        config: cfg.clone(),
    };
    let tmp = dir.join(format!("{STATE_FILE}.tmp"));
    write_json(&tmp, &state)?;
    let path = dir.join(STATE_FILE);
    std::fs::rename(&tmp, &path).map_err(|e| Error::io(path, e))
}

fn round_zero(pipeline: &Pipeline, cfg: &DaggerConfig, out_dir: Option<&Path>) -> Result<Progress> {
    let specs = dataset::sample_specs(cfg.seed, 0, cfg.episodes_initial, &pipeline.sampling);
    let (data, summaries) = dataset::generate(&specs, Actor::Expert, &pipeline.expert, &pipeline.rollout, 0, pipeline.exec)?;
    let pre = Preprocess::fit(&data)?;
    let (model, train) = pipeline.train_round(&data, pre, 0, None)?;
    let report = IterationReport {
        iteration: 0,
        beta: cfg.beta0,
        new_rows: data.len(),
        dataset_rows: data.len(),
        dataset_episodes: data.episode_count(),
        rollout: RolloutStats::from_summaries(&summaries),
        train,
    };
    let p = Progress {
        data,
        pre,
        model,
        report: DaggerReport {
            iterations: vec![report],
            stopped_on_plateau: false,
        },
        next: 1,
    };
    if let Some(dir) = out_dir {
        save_round(dir, cfg, &p, 0)?;
    }
    Ok(p)
}

fn dagger_round(
    pipeline: &Pipeline,
    cfg: &DaggerConfig,
    out_dir: Option<&Path>,
    i: usize,
    beta: f64,
    p: &mut Progress,
) -> Result<()> {
    let first = (cfg.episodes_initial + (i - 1) * cfg.episodes_per_iter) as u64;
    let specs = dataset::sample_specs(cfg.seed, first, cfg.episodes_per_iter, &pipeline.sampling);
    let actor = Actor::Mixed { beta, learner: &p.model };
    let (new, summaries) = dataset::generate(&specs, actor, &pipeline.expert, &pipeline.rollout, i, pipeline.exec)?;
    let new_rows = new.len();
    p.data.extend(new)?;
    if cfg.refit_preprocess {
        p.pre = Preprocess::fit(&p.data)?;
    }
    let warm = cfg.warm_start.then_some(&p.model);
    let (model, train) = pipeline.train_round(&p.data, p.pre, i, warm)?;
    p.model = model;
    p.report.iterations.push(IterationReport {
        iteration: i,
        beta,
        new_rows,
        dataset_rows: p.data.len(),
        dataset_episodes: p.data.episode_count(),
        rollout: RolloutStats::from_summaries(&summaries),
        train,
    });
    p.next = i + 1;
    if let Some(dir) = out_dir {
        save_round(dir, cfg, p, i)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub episodes: usize,
    pub dataset_rows: usize,
    pub rollout: RolloutStats,
    pub train: TrainReport,
}

/// Trains once on `episodes` pure-expert episodes drawn with `seed`.
pub fn run_behavioral_cloning(
    pipeline: &Pipeline,
    episodes: usize,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(PolicyModel, BcReport)> {
    pipeline.validate()?;
    if episodes == 0 {
        return Err(Error::InvalidConfig("behavioral cloning needs at least one episode".into()));
    }
    let specs = dataset::sample_specs(seed, 0, episodes, &pipeline.sampling);
    let (data, summaries) = dataset::generate(&specs, Actor::Expert, &pipeline.expert, &pipeline.rollout, 0, pipeline.exec)?;
    let pre = Preprocess::fit(&data)?;
    let (model, train) = pipeline.train_round(&data, pre, 0, None)?;
    let report = BcReport {
        episodes,
        dataset_rows: data.len(),
        rollout: RolloutStats::from_summaries(&summaries),
        train,
    };
    if let Some(dir) = out_dir {
        data.save(dir, "bc_dataset")?;
        policy::save_checkpoint(&model, &dir.join("policy_bc.ckpt"))?;
        write_json(&dir.join("bc.report.json"), &report)?;
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_mixtures() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(mixed_policy_action(1.0, || 1.0, || 2.0, &mut rng), (1.0, Branch::Expert));
            assert_eq!(mixed_policy_action(0.0, || 1.0, || 2.0, &mut rng), (2.0, Branch::Learner));
        }
    }

    #[test]
    fn half_mixture_is_balanced() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let expert = (0..n)
            .filter(|_| mixed_policy_action(0.5, || 0.0, || 0.0, &mut rng).1 == Branch::Expert)
            .count();
        let frac = expert as f64 / n as f64;
        assert!((0.49..=0.51).contains(&frac), "{frac}");
    }

    #[test]
    fn schedule_halves_exactly() {
        let b = beta_schedule(&DaggerConfig::default());
        assert_eq!(b.len(), 16);
        for (i, v) in b.iter().enumerate() {
            assert_eq!(*v, 0.5f64.powi(i as i32));
        }
        assert!(b.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(DaggerConfig::default().total_episodes(), 2000);
    }

    #[test]
    fn invalid_beta_rejected() {
        let cfg = DaggerConfig { beta0: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
