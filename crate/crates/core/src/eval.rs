//! Closed-loop evaluation, showcase traces, and solve-time benchmarks.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::battery::{BatteryParams, BatteryState};
use crate::dataset::{self, window_len, Actor, Episode, EpisodeSpec, RolloutConfig, SamplingConfig};
use crate::error::{Error, Result};
use crate::expert::{expert_action, ExpertConfig};
use crate::par::{self, Exec};
use crate::policy::PolicyModel;

/// Evaluation episodes take ids from here up so they never share a seed with
/// training episodes drawn from the same master seed.
pub const EVAL_EPISODE_OFFSET: u64 = 1 << 40;

pub const HIST_RANGE: (f64, f64) = (-20.0, 20.0);
pub const HIST_BIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
    /// Samples outside the binned range.
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bin_width: f64) -> Self {
        let n = ((hi - lo) / bin_width).round() as usize;
        Self {
            lo,
            bin_width,
            counts: vec![0; n],
            below: 0,
            above: 0,
        }
    }

    pub fn add(&mut self, v: f64) {
        let idx = ((v - self.lo) / self.bin_width).floor();
        if idx < 0.0 {
            self.below += 1;
        } else if idx as usize >= self.counts.len() {
            self.above += 1;
        } else {
            self.counts[idx as usize] += 1;
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.below + self.above
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "bin_lo,bin_hi,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lo + i as f64 * self.bin_width;
            writeln!(out, "{lo},{},{c}", lo + self.bin_width)?;
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

/// Policy current minus expert current at the same true state, amperes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub variance: f64,
    pub mean_abs: f64,
    pub histogram: Histogram,
}

impl ErrorStats {
    pub fn from_errors(errors: &[f64]) -> Self {
        let (mean, std) = mean_std(errors);
        let mut histogram = Histogram::new(HIST_RANGE.0, HIST_RANGE.1, HIST_BIN);
        errors.iter().for_each(|&e| histogram.add(e));
        Self {
            count: errors.len(),
            mean,
            std,
            variance: std * std,
            mean_abs: errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len().max(1) as f64,
            histogram,
        }
    }
}

/// Positive exceedances of one bound. `mean` and `std` are conditional on
/// a violation, i.e. taken over `exceedances` only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationStats {
    pub bound: f64,
    pub steps: usize,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub exceedances: Vec<f64>,
}

impl ViolationStats {
    pub fn from_values(bound: f64, values: &[f64]) -> Self {
        let exceedances: Vec<f64> = values.iter().map(|v| v - bound).filter(|&e| e > 0.0).collect();
        let (mean, std) = mean_std(&exceedances);
        Self {
            bound,
            steps: values.len(),
            count: exceedances.len(),
            mean,
            std,
            max: exceedances.iter().copied().fold(0.0, f64::max),
            exceedances,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub name: String,
    pub steps: usize,
    pub current_error: ErrorStats,
    pub core_temperature: ViolationStats,
    pub surface_temperature: ViolationStats,
    pub voltage: ViolationStats,
    pub terminal_soc_error: Vec<f64>,
    pub mean_terminal_soc_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub n_episodes: usize,
    pub policies: Vec<PolicyEval>,
    pub timing: Option<TimingTable>,
}

impl EvalReport {
    pub fn policy(&self, name: &str) -> Option<&PolicyEval> {
        self.policies.iter().find(|p| p.name == name)
    }
}

/// Everything an evaluation run needs besides the policies.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSetup {
    pub sampling: SamplingConfig,
    pub expert: ExpertConfig,
    pub rollout: RolloutConfig,
    pub exec: Exec,
}

#[derive(Debug, Clone, Copy)]
pub enum Evaluated<'a> {
    Expert,
    Policy(&'a PolicyModel),
}

impl<'a> Evaluated<'a> {
    fn actor(self) -> Actor<'a> {
        match self {
            Evaluated::Expert => Actor::Expert,
            Evaluated::Policy(m) => Actor::Learner(m),
        }
    }
}

/// Per-step records for acting steps, using the state after each step for
/// constraint checks.
fn collect(ep: &Episode, params: &BatteryParams) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut err = Vec::new();
    let mut tc = Vec::new();
    let mut ts = Vec::new();
    let mut v = Vec::new();
    for (k, p) in ep.trajectory.iter().enumerate() {
        if p.resting {
            continue;
        }
        let after: &BatteryState = ep.trajectory.get(k + 1).map_or(&ep.final_state, |n| &n.state);
        let expert = p.expert_current.expect("acting steps are labelled");
        err.push(p.applied_current - expert);
        tc.push(after.t_core);
        ts.push(after.t_surf);
        v.push(after.measured_voltage(params)?);
    }
    Ok((err, tc, ts, v))
}

fn check_model(m: &PolicyModel, setup: &EvalSetup) -> Result<()> {
    if m.arch().n_w != setup.rollout.n_w {
        return Err(Error::WindowMismatch(m.arch().n_w, setup.rollout.n_w));
    }
    let b = &setup.expert.bounds;
    if m.arch().i_min != b.i_min || m.arch().i_max != b.i_max {
        return Err(Error::InvalidConfig(format!(
            "policy range [{}, {}] differs from expert bounds [{}, {}]",
            m.arch().i_min,
            m.arch().i_max,
            b.i_min,
            b.i_max
        )));
    }
    Ok(())
}

/// Runs every policy closed loop on the same `n_episodes` held-out specs.
pub fn evaluate_policies(
    setup: &EvalSetup,
    policies: &[(&str, Evaluated<'_>)],
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    for (_, p) in policies {
        if let Evaluated::Policy(m) = p {
            check_model(m, setup)?;
        }
    }
    let specs = dataset::sample_specs(seed, EVAL_EPISODE_OFFSET, n_episodes, &setup.sampling);
    let bounds = setup.expert.bounds;
    let mut out = Vec::with_capacity(policies.len());
    for (name, who) in policies {
        let actor = who.actor();
        let per_episode = par::try_map(setup.exec, &specs, |spec| {
            let ep = dataset::run_episode(spec, actor, &setup.expert, &setup.rollout, 0)?;
            let cols = collect(&ep, &spec.params).map_err(|e| e.in_episode(spec.id))?;
            Ok::<_, Error>((cols, ep.summary.terminal_soc_error))
        })?;
        let (mut err, mut tc, mut ts, mut v, mut soc) = (vec![], vec![], vec![], vec![], vec![]);
        for ((e, c, s, u), term) in per_episode {
            err.extend(e);
            tc.extend(c);
            ts.extend(s);
            v.extend(u);
            soc.push(term);
        }
        out.push(PolicyEval {
            name: name.to_string(),
            steps: err.len(),
            current_error: ErrorStats::from_errors(&err),
            core_temperature: ViolationStats::from_values(bounds.t_max, &tc),
            surface_temperature: ViolationStats::from_values(bounds.t_max, &ts),
            voltage: ViolationStats::from_values(bounds.v_max, &v),
            mean_terminal_soc_error: mean_std(&soc).0,
            terminal_soc_error: soc,
        });
    }
    Ok(EvalReport {
        seed,
        n_episodes,
        policies: out,
        timing: None,
    })
}

/// A fully specified charging scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub soc0: f64,
    pub soc_ref: f64,
    pub t0: f64,
    pub n_steps: usize,
    pub rest_steps: usize,
    pub ts: f64,
    pub seed: u64,
    pub params: BatteryParams,
}

impl Default for Scenario {
    /// 25 % to 90 % over 4000 s from 302.5 K with the nominal cell.
    fn default() -> Self {
        Self {
            soc0: 0.25,
            soc_ref: 0.90,
            t0: 302.5,
            n_steps: 400,
            rest_steps: 30,
            ts: 10.0,
            seed: 0,
            params: BatteryParams {
                capacity_ah: 6.75,
                r_sei_ohm: 0.0165,
                ..BatteryParams::default()
            },
        }
    }
}

impl Scenario {
    pub fn spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            id: 0,
            n_steps: self.n_steps,
            rest_steps: self.rest_steps,
            ts: self.ts,
            soc0: self.soc0,
            t_core0: self.t0,
            t_surf0: self.t0,
            soc_ref: self.soc_ref,
            params: self.params.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub time: f64,
    pub soc: f64,
    pub t_core: f64,
    pub t_surf: f64,
    pub voltage: f64,
    pub current: f64,
    pub expert_current: Option<f64>,
    pub resting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub name: String,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    fn from_episode(name: &str, ep: &Episode) -> Self {
        let records = ep
            .trajectory
            .iter()
            .map(|p| TraceRecord {
                step: p.step,
                time: p.time,
                soc: p.state.soc,
                t_core: p.state.t_core,
                t_surf: p.state.t_surf,
                voltage: p.voltage,
                current: p.applied_current,
                expert_current: p.expert_current,
                resting: p.resting,
            })
            .collect();
        Self {
            name: name.into(),
            records,
        }
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,time_s,soc,t_core_k,t_surf_k,voltage_v,current_a,expert_current_a")?;
        for r in &self.records {
            let expert = r.expert_current.map(|v| format!("{v:?}")).unwrap_or_default();
            writeln!(
                out,
                "{},{:?},{:?},{:?},{:?},{:?},{:?},{expert}",
                r.step, r.time, r.soc, r.t_core, r.t_surf, r.voltage, r.current
            )?;
        }
        Ok(())
    }
}

/// Runs the scenario under the expert and, if given, under the policy.
/// Constraint violations never cut a trace short.
pub fn single_scenario_trace(
    policy: Option<&PolicyModel>,
    expert: &ExpertConfig,
    rollout: &RolloutConfig,
    scenario: &Scenario,
) -> Result<(Trace, Option<Trace>)> {
    let spec = scenario.spec();
    let ep = dataset::run_episode(&spec, Actor::Expert, expert, rollout, 0)?;
    let expert_trace = Trace::from_episode("expert", &ep);
    let policy_trace = match policy {
        Some(m) => {
            let ep = dataset::run_episode(&spec, Actor::Learner(m), expert, rollout, 0)?;
            Some(Trace::from_episode("policy", &ep))
        }
        None => None,
    };
    Ok((expert_trace, policy_trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub horizon: usize,
    pub calls: usize,
    pub mean_s: f64,
    pub std_s: f64,
    pub median_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub n_states: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn row(&self, method: &str, horizon: usize) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.method == method && r.horizon == horizon)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,horizon,calls,mean_s,std_s,median_s")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{:e},{:e},{:e}", r.method, r.horizon, r.calls, r.mean_s, r.std_s, r.median_s)?;
        }
        Ok(())
    }
}

pub const MIN_TIMING_STATES: usize = 30;
pub const TIMING_WARMUP: usize = 3;

struct TimingState {
    state: BatteryState,
    params: BatteryParams,
    soc_ref: f64,
    window: Vec<f64>,
}

fn timing_states(n: usize, seed: u64, sampling: &SamplingConfig, n_w: usize) -> Result<Vec<TimingState>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let spec = dataset::sample_episode_spec(i as u64, rng.gen(), sampling);
            let state = spec.initial_state();
            let v = state.measured_voltage(&spec.params)?;
            let window = (0..window_len(n_w))
                .map(|k| [v, state.t_surf, 0.0][k % 3])
                .collect();
            Ok(TimingState {
                state,
                params: spec.params,
                soc_ref: spec.soc_ref,
                window,
            })
        })
        .collect()
}

fn time_calls<F: FnMut(usize) -> Result<()>>(n: usize, mut f: F) -> Result<Vec<f64>> {
    for i in 0..TIMING_WARMUP.min(n) {
        f(i)?;
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = Instant::now();
        f(i)?;
        out.push(t.elapsed().as_secs_f64());
    }
    Ok(out)
}

fn timing_row(method: &str, horizon: usize, samples: &[f64]) -> TimingRow {
    let (mean_s, std_s) = mean_std(samples);
    TimingRow {
        method: method.into(),
        horizon,
        calls: samples.len(),
        mean_s,
        std_s,
        median_s: median(samples),
    }
}

/// Wall-clock per cold expert solve and per policy forward pass on the same
/// `n_states` random states, for each horizon. Runs on the calling thread.
pub fn bench_timing(
    expert: &ExpertConfig,
    horizons: &[usize],
    policy: &PolicyModel,
    n_states: usize,
    seed: u64,
    sampling: &SamplingConfig,
) -> Result<TimingTable> {
    if n_states < MIN_TIMING_STATES {
        return Err(Error::InvalidConfig(format!(
            "timing needs at least {MIN_TIMING_STATES} states, got {n_states}"
        )));
    }
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(Error::InvalidConfig("horizons must be non-empty and positive".into()));
    }
    let states = timing_states(n_states, seed, sampling, policy.arch().n_w)?;
    let mut rows = Vec::with_capacity(2 * horizons.len());
    for &h in horizons {
        let cfg = expert.with_horizon(h);
        let samples = time_calls(n_states, |i| {
            let s = &states[i];
            std::hint::black_box(expert_action(&s.state, &s.params, s.soc_ref, &cfg)?);
            Ok(())
        })?;
        rows.push(timing_row("expert", h, &samples));
        let samples = time_calls(n_states, |i| {
            let s = &states[i];
            std::hint::black_box(policy.forward(&s.window, s.soc_ref)?);
            Ok(())
        })?;
        rows.push(timing_row("policy", h, &samples));
    }
    Ok(TimingTable { n_states, rows })
}
