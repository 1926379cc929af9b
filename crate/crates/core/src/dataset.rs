//! Episode generation and the imitation dataset.
//!
//! An episode starts with `rest_steps` of zero current, then `n_steps` of
//! currents chosen by the acting policy. From step `n_w` onward every step
//! yields a row: the window of the last `n_w + 1` (voltage, surface
//! temperature, current) measurements, the episode's soc reference, and the
//! expert's current at the true state as the label.
//!
//! Measurements record the current that was flowing when they were taken
//! (the previous step's applied current), so the window never contains the
//! action it is labelled with.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::battery::{self, BatteryParams, BatteryState, NoiseSpec, Observation};
use crate::dagger::{mixed_policy_action, Branch};
use crate::error::{Error, Result};
use crate::expert::{Expert, ExpertConfig};
use crate::par::{self, Exec};
use crate::policy::PolicyModel;

/// Numbers per measurement triple.
pub const TRIPLE: usize = 3;

pub const DEFAULT_N_W: usize = 20;

pub fn window_len(n_w: usize) -> usize {
    TRIPLE * (n_w + 1)
}

/// Serialized row width: window plus soc reference plus label.
pub fn row_width(n_w: usize) -> usize {
    window_len(n_w) + 2
}

/// Per-episode seed derived from the master seed.
pub fn episode_seed(master: u64, episode: u64) -> u64 {
    master ^ episode
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub n_steps: usize,
    pub rest_steps: usize,
    pub ts: f64,
    pub soc0: (f64, f64),
    pub temperature0: (f64, f64),
    /// Draw one initial temperature for both nodes instead of two.
    pub coupled_temperatures: bool,
    pub soc_ref: (f64, f64),
    pub capacity_ah: (f64, f64),
    pub r_sei_ohm: (f64, f64),
    /// Cell parameters other than capacity and SEI resistance. Configured
    /// through the battery section, not serialized here.
    #[serde(skip)]
    pub base_params: BatteryParams,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            n_steps: 200,
            rest_steps: 30,
            ts: 10.0,
            soc0: (0.0, 1.0),
            temperature0: (298.15, 313.15),
            coupled_temperatures: false,
            soc_ref: (0.7, 1.0),
            capacity_ah: (5.5, 8.0),
            r_sei_ohm: (0.014, 0.019),
            base_params: BatteryParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub id: u64,
    pub n_steps: usize,
    pub rest_steps: usize,
    pub ts: f64,
    pub soc0: f64,
    pub t_core0: f64,
    pub t_surf0: f64,
    pub soc_ref: f64,
    pub params: BatteryParams,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn validate(&self, n_w: usize) -> Result<()> {
        if self.rest_steps < n_w {
            return Err(Error::InvalidConfig(format!(
                "rest_steps ({}) must be >= n_w ({n_w}) so every row has a full window",
                self.rest_steps
            )));
        }
        if !(self.ts > 0.0) {
            return Err(Error::InvalidConfig(format!("ts must be > 0, got {}", self.ts)));
        }
        self.params.validate()
    }

    pub fn initial_state(&self) -> BatteryState {
        BatteryState::at_rest(self.soc0, self.t_core0, self.t_surf0)
    }

    pub fn total_steps(&self) -> usize {
        self.rest_steps + self.n_steps
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_episode_spec(id: u64, seed: u64, cfg: &SamplingConfig) -> EpisodeSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let soc0 = uniform(&mut rng, cfg.soc0);
    let t_core0 = uniform(&mut rng, cfg.temperature0);
    let t_surf0 = if cfg.coupled_temperatures {
        t_core0
    } else {
        uniform(&mut rng, cfg.temperature0)
    };
    let soc_ref = uniform(&mut rng, cfg.soc_ref);
    let params = BatteryParams {
        capacity_ah: uniform(&mut rng, cfg.capacity_ah),
        r_sei_ohm: uniform(&mut rng, cfg.r_sei_ohm),
        ..cfg.base_params.clone()
    };
    EpisodeSpec {
        id,
        n_steps: cfg.n_steps,
        rest_steps: cfg.rest_steps,
        ts: cfg.ts,
        soc0,
        t_core0,
        t_surf0,
        soc_ref,
        params,
        seed,
    }
}

/// Specs for episodes `first..first + count`, each seeded from `master`.
pub fn sample_specs(master: u64, first: u64, count: usize, cfg: &SamplingConfig) -> Vec<EpisodeSpec> {
    (first..first + count as u64)
        .map(|id| sample_episode_spec(id, episode_seed(master, id), cfg))
        .collect()
}

/// Who chooses the applied current after the rest prefix.
#[derive(Debug, Clone, Copy)]
pub enum Actor<'a> {
    Expert,
    Learner(&'a PolicyModel),
    Mixed { beta: f64, learner: &'a PolicyModel },
}

impl Actor<'_> {
    pub fn tag(&self) -> String {
        match self {
            Actor::Expert => "expert".into(),
            Actor::Learner(_) => "learner".into(),
            Actor::Mixed { beta, .. } => format!("mixed(beta={beta})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub n_w: usize,
    /// Noise on the measurements the learner acts on. Stored rows are clean.
    pub act_noise: NoiseSpec,
    /// Label the rest steps that already have a full window.
    pub label_rest: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            n_w: DEFAULT_N_W,
            act_noise: NoiseSpec::SENSOR,
            label_rest: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub time: f64,
    /// True state at the start of the step.
    pub state: BatteryState,
    /// Measured voltage at the start of the step (noise free).
    pub voltage: f64,
    pub applied_current: f64,
    pub expert_current: Option<f64>,
    pub branch: Option<Branch>,
    pub resting: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub id: u64,
    pub rows: usize,
    /// Acting steps after which the core temperature exceeded its limit.
    pub temp_violations: usize,
    pub volt_violations: usize,
    pub soc_saturations: usize,
    pub unconverged_solves: usize,
    pub expert_steps: usize,
    pub learner_steps: usize,
    pub terminal_soc_error: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub trajectory: Vec<TrajectoryPoint>,
    pub final_state: BatteryState,
    pub rows: Dataset,
    pub summary: EpisodeSummary,
}

fn push_obs(buf: &mut Vec<f64>, o: &Observation) {
    buf.extend_from_slice(&[o.voltage, o.t_surf, o.current]);
}

/// Simulates one episode: rest prefix, then the acting policy, labelling
/// every windowed step with the expert at the true state.
pub fn run_episode(
    spec: &EpisodeSpec,
    actor: Actor<'_>,
    expert_cfg: &ExpertConfig,
    rollout: &RolloutConfig,
    iteration: usize,
) -> Result<Episode> {
    run_episode_inner(spec, actor, expert_cfg, rollout, iteration).map_err(|e| e.in_episode(spec.id))
}

fn run_episode_inner(
    spec: &EpisodeSpec,
    actor: Actor<'_>,
    expert_cfg: &ExpertConfig,
    rollout: &RolloutConfig,
    iteration: usize,
) -> Result<Episode> {
    let n_w = rollout.n_w;
    spec.validate(n_w)?;
    if let Actor::Learner(m) | Actor::Mixed { learner: m, .. } = actor {
        if m.arch().n_w != n_w {
            return Err(Error::WindowMismatch(m.arch().n_w, n_w));
        }
    }
    let params = &spec.params;
    let bounds = expert_cfg.bounds;
    let mut expert = Expert::new(expert_cfg.clone());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let mut branch_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    branch_rng.set_stream(2);

    let total = spec.total_steps();
    let mut clean: Vec<f64> = Vec::with_capacity(TRIPLE * total);
    let mut noisy: Vec<f64> = Vec::with_capacity(TRIPLE * total);
    let mut rows = Dataset::new(n_w);
    let mut trajectory = Vec::with_capacity(total);
    let mut summary = EpisodeSummary {
        id: spec.id,
        ..Default::default()
    };
    let mut rest_rows = 0;
    let mut x = spec.initial_state();

    for k in 0..total {
        let exact = battery::observe(&x, params, x.last_current, &NoiseSpec::ZERO, &mut noise_rng)?;
        push_obs(&mut clean, &exact);
        push_obs(&mut noisy, &rollout.act_noise.perturb(exact, &mut noise_rng));

        let resting = k < spec.rest_steps;
        let labelled = k >= n_w && (!resting || rollout.label_rest);
        let expert_current = if labelled {
            let d = expert.act(&x, params, spec.soc_ref)?;
            if !d.converged {
                summary.unconverged_solves += 1;
            }
            Some(d.current)
        } else {
            None
        };

        let lo = TRIPLE * (k + 1).saturating_sub(n_w + 1);
        let hi = TRIPLE * (k + 1);
        let (applied, branch) = if resting {
            (0.0, None)
        } else {
            let label = expert_current.expect("acting steps are labelled");
            let learner = |m: &PolicyModel| m.forward(&noisy[lo..hi], spec.soc_ref);
            match actor {
                Actor::Expert => (label, Some(Branch::Expert)),
                Actor::Learner(m) => (learner(m)?, Some(Branch::Learner)),
                Actor::Mixed { beta, learner: m } => {
                    let mut err = None;
                    let (i, b) = mixed_policy_action(
                        beta,
                        || label,
                        || {
                            learner(m).unwrap_or_else(|e| {
                                err = Some(e);
                                0.0
                            })
                        },
                        &mut branch_rng,
                    );
                    if let Some(e) = err {
                        return Err(e);
                    }
                    (i, Some(b))
                }
            }
        };
        let applied = bounds.clamp_current(applied);
        match branch {
            Some(Branch::Expert) => summary.expert_steps += 1,
            Some(Branch::Learner) => summary.learner_steps += 1,
            None => {}
        }

        if let Some(label) = expert_current {
            rows.values.extend_from_slice(&clean[lo..hi]);
            rows.values.push(spec.soc_ref);
            rows.values.push(label);
            if resting {
                rest_rows += 1;
            }
        }

        trajectory.push(TrajectoryPoint {
            step: k,
            time: k as f64 * spec.ts,
            state: x,
            voltage: exact.voltage,
            applied_current: applied,
            expert_current,
            branch,
            resting,
        });

        let out = battery::step_checked(&x, params, applied, spec.ts)?;
        if out.soc_saturated {
            summary.soc_saturations += 1;
        }
        x = out.state;
        if !resting {
            if x.t_core > bounds.t_max {
                summary.temp_violations += 1;
            }
            if x.measured_voltage(params)? > bounds.v_max {
                summary.volt_violations += 1;
            }
        }
    }

    let n_rows = rows.len();
    rows.provenance.push(Segment {
        iteration,
        episode_id: spec.id,
        policy: actor.tag(),
        start: 0,
        len: n_rows,
        rest_rows,
    });
    summary.rows = n_rows;
    summary.terminal_soc_error = (x.soc - spec.soc_ref).abs();
    Ok(Episode {
        spec: spec.clone(),
        trajectory,
        final_state: x,
        rows,
        summary,
    })
}

/// Runs a batch of episodes (in parallel under [`Exec::Parallel`]) and
/// concatenates their rows in spec order.
pub fn generate(
    specs: &[EpisodeSpec],
    actor: Actor<'_>,
    expert_cfg: &ExpertConfig,
    rollout: &RolloutConfig,
    iteration: usize,
    exec: Exec,
) -> Result<(Dataset, Vec<EpisodeSummary>)> {
    let episodes = par::try_map(exec, specs, |spec| {
        run_episode(spec, actor, expert_cfg, rollout, iteration).map(|e| (e.rows, e.summary))
    })?;
    let mut data = Dataset::new(rollout.n_w);
    let mut summaries = Vec::with_capacity(episodes.len());
    for (rows, summary) in episodes {
        data.extend(rows)?;
        summaries.push(summary);
    }
    Ok((data, summaries))
}

/// A run of consecutive rows from one episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub iteration: usize,
    pub episode_id: u64,
    pub policy: String,
    pub start: usize,
    pub len: usize,
    /// Leading rows of the segment that come from the rest prefix.
    pub rest_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetRow<'a> {
    pub window: &'a [f64],
    pub soc_ref: f64,
    pub label_current: f64,
}

/// Row-major flat storage of `row_width(n_w)` numbers per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_w: usize,
    values: Vec<f64>,
    provenance: Vec<Segment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    n_w: usize,
    width: usize,
    rows: usize,
    provenance: Vec<Segment>,
}

const FORMAT_VERSION: u32 = 1;

impl Dataset {
    pub fn new(n_w: usize) -> Self {
        Self {
            n_w,
            values: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    pub fn width(&self) -> usize {
        row_width(self.n_w)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.width()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn provenance(&self) -> &[Segment] {
        &self.provenance
    }

    pub fn raw(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> DatasetRow<'_> {
        let w = self.width();
        let r = &self.values[i * w..(i + 1) * w];
        DatasetRow {
            window: &r[..w - 2],
            soc_ref: r[w - 2],
            label_current: r[w - 1],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = DatasetRow<'_>> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    /// Appends a row under a new single-row segment.
    pub fn push_row(&mut self, row: DatasetRow<'_>, segment: Segment) -> Result<()> {
        let expected = window_len(self.n_w);
        if row.window.len() != expected {
            return Err(Error::Shape {
                expected,
                got: row.window.len(),
            });
        }
        let start = self.len();
        self.values.extend_from_slice(row.window);
        self.values.push(row.soc_ref);
        self.values.push(row.label_current);
        self.provenance.push(Segment {
            start,
            len: 1,
            ..segment
        });
        Ok(())
    }

    /// Appends all rows of `other`, shifting its provenance.
    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if other.n_w != self.n_w {
            return Err(Error::WindowMismatch(self.n_w, other.n_w));
        }
        let offset = self.len();
        self.values.extend(other.values);
        self.provenance
            .extend(other.provenance.into_iter().map(|s| Segment {
                start: s.start + offset,
                ..s
            }));
        Ok(())
    }

    pub fn segment_of(&self, row: usize) -> Option<&Segment> {
        let idx = self.provenance.partition_point(|s| s.start + s.len <= row);
        self.provenance.get(idx).filter(|s| s.start <= row)
    }

    pub fn iterations(&self) -> Vec<usize> {
        let mut its: Vec<usize> = self.provenance.iter().map(|s| s.iteration).collect();
        its.sort_unstable();
        its.dedup();
        its
    }

    pub fn episode_count(&self) -> usize {
        self.provenance.len()
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
        let bin = dir.join(format!("{name}.bin"));
        let meta_path = dir.join(format!("{name}.meta.json"));
        let f = File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut w = BufWriter::new(f);
        for v in &self.values {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin, e))?;
        }
        w.flush().map_err(|e| Error::io(&bin, e))?;
        let meta = Meta {
            format_version: FORMAT_VERSION,
            n_w: self.n_w,
            width: self.width(),
            rows: self.len(),
            provenance: self.provenance.clone(),
        };
        std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)
            .map_err(|e| Error::io(&meta_path, e))?;
        Ok((bin, meta_path))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let bin = dir.join(format!("{name}.bin"));
        let meta_path = dir.join(format!("{name}.meta.json"));
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        if meta.format_version != FORMAT_VERSION || meta.width != row_width(meta.n_w) {
            return Err(Error::InvalidConfig(format!(
                "{}: unsupported dataset header",
                meta_path.display()
            )));
        }
        let f = File::open(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&bin, e))?;
        let expected = meta.rows * meta.width * 8;
        if bytes.len() != expected {
            return Err(Error::Shape {
                expected,
                got: bytes.len(),
            });
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            n_w: meta.n_w,
            values,
            provenance: meta.provenance,
        })
    }

    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = (0..=self.n_w)
            .flat_map(|k| [format!("v_{k}"), format!("t_{k}"), format!("i_{k}")])
            .collect();
        cols.push("soc_ref".into());
        cols.push("label".into());
        cols.join(",")
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.csv_header())?;
        for chunk in self.values.chunks_exact(self.width()) {
            let line: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Concatenates two datasets, keeping every row's provenance.
pub fn aggregate(prev: &Dataset, new: &Dataset) -> Result<Dataset> {
    let mut out = prev.clone();
    out.extend(new.clone())?;
    Ok(out)
}
