//! Receding-horizon MPC expert.
//!
//! The expert sees the true battery state and parameters. At every control
//! step it minimises the soc tracking error plus current effort over `H`
//! steps, with state constraints as quadratic exterior penalties and current
//! limits enforced by projection, then applies only the first current.

use serde::{Deserialize, Serialize};

use crate::battery::{self, BatteryParams, BatteryState};
use crate::error::{Error, Result};

/// Largest number of sequences the grid oracle will enumerate.
pub const GRID_BUDGET: u64 = 10_000_000;

/// Costs closer than this are treated as equal; ties go to smaller total |I|.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub i_min: f64,
    pub i_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub t_max: f64,
    pub v_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            i_min: -10.0,
            i_max: 10.0,
            soc_min: 0.0,
            soc_max: 1.0,
            t_max: 313.15,
            v_max: 4.2,
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.i_min < self.i_max
            && self.soc_min < self.soc_max
            && self.t_max > 0.0
            && self.v_max > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("inconsistent bounds: {self:?}")))
        }
    }

    pub fn clamp_current(&self, current: f64) -> f64 {
        current.clamp(self.i_min, self.i_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Smooth,
    GridOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    pub horizon: usize,
    pub ts: f64,
    pub q_soc: f64,
    pub r: f64,
    pub bounds: Bounds,
    pub penalty_weight: f64,
    pub solver: SolverKind,
    pub max_iters: usize,
    /// Central-difference step for numerical gradients, amperes.
    pub fd_step: f64,
    /// Levels per step when `solver` is the grid oracle.
    pub grid_levels: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            ts: 10.0,
            q_soc: 1.0,
            r: 1e-6,
            bounds: Bounds::default(),
            penalty_weight: 1e4,
            solver: SolverKind::Smooth,
            max_iters: 200,
            fd_step: 1e-3,
            grid_levels: 21,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        let ok = self.horizon >= 1
            && self.ts > 0.0
            && self.q_soc >= 0.0
            && self.r >= 0.0
            && self.penalty_weight > 0.0
            && self.fd_step > 0.0
            && self.grid_levels >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid expert config: {self:?}")))
        }
    }

    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonSolution {
    pub currents: Vec<f64>,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertDecision {
    pub current: f64,
    pub converged: bool,
    /// Set when the safety rule forced zero current without solving.
    pub overridden: bool,
}

fn excess(v: f64) -> f64 {
    v.max(0.0)
}

/// Tracking plus effort cost plus the weighted squared constraint excesses
/// along the predicted trajectory.
pub fn augmented_cost(
    currents: &[f64],
    state: &BatteryState,
    params: &BatteryParams,
    soc_ref: f64,
    cfg: &ExpertConfig,
) -> Result<f64> {
    let mut x = *state;
    let mut acc = CostAccumulator::default();
    for &i in currents {
        x = acc.push(&x, params, i, soc_ref, cfg)?;
    }
    Ok(acc.total(cfg))
}

#[derive(Debug, Clone, Copy, Default)]
struct CostAccumulator {
    objective: f64,
    penalty: f64,
}

impl CostAccumulator {
    fn push(
        &mut self,
        x: &BatteryState,
        params: &BatteryParams,
        current: f64,
        soc_ref: f64,
        cfg: &ExpertConfig,
    ) -> Result<BatteryState> {
        let b = &cfg.bounds;
        let v_start = battery::terminal_voltage(x, params, current)?;
        let out = battery::step_checked(x, params, current, cfg.ts)?;
        let next = out.state;
        let v_end = battery::terminal_voltage(&next, params, current)?;
        let e = next.soc - soc_ref;
        self.objective += cfg.q_soc * e * e + cfg.r * current * current;
        self.penalty += excess(next.t_core - b.t_max).powi(2)
            + excess(next.t_surf - b.t_max).powi(2)
            + excess(v_start - b.v_max).powi(2)
            + excess(v_end - b.v_max).powi(2)
            + excess(out.soc_unclamped - b.soc_max).powi(2)
            + excess(b.soc_min - out.soc_unclamped).powi(2);
        Ok(next)
    }

    fn total(&self, cfg: &ExpertConfig) -> f64 {
        self.objective + cfg.penalty_weight * self.penalty
    }
}

fn abs_sum(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.abs()).sum()
}

/// True when `(cost_a, a)` should be preferred over `(cost_b, b)`.
fn prefer(cost_a: f64, a: &[f64], cost_b: f64, b: &[f64]) -> bool {
    if (cost_a - cost_b).abs() < TIE_TOLERANCE {
        abs_sum(a) < abs_sum(b)
    } else {
        cost_a < cost_b
    }
}

/// Projected, diagonally scaled gradient descent with Armijo backtracking.
///
/// Gradients and diagonal curvatures come from central differences. Starts
/// from the best of the warm start and a few constant sequences (zero
/// included), so the result never costs more than the all-zero sequence.
pub fn solve_horizon(
    state: &BatteryState,
    params: &BatteryParams,
    soc_ref: f64,
    cfg: &ExpertConfig,
    warm_start: Option<&[f64]>,
) -> Result<HorizonSolution> {
    let h = cfg.horizon;
    let b = cfg.bounds;
    let cost = |x: &[f64]| augmented_cost(x, state, params, soc_ref, cfg);

    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; h]];
    if let Some(w) = warm_start {
        if w.len() == h {
            starts.push(w.iter().map(|&v| b.clamp_current(v)).collect());
        }
    }
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        starts.push(vec![b.i_min + frac * (b.i_max - b.i_min); h]);
    }
    let mut x = starts[0].clone();
    let mut fx = cost(&x)?;
    for s in &starts[1..] {
        let fs = cost(s)?;
        if prefer(fs, s, fx, &x) {
            x = s.clone();
            fx = fs;
        }
    }

    let fd = cfg.fd_step;
    let span = b.i_max - b.i_min;
    let mut grad = vec![0.0; h];
    let mut curv = vec![0.0; h];
    let mut probe = x.clone();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iters {
        iterations += 1;
        for j in 0..h {
            probe.copy_from_slice(&x);
            probe[j] = x[j] + fd;
            let fp = cost(&probe)?;
            probe[j] = x[j] - fd;
            let fm = cost(&probe)?;
            grad[j] = (fp - fm) / (2.0 * fd);
            curv[j] = (fp - 2.0 * fx + fm) / (fd * fd);
        }
        // Components pinned at a bound with the gradient pushing outward
        // cannot move.
        let free: Vec<bool> = (0..h)
            .map(|j| {
                !((x[j] >= b.i_max && grad[j] < 0.0) || (x[j] <= b.i_min && grad[j] > 0.0))
            })
            .collect();
        let gmax = (0..h)
            .filter(|&j| free[j])
            .map(|j| grad[j].abs())
            .fold(0.0, f64::max);
        if gmax < 1e-14 {
            converged = true;
            break;
        }
        let cmax = curv.iter().cloned().fold(0.0, f64::max);
        let floor = (2.0 * cfg.r).max(1e-6 * cmax).max(1e-15);
        let scaled: Vec<f64> = (0..h)
            .map(|j| if free[j] { grad[j] / curv[j].max(floor) } else { 0.0 })
            .collect();
        let plain: Vec<f64> = (0..h)
            .map(|j| if free[j] { grad[j] * span / gmax } else { 0.0 })
            .collect();

        let mut accepted = None;
        for dir in [&scaled, &plain] {
            let mut t = 1.0;
            for _ in 0..50 {
                let cand: Vec<f64> = (0..h).map(|j| b.clamp_current(x[j] - t * dir[j])).collect();
                let decrease: f64 = (0..h).map(|j| grad[j] * (x[j] - cand[j])).sum();
                let fc = cost(&cand)?;
                if fc <= fx - 1e-4 * decrease && fc < fx {
                    accepted = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        match accepted {
            Some((cand, fc)) => {
                let moved = (0..h).map(|j| (cand[j] - x[j]).abs()).fold(0.0, f64::max);
                let improvement = fx - fc;
                x = cand;
                fx = fc;
                if moved < 1e-9 || improvement < 1e-15 * fx.abs().max(1e-300) {
                    converged = true;
                    break;
                }
            }
            None => {
                // No descent at any step size: stationary to working precision.
                converged = true;
                break;
            }
        }
    }

    Ok(HorizonSolution {
        currents: x,
        cost: fx,
        converged,
        iterations,
    })
}

/// Evenly spaced current levels spanning the bounds, endpoints included.
pub fn grid_levels(bounds: &Bounds, levels: usize) -> Vec<f64> {
    let span = bounds.i_max - bounds.i_min;
    (0..levels)
        .map(|k| bounds.i_min + k as f64 * span / (levels - 1) as f64)
        .collect()
}

/// Exhaustive search over `levels^H` sequences on the true simulator.
pub fn grid_oracle(
    state: &BatteryState,
    params: &BatteryParams,
    soc_ref: f64,
    cfg: &ExpertConfig,
    levels: usize,
) -> Result<HorizonSolution> {
    if levels < 2 {
        return Err(Error::InvalidConfig("grid oracle needs at least 2 levels".into()));
    }
    let h = cfg.horizon;
    let count = (levels as u64).checked_pow(h as u32);
    if count.map_or(true, |c| c > GRID_BUDGET) {
        return Err(Error::Budget {
            levels,
            horizon: h,
            budget: GRID_BUDGET,
        });
    }
    let grid = grid_levels(&cfg.bounds, levels);

    struct Search<'a> {
        grid: &'a [f64],
        params: &'a BatteryParams,
        soc_ref: f64,
        cfg: &'a ExpertConfig,
        seq: Vec<f64>,
        best: Option<(f64, Vec<f64>)>,
    }

    impl Search<'_> {
        fn descend(&mut self, x: &BatteryState, acc: CostAccumulator) -> Result<()> {
            if self.seq.len() == self.cfg.horizon {
                let c = acc.total(self.cfg);
                let better = match &self.best {
                    None => true,
                    Some((bc, bs)) => prefer(c, &self.seq, *bc, bs),
                };
                if better {
                    self.best = Some((c, self.seq.clone()));
                }
                return Ok(());
            }
            for k in 0..self.grid.len() {
                let i = self.grid[k];
                let mut a = acc;
                let next = a.push(x, self.params, i, self.soc_ref, self.cfg)?;
                self.seq.push(i);
                self.descend(&next, a)?;
                self.seq.pop();
            }
            Ok(())
        }
    }

    let mut search = Search {
        grid: &grid,
        params,
        soc_ref,
        cfg,
        seq: Vec::with_capacity(h),
        best: None,
    };
    search.descend(state, CostAccumulator::default())?;
    let (cost, currents) = search.best.expect("at least one sequence");
    Ok(HorizonSolution {
        currents,
        cost,
        converged: true,
        iterations: count.unwrap_or(0) as usize,
    })
}

/// Zero current is forced when a temperature already exceeds its limit or
/// when any positive current would push the voltage over its limit.
pub fn safety_override(state: &BatteryState, params: &BatteryParams, bounds: &Bounds) -> bool {
    state.t_core > bounds.t_max || state.t_surf > bounds.t_max || params.ocv(state.soc) >= bounds.v_max
}

fn solve(
    state: &BatteryState,
    params: &BatteryParams,
    soc_ref: f64,
    cfg: &ExpertConfig,
    warm_start: Option<&[f64]>,
) -> Result<HorizonSolution> {
    match cfg.solver {
        SolverKind::Smooth => solve_horizon(state, params, soc_ref, cfg, warm_start),
        SolverKind::GridOracle => grid_oracle(state, params, soc_ref, cfg, cfg.grid_levels),
    }
}

/// Stateless expert decision (zero warm start).
pub fn expert_action(
    state: &BatteryState,
    params: &BatteryParams,
    soc_ref: f64,
    cfg: &ExpertConfig,
) -> Result<ExpertDecision> {
    Expert::new(cfg.clone()).act(state, params, soc_ref)
}

/// Expert with a per-episode warm-start cache: the previous solution shifted
/// by one step.
#[derive(Debug, Clone)]
pub struct Expert {
    cfg: ExpertConfig,
    warm: Option<Vec<f64>>,
}

impl Expert {
    pub fn new(cfg: ExpertConfig) -> Self {
        Self { cfg, warm: None }
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn act(
        &mut self,
        state: &BatteryState,
        params: &BatteryParams,
        soc_ref: f64,
    ) -> Result<ExpertDecision> {
        if safety_override(state, params, &self.cfg.bounds) {
            self.warm = None;
            return Ok(ExpertDecision {
                current: 0.0,
                converged: true,
                overridden: true,
            });
        }
        let sol = solve(state, params, soc_ref, &self.cfg, self.warm.as_deref())?;
        let mut shifted = sol.currents[1..].to_vec();
        shifted.push(*sol.currents.last().expect("horizon >= 1"));
        self.warm = Some(shifted);
        Ok(ExpertDecision {
            current: sol.currents[0],
            converged: sol.converged,
            overridden: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(soc: f64) -> (BatteryState, BatteryParams) {
        (BatteryState::at_rest(soc, 300.0, 300.0), BatteryParams::default())
    }

    #[test]
    fn at_reference_the_expert_rests() {
        let (s, p) = setup(0.8);
        let cfg = ExpertConfig::default();
        let sol = solve_horizon(&s, &p, 0.8, &cfg, None).unwrap();
        assert!(sol.currents.iter().all(|i| i.abs() < 1e-3), "{:?}", sol.currents);
        let d = expert_action(&s, &p, 0.8, &cfg).unwrap();
        assert!(d.current.abs() < 1e-3);
    }

    #[test]
    fn one_step_closed_form_clamps_to_max() {
        let (s, p) = setup(0.25);
        let cfg = ExpertConfig::default().with_horizon(1);
        let a = p.soc_per_amp(cfg.ts);
        let unconstrained = cfg.q_soc * a * (0.9 - 0.25) / (cfg.q_soc * a * a + cfg.r);
        assert!((unconstrained - 228.8).abs() < 0.1, "{unconstrained}");
        let sol = solve_horizon(&s, &p, 0.9, &cfg, None).unwrap();
        assert_eq!(sol.currents, vec![10.0]);
    }

    #[test]
    fn one_step_interior_solution_matches_closed_form() {
        // Tiny soc gap: unconstrained optimum lies inside the current limits.
        let (s, p) = setup(0.5);
        let cfg = ExpertConfig::default().with_horizon(1);
        let a = p.soc_per_amp(cfg.ts);
        let target = 0.5 + 1e-3;
        let closed = cfg.q_soc * a * (target - 0.5) / (cfg.q_soc * a * a + cfg.r);
        assert!(closed > 0.0 && closed < 10.0);
        let sol = solve_horizon(&s, &p, target, &cfg, None).unwrap();
        assert!((sol.currents[0] - closed).abs() < 1e-3, "{} vs {closed}", sol.currents[0]);
    }

    #[test]
    fn override_when_too_hot() {
        let (mut s, p) = setup(0.25);
        let cfg = ExpertConfig::default();
        s.t_core = cfg.bounds.t_max + 0.5;
        let d = expert_action(&s, &p, 0.9, &cfg).unwrap();
        assert_eq!(d.current, 0.0);
        assert!(d.overridden);
    }

    #[test]
    fn first_action_is_full_charge_far_from_reference() {
        let (s, p) = setup(0.25);
        let cfg = ExpertConfig::default();
        let d = expert_action(&s, &p, 0.9, &cfg).unwrap();
        assert_eq!(d.current, 10.0);
        let oracle = grid_oracle(&s, &p, 0.9, &cfg, 21).unwrap();
        assert_eq!(oracle.currents[0], 10.0);
    }

    #[test]
    fn oracle_zero_at_reference() {
        let (s, p) = setup(0.6);
        let cfg = ExpertConfig::default().with_horizon(1);
        let sol = grid_oracle(&s, &p, 0.6, &cfg, 21).unwrap();
        assert_eq!(sol.currents, vec![0.0]);
    }

    #[test]
    fn oracle_near_closed_form() {
        let (s, p) = setup(0.5);
        let cfg = ExpertConfig::default().with_horizon(1);
        let a = p.soc_per_amp(cfg.ts);
        let target = 0.5 + 1.2e-3;
        let closed = cfg.q_soc * a * (target - 0.5) / (cfg.q_soc * a * a + cfg.r);
        let sol = grid_oracle(&s, &p, target, &cfg, 41).unwrap();
        assert!((sol.currents[0] - closed).abs() <= 0.5, "{} vs {closed}", sol.currents[0]);
    }

    #[test]
    fn oracle_budget_enforced() {
        let (s, p) = setup(0.5);
        let cfg = ExpertConfig::default().with_horizon(6);
        assert!(matches!(
            grid_oracle(&s, &p, 0.9, &cfg, 21),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn grid_contains_zero_for_symmetric_bounds() {
        let g = grid_levels(&Bounds::default(), 41);
        assert_eq!(g.len(), 41);
        assert_eq!(g[20], 0.0);
        assert_eq!(g[1] - g[0], 0.5);
    }

    #[test]
    fn config_json_uses_defaults() {
        let cfg: ExpertConfig = serde_json::from_str(r#"{"horizon": 8, "solver": "grid-oracle"}"#).unwrap();
        assert_eq!(cfg.horizon, 8);
        assert_eq!(cfg.solver, SolverKind::GridOracle);
        assert_eq!(cfg.bounds, Bounds::default());
        assert!(serde_json::from_str::<ExpertConfig>(r#"{"horizn": 8}"#).is_err());
    }
}
