//! Electro-thermal battery simulator.
//!
//! State of charge integrates the applied current in closed form. Terminal
//! voltage is open-circuit voltage plus electrode overpotentials plus the SEI
//! ohmic drop. Open-circuit electrode potentials are polynomials in state of
//! charge; overpotentials use an `asinh` (Butler-Volmer-like) surrogate.
//! Heat generated by the overpotential and ohmic losses drives a two-node
//! (core/surface) lumped thermal model, integrated with fixed-substep RK4.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RK4 substeps per control step for the thermal ODEs.
pub const THERMAL_SUBSTEPS: usize = 10;

/// Highest supported OCV polynomial degree.
pub const MAX_OCV_DEGREE: usize = 5;

fn default_ocv_p() -> Vec<f64> {
    vec![3.6, 0.9, -0.55, 0.3]
}

fn default_ocv_n() -> Vec<f64> {
    vec![0.6, -0.9, 0.4]
}

fn default_eta_gain_p() -> f64 {
    0.025
}

fn default_eta_gain_n() -> f64 {
    -0.025
}

fn default_eta_current_scale() -> f64 {
    2.0
}

/// Per-cell physical parameters.
///
/// The OCV coefficient vectors are in ascending degree order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryParams {
    pub capacity_ah: f64,
    pub r_sei_ohm: f64,
    /// Core heat capacity, J/K.
    pub c_core: f64,
    /// Surface heat capacity, J/K.
    pub c_surf: f64,
    /// Core to surface thermal resistance, K/W.
    pub r_core_surf: f64,
    /// Surface to environment thermal resistance, K/W.
    pub r_surf_env: f64,
    pub t_env: f64,
    #[serde(default = "default_ocv_p")]
    pub ocv_p_coeffs: Vec<f64>,
    #[serde(default = "default_ocv_n")]
    pub ocv_n_coeffs: Vec<f64>,
    #[serde(default = "default_eta_gain_p")]
    pub eta_gain_p: f64,
    #[serde(default = "default_eta_gain_n")]
    pub eta_gain_n: f64,
    #[serde(default = "default_eta_current_scale")]
    pub eta_current_scale: f64,
}

impl Default for BatteryParams {
    /// A mid-life cell (6.75 Ah, 16.5 mOhm) whose thermal constants make the
    /// 313.15 K limit reachable under sustained 10 A charging.
    fn default() -> Self {
        Self {
            capacity_ah: 6.75,
            r_sei_ohm: 0.0165,
            c_core: 62.7,
            c_surf: 4.5,
            r_core_surf: 1.94,
            r_surf_env: 4.5,
            t_env: 298.15,
            ocv_p_coeffs: default_ocv_p(),
            ocv_n_coeffs: default_ocv_n(),
            eta_gain_p: default_eta_gain_p(),
            eta_gain_n: default_eta_gain_n(),
            eta_current_scale: default_eta_current_scale(),
        }
    }
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn poly_derivative(coeffs: &[f64], x: f64) -> f64 {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .rev()
        .fold(0.0, |acc, (k, c)| acc * x + k as f64 * c)
}

impl BatteryParams {
    pub fn from_json(text: &str) -> Result<Self> {
        let params: Self = serde_json::from_str(text)?;
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("capacity_ah", self.capacity_ah),
            ("c_core", self.c_core),
            ("c_surf", self.c_surf),
            ("r_core_surf", self.r_core_surf),
            ("r_surf_env", self.r_surf_env),
            ("t_env", self.t_env),
            ("eta_current_scale", self.eta_current_scale),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParams(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.r_sei_ohm.is_finite() && self.r_sei_ohm >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "r_sei_ohm must be >= 0, got {}",
                self.r_sei_ohm
            )));
        }
        for (name, c) in [("ocv_p_coeffs", &self.ocv_p_coeffs), ("ocv_n_coeffs", &self.ocv_n_coeffs)] {
            if c.is_empty() || c.len() > MAX_OCV_DEGREE + 1 {
                return Err(Error::InvalidParams(format!(
                    "{name} needs 1..={} coefficients, got {}",
                    MAX_OCV_DEGREE + 1,
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParams(format!("{name} has a non-finite entry")));
            }
        }
        if !self.eta_gain_p.is_finite() || !self.eta_gain_n.is_finite() {
            return Err(Error::InvalidParams("non-finite overpotential gain".into()));
        }
        // U_p - U_n must be strictly increasing on [0, 1].
        const GRID: usize = 1000;
        for k in 0..=GRID {
            let s = k as f64 / GRID as f64;
            let slope =
                poly_derivative(&self.ocv_p_coeffs, s) - poly_derivative(&self.ocv_n_coeffs, s);
            if slope <= 0.0 {
                return Err(Error::InvalidParams(format!(
                    "open-circuit voltage is not increasing at soc = {s} (slope {slope})"
                )));
            }
        }
        Ok(())
    }

    pub fn u_p(&self, soc: f64) -> f64 {
        poly(&self.ocv_p_coeffs, soc)
    }

    pub fn u_n(&self, soc: f64) -> f64 {
        poly(&self.ocv_n_coeffs, soc)
    }

    pub fn ocv(&self, soc: f64) -> f64 {
        self.u_p(soc) - self.u_n(soc)
    }

    pub fn eta_p(&self, current: f64) -> f64 {
        self.eta_gain_p * (current / self.eta_current_scale).asinh()
    }

    pub fn eta_n(&self, current: f64) -> f64 {
        self.eta_gain_n * (current / self.eta_current_scale).asinh()
    }

    /// State-of-charge change per ampere over `dt` seconds.
    pub fn soc_per_amp(&self, dt: f64) -> f64 {
        dt / (3600.0 * self.capacity_ah)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatteryState {
    pub soc: f64,
    pub t_core: f64,
    pub t_surf: f64,
    pub last_current: f64,
}

impl BatteryState {
    pub fn at_rest(soc: f64, t_core: f64, t_surf: f64) -> Self {
        Self {
            soc,
            t_core,
            t_surf,
            last_current: 0.0,
        }
    }

    /// Terminal voltage with the most recently applied current flowing.
    pub fn measured_voltage(&self, params: &BatteryParams) -> Result<f64> {
        terminal_voltage(self, params, self.last_current)
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::ModelEvaluation(format!("{what} = {v}")))
    }
}

pub fn terminal_voltage(state: &BatteryState, params: &BatteryParams, current: f64) -> Result<f64> {
    let v = params.u_p(state.soc) - params.u_n(state.soc) + params.eta_p(current)
        - params.eta_n(current)
        + params.r_sei_ohm * current;
    finite(v, "terminal voltage")
}

pub fn heat_generation(state: &BatteryState, params: &BatteryParams, current: f64) -> Result<f64> {
    let v = terminal_voltage(state, params, current)?;
    let q = (current * (v - params.u_p(state.soc) + params.u_n(state.soc))).abs();
    finite(q, "heat generation")
}

fn thermal_rhs(params: &BatteryParams, t_core: f64, t_surf: f64, q: f64) -> (f64, f64) {
    let core_to_surf = (t_core - t_surf) / params.r_core_surf;
    let surf_to_env = (t_surf - params.t_env) / params.r_surf_env;
    (
        (q - core_to_surf) / params.c_core,
        (core_to_surf - surf_to_env) / params.c_surf,
    )
}

/// Advances the two-node thermal model by `dt` seconds with heat `q` held
/// constant, using [`THERMAL_SUBSTEPS`] RK4 substeps.
pub fn thermal_step(params: &BatteryParams, t_core: f64, t_surf: f64, q: f64, dt: f64) -> (f64, f64) {
    let h = dt / THERMAL_SUBSTEPS as f64;
    let (mut tc, mut ts) = (t_core, t_surf);
    for _ in 0..THERMAL_SUBSTEPS {
        let k1 = thermal_rhs(params, tc, ts, q);
        let k2 = thermal_rhs(params, tc + 0.5 * h * k1.0, ts + 0.5 * h * k1.1, q);
        let k3 = thermal_rhs(params, tc + 0.5 * h * k2.0, ts + 0.5 * h * k2.1, q);
        let k4 = thermal_rhs(params, tc + h * k3.0, ts + h * k3.1, q);
        tc += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        ts += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    }
    (tc, ts)
}

/// Result of one simulator step. `soc_saturated` is set when the integrated
/// state of charge left [0, 1] and was clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: BatteryState,
    pub soc_saturated: bool,
    /// State of charge before clamping.
    pub soc_unclamped: f64,
}

pub fn step_checked(
    state: &BatteryState,
    params: &BatteryParams,
    current: f64,
    dt: f64,
) -> Result<StepOutcome> {
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("step dt must be > 0, got {dt}")));
    }
    if !current.is_finite() {
        return Err(Error::ModelEvaluation(format!("applied current = {current}")));
    }
    let q = heat_generation(state, params, current)?;
    let soc_unclamped = state.soc + current * params.soc_per_amp(dt);
    let soc = soc_unclamped.clamp(0.0, 1.0);
    let (t_core, t_surf) = thermal_step(params, state.t_core, state.t_surf, q, dt);
    finite(t_core, "core temperature")?;
    finite(t_surf, "surface temperature")?;
    Ok(StepOutcome {
        state: BatteryState {
            soc,
            t_core,
            t_surf,
            last_current: current,
        },
        soc_saturated: soc != soc_unclamped,
        soc_unclamped,
    })
}

pub fn step(
    state: &BatteryState,
    params: &BatteryParams,
    current: f64,
    dt: f64,
) -> Result<BatteryState> {
    step_checked(state, params, current, dt).map(|o| o.state)
}

/// Measurement noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub sigma_v: f64,
    pub sigma_t: f64,
    #[serde(default)]
    pub sigma_i: f64,
}

impl NoiseSpec {
    pub const ZERO: NoiseSpec = NoiseSpec {
        sigma_v: 0.0,
        sigma_t: 0.0,
        sigma_i: 0.0,
    };

    /// 20 mV on voltage, 1 K on temperature, exact current.
    pub const SENSOR: NoiseSpec = NoiseSpec {
        sigma_v: 0.020,
        sigma_t: 1.0,
        sigma_i: 0.0,
    };

    pub fn is_zero(&self) -> bool {
        self.sigma_v == 0.0 && self.sigma_t == 0.0 && self.sigma_i == 0.0
    }

    /// Adds independent zero-mean Gaussian noise to each channel.
    pub fn perturb<R: Rng + ?Sized>(&self, obs: Observation, rng: &mut R) -> Observation {
        let mut draw = |sigma: f64| {
            if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("sigma > 0").sample(rng)
            } else {
                0.0
            }
        };
        Observation {
            voltage: obs.voltage + draw(self.sigma_v),
            t_surf: obs.t_surf + draw(self.sigma_t),
            current: obs.current + draw(self.sigma_i),
        }
    }
}

/// One measurement triple: terminal voltage, surface temperature, current.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub voltage: f64,
    pub t_surf: f64,
    pub current: f64,
}

pub fn observe<R: Rng + ?Sized>(
    state: &BatteryState,
    params: &BatteryParams,
    current: f64,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<Observation> {
    let exact = Observation {
        voltage: terminal_voltage(state, params, current)?,
        t_surf: state.t_surf,
        current,
    };
    if noise.is_zero() {
        return Ok(exact);
    }
    Ok(noise.perturb(exact, rng))
}
