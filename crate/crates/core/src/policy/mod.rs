//! Recurrent imitation policy.
//!
//! A stack of LSTM layers reads the standardized (voltage, surface
//! temperature, current) window oldest first. The last layer's final hidden
//! state is concatenated with the standardized soc reference and passed
//! through ReLU dense layers to a single tanh unit scaled onto the current
//! limits.
//!
//! All parameters live in one flat `Vec<f64>`; [`Layout`] maps it onto the
//! per-layer matrices, which keeps the optimizer and checkpoint code simple.

mod checkpoint;
mod gradcheck;
mod network;
mod train;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, read_checkpoint, save_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{gradient_check, GradCheckReport, SMALL_GRADIENT};
pub use network::Batch;
pub use train::{train, Adam, TrainConfig, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{window_len, Dataset, TRIPLE};
use crate::error::{Error, Result};
use crate::expert::Bounds;

/// Floor applied to fitted standard deviations.
pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_w: usize,
    pub lstm: Vec<usize>,
    pub dense: Vec<usize>,
    pub i_min: f64,
    pub i_max: f64,
}

impl Architecture {
    /// Four LSTM layers (128, 64, 32, 16) and four ReLU layers (100, 100, 50, 10).
    pub fn full(n_w: usize, bounds: &Bounds) -> Self {
        Self {
            n_w,
            lstm: vec![128, 64, 32, 16],
            dense: vec![100, 100, 50, 10],
            i_min: bounds.i_min,
            i_max: bounds.i_max,
        }
    }

    /// Every hidden width multiplied by `factor`, rounded up.
    pub fn scaled(&self, factor: f64) -> Self {
        let scale = |v: &Vec<usize>| v.iter().map(|&n| ((n as f64 * factor).ceil() as usize).max(1)).collect();
        Self {
            lstm: scale(&self.lstm),
            dense: scale(&self.dense),
            ..self.clone()
        }
    }

    pub fn seq_len(&self) -> usize {
        self.n_w + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.lstm.is_empty() || self.lstm.iter().chain(&self.dense).any(|&n| n == 0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes: {self:?}")));
        }
        if !(self.i_min < self.i_max) {
            return Err(Error::InvalidConfig("i_min must be < i_max".into()));
        }
        Ok(())
    }

    fn mid(&self) -> f64 {
        0.5 * (self.i_min + self.i_max)
    }

    fn half_span(&self) -> f64 {
        0.5 * (self.i_max - self.i_min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LstmSlot {
    pub input: usize,
    pub hidden: usize,
    /// Input weights, `4h x input`, gate order (input, forget, cell, output).
    pub w: usize,
    /// Recurrent weights, `4h x h`.
    pub u: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct DenseSlot {
    pub input: usize,
    pub output: usize,
    /// Weights, `output x input`.
    pub w: usize,
    pub b: usize,
}

/// Offsets of every weight block inside the flat parameter vector. The last
/// dense slot is the single-unit output head.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub lstm: Vec<LstmSlot>,
    pub dense: Vec<DenseSlot>,
    pub total: usize,
}

impl Layout {
    pub fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let mut lstm = Vec::new();
        let mut input = TRIPLE;
        for &h in &arch.lstm {
            let w = take(4 * h * input);
            let u = take(4 * h * h);
            let b = take(4 * h);
            lstm.push(LstmSlot { input, hidden: h, w, u, b });
            input = h;
        }
        let mut dense = Vec::new();
        input += 1; // soc reference
        for &n in arch.dense.iter().chain(std::iter::once(&1)) {
            let w = take(n * input);
            let b = take(n);
            dense.push(DenseSlot { input, output: n, w, b });
            input = n;
        }
        Self { lstm, dense, total: off }
    }
}

/// Per-feature standardization: voltage, surface temperature, current, and
/// soc reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            mean: [0.0; 4],
            std: [1.0; 4],
        }
    }
}

impl Preprocess {
    pub const SOC_REF: usize = 3;

    /// Fits means and standard deviations over every window entry and
    /// every soc reference in `data`. Labels are not used.
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidConfig("cannot fit preprocessing on an empty dataset".into()));
        }
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        let mut count = [0usize; 4];
        for row in data.rows() {
            for t in row.window.chunks_exact(TRIPLE) {
                for f in 0..TRIPLE {
                    sum[f] += t[f];
                    sq[f] += t[f] * t[f];
                    count[f] += 1;
                }
            }
            sum[3] += row.soc_ref;
            sq[3] += row.soc_ref * row.soc_ref;
            count[3] += 1;
        }
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for f in 0..4 {
            let n = count[f] as f64;
            mean[f] = sum[f] / n;
            std[f] = (sq[f] / n - mean[f] * mean[f]).max(0.0).sqrt().max(MIN_STD);
        }
        Ok(Self { mean, std })
    }

    pub fn standardize(&self, feature: usize, v: f64) -> f64 {
        (v - self.mean[feature]) / self.std[feature]
    }

    pub fn destandardize(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    arch: Architecture,
    layout: Layout,
    params: Vec<f64>,
    pre: Preprocess,
}

impl PolicyModel {
    /// Xavier-uniform weights, zero biases, forget-gate biases at one.
    pub fn init(arch: Architecture, pre: Preprocess, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |dst: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in dst {
                *v = rng.gen_range(-limit..limit);
            }
        };
        for s in &layout.lstm {
            let h4 = 4 * s.hidden;
            xavier(&mut params[s.w..s.w + h4 * s.input], s.input, h4);
            xavier(&mut params[s.u..s.u + h4 * s.hidden], s.hidden, h4);
            params[s.b + s.hidden..s.b + 2 * s.hidden].fill(1.0);
        }
        for s in &layout.dense {
            xavier(&mut params[s.w..s.w + s.output * s.input], s.input, s.output);
        }
        Ok(Self { arch, layout, params, pre })
    }

    /// Every parameter zero.
    pub fn zeros(arch: Architecture, pre: Preprocess) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let params = vec![0.0; layout.total];
        Ok(Self { arch, layout, params, pre })
    }

    pub(crate) fn from_parts(arch: Architecture, pre: Preprocess, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::Shape {
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(Self { arch, layout, params, pre })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn preprocess(&self) -> &Preprocess {
        &self.pre
    }

    pub fn set_preprocess(&mut self, pre: Preprocess) {
        self.pre = pre;
    }

    /// Sets the output bias so that a network whose last hidden layer is
    /// silent predicts `current` (clamped just inside the bounds).
    pub fn set_output_prior(&mut self, current: f64) {
        let mid = 0.5 * (self.arch.i_max + self.arch.i_min);
        let half = 0.5 * (self.arch.i_max - self.arch.i_min);
        let u = ((current - mid) / half).clamp(-0.99, 0.99);
        let head = self.layout.dense.last().expect("output head");
        self.params[head.b] = u.atanh();
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Current for one raw measurement window (oldest triple first).
    pub fn forward(&self, window: &[f64], soc_ref: f64) -> Result<f64> {
        let expected = window_len(self.arch.n_w);
        if window.len() != expected {
            return Err(Error::Shape {
                expected,
                got: window.len(),
            });
        }
        let batch = Batch::from_windows(&self.pre, self.arch.seq_len(), &[(window, soc_ref)]);
        Ok(network::forward(self, &batch).outputs()[0])
    }

    /// Currents for many windows at once.
    pub fn forward_many(&self, inputs: &[(&[f64], f64)]) -> Result<Vec<f64>> {
        let expected = window_len(self.arch.n_w);
        if let Some((w, _)) = inputs.iter().find(|(w, _)| w.len() != expected) {
            return Err(Error::Shape {
                expected,
                got: w.len(),
            });
        }
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Batch::from_windows(&self.pre, self.arch.seq_len(), inputs);
        Ok(network::forward(self, &batch).outputs())
    }
}
