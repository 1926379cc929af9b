use super::network::{self, Batch};
use super::PolicyModel;

/// Gradients whose analytic and numeric magnitudes are both below this are
/// compared by absolute error.
pub const SMALL_GRADIENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest absolute error among near-zero gradients.
    pub max_abs_error_small: f64,
    /// Largest absolute error over every parameter.
    pub max_abs_error: f64,
    pub n_params: usize,
    pub n_small: usize,
}

/// Compares backpropagated MSE gradients with fourth-order central
/// differences of step `h` for every parameter.
pub fn gradient_check(model: &PolicyModel, batch: &Batch, h: f64) -> GradCheckReport {
    let n = model.num_params();
    let mut analytic = vec![0.0; n];
    network::sse_and_grad(model, batch, &mut analytic);
    let scale = 1.0 / batch.len() as f64;
    analytic.iter_mut().for_each(|g| *g *= scale);

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error_small: 0.0,
        max_abs_error: 0.0,
        n_params: n,
        n_small: 0,
    };
    for p in 0..n {
        let orig = model.params()[p];
        let mut at = |offset: f64| {
            probe.params_mut()[p] = orig + offset;
            network::mse(&probe, batch)
        };
        let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        probe.params_mut()[p] = orig;
        let a = analytic[p];
        let abs = (a - numeric).abs();
        report.max_abs_error = report.max_abs_error.max(abs);
        let mag = a.abs().max(numeric.abs());
        if mag < SMALL_GRADIENT {
            report.n_small += 1;
            report.max_abs_error_small = report.max_abs_error_small.max(abs);
        } else {
            report.max_rel_error = report.max_rel_error.max(abs / mag);
        }
    }
    report
}

