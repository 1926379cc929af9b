//! Batched forward pass and backpropagation through time.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DenseSlot, LstmSlot, PolicyModel, Preprocess};
use crate::battery::NoiseSpec;
use crate::dataset::{Dataset, TRIPLE};

/// Standardized network inputs for `B` samples: one `B x 3` matrix per time
/// step, the soc reference column, and optional targets in amperes.
#[derive(Debug, Clone)]
pub struct Batch {
    pub(crate) xs: Vec<Array2<f64>>,
    pub(crate) soc: Array2<f64>,
    pub(crate) targets: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.soc.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub(crate) fn from_windows(pre: &Preprocess, seq_len: usize, inputs: &[(&[f64], f64)]) -> Self {
        let b = inputs.len();
        let mut xs = vec![Array2::zeros((b, TRIPLE)); seq_len];
        let mut soc = Array2::zeros((b, 1));
        for (r, (window, soc_ref)) in inputs.iter().enumerate() {
            for (t, triple) in window.chunks_exact(TRIPLE).enumerate() {
                for f in 0..TRIPLE {
                    xs[t][[r, f]] = pre.standardize(f, triple[f]);
                }
            }
            soc[[r, 0]] = pre.standardize(Preprocess::SOC_REF, *soc_ref);
        }
        Self {
            xs,
            soc,
            targets: Vec::new(),
        }
    }

    /// Builds a training batch from dataset rows, adding fresh Gaussian noise
    /// to the window features (never to labels or the soc reference).
    pub fn from_rows<R: Rng + ?Sized>(
        pre: &Preprocess,
        data: &Dataset,
        rows: &[usize],
        noise: &NoiseSpec,
        rng: &mut R,
    ) -> Self {
        let seq_len = data.n_w() + 1;
        let b = rows.len();
        let sigma = [noise.sigma_v, noise.sigma_t, noise.sigma_i];
        let normals: Vec<Option<Normal<f64>>> = sigma
            .iter()
            .map(|&s| (s > 0.0).then(|| Normal::new(0.0, s).expect("sigma > 0")))
            .collect();
        let mut xs = vec![Array2::zeros((b, TRIPLE)); seq_len];
        let mut soc = Array2::zeros((b, 1));
        let mut targets = Vec::with_capacity(b);
        for (r, &i) in rows.iter().enumerate() {
            let row = data.row(i);
            for (t, triple) in row.window.chunks_exact(TRIPLE).enumerate() {
                for f in 0..TRIPLE {
                    let eps = normals[f].as_ref().map_or(0.0, |n| n.sample(rng));
                    xs[t][[r, f]] = pre.standardize(f, triple[f] + eps);
                }
            }
            soc[[r, 0]] = pre.standardize(Preprocess::SOC_REF, row.soc_ref);
            targets.push(row.label_current);
        }
        Self { xs, soc, targets }
    }

    /// Rows `start..end` as an independent batch.
    pub(crate) fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            xs: self.xs.iter().map(|x| x.slice(s![start..end, ..]).to_owned()).collect(),
            soc: self.soc.slice(s![start..end, ..]).to_owned(),
            targets: self.targets.get(start..end).map(<[f64]>::to_vec).unwrap_or_default(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mat<'a>(params: &'a [f64], off: usize, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &params[off..off + rows * cols]).expect("layout")
}

fn mat_mut<'a>(params: &'a mut [f64], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((rows, cols), &mut params[off..off + rows * cols]).expect("layout")
}

fn vec_view(params: &[f64], off: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&params[off..off + n])
}

fn vec_mut(params: &mut [f64], off: usize, n: usize) -> ArrayViewMut1<'_, f64> {
    ArrayViewMut1::from(&mut params[off..off + n])
}

pub(crate) struct LstmCache {
    /// Activated gates per step, `B x 4h`.
    gates: Vec<Array2<f64>>,
    cells: Vec<Array2<f64>>,
    tanh_cells: Vec<Array2<f64>>,
    hidden: Vec<Array2<f64>>,
}

pub(crate) struct ForwardCache {
    lstm: Vec<LstmCache>,
    dense_inputs: Vec<Array2<f64>>,
    dense_pre: Vec<Array2<f64>>,
    head_tanh: Vec<f64>,
    outputs: Vec<f64>,
}

impl ForwardCache {
    pub fn outputs(&self) -> Vec<f64> {
        self.outputs.clone()
    }
}

fn lstm_forward(params: &[f64], slot: &LstmSlot, xs: &[Array2<f64>]) -> LstmCache {
    let h = slot.hidden;
    let b = xs[0].nrows();
    let w = mat(params, slot.w, 4 * h, slot.input);
    let u = mat(params, slot.u, 4 * h, h);
    let bias = vec_view(params, slot.b, 4 * h);
    let mut cache = LstmCache {
        gates: Vec::with_capacity(xs.len()),
        cells: Vec::with_capacity(xs.len()),
        tanh_cells: Vec::with_capacity(xs.len()),
        hidden: Vec::with_capacity(xs.len()),
    };
    let mut h_prev = Array2::<f64>::zeros((b, h));
    let mut c_prev = Array2::<f64>::zeros((b, h));
    for x in xs {
        let mut z = Array2::<f64>::zeros((b, 4 * h));
        z += &bias;
        general_mat_mul(1.0, x, &w.t(), 1.0, &mut z);
        general_mat_mul(1.0, &h_prev, &u.t(), 1.0, &mut z);
        let mut c = Array2::<f64>::zeros((b, h));
        let mut tc = Array2::<f64>::zeros((b, h));
        let mut hn = Array2::<f64>::zeros((b, h));
        for r in 0..b {
            let zr = z.row_mut(r).into_slice().expect("contiguous");
            for j in 0..h {
                zr[j] = sigmoid(zr[j]);
                zr[h + j] = sigmoid(zr[h + j]);
                zr[2 * h + j] = zr[2 * h + j].tanh();
                zr[3 * h + j] = sigmoid(zr[3 * h + j]);
                let cv = zr[h + j] * c_prev[[r, j]] + zr[j] * zr[2 * h + j];
                let t = cv.tanh();
                c[[r, j]] = cv;
                tc[[r, j]] = t;
                hn[[r, j]] = zr[3 * h + j] * t;
            }
        }
        cache.gates.push(z);
        cache.cells.push(c.clone());
        cache.tanh_cells.push(tc);
        cache.hidden.push(hn.clone());
        h_prev = hn;
        c_prev = c;
    }
    cache
}

fn dense_forward(params: &[f64], slot: &DenseSlot, x: &Array2<f64>) -> Array2<f64> {
    let w = mat(params, slot.w, slot.output, slot.input);
    let bias = vec_view(params, slot.b, slot.output);
    let mut z = Array2::<f64>::zeros((x.nrows(), slot.output));
    z += &bias;
    general_mat_mul(1.0, x, &w.t(), 1.0, &mut z);
    z
}

pub(crate) fn forward(model: &PolicyModel, batch: &Batch) -> ForwardCache {
    let params = &model.params;
    let layout = &model.layout;
    let mut lstm = Vec::with_capacity(layout.lstm.len());
    for (l, slot) in layout.lstm.iter().enumerate() {
        let cache = {
            let inputs: &[Array2<f64>] = if l == 0 { &batch.xs } else { &lstm.last().map(|c: &LstmCache| &c.hidden).expect("previous layer")[..] };
            lstm_forward(params, slot, inputs)
        };
        lstm.push(cache);
    }
    let last_hidden = lstm.last().expect("at least one lstm layer").hidden.last().expect("seq_len >= 1");
    let mut x = ndarray::concatenate(Axis(1), &[last_hidden.view(), batch.soc.view()]).expect("same rows");

    let n_dense = layout.dense.len();
    let mut dense_inputs = Vec::with_capacity(n_dense);
    let mut dense_pre = Vec::with_capacity(n_dense);
    for (k, slot) in layout.dense.iter().enumerate() {
        let z = dense_forward(params, slot, &x);
        dense_inputs.push(x);
        x = if k + 1 < n_dense { z.mapv(|v| v.max(0.0)) } else { z.clone() };
        dense_pre.push(z);
    }
    let head = dense_pre.last().expect("head");
    let head_tanh: Vec<f64> = head.column(0).iter().map(|z| z.tanh()).collect();
    let (mid, half) = (model.arch.mid(), model.arch.half_span());
    let outputs = head_tanh.iter().map(|t| mid + half * t).collect();
    ForwardCache {
        lstm,
        dense_inputs,
        dense_pre,
        head_tanh,
        outputs,
    }
}

fn lstm_backward(
    params: &[f64],
    grad: &mut [f64],
    slot: &LstmSlot,
    inputs: &[Array2<f64>],
    cache: &LstmCache,
    dh_ext: &[Option<Array2<f64>>],
    need_dx: bool,
) -> Vec<Option<Array2<f64>>> {
    let h = slot.hidden;
    let b = inputs[0].nrows();
    let steps = inputs.len();
    let w = mat(params, slot.w, 4 * h, slot.input);
    let u = mat(params, slot.u, 4 * h, h);
    let mut dw = Array2::<f64>::zeros((4 * h, slot.input));
    let mut du = Array2::<f64>::zeros((4 * h, h));
    let mut db = Array1::<f64>::zeros(4 * h);
    let mut dh_next = Array2::<f64>::zeros((b, h));
    let mut dc_next = Array2::<f64>::zeros((b, h));
    let mut dxs = vec![None; steps];
    let zeros = Array2::<f64>::zeros((b, h));

    for t in (0..steps).rev() {
        let mut dh = dh_next.clone();
        if let Some(e) = &dh_ext[t] {
            dh += e;
        }
        let gates = &cache.gates[t];
        let tc = &cache.tanh_cells[t];
        let c_prev = if t > 0 { &cache.cells[t - 1] } else { &zeros };
        let h_prev = if t > 0 { &cache.hidden[t - 1] } else { &zeros };
        let mut dz = Array2::<f64>::zeros((b, 4 * h));
        let mut dc_out = Array2::<f64>::zeros((b, h));
        for r in 0..b {
            let g = gates.row(r);
            let dzr = dz.row_mut(r).into_slice().expect("contiguous");
            for j in 0..h {
                let (ig, fg, cg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tcv = tc[[r, j]];
                let dhv = dh[[r, j]];
                let d_o = dhv * tcv;
                let dc = dhv * og * (1.0 - tcv * tcv) + dc_next[[r, j]];
                dzr[j] = dc * cg * ig * (1.0 - ig);
                dzr[h + j] = dc * c_prev[[r, j]] * fg * (1.0 - fg);
                dzr[2 * h + j] = dc * ig * (1.0 - cg * cg);
                dzr[3 * h + j] = d_o * og * (1.0 - og);
                dc_out[[r, j]] = dc * fg;
            }
        }
        general_mat_mul(1.0, &dz.t(), &inputs[t], 1.0, &mut dw);
        general_mat_mul(1.0, &dz.t(), h_prev, 1.0, &mut du);
        db += &dz.sum_axis(Axis(0));
        if need_dx {
            dxs[t] = Some(dz.dot(&w));
        }
        dh_next = dz.dot(&u);
        dc_next = dc_out;
    }
    mat_mut(grad, slot.w, 4 * h, slot.input).zip_mut_with(&dw, |g, d| *g += d);
    mat_mut(grad, slot.u, 4 * h, h).zip_mut_with(&du, |g, d| *g += d);
    vec_mut(grad, slot.b, 4 * h).zip_mut_with(&db, |g, d| *g += d);
    dxs
}

/// Sum of squared errors over the batch and its gradient, accumulated into
/// `grad` (same layout as the parameters).
pub(crate) fn sse_and_grad(model: &PolicyModel, batch: &Batch, grad: &mut [f64]) -> f64 {
    let fwd = forward(model, batch);
    let params = &model.params;
    let layout = &model.layout;
    let b = batch.len();
    let half = model.arch.half_span();

    let mut sse = 0.0;
    let mut dz = Array2::<f64>::zeros((b, 1));
    for r in 0..b {
        let e = fwd.outputs[r] - batch.targets[r];
        sse += e * e;
        let t = fwd.head_tanh[r];
        dz[[r, 0]] = 2.0 * e * half * (1.0 - t * t);
    }

    let n_dense = layout.dense.len();
    for k in (0..n_dense).rev() {
        let slot = &layout.dense[k];
        if k + 1 < n_dense {
            Zip::from(&mut dz).and(&fwd.dense_pre[k]).for_each(|d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        let x = &fwd.dense_inputs[k];
        let mut gw = mat_mut(grad, slot.w, slot.output, slot.input);
        general_mat_mul(1.0, &dz.t(), x, 1.0, &mut gw);
        vec_mut(grad, slot.b, slot.output).zip_mut_with(&dz.sum_axis(Axis(0)), |g, d| *g += d);
        let w = mat(params, slot.w, slot.output, slot.input);
        dz = dz.dot(&w);
    }
    // dz now holds the gradient w.r.t. [final hidden state, soc reference].
    let n_lstm = layout.lstm.len();
    let top_h = layout.lstm[n_lstm - 1].hidden;
    let steps = batch.xs.len();
    let mut dh_ext: Vec<Option<Array2<f64>>> = vec![None; steps];
    dh_ext[steps - 1] = Some(dz.slice(s![.., ..top_h]).to_owned());

    for l in (0..n_lstm).rev() {
        let inputs: &[Array2<f64>] = if l == 0 { &batch.xs } else { &fwd.lstm[l - 1].hidden };
        dh_ext = lstm_backward(params, grad, &layout.lstm[l], inputs, &fwd.lstm[l], &dh_ext, l > 0);
    }
    sse
}

/// Mean squared error without gradients.
pub(crate) fn mse(model: &PolicyModel, batch: &Batch) -> f64 {
    let out = forward(model, batch).outputs;
    out.iter().zip(&batch.targets).map(|(y, t)| (y - t).powi(2)).sum::<f64>() / batch.len() as f64
}
