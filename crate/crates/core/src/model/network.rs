//! LSTM + fully-connected network: parameters, forward pass and exact
//! backpropagation through time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::timeseries::{NormalizationStats, Window, N_FEATURES, WEEK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            name,
            shape,
            data: vec![0.0; n],
        }
    }

    fn filled(name: String, shape: Vec<usize>, v: f64) -> Self {
        let mut t = Tensor::zeros(name, shape);
        t.data.fill(v);
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// One LSTM layer. Gate blocks are stacked in the order input, forget,
/// output, candidate: `w` is `4H x in`, `u` is `4H x H`, `b` is `4H`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub w: Tensor,
    pub u: Tensor,
    pub b: Tensor,
}

impl LstmLayer {
    pub fn hidden(&self) -> usize {
        self.u.shape[1]
    }

    pub fn input(&self) -> usize {
        self.w.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Fully-connected layer `y = x W^T + b`, with batch normalization replacing
/// the bias when enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub bn: Option<BatchNorm>,
}

impl DenseLayer {
    pub fn outputs(&self) -> usize {
        self.w.shape[0]
    }

    pub fn inputs(&self) -> usize {
        self.w.shape[1]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub lstm: Vec<LstmLayer>,
    pub hidden: Vec<DenseLayer>,
    pub output: DenseLayer,
    /// Statistics the training data was normalized with.
    pub stats: Option<NormalizationStats>,
    /// Bumped on every parameter update; caches from older versions are stale.
    #[serde(skip)]
    version: u64,
}

impl PartialEq for ForecastModel {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config
            && self.lstm == o.lstm
            && self.hidden == o.hidden
            && self.output == o.output
            && self.stats == o.stats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch normalization.
    Train,
    /// Running statistics for batch normalization.
    Inference,
}

/// Inputs `size x seq_len x features` and targets `size x seq_len x out`,
/// both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub seq_len: usize,
    pub features: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a Window>) -> Batch {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut size = 0;
        for w in windows {
            for step in &w.input {
                inputs.extend_from_slice(step);
            }
            targets.extend_from_slice(&w.target);
            size += 1;
        }
        Batch {
            size,
            seq_len: WEEK,
            features: N_FEATURES,
            inputs,
            targets,
        }
    }

    fn step(&self, b: usize, t: usize) -> &[f64] {
        let o = (b * self.seq_len + t) * self.features;
        &self.inputs[o..o + self.features]
    }
}

/// `out[i][j] = sum_k a[i][k] * w[j][k]` with `a: m x k`, `w: n x k`.
fn matmul_nt(a: &[f64], m: usize, k: usize, w: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let wr = &w[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in row.iter().zip(wr) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `dw[j][k] += sum_i dz[i][j] * x[i][k]` with `dz: m x n`, `x: m x k`.
fn accumulate_tn(dz: &[f64], m: usize, n: usize, x: &[f64], k: usize, dw: &mut [f64]) {
    for i in 0..m {
        let xr = &x[i * k..(i + 1) * k];
        for j in 0..n {
            let g = dz[i * n + j];
            if g == 0.0 {
                continue;
            }
            let dr = &mut dw[j * k..(j + 1) * k];
            for (d, xv) in dr.iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
}

/// `out[i][k] += sum_j dz[i][j] * w[j][k]` with `dz: m x n`, `w: n x k`.
fn matmul_nn_acc(dz: &[f64], m: usize, n: usize, w: &[f64], k: usize, out: &mut [f64]) {
    for i in 0..m {
        let or = &mut out[i * k..(i + 1) * k];
        for j in 0..n {
            let g = dz[i * n + j];
            if g == 0.0 {
                continue;
            }
            let wr = &w[j * k..(j + 1) * k];
            for (o, wv) in or.iter_mut().zip(wr) {
                *o += g * wv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct LstmCache {
    /// per step, `B x in`
    inputs: Vec<Vec<f64>>,
    /// per step, `B x 4H` post-activation gates (i, f, o, g)
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    tanh_cells: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
}

struct DenseCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// pre-ReLU values
    pre_act: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Everything the backward pass needs from one training-mode forward pass.
pub struct ForwardCache {
    version: u64,
    mode: Mode,
    batch_size: usize,
    seq_len: usize,
    lstm: Vec<LstmCache>,
    dense: Vec<DenseCache>,
    output_input: Vec<f64>,
    pub predictions: Vec<f64>,
}

impl ForwardCache {
    /// Per-layer batch (mean, biased variance) of the batch-normalized layers.
    pub fn batch_norm_stats(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.dense
            .iter()
            .map(|d| (d.batch_mean.clone(), d.batch_var.clone()))
            .collect()
    }
}

/// Gradients laid out like [`ForecastModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl ForecastModel {
    /// Weights drawn from `N(0, init_std^2)` (optionally divided by
    /// `sqrt(fan_in)`), biases zero, batch-norm scale one and shift zero.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal = |name: String, rows: usize, cols: usize| -> Result<Tensor> {
            let std = if cfg.init_fan_in_scaled {
                cfg.init_std / (cols as f64).sqrt()
            } else {
                cfg.init_std
            };
            let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Ok(Tensor {
                name,
                shape: vec![rows, cols],
                data,
            })
        };
        let mut lstm = Vec::new();
        let mut input = cfg.input_dim;
        for (l, &h) in cfg.lstm_sizes.iter().enumerate() {
            lstm.push(LstmLayer {
                w: normal(format!("lstm{l}.w"), 4 * h, input)?,
                u: normal(format!("lstm{l}.u"), 4 * h, h)?,
                b: Tensor::zeros(format!("lstm{l}.b"), vec![4 * h]),
            });
            input = h;
        }
        let mut hidden = Vec::new();
        for (l, &h) in cfg.fc_sizes.iter().enumerate() {
            let w = normal(format!("fc{l}.w"), h, input)?;
            let (b, bn) = if cfg.batch_norm {
                (
                    None,
                    Some(BatchNorm {
                        gamma: Tensor::filled(format!("fc{l}.bn.gamma"), vec![h], 1.0),
                        beta: Tensor::zeros(format!("fc{l}.bn.beta"), vec![h]),
                        running_mean: vec![0.0; h],
                        running_var: vec![1.0; h],
                    }),
                )
            } else {
                (Some(Tensor::zeros(format!("fc{l}.b"), vec![h])), None)
            };
            hidden.push(DenseLayer { w, b, bn });
            input = h;
        }
        let output = DenseLayer {
            w: normal("out.w".into(), cfg.output_dim, input)?,
            b: Some(Tensor::zeros("out.b".into(), vec![cfg.output_dim])),
            bn: None,
        };
        Ok(ForecastModel {
            config: cfg.clone(),
            lstm,
            hidden,
            output,
            stats: None,
            version: 0,
        })
    }

    /// Trainable tensors in a fixed order: LSTM layers (w, u, b), hidden
    /// dense layers (w, then b or bn gamma/beta), output layer (w, b).
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for l in &self.lstm {
            v.extend([&l.w, &l.u, &l.b]);
        }
        for d in self.hidden.iter().chain(std::iter::once(&self.output)) {
            v.push(&d.w);
            if let Some(b) = &d.b {
                v.push(b);
            }
            if let Some(bn) = &d.bn {
                v.extend([&bn.gamma, &bn.beta]);
            }
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        let mut v = Vec::new();
        for l in &mut self.lstm {
            v.extend([&mut l.w, &mut l.u, &mut l.b]);
        }
        for d in self.hidden.iter_mut().chain(std::iter::once(&mut self.output)) {
            v.push(&mut d.w);
            if let Some(b) = &mut d.b {
                v.push(b);
            }
            if let Some(bn) = &mut d.bn {
                v.extend([&mut bn.gamma, &mut bn.beta]);
            }
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let cfg = &self.config;
        if batch.features != cfg.input_dim || batch.seq_len != cfg.seq_len {
            return Err(Error::Shape(format!(
                "batch is {}x{}x{}, model expects Bx{}x{}",
                batch.size, batch.seq_len, batch.features, cfg.seq_len, cfg.input_dim
            )));
        }
        if batch.size == 0 || batch.inputs.len() != batch.size * batch.seq_len * batch.features {
            return Err(Error::Shape(format!(
                "{} input values for a batch of {}",
                batch.inputs.len(),
                batch.size
            )));
        }
        Ok(())
    }

    /// Runs the network; predictions are `B x T x out`, row-major.
    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_batch(batch)?;
        let (bsz, steps) = (batch.size, batch.seq_len);

        let mut xs: Vec<Vec<f64>> = (0..steps)
            .map(|t| (0..bsz).flat_map(|b| batch.step(b, t).iter().copied()).collect())
            .collect();
        let mut lstm_caches = Vec::with_capacity(self.lstm.len());
        for layer in &self.lstm {
            let (h, inp) = (layer.hidden(), layer.input());
            let mut h_prev = vec![0.0; bsz * h];
            let mut c_prev = vec![0.0; bsz * h];
            let mut cache = LstmCache {
                inputs: Vec::with_capacity(steps),
                gates: Vec::with_capacity(steps),
                cells: Vec::with_capacity(steps),
                tanh_cells: Vec::with_capacity(steps),
                hiddens: Vec::with_capacity(steps),
            };
            for x in xs.into_iter() {
                let mut z = vec![0.0; bsz * 4 * h];
                for b in 0..bsz {
                    z[b * 4 * h..(b + 1) * 4 * h].copy_from_slice(&layer.b.data);
                }
                matmul_nt(&x, bsz, inp, &layer.w.data, 4 * h, &mut z);
                matmul_nt(&h_prev, bsz, h, &layer.u.data, 4 * h, &mut z);
                let mut c = vec![0.0; bsz * h];
                let mut tc = vec![0.0; bsz * h];
                let mut hn = vec![0.0; bsz * h];
                for b in 0..bsz {
                    let zb = &mut z[b * 4 * h..(b + 1) * 4 * h];
                    for k in 0..h {
                        let i = sigmoid(zb[k]);
                        let f = sigmoid(zb[h + k]);
                        let o = sigmoid(zb[2 * h + k]);
                        let g = zb[3 * h + k].tanh();
                        zb[k] = i;
                        zb[h + k] = f;
                        zb[2 * h + k] = o;
                        zb[3 * h + k] = g;
                        let cv = f * c_prev[b * h + k] + i * g;
                        let t = cv.tanh();
                        c[b * h + k] = cv;
                        tc[b * h + k] = t;
                        hn[b * h + k] = o * t;
                    }
                }
                cache.inputs.push(x);
                cache.gates.push(z);
                cache.cells.push(c.clone());
                cache.tanh_cells.push(tc);
                cache.hiddens.push(hn.clone());
                h_prev = hn;
                c_prev = c;
            }
            xs = cache.hiddens.clone();
            lstm_caches.push(cache);
        }

        // Dense stack over every (sample, step) row: row index b * T + t.
        let top = self.lstm.last().map_or(self.config.input_dim, LstmLayer::hidden);
        let rows = bsz * steps;
        let mut x = vec![0.0; rows * top];
        for (t, hs) in xs.iter().enumerate() {
            for b in 0..bsz {
                let dst = (b * steps + t) * top;
                x[dst..dst + top].copy_from_slice(&hs[b * top..(b + 1) * top]);
            }
        }
        let mut dense_caches = Vec::with_capacity(self.hidden.len());
        let mut width = top;
        for layer in &self.hidden {
            let n = layer.outputs();
            let mut a = vec![0.0; rows * n];
            if let Some(b) = &layer.b {
                for r in 0..rows {
                    a[r * n..(r + 1) * n].copy_from_slice(&b.data);
                }
            }
            matmul_nt(&x, rows, width, &layer.w.data, n, &mut a);
            let mut cache = DenseCache {
                input: x,
                xhat: Vec::new(),
                inv_std: Vec::new(),
                pre_act: Vec::new(),
                batch_mean: Vec::new(),
                batch_var: Vec::new(),
            };
            if let Some(bn) = &layer.bn {
                let eps = self.config.bn_eps;
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; n];
                        let mut var = vec![0.0; n];
                        for r in 0..rows {
                            for j in 0..n {
                                mean[j] += a[r * n + j];
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= rows as f64);
                        for r in 0..rows {
                            for j in 0..n {
                                let d = a[r * n + j] - mean[j];
                                var[j] += d * d;
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= rows as f64);
                        (mean, var)
                    }
                    Mode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = vec![0.0; rows * n];
                for r in 0..rows {
                    for j in 0..n {
                        let xh = (a[r * n + j] - mean[j]) * inv_std[j];
                        xhat[r * n + j] = xh;
                        a[r * n + j] = bn.gamma.data[j] * xh + bn.beta.data[j];
                    }
                }
                cache.xhat = xhat;
                cache.inv_std = inv_std;
                cache.batch_mean = mean;
                cache.batch_var = var;
            }
            let y: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
            cache.pre_act = a;
            dense_caches.push(cache);
            x = y;
            width = n;
        }

        let out_n = self.output.outputs();
        let mut preds = vec![0.0; rows * out_n];
        if let Some(b) = &self.output.b {
            for r in 0..rows {
                preds[r * out_n..(r + 1) * out_n].copy_from_slice(&b.data);
            }
        }
        matmul_nt(&x, rows, width, &self.output.w.data, out_n, &mut preds);

        let cache = ForwardCache {
            version: self.version,
            mode,
            batch_size: bsz,
            seq_len: steps,
            lstm: lstm_caches,
            dense: dense_caches,
            output_input: x,
            predictions: preds.clone(),
        };
        Ok((preds, cache))
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        Ok(self.forward(batch, Mode::Inference)?.0)
    }

    /// Mean squared error of the cached predictions against `targets`.
    pub fn loss(cache: &ForwardCache, targets: &[f64]) -> Result<f64> {
        if targets.len() != cache.predictions.len() {
            return Err(Error::Shape(format!(
                "{} targets for {} predictions",
                targets.len(),
                cache.predictions.len()
            )));
        }
        let n = targets.len() as f64;
        Ok(cache
            .predictions
            .iter()
            .zip(targets)
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / n)
    }

    /// Exact gradients of the mean squared error with respect to every
    /// parameter, unrolled over all time steps.
    pub fn backward(&self, cache: &ForwardCache, targets: &[f64]) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::invalid("stale forward cache: parameters changed since the forward pass"));
        }
        if cache.mode != Mode::Train && self.config.batch_norm {
            return Err(Error::invalid("backward needs a training-mode forward pass"));
        }
        if targets.len() != cache.predictions.len() {
            return Err(Error::Shape(format!(
                "{} targets for {} predictions",
                targets.len(),
                cache.predictions.len()
            )));
        }
        let (bsz, steps) = (cache.batch_size, cache.seq_len);
        let rows = bsz * steps;
        let scale = 2.0 / targets.len() as f64;
        let mut dy: Vec<f64> = cache
            .predictions
            .iter()
            .zip(targets)
            .map(|(p, y)| scale * (p - y))
            .collect();

        // output layer
        let out_n = self.output.outputs();
        let out_in = self.output.inputs();
        let mut g_out_w = vec![0.0; out_n * out_in];
        accumulate_tn(&dy, rows, out_n, &cache.output_input, out_in, &mut g_out_w);
        let mut g_out_b = vec![0.0; out_n];
        for r in 0..rows {
            for j in 0..out_n {
                g_out_b[j] += dy[r * out_n + j];
            }
        }
        let mut dx = vec![0.0; rows * out_in];
        matmul_nn_acc(&dy, rows, out_n, &self.output.w.data, out_in, &mut dx);

        // hidden dense layers, last to first
        let mut dense_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.hidden.len()];
        for (li, layer) in self.hidden.iter().enumerate().rev() {
            let c = &cache.dense[li];
            let n = layer.outputs();
            let k = layer.inputs();
            // through ReLU
            let mut da: Vec<f64> = dx
                .iter()
                .zip(&c.pre_act)
                .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                .collect();
            let mut grads = Vec::new();
            let mut bn_grads = Vec::new();
            if let Some(bn) = &layer.bn {
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut sum_dxh = vec![0.0; n];
                let mut sum_dxh_xh = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        let g = da[r * n + j];
                        let xh = c.xhat[r * n + j];
                        dgamma[j] += g * xh;
                        dbeta[j] += g;
                        let dxh = g * bn.gamma.data[j];
                        sum_dxh[j] += dxh;
                        sum_dxh_xh[j] += dxh * xh;
                    }
                }
                let m = rows as f64;
                for r in 0..rows {
                    for j in 0..n {
                        let dxh = da[r * n + j] * bn.gamma.data[j];
                        let xh = c.xhat[r * n + j];
                        da[r * n + j] = c.inv_std[j] / m * (m * dxh - sum_dxh[j] - xh * sum_dxh_xh[j]);
                    }
                }
                bn_grads.push(dgamma);
                bn_grads.push(dbeta);
            }
            let mut gw = vec![0.0; n * k];
            accumulate_tn(&da, rows, n, &c.input, k, &mut gw);
            grads.push(gw);
            if layer.b.is_some() {
                let mut gb = vec![0.0; n];
                for r in 0..rows {
                    for j in 0..n {
                        gb[j] += da[r * n + j];
                    }
                }
                grads.push(gb);
            }
            grads.extend(bn_grads);
            let mut dprev = vec![0.0; rows * k];
            matmul_nn_acc(&da, rows, n, &layer.w.data, k, &mut dprev);
            dx = dprev;
            dense_grads[li] = grads;
        }

        // back to per-step hidden-state gradients of the top LSTM layer
        let top = self.lstm.last().map_or(self.config.input_dim, LstmLayer::hidden);
        let mut dh_steps: Vec<Vec<f64>> = (0..steps)
            .map(|t| {
                let mut v = vec![0.0; bsz * top];
                for b in 0..bsz {
                    let src = (b * steps + t) * top;
                    v[b * top..(b + 1) * top].copy_from_slice(&dx[src..src + top]);
                }
                v
            })
            .collect();

        let mut lstm_grads: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.lstm.len()];
        for (li, layer) in self.lstm.iter().enumerate().rev() {
            let c = &cache.lstm[li];
            let (h, inp) = (layer.hidden(), layer.input());
            let mut gw = vec![0.0; 4 * h * inp];
            let mut gu = vec![0.0; 4 * h * h];
            let mut gb = vec![0.0; 4 * h];
            let mut dh_next = vec![0.0; bsz * h];
            let mut dc_next = vec![0.0; bsz * h];
            let mut dx_steps: Vec<Vec<f64>> = vec![Vec::new(); steps];
            let zeros = vec![0.0; bsz * h];
            for t in (0..steps).rev() {
                let gates = &c.gates[t];
                let c_prev = if t > 0 { &c.cells[t - 1] } else { &zeros };
                let h_prev = if t > 0 { &c.hiddens[t - 1] } else { &zeros };
                let mut dz = vec![0.0; bsz * 4 * h];
                for b in 0..bsz {
                    for k in 0..h {
                        let idx = b * h + k;
                        let gi = b * 4 * h;
                        let (i, f, o, g) = (gates[gi + k], gates[gi + h + k], gates[gi + 2 * h + k], gates[gi + 3 * h + k]);
                        let tc = c.tanh_cells[t][idx];
                        let dh = dh_steps[t][idx] + dh_next[idx];
                        let dc = dh * o * (1.0 - tc * tc) + dc_next[idx];
                        dz[gi + k] = dc * g * i * (1.0 - i);
                        dz[gi + h + k] = dc * c_prev[idx] * f * (1.0 - f);
                        dz[gi + 2 * h + k] = dh * tc * o * (1.0 - o);
                        dz[gi + 3 * h + k] = dc * i * (1.0 - g * g);
                        dc_next[idx] = dc * f;
                    }
                }
                accumulate_tn(&dz, bsz, 4 * h, &c.inputs[t], inp, &mut gw);
                accumulate_tn(&dz, bsz, 4 * h, h_prev, h, &mut gu);
                for b in 0..bsz {
                    for j in 0..4 * h {
                        gb[j] += dz[b * 4 * h + j];
                    }
                }
                let mut dhp = vec![0.0; bsz * h];
                matmul_nn_acc(&dz, bsz, 4 * h, &layer.u.data, h, &mut dhp);
                dh_next = dhp;
                let mut dxt = vec![0.0; bsz * inp];
                matmul_nn_acc(&dz, bsz, 4 * h, &layer.w.data, inp, &mut dxt);
                dx_steps[t] = dxt;
            }
            lstm_grads[li] = vec![gw, gu, gb];
            dh_steps = dx_steps;
        }

        let mut tensors: Vec<Vec<f64>> = lstm_grads.into_iter().flatten().collect();
        tensors.extend(dense_grads.into_iter().flatten());
        tensors.push(g_out_w);
        tensors.push(g_out_b);
        dy.clear();
        Ok(Gradients { tensors })
    }

    /// Plain gradient-descent step.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params_mut().into_iter().zip(&grads.tensors) {
            for (w, d) in p.data.iter_mut().zip(g) {
                *w -= lr * d;
            }
        }
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// statistics used at inference.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        let m = self.config.bn_momentum;
        let rows = (cache.batch_size * cache.seq_len) as f64;
        for (layer, c) in self.hidden.iter_mut().zip(&cache.dense) {
            if let Some(bn) = &mut layer.bn {
                let unbias = if rows > 1.0 { rows / (rows - 1.0) } else { 1.0 };
                for j in 0..bn.running_mean.len() {
                    bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * c.batch_mean[j];
                    bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * c.batch_var[j] * unbias;
                }
            }
        }
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(batch_norm: bool, seed: u64) -> ForecastModel {
        let cfg = ModelConfig {
            lstm_sizes: vec![4],
            fc_sizes: vec![3],
            batch_norm,
            init_std: 0.5,
            max_epochs: 10,
            patience: 2,
            seed,
            ..ModelConfig::default()
        };
        ForecastModel::init(&cfg).unwrap()
    }

    fn random_batch(size: usize, seed: u64) -> Batch {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Batch {
            size,
            seq_len: WEEK,
            features: N_FEATURES,
            inputs: (0..size * WEEK * N_FEATURES).map(|_| rng.random::<f64>()).collect(),
            targets: (0..size * WEEK).map(|_| rng.random::<f64>()).collect(),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ForecastModel::init(&ModelConfig::reduced()).unwrap();
        let b = ForecastModel::init(&ModelConfig::reduced()).unwrap();
        let bits = |m: &ForecastModel| -> Vec<u64> { m.params().iter().flat_map(|t| t.data.iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&a), bits(&b));
        let c = ForecastModel::init(&ModelConfig { seed: 9, ..ModelConfig::reduced() }).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn zero_std_gives_zero_weights() {
        let m = ForecastModel::init(&ModelConfig { init_std: 0.0, ..ModelConfig::reduced() }).unwrap();
        assert!(m.lstm[0].w.data.iter().all(|v| *v == 0.0));
        assert!(m.output.w.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn default_parameter_count_matches_shapes() {
        // LSTM 7 -> 256: 4 gates of (256x7 + 256x256 + 256)
        let lstm = 4 * (256 * 7 + 256 * 256 + 256);
        // FC 256 -> 128 without bias, plus batch-norm scale and shift
        let fc = 128 * 256 + 2 * 128;
        let out = 128 + 1;
        let m = ForecastModel::init(&ModelConfig::default()).unwrap();
        assert_eq!(m.parameter_count(), lstm + fc + out);
        assert_eq!(m.parameter_count(), m.config.parameter_count());
        assert_eq!(lstm + fc + out, 303_489);
    }

    #[test]
    fn zero_network_predicts_zero() {
        let m = ForecastModel::init(&ModelConfig { init_std: 0.0, batch_norm: false, ..ModelConfig::reduced() }).unwrap();
        let p = m.predict(&random_batch(3, 1)).unwrap();
        assert_eq!(p.len(), 3 * WEEK);
        assert!(p.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_traced_scalar_network() {
        let cfg = ModelConfig {
            input_dim: 1,
            seq_len: 2,
            lstm_sizes: vec![1],
            fc_sizes: vec![1],
            batch_norm: false,
            max_epochs: 10,
            patience: 2,
            ..ModelConfig::default()
        };
        let mut m = ForecastModel::init(&cfg).unwrap();
        // gates (i, f, o, g)
        m.lstm[0].w.data = vec![0.5, -0.3, 0.8, 1.2];
        m.lstm[0].u.data = vec![0.1, 0.2, -0.4, 0.7];
        m.lstm[0].b.data = vec![0.0, 1.0, 0.1, -0.2];
        m.hidden[0].w.data = vec![2.0];
        m.hidden[0].b.as_mut().unwrap().data = vec![0.1];
        m.output.w.data = vec![-1.5];
        m.output.b.as_mut().unwrap().data = vec![0.3];
        let batch = Batch { size: 1, seq_len: 2, features: 1, inputs: vec![1.0, -2.0], targets: vec![0.0, 0.0] };

        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (mut h, mut c) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for x in [1.0f64, -2.0] {
            let i = s(0.5 * x + 0.1 * h);
            let f = s(-0.3 * x + 0.2 * h + 1.0);
            let o = s(0.8 * x - 0.4 * h + 0.1);
            let g = (1.2 * x + 0.7 * h - 0.2).tanh();
            c = f * c + i * g;
            h = o * c.tanh();
            let fc = (2.0 * h + 0.1).max(0.0);
            expected.push(-1.5 * fc + 0.3);
        }
        let p = m.predict(&batch).unwrap();
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn inference_is_batch_order_independent() {
        let m = tiny(true, 3);
        let b = random_batch(4, 5);
        let p = m.predict(&b).unwrap();
        let perm = [2usize, 0, 3, 1];
        let mut inputs = Vec::new();
        for &i in &perm {
            inputs.extend_from_slice(&b.inputs[i * WEEK * N_FEATURES..(i + 1) * WEEK * N_FEATURES]);
        }
        let pb = Batch { inputs, ..b.clone() };
        let q = m.predict(&pb).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(&q[k * WEEK..(k + 1) * WEEK], &p[i * WEEK..(i + 1) * WEEK]);
        }
    }

    #[test]
    fn train_and_inference_agree_without_batch_norm() {
        let m = tiny(false, 4);
        let b = random_batch(3, 6);
        assert_eq!(m.forward(&b, Mode::Train).unwrap().0, m.forward(&b, Mode::Inference).unwrap().0);
    }

    #[test]
    fn gradients_vanish_at_exact_fit() {
        for bn in [false, true] {
            let m = tiny(bn, 8);
            let mut b = random_batch(2, 9);
            let (p, cache) = m.forward(&b, Mode::Train).unwrap();
            b.targets = p;
            let g = m.backward(&cache, &b.targets).unwrap();
            assert_eq!(g.max_abs(), 0.0);
        }
    }

    #[test]
    fn duplicated_batch_gives_identical_gradients() {
        let m = tiny(false, 10);
        let b = random_batch(2, 11);
        let (_, c) = m.forward(&b, Mode::Train).unwrap();
        let g1 = m.backward(&c, &b.targets).unwrap();
        let doubled = Batch {
            size: 4,
            inputs: [b.inputs.clone(), b.inputs.clone()].concat(),
            targets: [b.targets.clone(), b.targets.clone()].concat(),
            ..b.clone()
        };
        let (_, c2) = m.forward(&doubled, Mode::Train).unwrap();
        let g2 = m.backward(&c2, &doubled.targets).unwrap();
        for (x, y) in g1.tensors.iter().flatten().zip(g2.tensors.iter().flatten()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut m = tiny(false, 12);
        let b = random_batch(2, 13);
        let (_, c) = m.forward(&b, Mode::Train).unwrap();
        let g = m.backward(&c, &b.targets).unwrap();
        m.apply_gradients(&g, 0.1);
        assert!(m.backward(&c, &b.targets).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = tiny(false, 14);
        let mut b = random_batch(2, 15);
        b.features = 6;
        assert!(matches!(m.forward(&b, Mode::Inference), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for bn in [false, true] {
            let m = tiny(bn, 21);
            let b = random_batch(2, 22);
            let worst = super::super::gradient_check(&m, &b, 1e-5).unwrap();
            assert!(worst <= 1e-4, "batch_norm={bn}: worst relative error {worst}");
        }
    }
}
