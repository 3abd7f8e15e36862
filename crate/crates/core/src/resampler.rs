//! Latent-bottleneck resampler: a fixed array of learned latents cross-attends
//! to a variable number of point features and returns a fixed `K x D` output.
//!
//! Each layer is pre-norm single-head cross-attention followed by a pre-norm
//! GELU MLP, both residual. Layer norms carry no affine parameters. Matrices
//! act on row vectors (`x W`).

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum ResamplerError {
    #[error("input has no rows")]
    EmptyInput,
    #[error("input contains non-finite values")]
    InvalidInput,
    #[error("input width {found} does not match expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid resampler config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },
    #[error("checkpoint tensor {name:?}: {reason}")]
    Checkpoint { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResamplerConfig {
    #[serde(rename = "K")]
    pub n_latents: usize,
    #[serde(rename = "D")]
    pub d_model: usize,
    #[serde(rename = "L")]
    pub n_layers: usize,
    /// Width of incoming point features; a projection is added when it differs from `D`.
    pub d_in: usize,
    pub seed: u64,
}

impl ResamplerConfig {
    pub fn new(d_in: usize, d_model: usize) -> Self {
        Self { n_latents: 32, d_model, n_layers: 2, d_in, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), ResamplerError> {
        if self.n_latents == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_in == 0 {
            return Err(ResamplerError::InvalidConfig(format!("all sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerParams {
    pub config: ResamplerConfig,
    pub input_proj: Option<Array2<f64>>,
    pub latents: Array2<f64>,
    pub layers: Vec<Layer>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

impl ResamplerParams {
    pub fn init(config: ResamplerConfig) -> Result<Self, ResamplerError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let input_proj = (config.d_in != d).then(|| gaussian(&mut rng, config.d_in, d));
        let latents = gaussian(&mut rng, config.n_latents, d);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                wq: gaussian(&mut rng, d, d),
                wk: gaussian(&mut rng, d, d),
                wv: gaussian(&mut rng, d, d),
                wo: gaussian(&mut rng, d, d),
                w1: gaussian(&mut rng, d, 4 * d),
                b1: Array1::zeros(4 * d),
                w2: gaussian(&mut rng, 4 * d, d),
                b2: Array1::zeros(d),
            })
            .collect();
        Ok(Self { config, input_proj, latents, layers })
    }

    /// Zero-valued parameters of the same shapes; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            config: self.config,
            input_proj: self.input_proj.as_ref().map(z2),
            latents: z2(&self.latents),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    wq: z2(&l.wq),
                    wk: z2(&l.wk),
                    wv: z2(&l.wv),
                    wo: z2(&l.wo),
                    w1: z2(&l.w1),
                    b1: Array1::zeros(l.b1.len()),
                    w2: z2(&l.w2),
                    b2: Array1::zeros(l.b2.len()),
                })
                .collect(),
        }
    }

    /// Named parameter tensors in a fixed order, as `(name, shape, values)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        let mut push2 = |name: String, a: &Array2<f64>| out.push((name, a.shape().to_vec(), a.iter().copied().collect()));
        if let Some(p) = &self.input_proj {
            push2("input_proj".into(), p);
        }
        push2("latents".into(), &self.latents);
        for (i, l) in self.layers.iter().enumerate() {
            for (n, a) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo), ("w1", &l.w1), ("w2", &l.w2)] {
                push2(format!("layer{i}.{n}"), a);
            }
            for (n, b) in [("b1", &l.b1), ("b2", &l.b2)] {
                let m = b.view().insert_axis(Axis(0)).to_owned();
                push2(format!("layer{i}.{n}"), &m);
            }
        }
        out
    }

    /// Inverse of [`tensors`](Self::tensors).
    pub fn from_tensors(config: ResamplerConfig, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self, ResamplerError> {
        let mut params = Self::init(config)?;
        let expected = params.tensors();
        if expected.len() != tensors.len() {
            return Err(ResamplerError::Checkpoint { name: "*".into(), reason: format!("expected {} tensors, got {}", expected.len(), tensors.len()) });
        }
        for ((name, shape, _), (got_name, got_shape, _)) in expected.iter().zip(tensors) {
            if name != got_name || shape != got_shape {
                return Err(ResamplerError::Checkpoint { name: got_name.clone(), reason: format!("expected {name} with shape {shape:?}, got {got_shape:?}") });
            }
        }
        let mut values = tensors.iter().map(|(_, _, v)| v.as_slice());
        params.for_each_param_mut(|p| {
            let v = values.next().expect("tensor count checked");
            p.iter_mut().zip(v).for_each(|(a, b)| *a = *b);
        });
        Ok(params)
    }

    /// Visit every parameter array in [`tensors`](Self::tensors) order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        if let Some(p) = &mut self.input_proj {
            f(p.as_slice_mut().expect("standard layout"));
        }
        f(self.latents.as_slice_mut().expect("standard layout"));
        for l in &mut self.layers {
            for a in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                f(a.as_slice_mut().expect("standard layout"));
            }
            f(l.b1.as_slice_mut().expect("standard layout"));
            f(l.b2.as_slice_mut().expect("standard layout"));
        }
    }

    pub fn for_each_param_pair(&mut self, other: &Self, mut f: impl FnMut(&mut [f64], &[f64])) {
        let mut theirs: Vec<Vec<f64>> = Vec::new();
        other.clone().for_each_param_mut(|p| theirs.push(p.to_vec()));
        let mut it = theirs.iter();
        self.for_each_param_mut(|p| f(p, it.next().expect("same structure")));
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerOutput {
    pub values: Array2<f64>,
    /// One `K x N` row-stochastic matrix per layer.
    pub attention: Vec<Array2<f64>>,
}

/// Layer norm over each row; returns normalized rows and the per-row inverse std.
fn layer_norm(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut y = x.clone();
    let mut inv = Array1::zeros(x.nrows());
    for (mut row, is) in y.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *is);
    }
    (y, inv)
}

fn layer_norm_backward(y: &Array2<f64>, inv_std: &Array1<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let d = y.ncols() as f64;
    let mut dx = Array2::zeros(y.raw_dim());
    for (((mut out, yr), dyr), is) in dx.rows_mut().into_iter().zip(y.rows()).zip(dy.rows()).zip(inv_std) {
        let mean_dy = dyr.sum() / d;
        let mean_dyy = dyr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((o, &yv), &g) in out.iter_mut().zip(yr).zip(dyr) {
            *o = is * (g - mean_dy - yv * mean_dyy);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &Array2<f64>) -> Array2<f64> {
    let mut a = s.clone();
    for mut row in a.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    a
}

struct LayerCache {
    z_in: Array2<f64>,
    lq: Array2<f64>,
    lq_inv: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    o: Array2<f64>,
    m: Array2<f64>,
    m_inv: Array1<f64>,
    h: Array2<f64>,
    g: Array2<f64>,
}

struct ForwardCache {
    xn: Array2<f64>,
    xn_inv: Array1<f64>,
    layers: Vec<LayerCache>,
    out: Array2<f64>,
}

fn check_inputs(params: &ResamplerParams, inputs: ArrayView2<f64>) -> Result<(), ResamplerError> {
    if inputs.nrows() == 0 {
        return Err(ResamplerError::EmptyInput);
    }
    if inputs.ncols() != params.config.d_in {
        return Err(ResamplerError::DimensionMismatch { expected: params.config.d_in, found: inputs.ncols() });
    }
    if !inputs.iter().all(|v| v.is_finite()) {
        return Err(ResamplerError::InvalidInput);
    }
    Ok(())
}

fn forward_cached(params: &ResamplerParams, inputs: ArrayView2<f64>) -> Result<ForwardCache, ResamplerError> {
    check_inputs(params, inputs)?;
    let x = match &params.input_proj {
        Some(p) => inputs.dot(p),
        None => inputs.to_owned(),
    };
    let (xn, xn_inv) = layer_norm(&x);
    let scale = 1.0 / (params.config.d_model as f64).sqrt();
    let mut z = params.latents.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (lq, lq_inv) = layer_norm(&z);
        let q = lq.dot(&layer.wq);
        let k = xn.dot(&layer.wk);
        let v = xn.dot(&layer.wv);
        let attn = softmax_rows(&(q.dot(&k.t()) * scale));
        let o = attn.dot(&v);
        let z1 = &z + &o.dot(&layer.wo);
        let (m, m_inv) = layer_norm(&z1);
        let h = m.dot(&layer.w1) + &layer.b1;
        let g = h.mapv(gelu);
        let z2 = &z1 + &(g.dot(&layer.w2) + &layer.b2);
        caches.push(LayerCache { z_in: z, lq, lq_inv, q, k, v, attn, o, m, m_inv, h, g });
        z = z2;
    }
    Ok(ForwardCache { xn, xn_inv, layers: caches, out: z })
}

pub fn forward(params: &ResamplerParams, inputs: ArrayView2<f64>) -> Result<ResamplerOutput, ResamplerError> {
    let cache = forward_cached(params, inputs)?;
    Ok(ResamplerOutput { attention: cache.layers.into_iter().map(|l| l.attn).collect(), values: cache.out })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerGradients {
    pub params: ResamplerParams,
    pub inputs: Array2<f64>,
}

/// Reverse-mode gradients of `sum(upstream * forward(inputs))`.
pub fn backward(params: &ResamplerParams, inputs: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<ResamplerGradients, ResamplerError> {
    let cache = forward_cached(params, inputs)?;
    let (kk, d) = (params.config.n_latents, params.config.d_model);
    if upstream.dim() != (kk, d) {
        return Err(ResamplerError::DimensionMismatch { expected: kk * d, found: upstream.len() });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut grads = params.zeros_like();
    let mut dz = upstream.to_owned();
    let mut dxn = Array2::<f64>::zeros(cache.xn.raw_dim());
    for (li, (layer, c)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut grads.layers[li];
        // MLP sublayer: z2 = z1 + gelu(ln(z1) W1 + b1) W2 + b2
        gl.b2 = dz.sum_axis(Axis(0));
        gl.w2 = c.g.t().dot(&dz);
        let dg = dz.dot(&layer.w2.t());
        let dh = &dg * &c.h.mapv(gelu_grad);
        gl.b1 = dh.sum_axis(Axis(0));
        gl.w1 = c.m.t().dot(&dh);
        let dm = dh.dot(&layer.w1.t());
        let dz1 = &dz + &layer_norm_backward(&c.m, &c.m_inv, &dm);

        // Attention sublayer: z1 = z + softmax(q k^T * scale) v Wo
        gl.wo = c.o.t().dot(&dz1);
        let d_o = dz1.dot(&layer.wo.t());
        let d_attn = d_o.dot(&c.v.t());
        let dv = c.attn.t().dot(&d_o);
        let mut ds = Array2::zeros(c.attn.raw_dim());
        for ((mut out, a), da) in ds.rows_mut().into_iter().zip(c.attn.rows()).zip(d_attn.rows()) {
            let dot = a.iter().zip(da).map(|(x, y)| x * y).sum::<f64>();
            for ((o, &av), &dav) in out.iter_mut().zip(a).zip(da) {
                *o = av * (dav - dot) * scale;
            }
        }
        let dq = ds.dot(&c.k);
        let dk = ds.t().dot(&c.q);
        gl.wq = c.lq.t().dot(&dq);
        gl.wk = cache.xn.t().dot(&dk);
        gl.wv = cache.xn.t().dot(&dv);
        dxn = dxn + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        let dlq = dq.dot(&layer.wq.t());
        dz = dz1 + layer_norm_backward(&c.lq, &c.lq_inv, &dlq);
        debug_assert_eq!(c.z_in.dim(), dz.dim());
    }
    grads.latents = dz;
    let dx = layer_norm_backward(&cache.xn, &cache.xn_inv, &dxn);
    let d_inputs = match &params.input_proj {
        Some(p) => {
            grads.input_proj = Some(inputs.t().dot(&dx));
            dx.dot(&p.t())
        }
        None => dx,
    };
    Ok(ResamplerGradients { params: grads, inputs: d_inputs })
}

/// One training example: `N x d_in` inputs and a `K x D` target.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub inputs: Array2<f64>,
    pub target: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Minibatch loss before each update.
    pub trace: Vec<f64>,
    /// Full-dataset loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Mean squared error over all output entries, averaged over examples.
pub fn probe_loss(params: &ResamplerParams, data: &[ProbeExample]) -> Result<f64, ResamplerError> {
    if data.is_empty() {
        return Err(ResamplerError::EmptyDataset);
    }
    let mut total = 0.0;
    for ex in data {
        let out = forward(params, ex.inputs.view())?.values;
        total += (&out - &ex.target).mapv(|v| v * v).mean().expect("non-empty output");
    }
    Ok(total / data.len() as f64)
}

/// Plain minibatch gradient descent on MSE. Minibatches of up to 8 examples
/// are drawn by shuffling with `seed`.
pub fn train_probe(
    params: &ResamplerParams,
    data: &[ProbeExample],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<(ResamplerParams, ProbeReport), ResamplerError> {
    if data.is_empty() {
        return Err(ResamplerError::EmptyDataset);
    }
    let mut params = params.clone();
    let initial_loss = probe_loss(&params, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = data.len().min(8);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut acc = params.zeros_like();
        let mut loss = 0.0;
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let ex = &data[order[cursor]];
            cursor += 1;
            let out = forward(&params, ex.inputs.view())?.values;
            let diff = &out - &ex.target;
            let n = diff.len() as f64;
            loss += diff.mapv(|v| v * v).sum() / n;
            let upstream = diff.mapv(|v| 2.0 * v / (n * batch as f64));
            let g = backward(&params, ex.inputs.view(), upstream.view())?;
            acc.for_each_param_pair(&g.params, |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y));
        }
        loss /= batch as f64;
        if !loss.is_finite() {
            return Err(ResamplerError::Divergence { step });
        }
        trace.push(loss);
        params.for_each_param_pair(&acc, |p, g| p.iter_mut().zip(g).for_each(|(x, y)| *x -= lr * y));
    }
    let final_loss = probe_loss(&params, data)?;
    if !final_loss.is_finite() {
        return Err(ResamplerError::Divergence { step: steps });
    }
    Ok((params, ProbeReport { trace, initial_loss, final_loss }))
}

/// Synthetic probe task: each input row is standardized (zero mean, unit
/// variance), and every target row is the mean input row times a fixed matrix.
pub fn mean_projection_task(config: &ResamplerConfig, n_examples: usize, n_points: usize, seed: u64) -> Vec<ProbeExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_in, d) = (config.d_in, config.d_model);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let proj = Array2::from_shape_simple_fn((d_in, d), || normal.sample(&mut rng) / (d_in as f64).sqrt());
    (0..n_examples)
        .map(|_| {
            let n = rng.random_range(1..=n_points);
            let raw = Array2::from_shape_simple_fn((n, d_in), || normal.sample(&mut rng));
            let (inputs, _) = layer_norm(&raw);
            let mean = inputs.mean_axis(Axis(0)).expect("n >= 1");
            let row = mean.dot(&proj);
            let target = Array2::from_shape_fn((config.n_latents, d), |(_, j)| row[j]);
            ProbeExample { inputs, target }
        })
        .collect()
}

/// Rows `r` of `a` gathered in the order given by `perm`.
pub fn permute_rows(a: ArrayView2<f64>, perm: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros(a.raw_dim());
    for (dst, &src) in perm.iter().enumerate() {
        out.slice_mut(s![dst, ..]).assign(&a.row(src));
    }
    out
}
