//! Dense voxel field holding density, color and a feature vector per lattice
//! node, rendered by emission-absorption compositing and fit to multi-view
//! color + feature maps with an MSE loss.
//!
//! Node `(i, j, k)` sits at `origin + voxel_size * (i, j, k)`. Values between
//! nodes are trilinear; samples outside `[origin, origin + (dims - 1) * voxel_size]`
//! contribute nothing (zero density).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::PointFeatureCloud;
use crate::geometry::{CameraIntrinsics, Ray, Vec3};
use crate::synthworld::CameraView;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("grid needs at least 2 nodes per axis, got {0:?}")]
    GridTooSmall([usize; 3]),
    #[error("invalid voxel size {0}")]
    InvalidVoxelSize(f64),
    #[error("invalid ray sampling config: {0}")]
    InvalidRayConfig(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("no training rays: {0}")]
    NoData(String),
    #[error("feature dimension mismatch: grid has {grid}, data has {data}")]
    DimensionMismatch { grid: usize, data: usize },
    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelFeatureGrid {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub feature_dim: usize,
    /// Raw density per node; activated with softplus.
    pub density: Vec<f64>,
    /// 3 per node.
    pub color: Vec<f64>,
    /// `feature_dim` per node.
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    #[serde(rename = "D_v")]
    pub d_v: usize,
}

impl VoxelFeatureGrid {
    pub fn new(origin: Vec3, voxel_size: f64, dims: [usize; 3], feature_dim: usize, raw_density: f64) -> Result<Self, FieldError> {
        if dims.iter().any(|d| *d < 2) {
            return Err(FieldError::GridTooSmall(dims));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(FieldError::InvalidVoxelSize(voxel_size));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            origin,
            voxel_size,
            dims,
            feature_dim,
            density: vec![raw_density; n],
            color: vec![0.0; 3 * n],
            feature: vec![0.0; feature_dim * n],
        })
    }

    /// Grid whose lattice spans `bounds` exactly.
    pub fn spanning(bounds: &crate::geometry::Aabb, nodes_per_axis: usize, feature_dim: usize, raw_density: f64) -> Result<Self, FieldError> {
        if nodes_per_axis < 2 {
            return Err(FieldError::GridTooSmall([nodes_per_axis; 3]));
        }
        let size = bounds.extent().max() / (nodes_per_axis - 1) as f64;
        let dims = bounds.extent().map(|e| ((e / size).round() as usize + 1).max(2));
        Self::new(bounds.min, size, [dims.x, dims.y, dims.z], feature_dim, raw_density)
    }

    pub fn node_count(&self) -> usize {
        self.density.len()
    }

    pub fn flat(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn node_position(&self, flat: usize) -> Vec3 {
        let k = flat % self.dims[2];
        let j = (flat / self.dims[2]) % self.dims[1];
        let i = flat / (self.dims[1] * self.dims[2]);
        self.origin + self.voxel_size * Vec3::new(i as f64, j as f64, k as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.density.iter().chain(&self.color).chain(&self.feature).all(|x| x.is_finite())
    }

    pub fn sidecar(&self) -> GridSidecar {
        GridSidecar { origin: self.origin.into(), voxel_size: self.voxel_size, dims: self.dims, d_v: self.feature_dim }
    }

    /// The eight lattice corners around `p` and their trilinear weights.
    fn corners(&self, p: &Vec3) -> Option<[(usize, f64); 8]> {
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let x = (p[a] - self.origin[a]) / self.voxel_size;
            let last = (self.dims[a] - 1) as f64;
            if !(x >= 0.0 && x <= last) {
                return None;
            }
            let i = (x.floor() as usize).min(self.dims[a] - 2);
            base[a] = i;
            frac[a] = x - i as f64;
        }
        let mut out = [(0usize, 0f64); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let (di, dj, dk) = (c >> 2 & 1, c >> 1 & 1, c & 1);
            let w = (if di == 1 { frac[0] } else { 1.0 - frac[0] })
                * (if dj == 1 { frac[1] } else { 1.0 - frac[1] })
                * (if dk == 1 { frac[2] } else { 1.0 - frac[2] });
            *slot = (self.flat(base[0] + di, base[1] + dj, base[2] + dk), w);
        }
        Some(out)
    }

    /// Nodes whose activated density exceeds `threshold`, with their features.
    pub fn to_point_cloud(&self, threshold: f64) -> PointFeatureCloud {
        let d = self.feature_dim;
        let mut positions = Vec::new();
        let mut features = Vec::new();
        for n in 0..self.node_count() {
            if softplus(self.density[n]) > threshold {
                positions.push(self.node_position(n));
                features.extend_from_slice(&self.feature[n * d..(n + 1) * d]);
            }
        }
        PointFeatureCloud { positions, features, feature_dim: d, labels: None }
    }
}

/// Default threshold on `softplus(density)` used when sampling fitted fields to points.
pub const POINT_DENSITY_THRESHOLD: f64 = 1.0;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaySampleConfig {
    pub n_samples: usize,
    pub t_near: f64,
    pub t_far: f64,
}

impl RaySampleConfig {
    pub fn new(n_samples: usize, t_near: f64, t_far: f64) -> Result<Self, FieldError> {
        let cfg = Self { n_samples, t_near, t_far };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.n_samples < 2 {
            return Err(FieldError::InvalidRayConfig(format!("n_samples {} < 2", self.n_samples)));
        }
        if !(0.0 <= self.t_near && self.t_near < self.t_far && self.t_far.is_finite()) {
            return Err(FieldError::InvalidRayConfig(format!("need 0 <= t_near < t_far, got [{}, {}]", self.t_near, self.t_far)));
        }
        Ok(())
    }

    /// Uniform sample spacing; also the interval length of the last sample.
    pub fn delta(&self) -> f64 {
        (self.t_far - self.t_near) / (self.n_samples - 1) as f64
    }

    pub fn t(&self, i: usize) -> f64 {
        self.t_near + i as f64 * self.delta()
    }
}

impl Default for RaySampleConfig {
    fn default() -> Self {
        Self { n_samples: 48, t_near: 0.0, t_far: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub feature: Vec<f64>,
    pub opacity: f64,
}

/// Per-sample quantities kept for the backward pass.
struct SampleTrace {
    corners: Option<[(usize, f64); 8]>,
    raw: f64,
    alpha: f64,
    trans: f64,
    weight: f64,
    color: [f64; 3],
    feature: Vec<f64>,
}

fn trace_ray(grid: &VoxelFeatureGrid, ray: &Ray, cfg: &RaySampleConfig) -> (RenderOutput, Vec<SampleTrace>) {
    let d = grid.feature_dim;
    let delta = cfg.delta();
    let mut out = RenderOutput { color: [0.0; 3], feature: vec![0.0; d], opacity: 0.0 };
    let mut trans = 1.0;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let p = ray.at(cfg.t(i));
        let corners = grid.corners(&p);
        let mut raw = 0.0;
        let mut color = [0.0; 3];
        let mut feature = vec![0.0; d];
        let mut sigma = 0.0;
        if let Some(cs) = &corners {
            for &(n, w) in cs {
                raw += w * grid.density[n];
                for c in 0..3 {
                    color[c] += w * grid.color[3 * n + c];
                }
                for (f, g) in feature.iter_mut().zip(&grid.feature[n * d..(n + 1) * d]) {
                    *f += w * g;
                }
            }
            sigma = softplus(raw);
        }
        let alpha = 1.0 - (-sigma * delta).exp();
        let weight = trans * alpha;
        for c in 0..3 {
            out.color[c] += weight * color[c];
        }
        for (o, f) in out.feature.iter_mut().zip(&feature) {
            *o += weight * f;
        }
        out.opacity += weight;
        samples.push(SampleTrace { corners, raw, alpha, trans, weight, color, feature });
        trans *= 1.0 - alpha;
    }
    (out, samples)
}

/// Composite color, feature and opacity along one ray.
pub fn render_ray(grid: &VoxelFeatureGrid, ray: &Ray, cfg: &RaySampleConfig) -> RenderOutput {
    trace_ray(grid, ray, cfg).0
}

/// Per-ray supervision: pixel color, pixel feature and whether the pixel hit geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RayTarget {
    pub rgb: [f64; 3],
    pub feature: Vec<f64>,
    pub hit: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub feature: f64,
    pub opacity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { feature: 1.0, opacity: 0.01 }
    }
}

fn ray_loss(out: &RenderOutput, target: &RayTarget, lw: &LossWeights) -> f64 {
    let c: f64 = (0..3).map(|i| (out.color[i] - target.rgb[i]).powi(2)).sum();
    let f: f64 = out.feature.iter().zip(&target.feature).map(|(a, b)| (a - b).powi(2)).sum();
    c + lw.feature * f + lw.opacity * (out.opacity - target.hit).powi(2)
}

/// Mean over rays of `|C - C*|^2 + w_f |F - F*|^2 + w_o (O - hit)^2`.
pub fn loss(grid: &VoxelFeatureGrid, rays: &[Ray], targets: &[RayTarget], cfg: &RaySampleConfig, lw: &LossWeights) -> f64 {
    assert_eq!(rays.len(), targets.len(), "one target per ray");
    assert!(!rays.is_empty(), "loss needs at least one ray");
    let total: f64 = rays.iter().zip(targets).map(|(r, t)| ray_loss(&render_ray(grid, r, cfg), t, lw)).sum();
    total / rays.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridGradients {
    pub density: Vec<f64>,
    pub color: Vec<f64>,
    pub feature: Vec<f64>,
}

impl GridGradients {
    pub fn zeros_like(grid: &VoxelFeatureGrid) -> Self {
        Self { density: vec![0.0; grid.density.len()], color: vec![0.0; grid.color.len()], feature: vec![0.0; grid.feature.len()] }
    }
}

/// Loss and its exact gradient w.r.t. every grid parameter. Rays are reduced
/// in input order, so results are reproducible bit for bit.
pub fn gradients(
    grid: &VoxelFeatureGrid,
    rays: &[Ray],
    targets: &[RayTarget],
    cfg: &RaySampleConfig,
    lw: &LossWeights,
) -> (f64, GridGradients) {
    assert_eq!(rays.len(), targets.len(), "one target per ray");
    assert!(!rays.is_empty(), "gradients need at least one ray");
    let d = grid.feature_dim;
    let scale = 1.0 / rays.len() as f64;
    let delta = cfg.delta();
    let mut grads = GridGradients::zeros_like(grid);
    let mut total = 0.0;
    let mut g_w = vec![0.0; cfg.n_samples];
    for (ray, target) in rays.iter().zip(targets) {
        let (out, samples) = trace_ray(grid, ray, cfg);
        total += ray_loss(&out, target, lw);
        let g_color: [f64; 3] = std::array::from_fn(|c| 2.0 * scale * (out.color[c] - target.rgb[c]));
        let g_feat: Vec<f64> = out.feature.iter().zip(&target.feature).map(|(a, b)| 2.0 * scale * lw.feature * (a - b)).collect();
        let g_opacity = 2.0 * scale * lw.opacity * (out.opacity - target.hit);

        for (g, s) in g_w.iter_mut().zip(&samples) {
            *g = g_opacity
                + (0..3).map(|c| g_color[c] * s.color[c]).sum::<f64>()
                + g_feat.iter().zip(&s.feature).map(|(a, b)| a * b).sum::<f64>();
        }
        // d loss / d sigma_k = delta * (T_{k+1} g_k - sum_{i>k} g_i w_i)
        let mut suffix = 0.0;
        for k in (0..samples.len()).rev() {
            let s = &samples[k];
            let Some(corners) = &s.corners else {
                suffix += g_w[k] * s.weight;
                continue;
            };
            let trans_next = s.trans * (1.0 - s.alpha);
            let g_sigma = delta * (trans_next * g_w[k] - suffix);
            let g_raw = g_sigma * sigmoid(s.raw);
            for &(n, w) in corners {
                grads.density[n] += w * g_raw;
                let ww = w * s.weight;
                for c in 0..3 {
                    grads.color[3 * n + c] += ww * g_color[c];
                }
                for (g, gf) in grads.feature[n * d..(n + 1) * d].iter_mut().zip(&g_feat) {
                    *g += ww * gf;
                }
            }
            suffix += g_w[k] * s.weight;
        }
    }
    (total * scale, grads)
}

/// AdamW with linear warmup then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_start_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_rays: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            warmup_start_lr: 1e-8,
            warmup_steps: 1000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.05,
            steps: 3000,
            batch_rays: 256,
            seed: 0,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let bad = |m: &str| Err(FieldError::InvalidTrainConfig(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.warmup_start_lr >= 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("epsilon must be positive and weight decay non-negative");
        }
        if self.batch_rays == 0 {
            return bad("batch_rays must be positive");
        }
        if !(self.loss_weights.feature >= 0.0 && self.loss_weights.opacity >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    /// Learning rate used at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.warmup_start_lr + (self.learning_rate - self.warmup_start_lr) * frac;
        }
        let decay_steps = self.steps.saturating_sub(self.warmup_steps);
        if decay_steps == 0 {
            return self.learning_rate;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Every pixel of every view as a supervised ray.
pub fn rays_from_views(views: &[CameraView]) -> (Vec<Ray>, Vec<RayTarget>) {
    let mut rays = Vec::new();
    let mut targets = Vec::new();
    for view in views {
        for row in 0..view.height {
            for col in 0..view.width {
                let idx = row * view.width + col;
                let (u, v) = CameraIntrinsics::pixel_center(col as u32, row as u32);
                rays.push(Ray::through_pixel(u, v, &view.intr, &view.pose));
                targets.push(RayTarget {
                    rgb: view.rgb_at(idx),
                    feature: view.feature_at(idx).to_vec(),
                    hit: if view.depth[idx] > 0.0 { 1.0 } else { 0.0 },
                });
            }
        }
    }
    (rays, targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// `(step, minibatch loss before the update at that step)`.
    pub trace: Vec<(usize, f64)>,
    /// Loss on the fixed evaluation batch before training.
    pub initial_loss: f64,
    /// Loss on the same evaluation batch after training.
    pub final_loss: f64,
}

impl FitReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, l) in &self.trace {
            s.push_str(&format!("{step},{l}\n"));
        }
        s
    }
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig, lr: f64, t: i32) {
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.epsilon);
            *p -= lr * (update + cfg.weight_decay * *p);
        }
    }
}

/// Fit the grid to the views. Minibatches are drawn with replacement from
/// all pixels using `cfg.seed`.
pub fn fit(grid: &mut VoxelFeatureGrid, views: &[CameraView], cfg: &TrainConfig, ray_cfg: &RaySampleConfig) -> Result<FitReport, FieldError> {
    cfg.validate()?;
    ray_cfg.validate()?;
    if views.is_empty() {
        return Err(FieldError::NoData("no views".into()));
    }
    if let Some(v) = views.iter().find(|v| v.feature_dim != grid.feature_dim) {
        return Err(FieldError::DimensionMismatch { grid: grid.feature_dim, data: v.feature_dim });
    }
    let (rays, targets) = rays_from_views(views);
    if rays.is_empty() {
        return Err(FieldError::NoData("views contain no pixels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval_idx: Vec<usize> = (0..cfg.batch_rays.max(1024).min(rays.len())).map(|_| rng.random_range(0..rays.len())).collect();
    let eval_rays: Vec<Ray> = eval_idx.iter().map(|&i| rays[i]).collect();
    let eval_targets: Vec<RayTarget> = eval_idx.iter().map(|&i| targets[i].clone()).collect();
    let lw = cfg.loss_weights;
    let initial_loss = loss(grid, &eval_rays, &eval_targets, ray_cfg, &lw);
    if cfg.steps == 0 {
        return Ok(FitReport { trace: Vec::new(), initial_loss, final_loss: initial_loss });
    }

    let mut adam_density = AdamState::new(grid.density.len());
    let mut adam_color = AdamState::new(grid.color.len());
    let mut adam_feature = AdamState::new(grid.feature.len());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut batch_rays = Vec::with_capacity(cfg.batch_rays);
    let mut batch_targets = Vec::with_capacity(cfg.batch_rays);
    for step in 0..cfg.steps {
        batch_rays.clear();
        batch_targets.clear();
        for _ in 0..cfg.batch_rays {
            let i = rng.random_range(0..rays.len());
            batch_rays.push(rays[i]);
            batch_targets.push(targets[i].clone());
        }
        let (l, g) = gradients(grid, &batch_rays, &batch_targets, ray_cfg, &lw);
        if !l.is_finite() {
            return Err(FieldError::Divergence { step });
        }
        trace.push((step, l));
        let lr = cfg.lr_at(step);
        let t = step as i32 + 1;
        adam_density.step(&mut grid.density, &g.density, cfg, lr, t);
        adam_color.step(&mut grid.color, &g.color, cfg, lr, t);
        adam_feature.step(&mut grid.feature, &g.feature, cfg, lr, t);
        if !grid.is_finite() {
            return Err(FieldError::Divergence { step });
        }
    }
    let final_loss = loss(grid, &eval_rays, &eval_targets, ray_cfg, &lw);
    if !final_loss.is_finite() {
        return Err(FieldError::Divergence { step: cfg.steps });
    }
    Ok(FitReport { trace, initial_loss, final_loss })
}
