//! 3D features from multi-view renders: direct reconstruction to a point
//! cloud, and weighted-mean fusion into a voxel map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{backproject, CameraIntrinsics, Vec3};
use crate::synthworld::{CameraView, LabelEmbedding};

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("no views given")]
    NoViews,
    #[error("feature dimension mismatch: expected {expected}, view {view} has {found}")]
    DimensionMismatch { expected: usize, found: usize, view: usize },
    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("point cloud arrays disagree: {0}")]
    Malformed(String),
}

/// `N` points with `D`-dim features, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatureCloud {
    pub positions: Vec<Vec3>,
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub labels: Option<Vec<i32>>,
}

impl PointFeatureCloud {
    pub fn new(positions: Vec<Vec3>, features: Vec<f64>, feature_dim: usize, labels: Option<Vec<i32>>) -> Result<Self, ExtractError> {
        if features.len() != positions.len() * feature_dim {
            return Err(ExtractError::Malformed(format!(
                "{} positions but {} feature values for dim {feature_dim}",
                positions.len(),
                features.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(ExtractError::Malformed(format!("{} labels for {} points", l.len(), positions.len())));
            }
        }
        Ok(Self { positions, features, feature_dim, labels })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }
}

fn check_dims(views: &[CameraView]) -> Result<usize, ExtractError> {
    let first = views.first().ok_or(ExtractError::NoViews)?;
    let expected = first.feature_dim;
    for (i, v) in views.iter().enumerate() {
        if v.feature_dim != expected {
            return Err(ExtractError::DimensionMismatch { expected, found: v.feature_dim, view: i });
        }
    }
    Ok(expected)
}

/// Calls `f(world_point, pixel_index)` for every pixel with positive depth.
fn for_each_hit(view: &CameraView, mut f: impl FnMut(Vec3, usize)) {
    for row in 0..view.height {
        for col in 0..view.width {
            let idx = row * view.width + col;
            let d = view.depth[idx];
            if d <= 0.0 {
                continue;
            }
            let (u, v) = CameraIntrinsics::pixel_center(col as u32, row as u32);
            let p = backproject(u, v, d, &view.intr, &view.pose).expect("pixel center inside image with positive depth");
            f(p, idx);
        }
    }
}

/// One point per hit pixel, carrying that pixel's feature and semantic label.
pub fn direct_reconstruct(views: &[CameraView]) -> Result<PointFeatureCloud, ExtractError> {
    let dim = check_dims(views)?;
    let n: usize = views.iter().map(CameraView::hit_count).sum();
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for view in views {
        for_each_hit(view, |p, idx| {
            positions.push(p);
            features.extend_from_slice(view.feature_at(idx));
            labels.push(view.semantics[idx]);
        });
    }
    Ok(PointFeatureCloud { positions, features, feature_dim: dim, labels: Some(labels) })
}

/// Dense voxel map of fused features and colors.
///
/// Voxel `(i, j, k)` covers `origin + [i, i+1) * voxel_size` per axis. A voxel
/// with zero weight was never observed and holds zero feature and color.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedVoxelMap {
    pub origin: Vec3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub feature_dim: usize,
    pub feature: Vec<f64>,
    pub color: Vec<f64>,
    pub weight: Vec<f64>,
    /// Observations that fell outside the grid.
    pub dropped: usize,
}

/// JSON sidecar written next to voxel tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelSidecar {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
    #[serde(rename = "D_v")]
    pub d_v: usize,
    #[serde(rename = "N")]
    pub n: usize,
}

impl FusedVoxelMap {
    pub fn empty(origin: Vec3, voxel_size: f64, dims: [usize; 3], feature_dim: usize) -> Result<Self, ExtractError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(ExtractError::InvalidGrid(format!("voxel size {voxel_size}")));
        }
        if dims.iter().any(|d| *d == 0) {
            return Err(ExtractError::InvalidGrid(format!("dims {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(Self {
            origin,
            voxel_size,
            dims,
            feature_dim,
            feature: vec![0.0; n * feature_dim],
            color: vec![0.0; n * 3],
            weight: vec![0.0; n],
            dropped: 0,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.weight.len()
    }

    pub fn flat_index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn voxel_center(&self, [i, j, k]: [usize; 3]) -> Vec3 {
        self.origin + self.voxel_size * Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5)
    }

    pub fn feature(&self, flat: usize) -> &[f64] {
        &self.feature[flat * self.feature_dim..(flat + 1) * self.feature_dim]
    }

    /// Fused feature of the voxel containing `p`, if observed.
    pub fn sample(&self, p: &Vec3) -> Option<&[f64]> {
        let flat = self.flat_index(self.voxel_of(p)?);
        (self.weight[flat] > 0.0).then(|| self.feature(flat))
    }

    /// Add one observation with unit weight using the running weighted mean.
    pub fn integrate(&mut self, p: &Vec3, feature: &[f64], rgb: [f64; 3]) -> bool {
        let Some(v) = self.voxel_of(p) else {
            self.dropped += 1;
            return false;
        };
        const W_OBS: f64 = 1.0;
        let flat = self.flat_index(v);
        let w = self.weight[flat];
        let denom = w + W_OBS;
        let d = self.feature_dim;
        for (acc, f) in self.feature[flat * d..(flat + 1) * d].iter_mut().zip(feature) {
            *acc = (w * *acc + W_OBS * f) / denom;
        }
        for (acc, c) in self.color[flat * 3..flat * 3 + 3].iter_mut().zip(rgb) {
            *acc = (w * *acc + W_OBS * c) / denom;
        }
        self.weight[flat] = denom;
        true
    }

    /// Observed voxel centers as a point cloud.
    pub fn to_point_cloud(&self) -> PointFeatureCloud {
        let mut positions = Vec::new();
        let mut features = Vec::new();
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for k in 0..self.dims[2] {
                    let flat = self.flat_index([i, j, k]);
                    if self.weight[flat] > 0.0 {
                        positions.push(self.voxel_center([i, j, k]));
                        features.extend_from_slice(self.feature(flat));
                    }
                }
            }
        }
        PointFeatureCloud { positions, features, feature_dim: self.feature_dim, labels: None }
    }

    pub fn sidecar(&self) -> VoxelSidecar {
        VoxelSidecar {
            origin: self.origin.into(),
            voxel_size: self.voxel_size,
            dims: self.dims,
            d_v: self.feature_dim,
            n: self.weight.iter().filter(|w| **w > 0.0).count(),
        }
    }
}

/// Fuse every hit pixel of every view into a voxel map.
pub fn fuse(views: &[CameraView], origin: Vec3, voxel_size: f64, dims: [usize; 3]) -> Result<FusedVoxelMap, ExtractError> {
    let dim = check_dims(views)?;
    let mut map = FusedVoxelMap::empty(origin, voxel_size, dims, dim)?;
    for view in views {
        for_each_hit(view, |p, idx| {
            map.integrate(&p, view.feature_at(idx), view.rgb_at(idx));
        });
    }
    Ok(map)
}

/// Nearest label embedding by cosine similarity; -1 for zero-norm features.
pub fn classify_feature(feature: &[f64], embed: &LabelEmbedding) -> i32 {
    let norm = feature.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return -1;
    }
    let mut best = (-1i32, f64::NEG_INFINITY);
    for (id, v) in embed.vectors.iter().enumerate() {
        // Label vectors are unit norm.
        let cos = feature.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / norm;
        if cos > best.1 {
            best = (id as i32, cos);
        }
    }
    best.0
}

pub fn classify_points(cloud: &PointFeatureCloud, embed: &LabelEmbedding) -> Result<Vec<i32>, ExtractError> {
    if cloud.is_empty() {
        return Err(ExtractError::EmptyCloud);
    }
    if cloud.feature_dim != embed.dim() {
        return Err(ExtractError::DimensionMismatch { expected: embed.dim(), found: cloud.feature_dim, view: 0 });
    }
    Ok((0..cloud.len()).map(|i| classify_feature(cloud.feature(i), embed)).collect())
}
