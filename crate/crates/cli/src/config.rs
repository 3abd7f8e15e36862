//! Run configuration file. Every section and field is optional.

use std::path::{Path, PathBuf};

use lift3d::geometry::Aabb;
use lift3d::localize::{Combine, LocTokenConfig, PosEmbedConfig};
use lift3d::voxfield::{RaySampleConfig, TrainConfig};
use serde::Deserialize;

use crate::error::{CliError, CliResult};

pub const DEFAULT_ROOM: [f64; 6] = [-2.0, 0.0, -2.0, 2.0, 2.5, 2.0];

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSection,
    pub render: RenderSection,
    pub fuse: FuseSection,
    pub field: FieldSection,
    pub train: TrainConfig,
    pub ray: RaySampleConfig,
    pub pos_embed: PosEmbedSection,
    pub loc_tokens: LocTokenSection,
    pub datagen: DatagenSection,
    pub nav: NavSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub n_objects: usize,
    pub bounds: [f64; 6],
}

impl Default for SceneSection {
    fn default() -> Self {
        Self { n_objects: 3, bounds: DEFAULT_ROOM }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    /// Orbit radius; 1.5 x the half-diagonal of the scene bounds when absent.
    pub radius: Option<f64>,
    pub feature_dim: usize,
    pub embed_seed: u64,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self { views: 8, width: 128, height: 128, fov_deg: 60.0, radius: None, feature_dim: 16, embed_seed: 0 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseSection {
    /// Defaults to 1/64 of the smallest scene extent.
    pub voxel_size: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub nodes_per_axis: usize,
    pub raw_density: f64,
}

impl Default for FieldSection {
    fn default() -> Self {
        Self { nodes_per_axis: 16, raw_density: -2.0 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PosEmbedSection {
    /// Defaults to the input feature width.
    pub d_v: Option<usize>,
    pub scale_min: Option<f64>,
    pub scale_max: Option<f64>,
    pub combine: Option<Combine>,
}

impl PosEmbedSection {
    pub fn resolve(&self, feature_dim: usize) -> CliResult<PosEmbedConfig> {
        let mut cfg = PosEmbedConfig::new(self.d_v.unwrap_or(feature_dim)).map_err(CliError::validation)?;
        if let Some(v) = self.scale_min {
            cfg.scale_min = v;
        }
        if let Some(v) = self.scale_max {
            cfg.scale_max = v;
        }
        if let Some(c) = self.combine {
            cfg.combine = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocTokenSection {
    pub scene_bounds: Option<[f64; 6]>,
    pub bins: Option<u32>,
    pub base_vocab: Option<u32>,
}

impl LocTokenSection {
    /// `bounds` (from a scene file) wins over the configured bounds.
    pub fn resolve(&self, bounds: Option<Aabb>) -> CliResult<LocTokenConfig> {
        let bounds = match bounds {
            Some(b) => b,
            None => Aabb::from_flat(self.scene_bounds.unwrap_or(DEFAULT_ROOM))?,
        };
        let mut cfg = LocTokenConfig::with_defaults(bounds)?;
        if let Some(b) = self.bins {
            cfg.bins = b;
        }
        if let Some(v) = self.base_vocab {
            cfg.base_vocab = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenSection {
    pub demos: usize,
    pub max_rounds: usize,
    pub templates_dir: Option<PathBuf>,
    pub location_tokens: bool,
}

impl Default for DatagenSection {
    fn default() -> Self {
        Self { demos: 0, max_rounds: 6, templates_dir: None, location_tokens: false }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavSection {
    /// Defaults to 4 x the breadth-first distance to the target.
    pub max_steps: Option<usize>,
    pub observe_radius: usize,
    pub success_radius: f64,
    pub random_dims: [usize; 3],
    pub random_obstacle_prob: f64,
}

impl Default for NavSection {
    fn default() -> Self {
        Self {
            max_steps: None,
            observe_radius: lift3d::navsim::DEFAULT_OBSERVE_RADIUS,
            success_radius: lift3d::navsim::DEFAULT_SUCCESS_RADIUS,
            random_dims: [9, 3, 9],
            random_obstacle_prob: 0.2,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
    }
}
