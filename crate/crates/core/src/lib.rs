//! Non-language-model substrate for 3D-grounded language models: multi-view
//! 3D feature construction, location tokens and position embeddings, a
//! latent-bottleneck resampler, 3D-language data generation, evaluation
//! metrics and an object-navigation loop.

pub mod geometry;
pub mod synthworld;
pub mod extractor;
pub mod voxfield;
pub mod localize;
pub mod resampler;
pub mod evalmetrics;
pub mod navsim;
pub mod datagen;
pub mod tensorfile;

pub use datagen::{LanguageRecord, LlmClient, Task};
pub use evalmetrics::MetricReport;
pub use extractor::{FusedVoxelMap, PointFeatureCloud};
pub use geometry::{Aabb, CameraIntrinsics, CameraPose, Vec3};
pub use localize::{LocTokenConfig, PosEmbedConfig};
pub use synthworld::{CameraView, LabelEmbedding, Scene};
pub use tensorfile::Tensor;
pub use voxfield::{RaySampleConfig, TrainConfig, VoxelFeatureGrid};
