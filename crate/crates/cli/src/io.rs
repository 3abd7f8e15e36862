//! File layouts shared by the subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use lift3d::extractor::PointFeatureCloud;
use lift3d::geometry::{Aabb, CameraIntrinsics, CameraPose, Vec3};
use lift3d::synthworld::{CameraView, LabelEmbedding};
use lift3d::tensorfile::Tensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CAMERAS_FILE: &str = "cameras.json";
pub const EMBEDDING_FILE: &str = "embedding.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIDECAR_FILE: &str = "sidecar.json";
pub const POSITIONS_FILE: &str = "positions.f3dt";
pub const FEATURES_FILE: &str = "features.f3dt";
pub const LABELS_FILE: &str = "labels.f3dt";

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &(text + "\n"))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn save_tensor(path: &Path, dims: &[usize], data: &[f64]) -> CliResult<()> {
    let t = Tensor::from_f64(dims.iter().map(|d| *d as u64).collect(), data)?;
    Ok(t.save(path)?)
}

/// Loads a tensor and checks its rank.
pub fn load_tensor(path: &Path, rank: usize) -> CliResult<Tensor> {
    let t = Tensor::load(path)?;
    if t.rank() != rank {
        return Err(CliError::validation(format!("{}: expected rank {rank}, got dims {:?}", path.display(), t.dims)));
    }
    Ok(t)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CamerasFile {
    pub scene_bounds: Aabb,
    pub feature_dim: usize,
    pub views: Vec<CameraEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub dims: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderManifest {
    pub scene_seed: u64,
    pub views: usize,
    pub hit_pixels: Vec<usize>,
    pub files: Vec<ManifestEntry>,
}

fn view_file(dir: &Path, i: usize, kind: &str) -> PathBuf {
    dir.join(format!("view_{i:03}_{kind}.f3dt"))
}

/// Writes the four tensors of every view plus cameras, embedding and manifest.
pub fn save_views(dir: &Path, scene_bounds: Aabb, scene_seed: u64, views: &[CameraView], embed: &LabelEmbedding) -> CliResult<RenderManifest> {
    create_dir(dir)?;
    let mut files = Vec::new();
    let mut record = |path: PathBuf, dims: Vec<usize>, data: Vec<f64>| -> CliResult<()> {
        save_tensor(&path, &dims, &data)?;
        let file = path.file_name().expect("view file has a name").to_string_lossy().into_owned();
        files.push(ManifestEntry { file, dims, sha256: sha256_file(&path)? });
        Ok(())
    };
    for (i, v) in views.iter().enumerate() {
        let (h, w) = (v.height, v.width);
        record(view_file(dir, i, "rgb"), vec![h, w, 3], v.rgb.clone())?;
        record(view_file(dir, i, "depth"), vec![h, w], v.depth.clone())?;
        record(view_file(dir, i, "features"), vec![h, w, v.feature_dim], v.features.clone())?;
        record(view_file(dir, i, "semantics"), vec![h, w], v.semantics.iter().map(|s| f64::from(*s)).collect())?;
    }
    let cameras = CamerasFile {
        scene_bounds,
        feature_dim: embed.dim(),
        views: views.iter().map(|v| CameraEntry { intrinsics: v.intr, pose: v.pose }).collect(),
    };
    write_json(&dir.join(CAMERAS_FILE), &cameras)?;
    write_json(&dir.join(EMBEDDING_FILE), embed)?;
    let manifest = RenderManifest { scene_seed, views: views.len(), hit_pixels: views.iter().map(CameraView::hit_count).collect(), files };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub struct LoadedViews {
    pub cameras: CamerasFile,
    pub views: Vec<CameraView>,
}

pub fn load_views(dir: &Path) -> CliResult<LoadedViews> {
    let cameras: CamerasFile = read_json(&dir.join(CAMERAS_FILE))?;
    if cameras.views.is_empty() {
        return Err(CliError::validation(format!("{}: no views", dir.display())));
    }
    let mut views = Vec::with_capacity(cameras.views.len());
    for (i, cam) in cameras.views.iter().enumerate() {
        let (w, h) = (cam.intrinsics.width as usize, cam.intrinsics.height as usize);
        let d = cameras.feature_dim;
        let load = |kind: &str, want: Vec<u64>| -> CliResult<Vec<f64>> {
            let path = view_file(dir, i, kind);
            let t = load_tensor(&path, want.len())?;
            if t.dims != want {
                return Err(CliError::validation(format!("{}: expected dims {want:?}, got {:?}", path.display(), t.dims)));
            }
            Ok(t.to_f64())
        };
        let (hu, wu) = (h as u64, w as u64);
        views.push(CameraView {
            width: w,
            height: h,
            feature_dim: d,
            rgb: load("rgb", vec![hu, wu, 3])?,
            depth: load("depth", vec![hu, wu])?,
            features: load("features", vec![hu, wu, d as u64])?,
            semantics: load("semantics", vec![hu, wu])?.iter().map(|s| *s as i32).collect(),
            intr: cam.intrinsics,
            pose: cam.pose,
        });
    }
    Ok(LoadedViews { cameras, views })
}

/// `positions.f3dt` (N x 3), `features.f3dt` (N x D), optional `labels.f3dt` (N).
pub fn save_cloud(dir: &Path, cloud: &PointFeatureCloud) -> CliResult<()> {
    create_dir(dir)?;
    let n = cloud.len();
    let pos: Vec<f64> = cloud.positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    save_tensor(&dir.join(POSITIONS_FILE), &[n, 3], &pos)?;
    save_tensor(&dir.join(FEATURES_FILE), &[n, cloud.feature_dim], &cloud.features)?;
    if let Some(labels) = &cloud.labels {
        let l: Vec<f64> = labels.iter().map(|v| f64::from(*v)).collect();
        save_tensor(&dir.join(LABELS_FILE), &[n], &l)?;
    }
    Ok(())
}

pub fn load_cloud(dir: &Path) -> CliResult<PointFeatureCloud> {
    let pos = load_tensor(&dir.join(POSITIONS_FILE), 2)?;
    let feat = load_tensor(&dir.join(FEATURES_FILE), 2)?;
    if pos.dims[1] != 3 || pos.dims[0] != feat.dims[0] {
        return Err(CliError::validation(format!("{}: positions {:?} and features {:?} disagree", dir.display(), pos.dims, feat.dims)));
    }
    let positions = pos.to_f64().chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    Ok(PointFeatureCloud::new(positions, feat.to_f64(), feat.dims[1] as usize, None)?)
}

/// Reads a JSON Lines file, reporting the 1-based line of the first bad row.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| CliError::validation(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(row);
    }
    Ok(out)
}

/// Scene files in `dir` (`*.json`), sorted by file name.
pub fn scene_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(CliError::validation(format!("{}: no scene files", dir.display())));
    }
    Ok(files)
}
