use std::path::Path;

use lift3d::datagen::{
    attach_location_tokens, parse_records_jsonl, records_to_jsonl, revise, run_box_batch, run_chat_captioner, scene_id,
    split_dataset, DeterministicMock, InstructionSet, LabelReadingVqa, LabelValidator, LanguageRecord, LlmClient,
    PipelineReport, RemoteClient, Task,
};
use lift3d::evalmetrics::{evaluate, grounding_metrics, EvalItem, EvalOptions, GroundingItem, DEFAULT_IOU_THRESHOLD};
use lift3d::extractor::{direct_reconstruct, fuse};
use lift3d::geometry::{Aabb, CameraIntrinsics};
use lift3d::localize::{augment_features, decode_location, encode_location, parse_location_text, render_location_text};
use lift3d::navsim::{
    random_maze, run_episode, EpisodeConfig, FrontierWaypointPolicy, NavEnv, OracleWaypointPolicy, WaypointPolicy,
};
use lift3d::synthworld::{make_scene, render_orbit, LabelEmbedding, Scene};
use lift3d::tensorfile::Tensor;
use lift3d::voxfield::{fit, VoxelFeatureGrid, POINT_DENSITY_THRESHOLD};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::io::{self, SIDECAR_FILE};
use crate::{Cli, Command, Method, Pipeline, PolicyKind};

pub const BUNDLED_MAZE: &str = include_str!("../assets/maze.json");

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Scene { seed, n_objects, out } => cmd_scene(&cfg, seed, n_objects, &out),
        Command::Render { scene, views, out_dir } => cmd_render(&cfg, &scene, views, &out_dir),
        Command::Extract { method, views_dir, out } => cmd_extract(&cfg, method, &views_dir, &out),
        Command::Tokenize { aabb, bbox, decode, scene } => cmd_tokenize(&cfg, aabb.as_deref(), bbox.as_deref(), decode.as_deref(), scene.as_deref()),
        Command::Embed { points, out } => cmd_embed(&cfg, &points, &out),
        Command::Datagen { scenes_dir, task, pipeline, input, out, report, seed, loc_tokens } => cmd_datagen(
            &cfg,
            DatagenArgs { scenes_dir: scenes_dir.as_deref(), task: &task, pipeline, input: input.as_deref(), out: &out, report: report.as_deref(), seed, loc_tokens },
        ),
        Command::Split { input, seed, out_dir } => cmd_split(&input, seed, &out_dir),
        Command::Eval { pred, task, k, cider_x10 } => cmd_eval(&pred, &task, k, cider_x10),
        Command::Nav { env, policy, seed, random, max_steps, write_env } => cmd_nav(&cfg, env.as_deref(), policy, seed, random, max_steps, write_env.as_deref()),
        Command::Dump { file, rows } => cmd_dump(&file, rows),
    }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("value serializes"));
}

fn cmd_scene(cfg: &RunConfig, seed: u64, n_objects: Option<usize>, out: &Path) -> CliResult<()> {
    let bounds = Aabb::from_flat(cfg.scene.bounds)?;
    let scene = make_scene(seed, n_objects.unwrap_or(cfg.scene.n_objects), bounds)?;
    io::write_text(out, &(scene.to_json() + "\n"))?;
    print_json(&serde_json::json!({"scene": out, "seed": seed, "objects": scene.objects.len()}));
    Ok(())
}

fn load_scene(path: &Path) -> CliResult<Scene> {
    io::read_json(path)
}

/// Orbit radius: the configured value, else 1.5 x the half-diagonal of the bounds.
fn orbit_radius(cfg: &RunConfig, bounds: &Aabb) -> f64 {
    cfg.render.radius.unwrap_or(0.75 * bounds.extent().norm())
}

fn render_views(cfg: &RunConfig, scene: &Scene, n_views: usize) -> CliResult<(Vec<lift3d::CameraView>, LabelEmbedding)> {
    let r = &cfg.render;
    if n_views == 0 {
        return Err(CliError::validation("views must be at least 1"));
    }
    let intr = CameraIntrinsics::from_fov(r.width, r.height, r.fov_deg.to_radians())?;
    let embed = LabelEmbedding::catalog(r.feature_dim, r.embed_seed)?;
    for label in scene.labels() {
        if embed.id_of(label).is_none() {
            return Err(CliError::validation(format!("scene label {label:?} is not in the label catalog")));
        }
    }
    let views = render_orbit(scene, n_views, orbit_radius(cfg, &scene.bounds), intr, &embed);
    Ok((views, embed))
}

fn cmd_render(cfg: &RunConfig, scene_path: &Path, views: Option<usize>, out_dir: &Path) -> CliResult<()> {
    let scene = load_scene(scene_path)?;
    let (views, embed) = render_views(cfg, &scene, views.unwrap_or(cfg.render.views))?;
    let manifest = io::save_views(out_dir, scene.bounds, scene.seed, &views, &embed)?;
    print_json(&serde_json::json!({"out_dir": out_dir, "views": manifest.views, "hit_pixels": manifest.hit_pixels}));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ExtractReport {
    method: &'static str,
    views: usize,
    hit_pixels: usize,
    points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    dropped: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    final_loss: Option<f64>,
}

fn cmd_extract(cfg: &RunConfig, method: Method, views_dir: &Path, out: &Path) -> CliResult<()> {
    let loaded = io::load_views(views_dir)?;
    let views = &loaded.views;
    let bounds = loaded.cameras.scene_bounds;
    let hit_pixels = views.iter().map(lift3d::CameraView::hit_count).sum();
    let mut report = ExtractReport { method: "direct", views: views.len(), hit_pixels, points: 0, dropped: None, initial_loss: None, final_loss: None };
    io::create_dir(out)?;
    match method {
        Method::Direct => {
            let cloud = direct_reconstruct(views)?;
            io::save_cloud(out, &cloud)?;
            io::write_json(&out.join(SIDECAR_FILE), &serde_json::json!({"D_v": cloud.feature_dim, "N": cloud.len()}))?;
            report.points = cloud.len();
        }
        Method::Fuse => {
            let e = bounds.extent();
            let size = cfg.fuse.voxel_size.unwrap_or(e.min() / 64.0);
            if !(size > 0.0 && size.is_finite()) {
                return Err(CliError::validation(format!("voxel_size {size} must be positive")));
            }
            let dims = [0, 1, 2].map(|k| ((e[k] / size).ceil() as usize).max(1));
            let map = fuse(views, bounds.min, size, dims)?;
            let [x, y, z] = dims;
            io::save_tensor(&out.join("voxel_features.f3dt"), &[x, y, z, map.feature_dim], &map.feature)?;
            io::save_tensor(&out.join("voxel_colors.f3dt"), &[x, y, z, 3], &map.color)?;
            io::save_tensor(&out.join("voxel_weights.f3dt"), &[x, y, z], &map.weight)?;
            let cloud = map.to_point_cloud();
            io::save_cloud(out, &cloud)?;
            io::write_json(&out.join(SIDECAR_FILE), &map.sidecar())?;
            report.method = "fuse";
            report.points = cloud.len();
            report.dropped = Some(map.dropped);
        }
        Method::Field => {
            let f = &cfg.field;
            let mut grid = VoxelFeatureGrid::spanning(&bounds, f.nodes_per_axis, loaded.cameras.feature_dim, f.raw_density)?;
            let fit_report = fit(&mut grid, views, &cfg.train, &cfg.ray)?;
            let [x, y, z] = grid.dims;
            io::save_tensor(&out.join("grid_density.f3dt"), &[x, y, z], &grid.density)?;
            io::save_tensor(&out.join("grid_colors.f3dt"), &[x, y, z, 3], &grid.color)?;
            io::save_tensor(&out.join("grid_features.f3dt"), &[x, y, z, grid.feature_dim], &grid.feature)?;
            io::write_json(&out.join(SIDECAR_FILE), &grid.sidecar())?;
            io::write_text(&out.join("loss.csv"), &fit_report.to_csv())?;
            let cloud = grid.to_point_cloud(POINT_DENSITY_THRESHOLD);
            io::save_cloud(out, &cloud)?;
            report.method = "field";
            report.points = cloud.len();
            report.initial_loss = Some(fit_report.initial_loss);
            report.final_loss = Some(fit_report.final_loss);
        }
    }
    io::write_json(&out.join("report.json"), &report)?;
    print_json(&report);
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxInput {
    Flat([f64; 6]),
    Aabb(Aabb),
}

fn parse_box_csv(text: &str) -> CliResult<[f64; 6]> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| CliError::usage(format!("--box {text:?}: {e}"))))
        .collect::<CliResult<_>>()?;
    vals.try_into().map_err(|v: Vec<f64>| CliError::usage(format!("--box needs 6 comma-separated numbers, got {}", v.len())))
}

fn cmd_tokenize(cfg: &RunConfig, aabb: Option<&Path>, bbox: Option<&str>, decode: Option<&str>, scene: Option<&Path>) -> CliResult<()> {
    let bounds = scene.map(load_scene).transpose()?.map(|s| s.bounds);
    let loc = cfg.loc_tokens.resolve(bounds)?;
    if let Some(text) = decode {
        let seq = parse_location_text(text.trim(), &loc)?;
        let b = decode_location(&seq, &loc)?;
        print_json(&serde_json::json!({"tokens": seq.ids(), "aabb": b}));
        return Ok(());
    }
    let flat = match (aabb, bbox) {
        (Some(path), None) => match io::read_json::<BoxInput>(path)? {
            BoxInput::Flat(v) => v,
            BoxInput::Aabb(b) => b.to_array(),
        },
        (None, Some(csv)) => parse_box_csv(csv)?,
        _ => return Err(CliError::usage("tokenize needs one of --aabb, --box or --decode")),
    };
    let seq = encode_location(&Aabb::from_flat(flat)?, &loc)?;
    println!("{}", render_location_text(&seq));
    Ok(())
}

fn cmd_embed(cfg: &RunConfig, points: &Path, out: &Path) -> CliResult<()> {
    let cloud = io::load_cloud(points)?;
    let pe = cfg.pos_embed.resolve(cloud.feature_dim)?;
    let augmented = augment_features(&cloud.features, &cloud.positions, &pe)?;
    io::save_tensor(out, &[cloud.len(), pe.output_dim()], &augmented)?;
    print_json(&serde_json::json!({"out": out, "points": cloud.len(), "dim": pe.output_dim()}));
    Ok(())
}

struct DatagenArgs<'a> {
    scenes_dir: Option<&'a Path>,
    task: &'a str,
    pipeline: Pipeline,
    input: Option<&'a Path>,
    out: &'a Path,
    report: Option<&'a Path>,
    seed: u64,
    loc_tokens: bool,
}

fn parse_task(name: &str) -> CliResult<Task> {
    Task::from_name(name).ok_or_else(|| {
        let names: Vec<&str> = Task::ALL.iter().map(|t| t.name()).collect();
        CliError::usage(format!("unknown task {name:?}; expected one of {}", names.join(", ")))
    })
}

fn load_scenes(dir: Option<&Path>) -> CliResult<Vec<Scene>> {
    let dir = dir.ok_or_else(|| CliError::usage("--scenes-dir is required for this pipeline"))?;
    io::scene_files(dir)?.iter().map(|p| load_scene(p)).collect()
}

fn cmd_datagen(cfg: &RunConfig, args: DatagenArgs<'_>) -> CliResult<()> {
    let task = parse_task(args.task)?;
    let remote = RemoteClient::from_env()?;
    let mock = DeterministicMock::new(args.seed);
    let client: &dyn LlmClient = match &remote {
        Some(r) => r,
        None => &mock,
    };
    let instructions = match &cfg.datagen.templates_dir {
        Some(dir) => InstructionSet::load_dir(dir)?,
        None => InstructionSet::default(),
    };
    let scene_err = |id: &str, e: lift3d::datagen::DatagenError| {
        let inner: CliError = e.into();
        CliError { kind: inner.kind, message: format!("{id}: {}", inner.message) }
    };
    let mut bounds_by_scene: Vec<(String, Aabb)> = Vec::new();
    let (mut records, mut report) = match args.pipeline {
        Pipeline::Box => {
            let scenes = load_scenes(args.scenes_dir)?;
            let validator = LabelValidator::default();
            let mut all = Vec::new();
            let mut report = PipelineReport::default();
            for scene in &scenes {
                let id = scene_id(scene);
                let (recs, r) = run_box_batch(std::slice::from_ref(scene), task, &instructions, &[], client, &validator).map_err(|e| scene_err(&id, e))?;
                bounds_by_scene.push((id, scene.bounds));
                all.extend(recs);
                report.scenes += r.scenes;
                report.requests += r.requests;
                report.records_emitted += r.records_emitted;
                report.records_rejected += r.records_rejected;
                report.retries += r.retries;
            }
            (all, report)
        }
        Pipeline::Chat => {
            if task != Task::Caption {
                return Err(CliError::usage("the chat pipeline produces caption records; use --task caption"));
            }
            let scenes = load_scenes(args.scenes_dir)?;
            let mut all = Vec::new();
            let mut report = PipelineReport::default();
            let retries_before = client.retries();
            for scene in &scenes {
                let id = scene_id(scene);
                let (views, embed) = render_views(cfg, scene, cfg.render.views)?;
                let answerer = LabelReadingVqa { embedding: embed };
                let (rec, requests) = run_chat_captioner(&id, &views, &instructions, client, &answerer, cfg.datagen.max_rounds)
                    .map_err(|e| scene_err(&id, e))?;
                bounds_by_scene.push((id, scene.bounds));
                report.scenes += 1;
                report.requests += requests;
                report.records_emitted += 1;
                all.push(rec);
            }
            report.retries = client.retries() - retries_before;
            (all, report)
        }
        Pipeline::Revise => {
            let input = args.input.ok_or_else(|| CliError::usage("--input is required for the revise pipeline"))?;
            let source = parse_records_jsonl(&io::read_text(input)?)?;
            let retries_before = client.retries();
            let mut all = Vec::new();
            let mut report = PipelineReport::default();
            for rec in &source {
                let out = revise(rec, task, &instructions, client).map_err(|e| scene_err(&rec.scene_id, e))?;
                report.requests += 1;
                report.records_emitted += 1;
                all.push(out);
            }
            if let Some(dir) = args.scenes_dir {
                for s in load_scenes(Some(dir))? {
                    bounds_by_scene.push((scene_id(&s), s.bounds));
                }
            }
            report.scenes = {
                let mut ids: Vec<&str> = source.iter().map(|r| r.scene_id.as_str()).collect();
                ids.sort_unstable();
                ids.dedup();
                ids.len()
            };
            report.retries = client.retries() - retries_before;
            (all, report)
        }
    };
    if args.loc_tokens || cfg.datagen.location_tokens {
        records = with_location_tokens(cfg, records, &bounds_by_scene)?;
    }
    report.records_emitted = records.len();
    io::write_text(args.out, &records_to_jsonl(&records))?;
    if let Some(path) = args.report {
        io::write_json(path, &report)?;
    }
    print_json(&report);
    Ok(())
}

/// Records with boxes get their location tokens; token bounds come from the
/// record's scene when known, else from the configuration.
fn with_location_tokens(cfg: &RunConfig, records: Vec<LanguageRecord>, bounds: &[(String, Aabb)]) -> CliResult<Vec<LanguageRecord>> {
    records
        .into_iter()
        .map(|r| {
            if r.boxes.as_ref().is_none_or(|b| b.is_empty()) {
                return Ok(r);
            }
            let scene_bounds = bounds.iter().find(|(id, _)| *id == r.scene_id).map(|(_, b)| *b);
            let loc = cfg.loc_tokens.resolve(scene_bounds)?;
            attach_location_tokens(&r, &loc).map_err(|e| {
                let inner: CliError = e.into();
                CliError { kind: inner.kind, message: format!("{}: {}", r.scene_id, inner.message) }
            })
        })
        .collect()
}

fn cmd_split(input: &Path, seed: u64, out_dir: &Path) -> CliResult<()> {
    let records = parse_records_jsonl(&io::read_text(input)?)?;
    let split = split_dataset(&records, seed)?;
    io::create_dir(out_dir)?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        io::write_text(&out_dir.join(format!("{name}.jsonl")), &records_to_jsonl(part))?;
    }
    print_json(&serde_json::json!({"train": split.train.len(), "val": split.val.len(), "test": split.test.len()}));
    Ok(())
}

fn cmd_eval(pred: &Path, task: &str, k: Option<f64>, cider_x10: bool) -> CliResult<()> {
    let task = parse_task(task)?;
    if task == Task::Grounding {
        let items: Vec<GroundingItem> = io::read_jsonl(pred)?;
        let mut p = Vec::with_capacity(items.len());
        let mut g = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let bad = |e| CliError::validation(format!("{}: item {} ({}): {e}", pred.display(), i + 1, item.id));
            p.push(Aabb::from_flat(item.pred).map_err(bad)?);
            g.push(Aabb::from_flat(item.gt).map_err(bad)?);
        }
        print_json(&grounding_metrics(&p, &g, k.unwrap_or(DEFAULT_IOU_THRESHOLD))?);
        return Ok(());
    }
    if k.is_some() {
        return Err(CliError::usage("--k only applies to the grounding task"));
    }
    let items: Vec<EvalItem> = io::read_jsonl(pred)?;
    print_json(&evaluate(&items, EvalOptions { cider_times_ten: cider_x10 })?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct NavReport {
    policy: &'static str,
    start: [usize; 3],
    target: [usize; 3],
    bfs_distance: usize,
    max_steps: usize,
    #[serde(flatten)]
    result: lift3d::navsim::EpisodeResult,
}

fn cmd_nav(
    cfg: &RunConfig,
    env_path: Option<&Path>,
    policy: PolicyKind,
    seed: u64,
    random: bool,
    max_steps: Option<usize>,
    write_env: Option<&Path>,
) -> CliResult<()> {
    let n = &cfg.nav;
    let env: NavEnv = if random {
        random_maze(seed, n.random_dims, n.random_obstacle_prob)?
    } else if let Some(path) = env_path {
        io::read_json(path)?
    } else {
        serde_json::from_str(BUNDLED_MAZE).expect("bundled maze is valid")
    };
    if let Some(path) = write_env {
        io::write_json(path, &env)?;
    }
    let bfs = env
        .shortest_distance(env.start, env.target.cell)
        .ok_or_else(|| CliError::validation("target is unreachable from start"))?;
    let budget = max_steps.or(n.max_steps).unwrap_or(4 * bfs).max(1);
    let mut ep = EpisodeConfig::new(budget);
    ep.success_radius = n.success_radius;
    ep.observe_radius = n.observe_radius;
    let (name, mut pol): (&'static str, Box<dyn WaypointPolicy>) = match policy {
        PolicyKind::Oracle => ("oracle", Box::new(OracleWaypointPolicy { target: env.target.cell })),
        PolicyKind::Frontier => ("frontier", Box::new(FrontierWaypointPolicy::new(&env.target.label))),
    };
    let result = run_episode(&env, pol.as_mut(), &ep)?;
    print_json(&NavReport { policy: name, start: env.start, target: env.target.cell, bfs_distance: bfs, max_steps: budget, result });
    Ok(())
}

fn cmd_dump(file: &Path, rows: usize) -> CliResult<()> {
    print!("{}", Tensor::load(file)?.dump_text(rows));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bundled_maze_loads() {
        let env: NavEnv = serde_json::from_str(BUNDLED_MAZE).unwrap();
        assert!(env.shortest_distance(env.start, env.target.cell).is_some());
    }

    #[test]
    fn default_orbit_radius() {
        let b = Aabb::from_flat([0.0, 0.0, 0.0, 2.0, 1.0, 2.0]).unwrap();
        assert!((orbit_radius(&RunConfig::default(), &b) - 2.25).abs() < 1e-12);
    }

    #[test]
    fn box_csv_rejects_wrong_arity() {
        assert!(parse_box_csv("1,2,3").is_err());
        assert!(parse_box_csv("1,2,3,4,5,x").is_err());
    }

    proptest! {
        #[test]
        fn box_csv_round_trips(v in prop::array::uniform6(-1e6f64..1e6)) {
            let text = v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
            prop_assert_eq!(parse_box_csv(&text).unwrap(), v);
        }
    }
}
