mod common;

use std::collections::VecDeque;
use std::io::Read;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use common::*;
use serde_json::Value;

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(actual, want, "golden file {name} differs");
}

fn render_seed7(dir: &Path) -> Value {
    ok_json(dir, &["scene", "--seed", "7", "--n-objects", "3", "--out", "scene.json"]);
    ok_json(dir, &["render", "--scene", "scene.json", "--views", "4", "--out-dir", "views"])
}

#[test]
fn scene_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok_json(d, &["scene", "--seed", "5", "--out", "a.json"]);
    ok_json(d, &["scene", "--seed", "5", "--out", "b.json"]);
    ok_json(d, &["scene", "--seed", "6", "--out", "c.json"]);
    assert_eq!(sha256(&d.join("a.json")), sha256(&d.join("b.json")));
    assert_ne!(sha256(&d.join("a.json")), sha256(&d.join("c.json")));
    let scene: Value = serde_json::from_str(&std::fs::read_to_string(d.join("a.json")).unwrap()).unwrap();
    assert_eq!(scene["objects"].as_array().unwrap().len(), 3);
}

/// File names, tensor shapes and hit counts; hashes are checked for determinism
/// separately so the golden does not pin platform float formatting.
#[test]
fn render_manifest_golden() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    render_seed7(d);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(d.join("views/manifest.json")).unwrap()).unwrap();
    let mut lines = vec![format!("scene_seed {} views {} hit_pixels {}", manifest["scene_seed"], manifest["views"], manifest["hit_pixels"])];
    for f in manifest["files"].as_array().unwrap() {
        lines.push(format!("{} {}", f["file"].as_str().unwrap(), f["dims"]));
        assert_eq!(f["sha256"].as_str().unwrap(), sha256(&d.join("views").join(f["file"].as_str().unwrap())));
    }
    golden("render_manifest_seed7.txt", &(lines.join("\n") + "\n"));
    for extra in ["cameras.json", "embedding.json"] {
        assert!(d.join("views").join(extra).is_file(), "{extra} missing");
    }

    let again = tempfile::tempdir().unwrap();
    render_seed7(again.path());
    assert_eq!(sha256(&d.join("views/manifest.json")), sha256(&again.path().join("views/manifest.json")));
}

#[test]
fn extract_direct_and_fuse_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let render = render_seed7(d);
    let hits: u64 = render["hit_pixels"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();

    let direct = ok_json(d, &["extract", "--method", "direct", "--views-dir", "views", "--out", "direct"]);
    assert_eq!(direct["points"].as_u64().unwrap(), hits);
    assert_eq!(direct["hit_pixels"].as_u64().unwrap(), hits);
    let dump = ok_text(d, &["dump", "--file", "direct/positions.f3dt", "--rows", "1"]);
    assert!(dump.starts_with(&format!("F3DT v1 rank 2 dims [{hits}, 3]\n")), "{dump}");
    let dump = ok_text(d, &["dump", "--file", "direct/labels.f3dt"]);
    assert!(dump.starts_with(&format!("F3DT v1 rank 1 dims [{hits}]\n")), "{dump}");

    let fused = ok_json(d, &["extract", "--method", "fuse", "--views-dir", "views", "--out", "fused"]);
    assert_eq!(fused["dropped"].as_u64(), Some(0));
    let sidecar: Value = serde_json::from_str(&std::fs::read_to_string(d.join("fused/sidecar.json")).unwrap()).unwrap();
    assert_eq!(sidecar["N"], fused["points"]);
    assert_eq!(sidecar["D_v"], 16);
    for key in ["origin", "voxel_size", "dims"] {
        assert!(sidecar.get(key).is_some(), "sidecar lacks {key}");
    }

    let emb = ok_json(d, &["embed", "--points", "direct", "--out", "emb.f3dt"]);
    assert_eq!((emb["points"].as_u64().unwrap(), emb["dim"].as_u64().unwrap()), (hits, 16));
    std::fs::write(d.join("concat.json"), r#"{"pos_embed": {"d_v": 16, "combine": "concat"}}"#).unwrap();
    let emb = ok_json(d, &["--config", "concat.json", "embed", "--points", "direct", "--out", "emb2.f3dt"]);
    assert_eq!(emb["dim"].as_u64().unwrap(), 32);
}

/// Compact scene, rays clipped to the object region, AdamW at peak lr 0.05.
const FIELD_CONFIG: &str = r#"{
  "scene": {"bounds": [-1, -1, -1, 1, 1, 1], "n_objects": 2},
  "render": {"width": 32, "height": 32, "fov_deg": 51.6, "radius": 3.5, "feature_dim": 8},
  "ray": {"n_samples": 48, "t_near": 1.7, "t_far": 5.3},
  "train": {"learning_rate": 0.05, "warmup_steps": 100, "steps": 3000},
  "field": {"nodes_per_axis": 16}
}"#;

#[test]
fn extract_field_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("field.json"), FIELD_CONFIG).unwrap();
    ok_json(d, &["--config", "field.json", "scene", "--seed", "0", "--out", "scene.json"]);
    ok_json(d, &["--config", "field.json", "render", "--scene", "scene.json", "--views", "20", "--out-dir", "views"]);
    let r = ok_json(d, &["--config", "field.json", "extract", "--method", "field", "--views-dir", "views", "--out", "field"]);
    let ratio = r["final_loss"].as_f64().unwrap() / r["initial_loss"].as_f64().unwrap();
    assert!(ratio <= 0.1, "loss ratio {ratio}");

    let csv = std::fs::read_to_string(d.join("field/loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    let steps: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (0..3000).collect::<Vec<_>>());
    let dump = ok_text(d, &["dump", "--file", "field/grid_density.f3dt", "--rows", "0"]);
    assert!(dump.starts_with("F3DT v1 rank 3 dims [16, 16, 16]"), "{dump}");
}

#[test]
fn tokenize_examples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok_json(d, &["scene", "--seed", "1", "--out", "scene.json"]);
    std::fs::write(d.join("full.json"), r#"{"min": [-2, 0, -2], "max": [2, 2.5, 2]}"#).unwrap();
    assert_eq!(ok_text(d, &["tokenize", "--aabb", "full.json", "--scene", "scene.json"]).trim(), "<loc_0><loc_0><loc_0><loc_255><loc_255><loc_255>");
    assert_eq!(ok_text(d, &["tokenize", "--box=-2,0,-2,-2,0,-2"]).trim(), "<loc_0><loc_0><loc_0><loc_0><loc_0><loc_0>");

    std::fs::write(d.join("ten.json"), r#"{"loc_tokens": {"scene_bounds": [0, 0, 0, 10, 10, 10]}}"#).unwrap();
    let text = ok_text(d, &["--config", "ten.json", "tokenize", "--box", "2.5,2.5,2.5,5,5,5"]);
    let want_lo = (2.5f64 / 10.0 * 256.0).floor() as u32;
    let want_hi = (5.0f64 / 10.0 * 256.0).floor() as u32;
    assert_eq!(text.trim(), format!("<loc_{want_lo}>").repeat(3) + &format!("<loc_{want_hi}>").repeat(3));

    let decoded = ok_json(d, &["--config", "ten.json", "tokenize", "--decode", text.trim()]);
    let half = 10.0 / 256.0 / 2.0;
    let want = [2.5, 2.5, 2.5, 5.0, 5.0, 5.0];
    let got: Vec<f64> = ["min", "max"].iter().flat_map(|k| decoded["aabb"][k].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect::<Vec<_>>()).collect();
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= half + 1e-12, "{g} vs {w}");
    }

    let (code, err) = err_json(d, &["tokenize", "--decode", "<loc_-1><loc_0><loc_0><loc_0><loc_0><loc_0>"]);
    assert_eq!((code, err["error"].as_str()), (2, Some("validation")));
    let (code, _) = err_json(d, &["tokenize", "--box", "5,0,0,6,1,1"]);
    assert_eq!(code, 2, "out-of-bounds box");
    let (code, _) = err_json(d, &["tokenize"]);
    assert_eq!(code, 1);
}

fn make_scenes(d: &Path, n: u64) {
    std::fs::create_dir_all(d.join("scenes")).unwrap();
    for s in 0..n {
        let out = format!("scenes/scene_{s}.json");
        ok_json(d, &["scene", "--seed", &s.to_string(), "--out", &out]);
    }
}

#[test]
fn datagen_mock_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    make_scenes(d, 5);
    let r1 = ok_json(d, &["datagen", "--scenes-dir", "scenes", "--task", "qa", "--out", "a.jsonl", "--report", "report.json", "--loc-tokens"]);
    ok_json(d, &["datagen", "--scenes-dir", "scenes", "--task", "qa", "--out", "b.jsonl", "--loc-tokens"]);
    assert_eq!(sha256(&d.join("a.jsonl")), sha256(&d.join("b.jsonl")));
    assert_eq!(r1["scenes"], 5);
    assert_eq!(r1["requests"], 5);
    assert_eq!(r1["retries"], 0);
    let text = std::fs::read_to_string(d.join("a.jsonl")).unwrap();
    assert_eq!(text.lines().count() as u64, r1["records_emitted"].as_u64().unwrap());
    assert!(text.lines().all(|l| l.contains("<loc_")), "every qa record mentions a box");

    ok_json(d, &["datagen", "--scenes-dir", "scenes", "--task", "qa", "--out", "c.jsonl", "--seed", "1"]);
    assert_ne!(sha256(&d.join("a.jsonl")), sha256(&d.join("c.jsonl")));

    let chat = ok_json(d, &["datagen", "--scenes-dir", "scenes", "--task", "caption", "--pipeline", "chat", "--out", "chat.jsonl"]);
    assert_eq!(chat["records_emitted"], 5);
    let rev = ok_json(d, &["datagen", "--task", "caption", "--pipeline", "revise", "--input", "a.jsonl", "--out", "rev.jsonl"]);
    assert_eq!(rev["records_emitted"], r1["records_emitted"]);
    assert!(std::fs::read_to_string(d.join("rev.jsonl")).unwrap().contains("\"provenance\":\"revision\""));
}

#[test]
fn split_of_1000_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let records: String = (0..1000)
        .map(|i| {
            serde_json::json!({"scene_id": format!("scene-{:04}", i % 37), "task": "qa", "prompt": format!("Question {i}?"), "response": format!("Answer {i}."), "provenance": "box_prompted"})
                .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(d.join("all.jsonl"), records).unwrap();
    let r = ok_json(d, &["split", "--input", "all.jsonl", "--seed", "3", "--out-dir", "split"]);
    assert_eq!((r["train"].as_u64(), r["val"].as_u64(), r["test"].as_u64()), (Some(800), Some(100), Some(100)));
    let mut seen: Vec<String> = Vec::new();
    for (name, n) in [("train", 800), ("val", 100), ("test", 100)] {
        let text = std::fs::read_to_string(d.join("split").join(format!("{name}.jsonl"))).unwrap();
        assert_eq!(text.lines().count(), n);
        seen.extend(text.lines().map(str::to_owned));
    }
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), 1000);
}

#[test]
fn missing_api_key_fails_before_any_request() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    let stop = Arc::new(AtomicUsize::new(0));
    let stop_flag = Arc::clone(&stop);
    let server = std::thread::spawn(move || {
        while stop_flag.load(Ordering::SeqCst) == 0 {
            if let Ok((mut s, _)) = listener.accept() {
                counter.fetch_add(1, Ordering::SeqCst);
                let mut buf = [0u8; 1024];
                let _ = s.read(&mut buf);
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    });

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    make_scenes(d, 1);
    let out = lift3d()
        .current_dir(d)
        .env("LLM_ENDPOINT", &url)
        .args(["datagen", "--scenes-dir", "scenes", "--task", "qa", "--out", "x.jsonl"])
        .output()
        .unwrap();
    stop.store(1, Ordering::SeqCst);
    server.join().unwrap();
    assert_eq!(out.status.code(), Some(4));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("LLM_API_KEY"));
    assert_eq!(hits.load(Ordering::SeqCst), 0);
    assert!(!d.join("x.jsonl").exists());
}

#[test]
fn eval_identity_and_grounding() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let items = [
        ("a", "the cat sat on the mat"),
        ("b", "a red chair next to the table"),
        ("c", "two lamps"),
    ];
    let jsonl: String = items.iter().map(|(id, t)| serde_json::json!({"id": id, "candidate": t, "references": [t]}).to_string() + "\n").collect();
    std::fs::write(d.join("pred.jsonl"), jsonl).unwrap();
    let r = ok_json(d, &["eval", "--pred", "pred.jsonl", "--task", "caption"]);
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider", "em"] {
        assert!((r[key].as_f64().unwrap() - 1.0).abs() < 1e-12, "{key} = {}", r[key]);
    }
    let r = ok_json(d, &["eval", "--pred", "pred.jsonl", "--task", "qa", "--cider-x10"]);
    assert!((r["cider"].as_f64().unwrap() - 10.0).abs() < 1e-9);

    let boxes = [[0.0, 0.0, 0.0, 1.0, 1.0, 1.0], [-1.0, 0.5, 2.0, 0.0, 1.5, 2.5]];
    let jsonl: String = boxes.iter().enumerate().map(|(i, b)| serde_json::json!({"id": i.to_string(), "pred": b, "gt": b}).to_string() + "\n").collect();
    std::fs::write(d.join("ground.jsonl"), jsonl).unwrap();
    let r = ok_json(d, &["eval", "--pred", "ground.jsonl", "--task", "grounding"]);
    assert_eq!(r["k"].as_f64(), Some(0.25));
    assert_eq!(r["acc_at_k"].as_f64(), Some(1.0));
    assert!((r["avg_iou"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(r["avg_dist"].as_f64(), Some(0.0));

    std::fs::write(d.join("bad.jsonl"), "{\"id\": \"a\", \"candidate\": \"x\", \"references\": [\"x\"]}\n{\"id\": \"b\", \"candidate\": \"x\"}\n").unwrap();
    let (code, err) = err_json(d, &["eval", "--pred", "bad.jsonl", "--task", "qa"]);
    assert_eq!(code, 2);
    assert!(err["message"].as_str().unwrap().contains("line 2"), "{err}");
}

/// Breadth-first distance over the raw asset JSON, 6-connected.
fn bfs_oracle(env: &Value) -> usize {
    let dims: Vec<i64> = env["dims"].as_array().unwrap().iter().map(|v| v.as_i64().unwrap()).collect();
    let cell = |v: &Value| -> [i64; 3] {
        let a = v.as_array().unwrap();
        [a[0].as_i64().unwrap(), a[1].as_i64().unwrap(), a[2].as_i64().unwrap()]
    };
    let blocked: std::collections::HashSet<[i64; 3]> = env["obstacles"].as_array().unwrap().iter().map(cell).collect();
    let (start, goal) = (cell(&env["start"]), cell(&env["target"]["cell"]));
    let mut dist = std::collections::HashMap::from([(start, 0usize)]);
    let mut queue = VecDeque::from([start]);
    while let Some(c) = queue.pop_front() {
        if c == goal {
            return dist[&c];
        }
        for (axis, step) in [(0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1)] {
            let mut n = c;
            n[axis] += step;
            if (0..3).all(|k| (0..dims[k]).contains(&n[k])) && !blocked.contains(&n) && !dist.contains_key(&n) {
                dist.insert(n, dist[&c] + 1);
                queue.push_back(n);
            }
        }
    }
    panic!("bundled maze target unreachable");
}

/// Committed shortest-path length of the bundled maze.
const BUNDLED_MAZE_BFS: usize = 21;

#[test]
fn nav_oracle_on_bundled_maze() {
    let asset: Value = serde_json::from_str(&std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/maze.json")).unwrap()).unwrap();
    assert_eq!(bfs_oracle(&asset), BUNDLED_MAZE_BFS);

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let r = ok_json(d, &["nav", "--policy", "oracle"]);
    assert_eq!(r["success"], true);
    assert_eq!(r["steps"].as_u64(), Some(BUNDLED_MAZE_BFS as u64));
    assert_eq!(r["bfs_distance"].as_u64(), Some(BUNDLED_MAZE_BFS as u64));
    assert_eq!(r["max_steps"].as_u64(), Some(4 * BUNDLED_MAZE_BFS as u64));
    assert_eq!(r["trajectory"].as_array().unwrap().len(), BUNDLED_MAZE_BFS + 1);

    let f1 = ok_text(d, &["nav", "--policy", "frontier", "--random", "--seed", "4", "--write-env", "maze4.json"]);
    let f2 = ok_text(d, &["nav", "--policy", "frontier", "--env", "maze4.json"]);
    assert_eq!(f1, f2);
}

#[test]
fn errors_are_single_line_json_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, err) = err_json(d, &["extract", "--method", "mesh", "--views-dir", "v", "--out", "o"]);
    assert_eq!((code, err["error"].as_str(), err["exit_code"].as_i64()), (1, Some("usage"), Some(1)));
    let (code, _) = err_json(d, &["frobnicate"]);
    assert_eq!(code, 1);
    let (code, _) = err_json(d, &["eval", "--pred", "p.jsonl", "--task", "poetry"]);
    assert_eq!(code, 1);

    std::fs::write(d.join("typo.json"), r#"{"render": {"veiws": 3}}"#).unwrap();
    let (code, err) = err_json(d, &["--config", "typo.json", "scene", "--out", "s.json"]);
    assert_eq!(code, 2);
    assert!(err["message"].as_str().unwrap().contains("veiws"));

    let (code, err) = err_json(d, &["render", "--scene", "nope.json", "--out-dir", "v"]);
    assert_eq!(code, 3);
    assert!(err["message"].as_str().unwrap().contains("nope.json"));
    let (code, _) = err_json(d, &["dump", "--file", "typo.json"]);
    assert_eq!(code, 2, "not a tensor file");
    let (code, _) = err_json(d, &["scene", "--n-objects", "500", "--out", "s.json"]);
    assert_eq!(code, 2);
}
