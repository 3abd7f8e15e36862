//! Language data generation by prompting a text-only LLM with scene boxes,
//! a question/answer loop over rendered views, and task revision.
//!
//! Completions are parsed with a fixed grammar: question-style tasks
//! (`qa`, `dialog`, `grounding`) expect one `Q: ... A: ...` pair per line,
//! every other task takes the whole completion as one response.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::Aabb;
use crate::localize::{encode_location, render_location_text, LocTokenConfig};
use crate::synthworld::{CameraView, LabelEmbedding, Scene, LABEL_CATALOG};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("client configuration: {0}")]
    Config(String),
    #[error("unusable response: {0}")]
    Response(String),
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("at most 3 demonstrations are allowed, got {0}")]
    TooManyDemos(usize),
    #[error("scene {0} produced no valid records")]
    EmptyYield(String),
    #[error("record has no boxes")]
    MissingBoxes,
    #[error("need at least 10 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },
    #[error("revision target equals source task {0:?}")]
    SameTask(Task),
    #[error("no views given")]
    NoViews,
    #[error("max_rounds must be at least 1")]
    NoRounds,
    #[error("location tokens: {0}")]
    Location(#[from] crate::localize::LocalizeError),
    #[error("box: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("template {path}: {reason}")]
    Template { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Caption,
    DenseCaption,
    Qa,
    TaskDecomposition,
    Dialog,
    Grounding,
    Navigation,
}

impl Task {
    pub const ALL: [Task; 7] =
        [Task::Caption, Task::DenseCaption, Task::Qa, Task::TaskDecomposition, Task::Dialog, Task::Grounding, Task::Navigation];

    pub fn name(self) -> &'static str {
        match self {
            Task::Caption => "caption",
            Task::DenseCaption => "dense_caption",
            Task::Qa => "qa",
            Task::TaskDecomposition => "task_decomposition",
            Task::Dialog => "dialog",
            Task::Grounding => "grounding",
            Task::Navigation => "navigation",
        }
    }

    pub fn from_name(name: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Tasks whose completions are parsed as `Q: ... A: ...` lines.
    pub fn is_line_based(self) -> bool {
        matches!(self, Task::Qa | Task::Dialog | Task::Grounding)
    }

    /// Prompt stored on records of whole-text tasks.
    pub fn canonical_prompt(self) -> &'static str {
        match self {
            Task::Caption => "Describe the 3D scene.",
            Task::DenseCaption => "Describe every object in the 3D scene.",
            Task::TaskDecomposition => "Break a household task in this scene into steps.",
            Task::Navigation => "How do I walk through this scene to reach an object?",
            Task::Qa => "Answer a question about the 3D scene.",
            Task::Dialog => "Talk with me about this room.",
            Task::Grounding => "Find the object being described.",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    BoxPrompted,
    ChatCaptioner,
    Revision,
}

/// A labeled box, serialized as `[label, [xmin, ymin, zmin, xmax, ymax, zmax]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox(pub String, pub [f64; 6]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageRecord {
    pub scene_id: String,
    pub task: Task,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<LabeledBox>>,
    pub provenance: Provenance,
}

impl LanguageRecord {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.prompt.trim().is_empty() || self.response.trim().is_empty() {
            return Err(DatagenError::InvalidRecord(format!("{}: empty prompt or response", self.scene_id)));
        }
        if self.task == Task::Grounding && self.boxes.as_ref().is_none_or(|b| b.is_empty()) {
            return Err(DatagenError::InvalidRecord(format!("{}: grounding record without boxes", self.scene_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, text: text.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub system: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;

impl PromptRequest {
    pub fn new(system: impl Into<String>, messages: Vec<Message>) -> Result<Self, DatagenError> {
        let req = Self { system: system.into(), messages, temperature: DEFAULT_TEMPERATURE, max_tokens: DEFAULT_MAX_TOKENS };
        req.validate()?;
        Ok(req)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if self.messages.is_empty() {
            return Err(DatagenError::InvalidRequest("no messages".into()));
        }
        for (i, m) in self.messages.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if m.role != want {
                return Err(DatagenError::InvalidRequest(format!("message {i} should be from {want:?}")));
            }
        }
        Ok(())
    }

    pub fn last_user_text(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.text.as_str())
    }

    /// First line of the system prompt with the `Task: ` prefix removed.
    pub fn template_name(&self) -> &str {
        self.system.lines().next().and_then(|l| l.strip_prefix("Task:")).map_or("", str::trim)
    }
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &PromptRequest) -> Result<String, ClientError>;

    /// Retries performed so far, for pipeline reports.
    fn retries(&self) -> usize {
        0
    }
}

/// Answers a question about one rendered view.
pub trait VqaClient: Send + Sync {
    fn answer(&self, view: &CameraView, question: &str) -> Result<String, ClientError>;
}

/// Instruction texts keyed by template name (`caption`, `qa`, ..., `chat_ask`,
/// `chat_summarize`, `revise`). Each text starts with a `Task: <name>` line.
#[derive(Debug, Clone, PartialEq)]
pub struct InstructionSet {
    templates: BTreeMap<String, String>,
}

const BUNDLED_TEMPLATES: [(&str, &str); 10] = [
    ("caption", include_str!("../templates/caption.txt")),
    ("dense_caption", include_str!("../templates/dense_caption.txt")),
    ("qa", include_str!("../templates/qa.txt")),
    ("task_decomposition", include_str!("../templates/task_decomposition.txt")),
    ("dialog", include_str!("../templates/dialog.txt")),
    ("grounding", include_str!("../templates/grounding.txt")),
    ("navigation", include_str!("../templates/navigation.txt")),
    ("chat_ask", include_str!("../templates/chat_ask.txt")),
    ("chat_summarize", include_str!("../templates/chat_summarize.txt")),
    ("revise", include_str!("../templates/revise.txt")),
];

impl Default for InstructionSet {
    fn default() -> Self {
        Self { templates: BUNDLED_TEMPLATES.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl InstructionSet {
    /// Bundled templates, overridden by any `<name>.txt` present in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, DatagenError> {
        let mut set = Self::default();
        let names: Vec<String> = set.templates.keys().cloned().collect();
        for name in names {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path)
                .map_err(|e| DatagenError::Template { path: path.display().to_string(), reason: e.to_string() })?;
            let first = text.lines().next().unwrap_or("");
            if first.trim() != format!("Task: {name}") {
                return Err(DatagenError::Template { path: path.display().to_string(), reason: format!("first line must be \"Task: {name}\"") });
            }
            set.templates.insert(name, text);
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &str {
        self.templates.get(name).map_or("", String::as_str)
    }

    pub fn for_task(&self, task: Task) -> &str {
        self.get(task.name())
    }
}

fn fmt2(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn fmt_box(v: &[f64; 6]) -> String {
    format!("[{}]", v.iter().map(|x| fmt2(*x)).collect::<Vec<_>>().join(", "))
}

/// Room bounds on the first line, then `label: [xmin, ymin, zmin, xmax, ymax, zmax]`
/// per object sorted by `(label, xmin, ymin, zmin)`, two decimals.
pub fn serialize_scene_boxes(scene: &Scene) -> String {
    let mut objs: Vec<(&str, [f64; 6])> = scene.objects.iter().map(|o| (o.label.as_str(), o.aabb.to_array())).collect();
    objs.sort_by(|a, b| a.0.cmp(b.0).then(a.1[0].total_cmp(&b.1[0])).then(a.1[1].total_cmp(&b.1[1])).then(a.1[2].total_cmp(&b.1[2])));
    let mut out = format!("room: {}", fmt_box(&scene.bounds.to_array()));
    for (label, b) in objs {
        let _ = write!(out, "\n{label}: {}", fmt_box(&b));
    }
    out
}

/// Inverse of [`serialize_scene_boxes`] for the object lines; the room line and
/// anything unparseable are skipped.
pub fn parse_scene_boxes(text: &str) -> Vec<LabeledBox> {
    text.lines()
        .filter_map(|line| {
            let (label, rest) = line.split_once(": [")?;
            if label == "room" {
                return None;
            }
            let nums: Vec<f64> = rest.strip_suffix(']')?.split(',').map(|s| s.trim().parse().ok()).collect::<Option<_>>()?;
            let arr: [f64; 6] = nums.try_into().ok()?;
            Some(LabeledBox(label.to_string(), arr))
        })
        .collect()
}

pub fn build_box_prompt(scene: &Scene, instruction: &str, demos: &[(Scene, String)]) -> Result<PromptRequest, DatagenError> {
    if demos.len() > 3 {
        return Err(DatagenError::TooManyDemos(demos.len()));
    }
    let mut messages = Vec::with_capacity(2 * demos.len() + 1);
    for (demo_scene, response) in demos {
        messages.push(Message::user(serialize_scene_boxes(demo_scene)));
        messages.push(Message::assistant(response.clone()));
    }
    messages.push(Message::user(serialize_scene_boxes(scene)));
    PromptRequest::new(instruction, messages)
}

pub fn scene_id(scene: &Scene) -> String {
    format!("scene-{:04}", scene.seed)
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

/// Rejects text that mentions a vocabulary label missing from the scene.
/// Labels match whole words, including simple plurals.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelValidator {
    pub vocabulary: Vec<String>,
}

impl Default for LabelValidator {
    fn default() -> Self {
        Self { vocabulary: LABEL_CATALOG.iter().map(|s| s.to_string()).collect() }
    }
}

impl LabelValidator {
    pub fn mentioned(&self, text: &str) -> Vec<String> {
        let ws = words(text);
        self.vocabulary
            .iter()
            .filter(|l| ws.iter().any(|w| w == *l || *w == format!("{l}s") || *w == format!("{l}es")))
            .cloned()
            .collect()
    }

    /// Labels mentioned in the record text but absent from the scene.
    pub fn fabricated(&self, record: &LanguageRecord, scene_labels: &[&str]) -> Vec<String> {
        let text = format!("{}\n{}", record.prompt, record.response);
        self.mentioned(&text).into_iter().filter(|l| !scene_labels.contains(&l.as_str())).collect()
    }

    pub fn accepts(&self, record: &LanguageRecord, scene_labels: &[&str]) -> bool {
        self.fabricated(record, scene_labels).is_empty()
    }
}

/// Splits `Q: ... A: ...` lines; other lines are ignored.
pub fn parse_qa_lines(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|line| {
            let rest = line.trim().strip_prefix("Q:")?;
            let (q, a) = rest.split_once(" A:")?;
            let (q, a) = (q.trim(), a.trim());
            (!q.is_empty() && !a.is_empty()).then(|| (q.to_string(), a.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineYield {
    pub records: Vec<LanguageRecord>,
    pub rejected: usize,
    pub requests: usize,
}

fn boxes_for(scene: &Scene, labels: &[String]) -> Option<Vec<LabeledBox>> {
    let b: Vec<LabeledBox> = scene
        .objects
        .iter()
        .filter(|o| labels.contains(&o.label))
        .map(|o| LabeledBox(o.label.clone(), o.aabb.to_array()))
        .collect();
    (!b.is_empty()).then_some(b)
}

/// Turns a completion into records, dropping (and counting) invalid ones.
fn records_from_completion(
    scene: &Scene,
    task: Task,
    completion: &str,
    provenance: Provenance,
    validator: &LabelValidator,
) -> (Vec<LanguageRecord>, usize) {
    let id = scene_id(scene);
    let pairs: Vec<(String, String)> = if task.is_line_based() {
        parse_qa_lines(completion)
    } else if completion.trim().is_empty() {
        vec![]
    } else {
        vec![(task.canonical_prompt().to_string(), completion.trim().to_string())]
    };
    let labels = scene.labels();
    let mut out = Vec::new();
    let mut rejected = 0;
    for (prompt, response) in pairs {
        let mentioned = validator.mentioned(&format!("{prompt}\n{response}"));
        let record = LanguageRecord {
            scene_id: id.clone(),
            task,
            prompt,
            response,
            boxes: boxes_for(scene, &mentioned),
            provenance,
        };
        if record.validate().is_ok() && validator.accepts(&record, &labels) {
            out.push(record);
        } else {
            rejected += 1;
        }
    }
    (out, rejected)
}

pub fn run_box_pipeline(
    scene: &Scene,
    instruction: &str,
    demos: &[(Scene, String)],
    task: Task,
    client: &dyn LlmClient,
    validator: &LabelValidator,
) -> Result<PipelineYield, DatagenError> {
    let request = build_box_prompt(scene, instruction, demos)?;
    let completion = client.complete(&request)?;
    let (records, rejected) = records_from_completion(scene, task, &completion, Provenance::BoxPrompted, validator);
    if records.is_empty() {
        return Err(DatagenError::EmptyYield(scene_id(scene)));
    }
    Ok(PipelineYield { records, rejected, requests: 1 })
}

pub const DONE_TOKEN: &str = "[DONE]";

fn transcript(history: &[(String, String)]) -> String {
    if history.is_empty() {
        return "No questions were asked.".into();
    }
    history.iter().map(|(q, a)| format!("Q: {q}\nA: {a}")).collect::<Vec<_>>().join("\n")
}

/// Question/answer rounds over the views (round-robin), then a summary.
pub fn run_chat_captioner(
    scene_id: &str,
    views: &[CameraView],
    instructions: &InstructionSet,
    asker: &dyn LlmClient,
    answerer: &dyn VqaClient,
    max_rounds: usize,
) -> Result<(LanguageRecord, usize), DatagenError> {
    if views.is_empty() {
        return Err(DatagenError::NoViews);
    }
    if max_rounds == 0 {
        return Err(DatagenError::NoRounds);
    }
    let mut history: Vec<(String, String)> = Vec::new();
    let mut requests = 0;
    for round in 0..max_rounds {
        let mut messages = vec![Message::user(format!("There are {} views of the scene. Ask your first question.", views.len()))];
        for (q, a) in &history {
            messages.push(Message::assistant(q.clone()));
            messages.push(Message::user(format!("Answer: {a}\nAsk your next question.")));
        }
        let question = asker.complete(&PromptRequest::new(instructions.get("chat_ask"), messages)?)?;
        requests += 1;
        if question.contains(DONE_TOKEN) {
            break;
        }
        let answer = answerer.answer(&views[round % views.len()], question.trim())?;
        history.push((question.trim().to_string(), answer.trim().to_string()));
    }
    let summary_req = PromptRequest::new(instructions.get("chat_summarize"), vec![Message::user(transcript(&history))])?;
    let caption = asker.complete(&summary_req)?;
    requests += 1;
    let record = LanguageRecord {
        scene_id: scene_id.to_string(),
        task: Task::Caption,
        prompt: Task::Caption.canonical_prompt().to_string(),
        response: caption.trim().to_string(),
        boxes: None,
        provenance: Provenance::ChatCaptioner,
    };
    record.validate()?;
    Ok((record, requests))
}

/// Rewrites a record as another task; scene id and boxes carry over.
pub fn revise(record: &LanguageRecord, target: Task, instructions: &InstructionSet, client: &dyn LlmClient) -> Result<LanguageRecord, DatagenError> {
    if target == record.task {
        return Err(DatagenError::SameTask(target));
    }
    let user = format!(
        "Target task: {}\nSource task: {}\nSource prompt: {}\nSource response: {}",
        target.name(),
        record.task.name(),
        record.prompt,
        record.response
    );
    let completion = client.complete(&PromptRequest::new(instructions.get("revise"), vec![Message::user(user)])?)?;
    let (prompt, response) = if target.is_line_based() {
        parse_qa_lines(&completion)
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::Response(format!("revision to {} has no \"Q: ... A: ...\" line", target.name())))?
    } else {
        (target.canonical_prompt().to_string(), completion.trim().to_string())
    };
    let out = LanguageRecord {
        scene_id: record.scene_id.clone(),
        task: target,
        prompt,
        response,
        boxes: record.boxes.clone(),
        provenance: Provenance::Revision,
    };
    out.validate()?;
    Ok(out)
}

/// Appends one `<loc_*>` sequence per box to the response, separated by `"; "`.
pub fn attach_location_tokens(record: &LanguageRecord, cfg: &LocTokenConfig) -> Result<LanguageRecord, DatagenError> {
    let boxes = record.boxes.as_ref().filter(|b| !b.is_empty()).ok_or(DatagenError::MissingBoxes)?;
    let seqs = boxes
        .iter()
        .map(|b| Ok(render_location_text(&encode_location(&Aabb::from_flat(b.1)?, cfg)?)))
        .collect::<Result<Vec<_>, DatagenError>>()?;
    let mut out = record.clone();
    out.response = format!("{} {}", record.response, seqs.join("; "));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LanguageRecord>,
    pub val: Vec<LanguageRecord>,
    pub test: Vec<LanguageRecord>,
}

/// Seeded shuffle, then `floor(0.8 n)` / `floor(0.1 n)` / remainder.
pub fn split_dataset(records: &[LanguageRecord], seed: u64) -> Result<DatasetSplit, DatagenError> {
    let n = records.len();
    if n < 10 {
        return Err(DatagenError::TooFewRecords(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val) = (n * 8 / 10, n / 10);
    let take = |r: &[usize]| r.iter().map(|&i| records[i].clone()).collect();
    Ok(DatasetSplit { train: take(&idx[..n_train]), val: take(&idx[n_train..n_train + n_val]), test: take(&idx[n_train + n_val..]) })
}

pub fn records_to_jsonl(records: &[LanguageRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

pub fn parse_records_jsonl(text: &str) -> Result<Vec<LanguageRecord>, DatagenError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: LanguageRecord = serde_json::from_str(l).map_err(|e| DatagenError::Jsonl { line: i + 1, message: e.to_string() })?;
            r.validate().map_err(|e| DatagenError::Jsonl { line: i + 1, message: e.to_string() })?;
            Ok(r)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub scenes: usize,
    pub requests: usize,
    pub records_emitted: usize,
    pub records_rejected: usize,
    pub retries: usize,
}

impl PipelineReport {
    pub fn add(&mut self, y: &PipelineYield) {
        self.scenes += 1;
        self.requests += y.requests;
        self.records_emitted += y.records.len();
        self.records_rejected += y.rejected;
    }
}

/// Box-prompted generation over a batch of scenes, sequentially.
pub fn run_box_batch(
    scenes: &[Scene],
    task: Task,
    instructions: &InstructionSet,
    demos: &[(Scene, String)],
    client: &dyn LlmClient,
    validator: &LabelValidator,
) -> Result<(Vec<LanguageRecord>, PipelineReport), DatagenError> {
    let retries_before = client.retries();
    let mut report = PipelineReport::default();
    let mut records = Vec::new();
    for scene in scenes {
        let y = run_box_pipeline(scene, instructions.for_task(task), demos, task, client, validator)?;
        report.add(&y);
        records.extend(y.records);
    }
    report.retries = client.retries() - retries_before;
    Ok((records, report))
}

/// Seeded template responder; the reply is a pure function of the request
/// bytes and the seed. It recognizes requests by their `Task: <name>` line.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicMock {
    pub seed: u64,
    /// Number of questions after which `chat_ask` replies `[DONE]`.
    pub chat_rounds: Option<usize>,
}

impl DeterministicMock {
    pub fn new(seed: u64) -> Self {
        Self { seed, chat_rounds: None }
    }

    fn rng_for(&self, request: &PromptRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(serde_json::to_vec(request).expect("request serializes"));
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    pub const QA_PER_SCENE: usize = 4;
    pub const DIALOG_PER_SCENE: usize = 3;
    pub const GROUNDING_PER_SCENE: usize = 4;

    /// Records the mock yields for a box-prompted task on a scene with
    /// `n_objects` objects.
    pub fn expected_records(task: Task, n_objects: usize) -> usize {
        match task {
            Task::Qa => n_objects.min(Self::QA_PER_SCENE),
            Task::Dialog => n_objects.min(Self::DIALOG_PER_SCENE),
            Task::Grounding => n_objects.min(Self::GROUNDING_PER_SCENE),
            _ => usize::from(n_objects > 0),
        }
    }
}

fn center(b: &[f64; 6]) -> [String; 3] {
    [0, 1, 2].map(|k| fmt2(0.5 * (b[k] + b[k + 3])))
}

fn article_list(labels: &[&str]) -> String {
    let items: Vec<String> = labels.iter().map(|l| format!("a {l}")).collect();
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

fn mock_box_reply(task: &str, boxes: &[LabeledBox], rng: &mut ChaCha8Rng) -> String {
    let labels: Vec<&str> = boxes.iter().map(|b| b.0.as_str()).collect();
    let line = |i: usize, templates: &[&str], rng: &mut ChaCha8Rng| {
        let b = &boxes[i];
        let [cx, cy, cz] = center(&b.1);
        let height = fmt2(b.1[4] - b.1[1]);
        templates
            .choose(rng)
            .expect("non-empty templates")
            .replace("{l}", &b.0)
            .replace("{cx}", &cx)
            .replace("{cy}", &cy)
            .replace("{cz}", &cz)
            .replace("{h}", &height)
    };
    let lines = |n: usize, templates: &[&str], rng: &mut ChaCha8Rng| (0..boxes.len().min(n)).map(|i| line(i, templates, rng)).collect::<Vec<_>>().join("\n");
    if boxes.is_empty() {
        return "The room is empty.".into();
    }
    match task {
        "qa" => lines(
            DeterministicMock::QA_PER_SCENE,
            &[
                "Q: Is there a {l} in the room? A: Yes, there is a {l}.",
                "Q: Where is the {l}? A: The {l} is centered at ({cx}, {cy}, {cz}).",
                "Q: How tall is the {l}? A: The {l} is about {h} units tall.",
            ],
            rng,
        ),
        "dialog" => lines(
            DeterministicMock::DIALOG_PER_SCENE,
            &[
                "Q: Can you help me find the {l}? A: Sure, the {l} is near ({cx}, {cy}, {cz}).",
                "Q: What could I do with the {l}? A: You could walk over to the {l} and use it.",
            ],
            rng,
        ),
        "grounding" => lines(
            DeterministicMock::GROUNDING_PER_SCENE,
            &["Q: The object centered near ({cx}, {cy}, {cz}). A: The {l}.", "Q: The object that is {h} units tall. A: The {l}."],
            rng,
        ),
        "dense_caption" => boxes
            .iter()
            .map(|b| {
                let [cx, cy, cz] = center(&b.1);
                format!("A {} stands at ({cx}, {cy}, {cz}).", b.0)
            })
            .collect::<Vec<_>>()
            .join(" "),
        "task_decomposition" => {
            let mut order: Vec<&str> = labels.clone();
            order.shuffle(rng);
            order.iter().enumerate().map(|(i, l)| format!("{}. Walk to the {l} and tidy it.", i + 1)).collect::<Vec<_>>().join(" ")
        }
        "navigation" => {
            let goal = labels.choose(rng).expect("non-empty");
            format!("Start at the door. Walk past {}, then stop next to the {goal}.", article_list(&labels))
        }
        _ => format!("A room with {}.", article_list(&labels)),
    }
}

const CHAT_QUESTIONS: [&str; 4] = [
    "What objects can you see in this view?",
    "What is the largest object visible here?",
    "Which objects are close to each other?",
    "What else is in this part of the room?",
];

impl LlmClient for DeterministicMock {
    fn complete(&self, request: &PromptRequest) -> Result<String, ClientError> {
        let mut rng = self.rng_for(request);
        let task = request.template_name();
        let reply = match task {
            "chat_ask" => {
                let asked = request.messages.iter().filter(|m| m.role == Role::Assistant).count();
                if self.chat_rounds.is_some_and(|r| asked >= r) {
                    DONE_TOKEN.to_string()
                } else {
                    CHAT_QUESTIONS.choose(&mut rng).expect("non-empty").to_string()
                }
            }
            "chat_summarize" => {
                let validator = LabelValidator::default();
                let answers: String = request.last_user_text().lines().filter(|l| l.starts_with("A:")).collect::<Vec<_>>().join(" ");
                let ws = words(&answers);
                let mut seen: Vec<&str> = Vec::new();
                for w in &ws {
                    if let Some(l) = validator.vocabulary.iter().find(|l| w == *l || *w == format!("{l}s")) {
                        if !seen.contains(&l.as_str()) {
                            seen.push(l);
                        }
                    }
                }
                if seen.is_empty() {
                    "A 3D scene whose contents were not described.".to_string()
                } else {
                    format!("A 3D scene containing {}.", article_list(&seen))
                }
            }
            "revise" => {
                let text = request.last_user_text();
                let field = |key: &str| text.lines().find_map(|l| l.strip_prefix(key)).unwrap_or("").trim().to_string();
                let target = field("Target task:");
                let (prompt, response) = (field("Source prompt:"), field("Source response:"));
                match Task::from_name(&target) {
                    Some(t) if t.is_line_based() => format!("Q: {prompt} A: {response}"),
                    _ => response,
                }
            }
            _ => mock_box_reply(task, &parse_scene_boxes(request.last_user_text()), &mut rng),
        };
        Ok(reply)
    }
}

/// Returns fixed completions in order, cycling.
pub struct ScriptedClient {
    pub responses: Vec<String>,
    next: AtomicUsize,
}

impl ScriptedClient {
    pub fn new(responses: Vec<String>) -> Self {
        Self { responses, next: AtomicUsize::new(0) }
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, _request: &PromptRequest) -> Result<String, ClientError> {
        if self.responses.is_empty() {
            return Err(ClientError::Response("scripted client has no responses".into()));
        }
        let i = self.next.fetch_add(1, Ordering::SeqCst);
        Ok(self.responses[i % self.responses.len()].clone())
    }
}

/// Answers from the view's ground-truth semantics.
pub struct LabelReadingVqa {
    pub embedding: LabelEmbedding,
}

impl VqaClient for LabelReadingVqa {
    fn answer(&self, view: &CameraView, _question: &str) -> Result<String, ClientError> {
        let names: Vec<&str> = view.visible_labels().into_iter().filter_map(|id| self.embedding.name_of(id)).collect();
        Ok(if names.is_empty() { "I only see empty space.".into() } else { format!("I can see {}.", article_list(&names)) })
    }
}

pub const ENV_ENDPOINT: &str = "LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "LLM_API_KEY";
pub const ENV_MODEL: &str = "LLM_MODEL";
pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";

/// JSON-over-HTTP chat completion client.
///
/// Sends `{model, messages, temperature, max_tokens}` with a bearer token and
/// reads `choices[0].message.content` (or a top-level `content`). Transport
/// errors, 429 and 5xx responses are retried up to 3 times with doubling
/// backoff starting at `base_delay`.
pub struct RemoteClient {
    pub endpoint: String,
    api_key: String,
    pub model: String,
    pub base_delay: Duration,
    pub max_retries: usize,
    agent: ureq::Agent,
    retries: AtomicUsize,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient").field("endpoint", &self.endpoint).field("model", &self.model).finish_non_exhaustive()
    }
}

impl RemoteClient {
    pub fn new(endpoint: &str, api_key: &str, model: &str) -> Result<Self, ClientError> {
        if api_key.is_empty() {
            return Err(ClientError::Config(format!("{ENV_API_KEY} is empty")));
        }
        let config = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(120))).http_status_as_error(false).build();
        Ok(Self {
            endpoint: endpoint.to_string(),
            api_key: api_key.to_string(),
            model: model.to_string(),
            base_delay: Duration::from_secs(1),
            max_retries: 3,
            agent: ureq::Agent::new_with_config(config),
            retries: AtomicUsize::new(0),
        })
    }

    /// `Ok(None)` when no endpoint is configured; an endpoint without a key is
    /// a configuration error.
    pub fn from_env() -> Result<Option<Self>, ClientError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Option<Self>, ClientError> {
        let Some(endpoint) = get(ENV_ENDPOINT).filter(|s| !s.is_empty()) else { return Ok(None) };
        let key = get(ENV_API_KEY).ok_or_else(|| ClientError::Config(format!("{ENV_ENDPOINT} is set but {ENV_API_KEY} is missing")))?;
        let model = get(ENV_MODEL).unwrap_or_else(|| DEFAULT_MODEL.to_string());
        Self::new(&endpoint, &key, &model).map(Some)
    }

    fn body(&self, request: &PromptRequest) -> serde_json::Value {
        let mut messages = vec![serde_json::json!({"role": "system", "content": request.system})];
        for m in &request.messages {
            let role = match m.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push(serde_json::json!({"role": role, "content": m.text}));
        }
        serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, (bool, String)> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("http status {status}")));
        }
        if status >= 400 {
            return Err((false, format!("http status {status}")));
        }
        let v: serde_json::Value = resp.body_mut().read_json().map_err(|e| (false, format!("invalid JSON body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .or_else(|| v.get("content"))
            .and_then(|c| c.as_str())
            .map(str::to_owned)
            .ok_or((false, "response has no content field".into()))
    }
}

impl LlmClient for RemoteClient {
    fn complete(&self, request: &PromptRequest) -> Result<String, ClientError> {
        let body = self.body(request);
        let mut delay = self.base_delay;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((false, message)) => return Err(ClientError::Response(message)),
                Err((true, message)) if attempts > self.max_retries => return Err(ClientError::Transport { attempts, message }),
                Err((true, _)) => {
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    std::thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }

    fn retries(&self) -> usize {
        self.retries.load(Ordering::SeqCst)
    }
}
