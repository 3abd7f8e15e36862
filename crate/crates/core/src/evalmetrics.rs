//! Caption and QA metrics (BLEU-1..4, ROUGE-L, CIDEr, exact match) and
//! box grounding metrics.
//!
//! Text is tokenized by lowercasing, deleting the characters `.,!?;:'"` and
//! splitting on whitespace.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{aabb_center_distance, aabb_iou, Aabb};

pub const PUNCTUATION: &[char] = &['.', ',', '!', '?', ';', ':', '\'', '"'];
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("item {0:?} has no references")]
    NoReferences(String),
    #[error("BLEU order must be in 1..=4, got {0}")]
    InvalidOrder(usize),
    #[error("CIDEr needs at least 2 items, got {0}")]
    InsufficientCorpus(usize),
    #[error("prediction count {pred} does not match ground truth count {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("no items to evaluate")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedText {
    pub tokens: Vec<String>,
}

impl TokenizedText {
    pub fn new(text: &str) -> Self {
        let lowered: String = text.to_lowercase().chars().filter(|c| !PUNCTUATION.contains(c)).collect();
        Self { tokens: lowered.split_whitespace().map(str::to_owned).collect() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ngrams(&self, n: usize) -> HashMap<&[String], usize> {
        let mut counts = HashMap::new();
        if n > 0 && self.tokens.len() >= n {
            for w in self.tokens.windows(n) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        counts
    }
}

pub fn tokenize(text: &str) -> TokenizedText {
    TokenizedText::new(text)
}

/// Clipped precision for one order: (matches, candidate n-gram total).
fn clipped_matches(candidate: &TokenizedText, references: &[TokenizedText], n: usize) -> (usize, usize) {
    let cand = candidate.ngrams(n);
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in r.ngrams(n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand.iter().map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Sentence BLEU with uniform weights over orders `1..=n`.
///
/// Orders for which the candidate is too short to contain any n-gram are left
/// out of the geometric mean, so a short candidate identical to a reference
/// still scores 1.
pub fn bleu(candidate: &TokenizedText, references: &[TokenizedText], n: usize) -> Result<f64, MetricError> {
    if !(1..=4).contains(&n) {
        return Err(MetricError::InvalidOrder(n));
    }
    if references.is_empty() {
        return Err(MetricError::NoReferences(String::new()));
    }
    let c = candidate.len();
    if c == 0 {
        return Ok(0.0);
    }
    let orders = n.min(c);
    let mut log_sum = 0.0;
    for k in 1..=orders {
        let (matched, total) = clipped_matches(candidate, references, k);
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let r = references
        .iter()
        .map(TokenizedText::len)
        .min_by_key(|&len| (len.abs_diff(c), len))
        .expect("non-empty references");
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / orders as f64).exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with `beta = 1.2`, maximized over references.
pub fn rouge_l(candidate: &TokenizedText, references: &[TokenizedText]) -> Result<f64, MetricError> {
    if references.is_empty() {
        return Err(MetricError::NoReferences(String::new()));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    Ok(references
        .iter()
        .map(|r| {
            let l = lcs_len(&candidate.tokens, &r.tokens);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / candidate.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max))
}

/// Per-order document frequencies over the reference sets of a corpus.
pub struct CiderIdf {
    n_docs: usize,
    df: Vec<HashMap<Vec<String>, usize>>,
}

impl CiderIdf {
    pub fn build(references_per_item: &[Vec<TokenizedText>]) -> Self {
        let mut df = vec![HashMap::new(); 4];
        for refs in references_per_item {
            for (n, table) in df.iter_mut().enumerate() {
                let seen: HashSet<&[String]> = refs.iter().flat_map(|r| r.ngrams(n + 1).into_keys()).collect();
                for g in seen {
                    *table.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Self { n_docs: references_per_item.len(), df }
    }

    fn idf(&self, n: usize, gram: &[String]) -> f64 {
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1);
        (self.n_docs as f64 / df as f64).ln()
    }

    fn vector<'a>(&self, text: &'a TokenizedText, n: usize) -> HashMap<&'a [String], f64> {
        let counts = text.ngrams(n);
        let total: usize = counts.values().sum();
        counts.into_iter().map(|(g, c)| (g, c as f64 / total as f64 * self.idf(n, g))).collect()
    }

    /// CIDEr score of one candidate against its references, in `[0, 1]`.
    ///
    /// Orders longer than the candidate are skipped, as in [`bleu`]. When the
    /// candidate and a reference have identical n-gram multisets the
    /// similarity for that order is 1, even if the TF-IDF vectors vanish
    /// because every n-gram occurs in every document.
    pub fn score(&self, candidate: &TokenizedText, references: &[TokenizedText]) -> f64 {
        if references.is_empty() || candidate.is_empty() {
            return 0.0;
        }
        let orders = candidate.len().min(4);
        let mut total = 0.0;
        for n in 1..=orders {
            let cvec = self.vector(candidate, n);
            let cgrams = candidate.ngrams(n);
            let mut per_ref = 0.0;
            for r in references {
                let penalty = (-((candidate.len() as f64 - r.len() as f64).powi(2)) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                let sim = if cgrams == r.ngrams(n) {
                    1.0
                } else {
                    let rvec = self.vector(r, n);
                    let dot: f64 = cvec.iter().map(|(g, v)| v * rvec.get(g).copied().unwrap_or(0.0)).sum();
                    let nc = cvec.values().map(|v| v * v).sum::<f64>().sqrt();
                    let nr = rvec.values().map(|v| v * v).sum::<f64>().sqrt();
                    if nc == 0.0 || nr == 0.0 {
                        0.0
                    } else {
                        dot / (nc * nr)
                    }
                };
                per_ref += penalty * sim;
            }
            total += per_ref / references.len() as f64;
        }
        total / orders as f64
    }
}

/// Per-item CIDEr scores, IDF taken from the reference corpus.
pub fn cider_items(candidates: &[TokenizedText], references_per_item: &[Vec<TokenizedText>]) -> Result<Vec<f64>, MetricError> {
    if candidates.len() != references_per_item.len() {
        return Err(MetricError::LengthMismatch { pred: candidates.len(), gt: references_per_item.len() });
    }
    if candidates.len() < 2 {
        return Err(MetricError::InsufficientCorpus(candidates.len()));
    }
    let idf = CiderIdf::build(references_per_item);
    Ok(candidates.iter().zip(references_per_item).map(|(c, r)| idf.score(c, r)).collect())
}

/// Corpus CIDEr: mean of per-item scores.
pub fn cider(candidates: &[TokenizedText], references_per_item: &[Vec<TokenizedText>]) -> Result<f64, MetricError> {
    let items = cider_items(candidates, references_per_item)?;
    Ok(items.iter().sum::<f64>() / items.len() as f64)
}

pub fn normalize_answer(text: &str) -> String {
    tokenize(text).tokens.join(" ")
}

pub fn exact_match(candidate: &str, references: &[String]) -> Result<f64, MetricError> {
    if references.is_empty() {
        return Err(MetricError::NoReferences(String::new()));
    }
    let c = normalize_answer(candidate);
    Ok(if references.iter().any(|r| normalize_answer(r) == c) { 1.0 } else { 0.0 })
}

/// One line of the caption/QA evaluation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalItem {
    pub id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScores {
    pub id: String,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: Option<f64>,
    pub em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Absent when the corpus has fewer than two items.
    pub cider: Option<f64>,
    pub em: f64,
    pub items: Vec<ItemScores>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    /// Multiply CIDEr by 10, the scale used by common caption toolkits.
    pub cider_times_ten: bool,
}

/// Scores every item and averages; CIDEr is omitted for single-item corpora.
pub fn evaluate(items: &[EvalItem], opts: EvalOptions) -> Result<MetricReport, MetricError> {
    if items.is_empty() {
        return Err(MetricError::Empty);
    }
    let cands: Vec<TokenizedText> = items.iter().map(|i| tokenize(&i.candidate)).collect();
    let refs: Vec<Vec<TokenizedText>> = items
        .iter()
        .map(|i| {
            if i.references.is_empty() {
                Err(MetricError::NoReferences(i.id.clone()))
            } else {
                Ok(i.references.iter().map(|r| tokenize(r)).collect())
            }
        })
        .collect::<Result<_, _>>()?;
    let scale = if opts.cider_times_ten { 10.0 } else { 1.0 };
    let cider_scores = (items.len() >= 2).then(|| cider_items(&cands, &refs)).transpose()?;
    let mut scored = Vec::with_capacity(items.len());
    for (idx, item) in items.iter().enumerate() {
        let (c, r) = (&cands[idx], &refs[idx]);
        scored.push(ItemScores {
            id: item.id.clone(),
            bleu1: bleu(c, r, 1)?,
            bleu2: bleu(c, r, 2)?,
            bleu3: bleu(c, r, 3)?,
            bleu4: bleu(c, r, 4)?,
            rouge_l: rouge_l(c, r)?,
            cider: cider_scores.as_ref().map(|s| s[idx] * scale),
            em: exact_match(&item.candidate, &item.references)?,
        });
    }
    let n = scored.len() as f64;
    let mean = |f: fn(&ItemScores) -> f64| scored.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        bleu1: mean(|s| s.bleu1),
        bleu2: mean(|s| s.bleu2),
        bleu3: mean(|s| s.bleu3),
        bleu4: mean(|s| s.bleu4),
        rouge_l: mean(|s| s.rouge_l),
        cider: cider_scores.map(|s| s.iter().sum::<f64>() / n * scale),
        em: mean(|s| s.em),
        items: scored,
    })
}

impl MetricReport {
    /// True when every aggregate equals its maximum (1, or 10 for scaled CIDEr).
    pub fn is_maximal(&self, cider_times_ten: bool) -> bool {
        let max_cider = if cider_times_ten { 10.0 } else { 1.0 };
        let close = |v: f64, m: f64| (v - m).abs() < 1e-12;
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.em].iter().all(|v| close(*v, 1.0))
            && self.cider.is_none_or(|c| close(c, max_cider))
    }
}

/// One line of the grounding evaluation input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingItem {
    pub id: String,
    /// `[xmin, ymin, zmin, xmax, ymax, zmax]`
    pub pred: [f64; 6],
    pub gt: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub k: f64,
    pub acc_at_k: f64,
    pub avg_iou: f64,
    pub avg_dist: f64,
    pub n: usize,
}

/// Accuracy counts a prediction when its IoU with ground truth exceeds `k`.
pub fn grounding_metrics(pred: &[Aabb], gt: &[Aabb], k: f64) -> Result<GroundingReport, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = pred.len() as f64;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| aabb_iou(p, g)).collect();
    Ok(GroundingReport {
        k,
        acc_at_k: ious.iter().filter(|&&v| v > k).count() as f64 / n,
        avg_iou: ious.iter().sum::<f64>() / n,
        avg_dist: pred.iter().zip(gt).map(|(p, g)| aabb_center_distance(p, g)).sum::<f64>() / n,
        n: pred.len(),
    })
}
