//! Sinusoidal 3D position embeddings and the bounding-box location-token codec.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalizeError {
    #[error("invalid position-embedding config: {0}")]
    InvalidEmbedConfig(String),
    #[error("invalid location-token config: {0}")]
    InvalidTokenConfig(String),
    #[error("feature/position row mismatch: {features} feature rows of width {width}, {positions} positions")]
    DimensionMismatch { features: usize, width: usize, positions: usize },
    #[error("box lies entirely outside the scene bounds")]
    OutOfBounds,
    #[error("token id {id} is not a location token (valid range {lo}..{hi})")]
    InvalidToken { id: u32, lo: u32, hi: u32 },
    #[error("malformed location text at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Add,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosEmbedConfig {
    pub d_v: usize,
    #[serde(default = "default_scale_min")]
    pub scale_min: f64,
    #[serde(default = "default_scale_max")]
    pub scale_max: f64,
    #[serde(default)]
    pub combine: Combine,
}

fn default_scale_min() -> f64 {
    0.1
}

fn default_scale_max() -> f64 {
    100.0
}

impl PosEmbedConfig {
    pub fn new(d_v: usize) -> Result<Self, LocalizeError> {
        let cfg = Self { d_v, scale_min: default_scale_min(), scale_max: default_scale_max(), combine: Combine::Add };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Largest even integer not exceeding `d_v / 3`.
    pub fn per_axis(&self) -> usize {
        (self.d_v / 3) & !1
    }

    pub fn padding(&self) -> usize {
        self.d_v - 3 * self.per_axis()
    }

    pub fn validate(&self) -> Result<(), LocalizeError> {
        if self.per_axis() < 2 {
            return Err(LocalizeError::InvalidEmbedConfig(format!("d_v = {} gives fewer than 2 components per axis", self.d_v)));
        }
        if !(self.scale_min > 0.0 && self.scale_min < self.scale_max && self.scale_max.is_finite()) {
            return Err(LocalizeError::InvalidEmbedConfig(format!(
                "need 0 < scale_min < scale_max, got {} and {}",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }

    /// Angular frequencies, geometric from `2 pi / scale_max` up to `2 pi / scale_min`.
    pub fn frequencies(&self) -> Vec<f64> {
        let n = self.per_axis() / 2;
        let lo = std::f64::consts::TAU / self.scale_max;
        let hi = std::f64::consts::TAU / self.scale_min;
        if n == 1 {
            return vec![lo];
        }
        (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
    }

    pub fn output_dim(&self) -> usize {
        match self.combine {
            Combine::Add => self.d_v,
            Combine::Concat => 2 * self.d_v,
        }
    }
}

/// `[x block | y block | z block | zero padding]`; each block is
/// `sin(w_0 p), cos(w_0 p), sin(w_1 p), cos(w_1 p), ...`.
pub fn position_embedding(point: &Vec3, cfg: &PosEmbedConfig) -> Vec<f64> {
    let freqs = cfg.frequencies();
    let mut out = Vec::with_capacity(cfg.d_v);
    for axis in 0..3 {
        for w in &freqs {
            let (s, c) = (w * point[axis]).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    out.resize(cfg.d_v, 0.0);
    out
}

/// Row-major `N x d_v` features plus `N` positions to `N x output_dim`.
pub fn augment_features(features: &[f64], positions: &[Vec3], cfg: &PosEmbedConfig) -> Result<Vec<f64>, LocalizeError> {
    cfg.validate()?;
    let d = cfg.d_v;
    if features.len() != positions.len() * d {
        return Err(LocalizeError::DimensionMismatch { features: features.len() / d.max(1), width: d, positions: positions.len() });
    }
    let mut out = Vec::with_capacity(positions.len() * cfg.output_dim());
    for (row, p) in features.chunks_exact(d).zip(positions) {
        let e = position_embedding(p, cfg);
        match cfg.combine {
            Combine::Add => out.extend(row.iter().zip(&e).map(|(f, e)| f + e)),
            Combine::Concat => {
                out.extend_from_slice(row);
                out.extend_from_slice(&e);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocTokenConfig {
    pub scene_bounds: Aabb,
    #[serde(default = "default_bins")]
    pub bins: u32,
    #[serde(default = "default_base_vocab")]
    pub base_vocab: u32,
}

fn default_bins() -> u32 {
    256
}

fn default_base_vocab() -> u32 {
    32000
}

impl LocTokenConfig {
    pub fn new(scene_bounds: Aabb, bins: u32, base_vocab: u32) -> Result<Self, LocalizeError> {
        let cfg = Self { scene_bounds, bins, base_vocab };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_defaults(scene_bounds: Aabb) -> Result<Self, LocalizeError> {
        Self::new(scene_bounds, default_bins(), default_base_vocab())
    }

    pub fn validate(&self) -> Result<(), LocalizeError> {
        if self.bins < 2 {
            return Err(LocalizeError::InvalidTokenConfig(format!("bins = {} < 2", self.bins)));
        }
        if (0..3).any(|a| !(self.scene_bounds.max[a] > self.scene_bounds.min[a])) {
            return Err(LocalizeError::InvalidTokenConfig("scene bounds are degenerate".into()));
        }
        if self.base_vocab.checked_add(self.bins).is_none() {
            return Err(LocalizeError::InvalidTokenConfig("vocabulary size overflows u32".into()));
        }
        Ok(())
    }

    /// Width of one bin along `axis`.
    pub fn bin_width(&self, axis: usize) -> f64 {
        (self.scene_bounds.max[axis] - self.scene_bounds.min[axis]) / self.bins as f64
    }

    pub fn bin_of(&self, axis: usize, coord: f64) -> u32 {
        let lo = self.scene_bounds.min[axis];
        let hi = self.scene_bounds.max[axis];
        let b = ((coord - lo) / (hi - lo) * self.bins as f64).floor();
        b.clamp(0.0, (self.bins - 1) as f64) as u32
    }

    pub fn bin_center(&self, axis: usize, bin: u32) -> f64 {
        self.scene_bounds.min[axis] + (bin as f64 + 0.5) * self.bin_width(axis)
    }
}

/// Six quantized corners in order `x_min, y_min, z_min, x_max, y_max, z_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LocTokenSequence {
    pub bins: [u32; 6],
    pub base_vocab: u32,
}

impl LocTokenSequence {
    pub fn from_ids(ids: [u32; 6], cfg: &LocTokenConfig) -> Result<Self, LocalizeError> {
        let (lo, hi) = (cfg.base_vocab, cfg.base_vocab + cfg.bins);
        let mut bins = [0u32; 6];
        for (b, &id) in bins.iter_mut().zip(&ids) {
            if !(lo..hi).contains(&id) {
                return Err(LocalizeError::InvalidToken { id, lo, hi });
            }
            *b = id - lo;
        }
        Ok(Self { bins, base_vocab: cfg.base_vocab })
    }

    /// Vocabulary ids, `base_vocab + bin`.
    pub fn ids(&self) -> [u32; 6] {
        self.bins.map(|b| self.base_vocab + b)
    }
}

impl fmt::Display for LocTokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bins {
            write!(f, "<loc_{b}>")?;
        }
        Ok(())
    }
}

pub fn encode_location(aabb: &Aabb, cfg: &LocTokenConfig) -> Result<LocTokenSequence, LocalizeError> {
    cfg.validate()?;
    if !cfg.scene_bounds.intersects(aabb) {
        return Err(LocalizeError::OutOfBounds);
    }
    let mut bins = [0u32; 6];
    for a in 0..3 {
        bins[a] = cfg.bin_of(a, aabb.min[a]);
        bins[a + 3] = cfg.bin_of(a, aabb.max[a]);
    }
    Ok(LocTokenSequence { bins, base_vocab: cfg.base_vocab })
}

/// Bin centers; per-axis min/max are swapped if out of order.
pub fn decode_location(tokens: &LocTokenSequence, cfg: &LocTokenConfig) -> Result<Aabb, LocalizeError> {
    cfg.validate()?;
    if tokens.base_vocab != cfg.base_vocab {
        return Err(LocalizeError::InvalidToken { id: tokens.ids()[0], lo: cfg.base_vocab, hi: cfg.base_vocab + cfg.bins });
    }
    if let Some(&b) = tokens.bins.iter().find(|b| **b >= cfg.bins) {
        return Err(LocalizeError::InvalidToken { id: cfg.base_vocab + b, lo: cfg.base_vocab, hi: cfg.base_vocab + cfg.bins });
    }
    let mut min = Vec3::zeros();
    let mut max = Vec3::zeros();
    for a in 0..3 {
        let (lo, hi) = (cfg.bin_center(a, tokens.bins[a]), cfg.bin_center(a, tokens.bins[a + 3]));
        min[a] = lo.min(hi);
        max[a] = lo.max(hi);
    }
    Ok(Aabb { min, max })
}

pub fn render_location_text(tokens: &LocTokenSequence) -> String {
    tokens.to_string()
}

/// Parse exactly six `<loc_N>` tokens with nothing between or around them.
pub fn parse_location_text(text: &str, cfg: &LocTokenConfig) -> Result<LocTokenSequence, LocalizeError> {
    let (seq, end) = parse_sequence_at(text, 0, cfg)?;
    if end != text.len() {
        return Err(LocalizeError::Parse { offset: end, reason: "trailing characters after six location tokens".into() });
    }
    Ok(seq)
}

/// Every run of six consecutive `<loc_N>` tokens found in free text.
pub fn find_location_sequences(text: &str, cfg: &LocTokenConfig) -> Vec<LocTokenSequence> {
    let mut out = Vec::new();
    let mut pos = 0;
    while let Some(rel) = text[pos..].find("<loc_") {
        let start = pos + rel;
        match parse_sequence_at(text, start, cfg) {
            Ok((seq, end)) => {
                out.push(seq);
                pos = end;
            }
            Err(_) => pos = start + 1,
        }
    }
    out
}

fn parse_sequence_at(text: &str, start: usize, cfg: &LocTokenConfig) -> Result<(LocTokenSequence, usize), LocalizeError> {
    let bytes = text.as_bytes();
    let mut pos = start;
    let mut bins = [0u32; 6];
    for slot in bins.iter_mut() {
        let err = |offset: usize, reason: &str| LocalizeError::Parse { offset, reason: reason.to_string() };
        if !text[pos..].starts_with("<loc_") {
            return Err(err(pos, "expected \"<loc_\""));
        }
        pos += 5;
        let digits_start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == digits_start {
            return Err(err(digits_start, "expected a non-negative decimal bin index"));
        }
        let value: u32 = text[digits_start..pos].parse().map_err(|_| err(digits_start, "bin index does not fit in u32"))?;
        if value >= cfg.bins {
            return Err(err(digits_start, &format!("bin {value} out of range (bins = {})", cfg.bins)));
        }
        if bytes.get(pos) != Some(&b'>') {
            return Err(err(pos, "expected '>'"));
        }
        pos += 1;
        *slot = value;
    }
    Ok((LocTokenSequence { bins, base_vocab: cfg.base_vocab }, pos))
}

/// Vocabulary after appending the location tokens; only they are trainable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabAugmentation {
    pub base_vocab: u32,
    pub total_vocab: u32,
    pub trainable_mask: Vec<bool>,
}

impl VocabAugmentation {
    pub fn new(cfg: &LocTokenConfig) -> Result<Self, LocalizeError> {
        cfg.validate()?;
        let total = cfg.base_vocab + cfg.bins;
        let trainable_mask = (0..total).map(|id| id >= cfg.base_vocab).collect();
        Ok(Self { base_vocab: cfg.base_vocab, total_vocab: total, trainable_mask })
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_mask.iter().filter(|t| **t).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube10() -> LocTokenConfig {
        LocTokenConfig::new(Aabb::from_arrays([0.0; 3], [10.0; 3]).unwrap(), 256, 1000).unwrap()
    }

    #[test]
    fn zero_point_pattern() {
        let cfg = PosEmbedConfig::new(20).unwrap();
        assert_eq!(cfg.per_axis(), 6);
        assert_eq!(cfg.padding(), 2);
        let e = position_embedding(&Vec3::zeros(), &cfg);
        assert_eq!(e.len(), 20);
        for pair in e[..18].chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        assert_eq!(&e[18..], &[0.0, 0.0]);
    }

    #[test]
    fn wide_width_padding() {
        let cfg = PosEmbedConfig::new(1408).unwrap();
        assert_eq!((cfg.per_axis(), cfg.padding()), (468, 4));
        let cfg = PosEmbedConfig::new(1024).unwrap();
        assert_eq!((cfg.per_axis(), cfg.padding()), (340, 4));
    }

    #[test]
    fn frequency_span() {
        let cfg = PosEmbedConfig::new(30).unwrap();
        let f = cfg.frequencies();
        assert_eq!(f.len(), 5);
        assert!((f[0] - std::f64::consts::TAU / 100.0).abs() < 1e-15);
        assert!((f[4] - std::f64::consts::TAU / 0.1).abs() < 1e-9);
        assert!(PosEmbedConfig::new(5).is_err());
        assert!(PosEmbedConfig { scale_min: 2.0, scale_max: 1.0, ..PosEmbedConfig::new(12).unwrap() }.validate().is_err());
    }

    #[test]
    fn axis_blocks_are_independent() {
        let cfg = PosEmbedConfig::new(40).unwrap();
        let a = position_embedding(&Vec3::new(1.0, 2.0, 3.0), &cfg);
        let b = position_embedding(&Vec3::new(-4.0, 2.0, 3.0), &cfg);
        let p = cfg.per_axis();
        assert_ne!(&a[..p], &b[..p]);
        assert_eq!(&a[p..], &b[p..]);
        assert_eq!(a, position_embedding(&Vec3::new(1.0, 2.0, 3.0), &cfg));
    }

    #[test]
    fn augment_add_and_concat() {
        let mut cfg = PosEmbedConfig::new(9).unwrap();
        let pos = vec![Vec3::new(0.5, -1.0, 2.0), Vec3::new(3.0, 0.0, 1.0)];
        let zeros = vec![0.0; 18];
        let added = augment_features(&zeros, &pos, &cfg).unwrap();
        assert_eq!(&added[..9], position_embedding(&pos[0], &cfg).as_slice());
        let feats: Vec<f64> = (0..18).map(|i| i as f64 * 0.37 - 2.0).collect();
        let added = augment_features(&feats, &pos, &cfg).unwrap();
        for (r, p) in pos.iter().enumerate() {
            let e = position_embedding(p, &cfg);
            for c in 0..9 {
                assert!((added[r * 9 + c] - e[c] - feats[r * 9 + c]).abs() < 1e-12);
            }
        }
        cfg.combine = Combine::Concat;
        let cat = augment_features(&feats, &pos, &cfg).unwrap();
        assert_eq!(cat.len(), 36);
        assert_eq!(&cat[..9], &feats[..9]);
        assert_eq!(&cat[18..27], &feats[9..18]);
        assert!(matches!(augment_features(&feats[..10], &pos, &cfg), Err(LocalizeError::DimensionMismatch { .. })));
    }

    #[test]
    fn encode_whole_scene_and_corner() {
        let cfg = cube10();
        let seq = encode_location(&cfg.scene_bounds, &cfg).unwrap();
        assert_eq!(seq.bins, [0, 0, 0, 255, 255, 255]);
        assert_eq!(seq.ids(), [1000, 1000, 1000, 1255, 1255, 1255]);
        let corner = Aabb::from_arrays([0.0; 3], [0.0; 3]).unwrap();
        assert_eq!(encode_location(&corner, &cfg).unwrap().bins, [0; 6]);
        let b = Aabb::from_arrays([2.5, 3.3, 9.99], [7.0, 9.0, 10.0]).unwrap();
        let seq = encode_location(&b, &cfg).unwrap();
        let oracle = |c: f64| ((c / 10.0 * 256.0).floor() as u32).min(255);
        assert_eq!(seq.bins[0], 64);
        assert_eq!(seq.bins, [oracle(2.5), oracle(3.3), oracle(9.99), oracle(7.0), oracle(9.0), oracle(10.0)]);
        let outside = Aabb::from_arrays([11.0; 3], [12.0; 3]).unwrap();
        assert_eq!(encode_location(&outside, &cfg), Err(LocalizeError::OutOfBounds));
    }

    #[test]
    fn decode_extremes_and_errors() {
        let cfg = cube10();
        let seq = LocTokenSequence { bins: [0, 0, 0, 255, 255, 255], base_vocab: 1000 };
        let b = decode_location(&seq, &cfg).unwrap();
        let half = 10.0 / 512.0;
        assert!((b.min - Vec3::repeat(half)).norm() < 1e-12);
        assert!((b.max - Vec3::repeat(10.0 - half)).norm() < 1e-12);
        let swapped = decode_location(&LocTokenSequence { bins: [9, 0, 0, 3, 1, 1], base_vocab: 1000 }, &cfg).unwrap();
        assert!(swapped.min.x < swapped.max.x);
        assert!(LocTokenSequence::from_ids([999, 1000, 1000, 1000, 1000, 1000], &cfg).is_err());
        assert!(LocTokenSequence::from_ids([1256, 1000, 1000, 1000, 1000, 1000], &cfg).is_err());
        assert!(decode_location(&LocTokenSequence { bins: [256, 0, 0, 0, 0, 0], base_vocab: 1000 }, &cfg).is_err());
    }

    #[test]
    fn text_form() {
        let cfg = cube10();
        let seq = LocTokenSequence { bins: [0, 0, 0, 1, 1, 1], base_vocab: 1000 };
        assert_eq!(render_location_text(&seq), "<loc_0><loc_0><loc_0><loc_1><loc_1><loc_1>");
        assert_eq!(parse_location_text(&render_location_text(&seq), &cfg).unwrap(), seq);
        let err = parse_location_text("<loc_-1><loc_0><loc_0><loc_1><loc_1><loc_1>", &cfg).unwrap_err();
        assert_eq!(err, LocalizeError::Parse { offset: 5, reason: "expected a non-negative decimal bin index".into() });
        assert!(matches!(parse_location_text("<loc_0><loc_0><loc_0><loc_1><loc_1><loc_256>", &cfg), Err(LocalizeError::Parse { offset: 40, .. })));
        assert!(matches!(parse_location_text("<loc_0> <loc_0><loc_0><loc_1><loc_1><loc_1>", &cfg), Err(LocalizeError::Parse { offset: 7, .. })));
        assert!(matches!(parse_location_text("<loc_0><loc_0><loc_0><loc_1><loc_1>", &cfg), Err(LocalizeError::Parse { offset: 35, .. })));
        assert!(parse_location_text("<loc_0><loc_0><loc_0><loc_1><loc_1><loc_1>x", &cfg).is_err());
        let found = find_location_sequences("a chair <loc_1><loc_2><loc_3><loc_4><loc_5><loc_6>; lamp <loc_0><loc_0>", &cfg);
        assert_eq!(found, vec![LocTokenSequence { bins: [1, 2, 3, 4, 5, 6], base_vocab: 1000 }]);
    }

    #[test]
    fn vocab_mask_selects_only_location_tokens() {
        let cfg = LocTokenConfig::new(Aabb::from_arrays([0.0; 3], [1.0; 3]).unwrap(), 16, 100).unwrap();
        let v = VocabAugmentation::new(&cfg).unwrap();
        assert_eq!(v.total_vocab, 116);
        assert_eq!(v.trainable_count(), 16);
        assert!(v.trainable_mask[..100].iter().all(|t| !t));
        assert!(v.trainable_mask[100..].iter().all(|t| *t));
    }

    proptest! {
        #[test]
        fn components_bounded(x in -500.0..500.0f64, y in -500.0..500.0f64, z in -500.0..500.0f64) {
            let cfg = PosEmbedConfig::new(64).unwrap();
            prop_assert!(position_embedding(&Vec3::new(x, y, z), &cfg).iter().all(|c| (-1.0..=1.0).contains(c)));
        }

        #[test]
        fn encoding_is_monotone(a in 0.0..10.0f64, b in 0.0..10.0f64) {
            let cfg = cube10();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(cfg.bin_of(0, lo) <= cfg.bin_of(0, hi));
        }

        #[test]
        fn quantization_bound(lo in prop::array::uniform3(0.0..10.0f64), ext in prop::array::uniform3(0.0..10.0f64)) {
            let cfg = cube10();
            let max = [ (lo[0] + ext[0]).min(10.0), (lo[1] + ext[1]).min(10.0), (lo[2] + ext[2]).min(10.0) ];
            let b = Aabb::from_arrays(lo, max).unwrap();
            let d = decode_location(&encode_location(&b, &cfg).unwrap(), &cfg).unwrap();
            for a in 0..3 {
                prop_assert!((d.min[a] - b.min[a]).abs() <= cfg.bin_width(a) / 2.0 + 1e-12);
                prop_assert!((d.max[a] - b.max[a]).abs() <= cfg.bin_width(a) / 2.0 + 1e-12);
            }
        }

        #[test]
        fn text_round_trip(bins in prop::array::uniform6(0u32..256)) {
            let cfg = cube10();
            let seq = LocTokenSequence { bins, base_vocab: cfg.base_vocab };
            let text = render_location_text(&seq);
            prop_assert_eq!(parse_location_text(&text, &cfg).unwrap(), seq);
        }
    }
}
