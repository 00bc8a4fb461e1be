//! Score files, feature files and protocol manifests.
//!
//! Formats:
//!
//! - scores: UTF-8 JSONL, one object per frame with `dataset`, `video_id`,
//!   `frame_idx`, `label`, `score` and an optional `learner`.
//! - features: `<name>.meta.jsonl` (one row per frame, no payload) paired with
//!   `<name>.fasf`, a 20-byte header followed by `count * dims` little-endian
//!   `f32` values in row-major order.
//! - manifests: a single JSON document, see [`ProtocolManifest`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Spoof = 0,
    Live = 1,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Spoof => 0.0,
            Label::Live => 1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Spoof => Label::Live,
            Label::Live => Label::Spoof,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Label::Spoof),
            1 => Ok(Label::Live),
            other => Err(format!("label {other} not in {{0, 1}}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    /// Probability that the frame is live.
    Score(f64),
    Feature(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub dataset_id: String,
    pub video_id: String,
    pub frame_idx: u64,
    pub label: Label,
    pub payload: Payload,
    pub learner_id: Option<String>,
}

impl FrameRecord {
    pub fn score(&self) -> Option<f64> {
        match self.payload {
            Payload::Score(s) => Some(s),
            Payload::Feature(_) => None,
        }
    }

    pub fn feature(&self) -> Option<&[f64]> {
        match &self.payload {
            Payload::Feature(f) => Some(f),
            Payload::Score(_) => None,
        }
    }

    /// Frame identity without the learner.
    pub fn frame_key(&self) -> (String, String, u64) {
        (self.dataset_id.clone(), self.video_id.clone(), self.frame_idx)
    }
}

type RecordKey = (String, String, u64, Option<String>);

fn record_key(r: &FrameRecord) -> RecordKey {
    (
        r.dataset_id.clone(),
        r.video_id.clone(),
        r.frame_idx,
        r.learner_id.clone(),
    )
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreLineIn {
    dataset: String,
    video_id: String,
    frame_idx: u64,
    label: u8,
    score: f64,
    #[serde(default)]
    learner: Option<String>,
}

#[derive(Serialize)]
struct ScoreLineOut<'a> {
    dataset: &'a str,
    video_id: &'a str,
    frame_idx: u64,
    label: u8,
    score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    learner: Option<&'a str>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaLine {
    dataset: String,
    video_id: String,
    frame_idx: u64,
    label: u8,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn non_blank_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

pub fn parse_scores(path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    parse_scores_str(&read_to_string(path)?, &path.display().to_string())
}

/// Parses score JSONL held in memory; `file` only labels diagnostics.
pub fn parse_scores_str(text: &str, file: &str) -> Result<Vec<FrameRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line_no, line) in non_blank_lines(text) {
        let row: ScoreLineIn =
            serde_json::from_str(line).map_err(|e| Error::malformed(file, line_no, e.to_string()))?;
        let label = Label::try_from(row.label).map_err(|m| Error::malformed(file, line_no, m))?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(Error::malformed(
                file,
                line_no,
                format!("score {} outside [0, 1]", row.score),
            ));
        }
        let rec = FrameRecord {
            dataset_id: row.dataset,
            video_id: row.video_id,
            frame_idx: row.frame_idx,
            label,
            payload: Payload::Score(row.score),
            learner_id: row.learner,
        };
        if !seen.insert(record_key(&rec)) {
            return Err(Error::malformed(
                file,
                line_no,
                format!(
                    "duplicate record for dataset {:?} video {:?} frame {}",
                    rec.dataset_id, rec.video_id, rec.frame_idx
                ),
            ));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Serialises score records to JSONL. Fails on feature payloads.
pub fn encode_scores(records: &[FrameRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let score = r
            .score()
            .ok_or_else(|| Error::Invalid("cannot write a feature record as a score".into()))?;
        let line = ScoreLineOut {
            dataset: &r.dataset_id,
            video_id: &r.video_id,
            frame_idx: r.frame_idx,
            label: r.label.into(),
            score,
            learner: r.learner_id.as_deref(),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Internal(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_scores(records: &[FrameRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_scores(records)?).map_err(|e| Error::io(path, e))
}

pub const FASF_MAGIC: [u8; 4] = *b"FASF";
pub const FASF_VERSION: u32 = 1;
pub const FASF_HEADER_LEN: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub count: u64,
    pub dims: u32,
}

impl FeatureFileHeader {
    pub fn encode(&self) -> [u8; FASF_HEADER_LEN] {
        let mut buf = [0u8; FASF_HEADER_LEN];
        buf[..4].copy_from_slice(&FASF_MAGIC);
        buf[4..8].copy_from_slice(&self.version.to_le_bytes());
        buf[8..16].copy_from_slice(&self.count.to_le_bytes());
        buf[16..20].copy_from_slice(&self.dims.to_le_bytes());
        buf
    }

    /// Decodes the header and checks it against the payload length.
    pub fn decode<'a>(bytes: &'a [u8], file: &str) -> Result<(FeatureFileHeader, &'a [u8])> {
        if bytes.len() < FASF_HEADER_LEN {
            return Err(Error::malformed(file, 0, "truncated FASF header"));
        }
        if bytes[..4] != FASF_MAGIC {
            return Err(Error::malformed(file, 0, "bad magic, expected \"FASF\""));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dims = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        if version != FASF_VERSION {
            return Err(Error::malformed(file, 0, format!("unsupported FASF version {version}")));
        }
        let payload = &bytes[FASF_HEADER_LEN..];
        let expected = count
            .checked_mul(dims as u64)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::malformed(file, 0, "header count * dims overflows"))?;
        if payload.len() as u64 != expected {
            return Err(Error::malformed(
                file,
                0,
                format!(
                    "payload length mismatch: header declares {count} x {dims} floats ({expected} bytes), found {} bytes",
                    payload.len()
                ),
            ));
        }
        Ok((FeatureFileHeader { version, count, dims }, payload))
    }
}

pub fn parse_features(meta_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<Vec<FrameRecord>> {
    let (meta_path, blob_path) = (meta_path.as_ref(), blob_path.as_ref());
    let meta = read_to_string(meta_path)?;
    let blob = fs::read(blob_path).map_err(|e| Error::io(blob_path, e))?;
    decode_features(
        &meta,
        &blob,
        &meta_path.display().to_string(),
        &blob_path.display().to_string(),
    )
}

pub fn decode_features(meta: &str, blob: &[u8], meta_file: &str, blob_file: &str) -> Result<Vec<FrameRecord>> {
    let (header, payload) = FeatureFileHeader::decode(blob, blob_file)?;
    let dims = header.dims as usize;

    let mut rows = Vec::new();
    for (line_no, line) in non_blank_lines(meta) {
        let row: MetaLine =
            serde_json::from_str(line).map_err(|e| Error::malformed(meta_file, line_no, e.to_string()))?;
        let label = Label::try_from(row.label).map_err(|m| Error::malformed(meta_file, line_no, m))?;
        rows.push((line_no, row, label));
    }
    if rows.len() as u64 != header.count {
        return Err(Error::Invalid(format!(
            "metadata/blob count mismatch: {meta_file} has {} rows, {blob_file} declares {}",
            rows.len(),
            header.count
        )));
    }

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for (row_idx, (line_no, row, label)) in rows.into_iter().enumerate() {
        let start = row_idx * dims * 4;
        let feature: Vec<f64> = payload[start..start + dims * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(col) = feature.iter().position(|v| !v.is_finite()) {
            return Err(Error::malformed(
                blob_file,
                row_idx + 1,
                format!("non-finite value {} at row {row_idx}, column {col}", feature[col]),
            ));
        }
        let rec = FrameRecord {
            dataset_id: row.dataset,
            video_id: row.video_id,
            frame_idx: row.frame_idx,
            label,
            payload: Payload::Feature(feature),
            learner_id: None,
        };
        if !seen.insert(record_key(&rec)) {
            return Err(Error::malformed(meta_file, line_no, "duplicate frame record"));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Serialises feature records to `(meta JSONL, FASF blob)`.
pub fn encode_features(records: &[FrameRecord]) -> Result<(String, Vec<u8>)> {
    let dims = records.first().and_then(|r| r.feature()).map_or(0, |f| f.len());
    let header = FeatureFileHeader {
        version: FASF_VERSION,
        count: records.len() as u64,
        dims: u32::try_from(dims).map_err(|_| Error::Invalid("feature width exceeds u32".into()))?,
    };
    let mut meta = String::new();
    let mut blob = Vec::with_capacity(FASF_HEADER_LEN + records.len() * dims * 4);
    blob.extend_from_slice(&header.encode());
    for r in records {
        let f = r
            .feature()
            .ok_or_else(|| Error::Invalid("cannot write a score record as a feature".into()))?;
        if f.len() != dims {
            return Err(Error::DimensionMismatch {
                context: "feature row",
                expected: dims,
                found: f.len(),
            });
        }
        let line = MetaLine {
            dataset: r.dataset_id.clone(),
            video_id: r.video_id.clone(),
            frame_idx: r.frame_idx,
            label: r.label.into(),
        };
        meta.push_str(&serde_json::to_string(&line).map_err(|e| Error::Internal(e.to_string()))?);
        meta.push('\n');
        for v in f {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok((meta, blob))
}

pub fn write_features(records: &[FrameRecord], meta_path: impl AsRef<Path>, blob_path: impl AsRef<Path>) -> Result<()> {
    let (meta_path, blob_path) = (meta_path.as_ref(), blob_path.as_ref());
    let (meta, blob) = encode_features(records)?;
    fs::write(meta_path, meta).map_err(|e| Error::io(meta_path, e))?;
    fs::write(blob_path, blob).map_err(|e| Error::io(blob_path, e))
}

/// Ordered frames of one video, as seen by one learner.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoGroup {
    pub dataset_id: String,
    pub video_id: String,
    pub learner_id: Option<String>,
    pub label: Label,
    /// Sorted ascending by `frame_idx`.
    pub frames: Vec<FrameRecord>,
}

impl VideoGroup {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Frame scores in frame order; fails if the group carries features.
    pub fn scores(&self) -> Result<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| {
                f.score().ok_or_else(|| {
                    Error::Invalid(format!("video {:?} carries features, not scores", self.video_id))
                })
            })
            .collect()
    }
}

/// Groups records by `(dataset, video, learner)`, sorting frames by index.
///
/// Groups come out in key order, so the result does not depend on the order
/// of the input records.
pub fn group_videos(records: &[FrameRecord]) -> Result<Vec<VideoGroup>> {
    if let Some(first) = records.first() {
        let scored = first.score().is_some();
        if records.iter().any(|r| r.score().is_some() != scored) {
            return Err(Error::Invalid("records mix score and feature payloads".into()));
        }
    }

    let mut groups: BTreeMap<(String, String, Option<String>), Vec<FrameRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset_id.clone(), r.video_id.clone(), r.learner_id.clone()))
            .or_default()
            .push(r.clone());
    }

    groups
        .into_iter()
        .map(|((dataset_id, video_id, learner_id), mut frames)| {
            let label = frames[0].label;
            if frames.iter().any(|f| f.label != label) {
                return Err(Error::Invalid(format!(
                    "video {video_id:?} in dataset {dataset_id:?} has conflicting labels"
                )));
            }
            frames.sort_by_key(|f| f.frame_idx);
            if frames.windows(2).any(|w| w[0].frame_idx == w[1].frame_idx) {
                return Err(Error::Invalid(format!(
                    "video {video_id:?} in dataset {dataset_id:?} repeats a frame index"
                )));
            }
            Ok(VideoGroup {
                dataset_id,
                video_id,
                learner_id,
                label,
                frames,
            })
        })
        .collect()
}

/// Number of videos holding fewer than `frames_per_video` frames.
pub fn count_short_videos(groups: &[VideoGroup], frames_per_video: u32) -> usize {
    groups.iter().filter(|g| g.len() < frames_per_video as usize).count()
}

#[derive(Clone, Debug, PartialEq)]
pub enum ThresholdPolicy {
    Fixed(f64),
    /// Threshold at the EER of the named split's video scores.
    EerOnSplit(String),
}

impl ThresholdPolicy {
    pub fn parse(s: &str) -> Result<ThresholdPolicy> {
        if let Some(t) = s.strip_prefix("fixed:") {
            let t: f64 = t
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad fixed threshold in {s:?}")))?;
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Invalid(format!("fixed threshold {t} outside (0, 1)")));
            }
            Ok(ThresholdPolicy::Fixed(t))
        } else if let Some(split) = s.strip_prefix("eer:") {
            if split.trim().is_empty() {
                return Err(Error::Invalid("eer threshold policy needs a split name".into()));
            }
            Ok(ThresholdPolicy::EerOnSplit(split.trim().to_string()))
        } else {
            Err(Error::Invalid(format!("unknown threshold policy {s:?}")))
        }
    }
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Fixed(0.5)
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Fixed(t) => write!(f, "fixed:{t}"),
            ThresholdPolicy::EerOnSplit(s) => write!(f, "eer:{s}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedSource {
    Manifest,
    Flag,
    Env,
    Default,
}

pub const DEFAULT_FRAMES_PER_VIDEO: u32 = 32;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    name: String,
    train: Vec<String>,
    test: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    fit: Vec<String>,
    #[serde(default)]
    threshold_policy: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    frames_per_video: Option<u32>,
}

/// One leave-one-out protocol, e.g. `OCI->M`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolManifest {
    pub name: String,
    pub train_datasets: Vec<String>,
    pub test_datasets: Vec<String>,
    /// Held-out training data for fitting fusion weights. Never the test set.
    pub fit_datasets: Vec<String>,
    pub threshold_policy: ThresholdPolicy,
    /// Seed in effect after resolution, see [`SeedSource`].
    pub seed: u64,
    pub seed_source: SeedSource,
    /// Seed as written in the manifest document, if any.
    pub declared_seed: Option<u64>,
    pub frames_per_video: u32,
}

impl ProtocolManifest {
    pub fn new(name: impl Into<String>, train: Vec<String>, test: Vec<String>) -> Result<Self> {
        let m = ProtocolManifest {
            name: name.into(),
            train_datasets: train,
            test_datasets: test,
            fit_datasets: Vec::new(),
            threshold_policy: ThresholdPolicy::default(),
            seed: 0,
            seed_source: SeedSource::Default,
            declared_seed: None,
            frames_per_video: DEFAULT_FRAMES_PER_VIDEO,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.declared_seed = Some(seed);
        self.seed_source = SeedSource::Manifest;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_datasets.is_empty() || self.test_datasets.is_empty() {
            return Err(Error::Invalid(format!(
                "manifest {:?}: train and test dataset lists must be non-empty",
                self.name
            )));
        }
        if let Some(d) = self.test_datasets.iter().find(|d| self.train_datasets.contains(d)) {
            return Err(Error::Invalid(format!(
                "manifest {:?}: dataset {d:?} is in both train and test",
                self.name
            )));
        }
        if let Some(d) = self.test_datasets.iter().find(|d| self.fit_datasets.contains(d)) {
            return Err(Error::Invalid(format!(
                "manifest {:?}: fit split contains test dataset {d:?}",
                self.name
            )));
        }
        if self.frames_per_video == 0 {
            return Err(Error::Invalid("frames_per_video must be positive".into()));
        }
        if let ThresholdPolicy::Fixed(t) = self.threshold_policy {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Invalid(format!("fixed threshold {t} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Resolves a split name: `train`, `test`, `fit`, or `+`-joined dataset ids.
    pub fn split_datasets(&self, split: &str) -> Result<Vec<String>> {
        let ids = match split {
            "train" => self.train_datasets.clone(),
            "test" => self.test_datasets.clone(),
            "fit" => self.fit_datasets.clone(),
            other => other.split('+').map(|s| s.trim().to_string()).collect(),
        };
        if ids.is_empty() || ids.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid(format!("split {split:?} names no datasets")));
        }
        Ok(ids)
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let raw: ManifestFile = serde_json::from_str(text).map_err(|e| Error::malformed(file, e.line(), e.to_string()))?;
        let threshold_policy = match raw.threshold_policy.as_deref() {
            Some(s) => ThresholdPolicy::parse(s)?,
            None => ThresholdPolicy::default(),
        };
        let m = ProtocolManifest {
            name: raw.name,
            train_datasets: raw.train,
            test_datasets: raw.test,
            fit_datasets: raw.fit,
            threshold_policy,
            seed: raw.seed.unwrap_or(0),
            seed_source: if raw.seed.is_some() {
                SeedSource::Manifest
            } else {
                SeedSource::Default
            },
            declared_seed: raw.seed,
            frames_per_video: raw.frames_per_video.unwrap_or(DEFAULT_FRAMES_PER_VIDEO),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let raw = ManifestFile {
            name: self.name.clone(),
            train: self.train_datasets.clone(),
            test: self.test_datasets.clone(),
            fit: self.fit_datasets.clone(),
            threshold_policy: Some(self.threshold_policy.to_string()),
            seed: self.declared_seed,
            frames_per_video: Some(self.frames_per_video),
        };
        let mut s = serde_json::to_string_pretty(&raw).expect("manifest serialises");
        s.push('\n');
        s
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<ProtocolManifest> {
    let path = path.as_ref();
    ProtocolManifest::parse(&read_to_string(path)?, &path.display().to_string())
}
