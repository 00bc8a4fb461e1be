//! Decision fusion: a convex combination of per-frame live probabilities from
//! several base learners, with weights learned on a held-out fit split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FrameRecord, Label, Payload};

const PROB_FLOOR: f64 = 1e-7;

/// Simplex weights stored through unconstrained logits (`w = softmax(logits)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    learner_ids: Vec<String>,
    logits: Vec<f64>,
    weights: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.iter().map(|e| e / sum).collect()
}

impl FusionModel {
    pub fn uniform(learner_ids: Vec<String>) -> Result<Self> {
        let n = learner_ids.len();
        Self::from_logits(learner_ids, vec![0.0; n])
    }

    pub fn from_logits(learner_ids: Vec<String>, logits: Vec<f64>) -> Result<Self> {
        if learner_ids.is_empty() {
            return Err(Error::Empty("learner list"));
        }
        if logits.len() != learner_ids.len() {
            return Err(Error::DimensionMismatch {
                context: "fusion logits",
                expected: learner_ids.len(),
                found: logits.len(),
            });
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("fusion logit".into()));
        }
        let mut sorted = learner_ids.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("duplicate learner id".into()));
        }
        let weights = softmax(&logits);
        Ok(FusionModel {
            learner_ids,
            logits,
            weights,
        })
    }

    pub fn learner_ids(&self) -> &[String] {
        &self.learner_ids
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn weight_of(&self, learner: &str) -> Option<f64> {
        self.learner_ids.iter().position(|l| l == learner).map(|i| self.weights[i])
    }
}

/// `sum_k w_k p_k` for probabilities aligned with the model's learners.
pub fn fuse(model: &FusionModel, probs: &[f64]) -> Result<f64> {
    if probs.len() != model.weights.len() {
        return Err(Error::DimensionMismatch {
            context: "fused probabilities",
            expected: model.weights.len(),
            found: probs.len(),
        });
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("probability {p} outside [0, 1]")));
    }
    let fused: f64 = model.weights.iter().zip(probs).map(|(w, p)| w * p).sum();
    // keep the convex-hull property exact under rounding
    let (lo, hi) = probs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    Ok(fused.clamp(lo, hi))
}

type FrameKey = (String, String, u64);

/// Frames scored by every learner, in key order.
#[derive(Clone, Debug)]
pub struct AlignedScores {
    pub learner_ids: Vec<String>,
    pub keys: Vec<FrameKey>,
    pub labels: Vec<Label>,
    /// `probs[n][k]`: learner `k` on frame `n`.
    pub probs: Vec<Vec<f64>>,
}

/// Aligns multi-learner score records. Every learner must score every frame.
pub fn align_scores(records: &[FrameRecord], learner_ids: &[String]) -> Result<AlignedScores> {
    if learner_ids.is_empty() {
        return Err(Error::Empty("learner list"));
    }
    let mut table: BTreeMap<FrameKey, (Label, Vec<Option<f64>>)> = BTreeMap::new();
    for r in records {
        let score = r
            .score()
            .ok_or_else(|| Error::Invalid("fusion needs score records".into()))?;
        let learner = r
            .learner_id
            .as_deref()
            .ok_or_else(|| Error::Invalid(format!("frame {:?} has no learner id", r.frame_key())))?;
        let k = learner_ids
            .iter()
            .position(|l| l == learner)
            .ok_or_else(|| Error::Invalid(format!("unknown learner {learner:?}")))?;
        let entry = table
            .entry(r.frame_key())
            .or_insert_with(|| (r.label, vec![None; learner_ids.len()]));
        if entry.0 != r.label {
            return Err(Error::Invalid(format!("learners disagree on the label of {:?}", r.frame_key())));
        }
        if entry.1[k].replace(score).is_some() {
            return Err(Error::Invalid(format!("learner {learner:?} scores {:?} twice", r.frame_key())));
        }
    }
    let mut out = AlignedScores {
        learner_ids: learner_ids.to_vec(),
        keys: Vec::with_capacity(table.len()),
        labels: Vec::with_capacity(table.len()),
        probs: Vec::with_capacity(table.len()),
    };
    for (key, (label, slots)) in table {
        if let Some(k) = slots.iter().position(Option::is_none) {
            return Err(Error::Invalid(format!(
                "misaligned scores: learner {:?} is missing frame {key:?}",
                learner_ids[k]
            )));
        }
        out.keys.push(key);
        out.labels.push(label);
        out.probs.push(slots.into_iter().flatten().collect());
    }
    Ok(out)
}

/// Learner ids in order of first appearance.
pub fn learner_ids(records: &[FrameRecord]) -> Vec<String> {
    let mut ids: Vec<String> = Vec::new();
    for r in records {
        if let Some(l) = &r.learner_id {
            if !ids.contains(l) {
                ids.push(l.clone());
            }
        }
    }
    ids
}

/// Mean clamped probability-space BCE of the fused score.
pub fn fused_bce(weights: &[f64], data: &AlignedScores) -> f64 {
    let total: f64 = data
        .probs
        .iter()
        .zip(&data.labels)
        .map(|(p, &y)| {
            let f: f64 = weights.iter().zip(p).map(|(w, p)| w * p).sum();
            let c = f.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
            match y {
                Label::Live => -c.ln(),
                Label::Spoof => -(1.0 - c).ln(),
            }
        })
        .sum();
    total / data.probs.len() as f64
}

fn logit_gradient(weights: &[f64], data: &AlignedScores) -> Vec<f64> {
    let n = data.probs.len() as f64;
    let mut gw = vec![0.0; weights.len()];
    for (p, &y) in data.probs.iter().zip(&data.labels) {
        let f: f64 = weights.iter().zip(p).map(|(w, p)| w * p).sum();
        if f <= PROB_FLOOR || f >= 1.0 - PROB_FLOOR {
            continue;
        }
        let dldf = match y {
            Label::Live => -1.0 / f,
            Label::Spoof => 1.0 / (1.0 - f),
        };
        for (g, pk) in gw.iter_mut().zip(p) {
            *g += dldf * pk / n;
        }
    }
    // chain rule through softmax
    let mean: f64 = weights.iter().zip(&gw).map(|(w, g)| w * g).sum();
    weights.iter().zip(&gw).map(|(w, g)| w * (g - mean)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            steps: 500,
            learning_rate: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionFit {
    pub model: FusionModel,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub config: FusionConfig,
}

/// Full-batch gradient descent on the logits from a uniform start. A step
/// that would raise the loss is retried at half the step size, so the loss
/// never increases.
pub fn fit_weights(records: &[FrameRecord], learner_ids: &[String], config: &FusionConfig) -> Result<FusionFit> {
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Invalid("fusion learning rate must be positive".into()));
    }
    let data = align_scores(records, learner_ids)?;
    let live = data.labels.iter().filter(|&&l| l == Label::Live).count();
    if live == 0 || live == data.labels.len() {
        return Err(Error::SingleClass("fusion fit split holds a single class".into()));
    }

    let mut logits = vec![0.0; learner_ids.len()];
    let mut weights = softmax(&logits);
    let initial_loss = fused_bce(&weights, &data);
    let mut loss = initial_loss;
    let mut lr = config.learning_rate;
    for _ in 0..config.steps {
        let grad = logit_gradient(&weights, &data);
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = logits.iter().zip(&grad).map(|(l, g)| l - lr * g).collect();
            let trial_w = softmax(&trial);
            let trial_loss = fused_bce(&trial_w, &data);
            if trial_loss <= loss {
                logits = trial;
                weights = trial_w;
                loss = trial_loss;
                accepted = true;
                break;
            }
            lr /= 2.0;
        }
        if !accepted {
            break;
        }
    }
    Ok(FusionFit {
        model: FusionModel::from_logits(learner_ids.to_vec(), logits)?,
        initial_loss,
        final_loss: loss,
        config: config.clone(),
    })
}

/// Fuses multi-learner records into one score per frame (no learner id).
pub fn fuse_records(model: &FusionModel, records: &[FrameRecord]) -> Result<Vec<FrameRecord>> {
    let data = align_scores(records, model.learner_ids())?;
    data.keys
        .iter()
        .zip(&data.labels)
        .zip(&data.probs)
        .map(|(((dataset_id, video_id, frame_idx), &label), p)| {
            Ok(FrameRecord {
                dataset_id: dataset_id.clone(),
                video_id: video_id.clone(),
                frame_idx: *frame_idx,
                label,
                payload: Payload::Score(fuse(model, p)?),
                learner_id: None,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionFile {
    pub learner_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub logits: Vec<f64>,
    pub fit: Option<FitProvenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitProvenance {
    pub fit_datasets: Vec<String>,
    pub n_frames: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub config: FusionConfig,
}

pub fn write_fusion(model: &FusionModel, fit: Option<FitProvenance>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = FusionFile {
        learner_ids: model.learner_ids.clone(),
        weights: model.weights.clone(),
        logits: model.logits.clone(),
        fit,
    };
    let mut json = serde_json::to_string_pretty(&file).map_err(|e| Error::Internal(e.to_string()))?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_fusion(path: impl AsRef<Path>) -> Result<FusionModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: FusionFile = serde_json::from_str(&text)
        .map_err(|e| Error::malformed(path.display().to_string(), e.line(), e.to_string()))?;
    FusionModel::from_logits(file.learner_ids, file.logits)
}
