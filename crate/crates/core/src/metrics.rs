//! Video-level aggregation, Bias/Variance, and the ROC-based metric suite.
//!
//! A frame or video is decided live when its probability strictly exceeds
//! the threshold; ties go to spoof.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{count_short_videos, Label, ProtocolManifest, SeedSource, ThresholdPolicy, VideoGroup};

pub const DEFAULT_FPR_LEVELS: [f64; 2] = [0.01, 0.1];

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("{what} {p} outside [0, 1]")));
    }
    Ok(())
}

/// Arithmetic mean of a video's frame probabilities.
pub fn video_probability(frame_probs: &[f64]) -> Result<f64> {
    if frame_probs.is_empty() {
        return Err(Error::Empty("frame probability list"));
    }
    for &p in frame_probs {
        check_prob(p, "frame probability")?;
    }
    let mean = frame_probs.iter().sum::<f64>() / frame_probs.len() as f64;
    // the mean of values in [0, 1] can round a hair outside the interval
    Ok(mean.clamp(0.0, 1.0))
}

pub fn decide(prob: f64, threshold: f64) -> Label {
    if prob > threshold {
        Label::Live
    } else {
        Label::Spoof
    }
}

/// Mean squared error between labels and video probabilities.
pub fn bias(videos: &[(Label, f64)]) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::Empty("video list"));
    }
    let mut sum = 0.0;
    for &(label, p) in videos {
        check_prob(p, "video probability")?;
        let d = label.as_f64() - p;
        sum += d * d;
    }
    Ok(sum / videos.len() as f64)
}

/// Standard deviation with the `1/M` denominator. Zero for a single frame.
pub fn population_std(values: &[f64]) -> f64 {
    if values.windows(2).all(|w| w[0] == w[1]) {
        // also covers empty and single-frame input
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / n).sqrt()
}

/// Mean over videos of the per-video population standard deviation of frame
/// probabilities. Bounded by 0.5 for probabilities in [0, 1].
pub fn variance<V: AsRef<[f64]>>(videos: &[V]) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::Empty("video list"));
    }
    let mut sum = 0.0;
    for v in videos {
        let frames = v.as_ref();
        if frames.is_empty() {
            return Err(Error::Empty("video frame list"));
        }
        for &p in frames {
            check_prob(p, "frame probability")?;
        }
        sum += population_std(frames);
    }
    Ok(sum / videos.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub video_prob: f64,
    pub decision: Label,
    pub frame_probs: Vec<f64>,
    pub frame_decisions: Vec<Label>,
    pub frame_positive_rate: f64,
}

pub fn predict_video(frame_probs: &[f64], threshold: f64) -> Result<VideoPrediction> {
    let video_prob = video_probability(frame_probs)?;
    let frame_decisions: Vec<Label> = frame_probs.iter().map(|&p| decide(p, threshold)).collect();
    let positives = frame_decisions.iter().filter(|&&d| d == Label::Live).count();
    Ok(VideoPrediction {
        video_prob,
        decision: decide(video_prob, threshold),
        frame_probs: frame_probs.to_vec(),
        frame_positive_rate: positives as f64 / frame_probs.len() as f64,
        frame_decisions,
    })
}

/// ROC vertices from `(0, 0)` to `(1, 1)`.
///
/// `thresholds[i]` reproduces `points[i]` under the rule `score > threshold`.
/// Interior thresholds sit midway between adjacent distinct scores; the
/// first is the top score and the last is negative infinity.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` pairs.
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

struct ClassCounts {
    live: usize,
    spoof: usize,
}

fn check_scored(scores: &[f64], labels: &[Label]) -> Result<ClassCounts> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "scores vs labels",
            expected: scores.len(),
            found: labels.len(),
        });
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let live = labels.iter().filter(|&&l| l == Label::Live).count();
    let spoof = labels.len() - live;
    if live == 0 || spoof == 0 {
        return Err(Error::SingleClass(format!(
            "need both classes, found {live} live and {spoof} spoof"
        )));
    }
    Ok(ClassCounts { live, spoof })
}

fn midpoint_threshold(upper: f64, lower: f64) -> f64 {
    let mid = upper / 2.0 + lower / 2.0;
    // adjacent floats: the lower score is the only threshold in [lower, upper)
    if mid >= upper || mid < lower {
        lower
    } else {
        mid
    }
}

pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<RocCurve> {
    let counts = check_scored(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let (n_live, n_spoof) = (counts.live as f64, counts.spoof as f64);
    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![scores[order[0]]];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let current = scores[order[i]];
        while i < order.len() && scores[order[i]] == current {
            match labels[order[i]] {
                Label::Live => tp += 1,
                Label::Spoof => fp += 1,
            }
            i += 1;
        }
        let threshold = if i < order.len() {
            midpoint_threshold(current, scores[order[i]])
        } else {
            f64::NEG_INFINITY
        };
        points.push((fp as f64 / n_spoof, tp as f64 / n_live));
        thresholds.push(threshold);
    }
    Ok(RocCurve { points, thresholds })
}

/// Trapezoidal area; equals the Mann-Whitney statistic with half credit for ties.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EerPoint {
    pub threshold: f64,
    pub eer: f64,
}

/// Operating point where FAR meets FRR, interpolated linearly between the
/// adjacent ROC vertices that bracket the crossing.
pub fn eer_threshold(scores: &[f64], labels: &[Label]) -> Result<EerPoint> {
    let curve = roc_curve(scores, labels)?;
    eer_from_curve(&curve)
}

pub fn eer_from_curve(curve: &RocCurve) -> Result<EerPoint> {
    // gap = FAR - FRR = fpr - (1 - tpr), non-decreasing from -1 to 1
    let gap = |(fpr, tpr): (f64, f64)| fpr + tpr - 1.0;
    let k = curve
        .points
        .windows(2)
        .position(|w| gap(w[0]) <= 0.0 && gap(w[1]) >= 0.0)
        .ok_or_else(|| Error::Internal("ROC curve never crosses FAR = FRR".into()))?;
    let (a, b) = (curve.points[k], curve.points[k + 1]);
    let (ga, gb) = (gap(a), gap(b));
    let alpha = if gb == ga { 0.0 } else { -ga / (gb - ga) };
    let eer = a.0 + alpha * (b.0 - a.0);
    let (ta, tb) = (curve.thresholds[k], curve.thresholds[k + 1]);
    let threshold = if alpha == 0.0 || !tb.is_finite() {
        ta
    } else if alpha == 1.0 {
        tb
    } else {
        ta + alpha * (tb - ta)
    };
    Ok(EerPoint { threshold, eer })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HterPoint {
    pub hter: f64,
    /// Spoof samples accepted as live over all spoof samples.
    pub far: f64,
    /// Live samples rejected over all live samples.
    pub frr: f64,
}

pub fn hter(scores: &[f64], labels: &[Label], threshold: f64) -> Result<HterPoint> {
    let counts = check_scored(scores, labels)?;
    if !threshold.is_finite() {
        return Err(Error::NonFinite(format!("threshold {threshold}")));
    }
    let (mut accepted_spoof, mut rejected_live) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (l, decide(s, threshold)) {
            (Label::Spoof, Label::Live) => accepted_spoof += 1,
            (Label::Live, Label::Spoof) => rejected_live += 1,
            _ => {}
        }
    }
    let far = accepted_spoof as f64 / counts.spoof as f64;
    let frr = rejected_live as f64 / counts.live as f64;
    Ok(HterPoint {
        hter: (far + frr) / 2.0,
        far,
        frr,
    })
}

/// TPR at a fixed FPR, linear between ROC vertices. On a vertical run of
/// vertices sharing the requested FPR the highest TPR is returned.
pub fn tpr_at_fpr(curve: &RocCurve, fpr_level: f64) -> f64 {
    let x = fpr_level.clamp(0.0, 1.0);
    let pts = &curve.points;
    let j = pts.iter().rposition(|p| p.0 <= x).unwrap_or(0);
    let (x0, y0) = pts[j];
    if x0 == x || j + 1 == pts.len() {
        return y0;
    }
    let (x1, y1) = pts[j + 1];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub manifest: String,
    pub seed: u64,
    pub seed_source: SeedSource,
    pub manifest_seed: Option<u64>,
    pub threshold_policy: String,
    pub decision_rule: String,
    /// Free-form provenance added by callers, e.g. head training constants.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub hter: f64,
    pub far: f64,
    pub frr: f64,
    pub auc: f64,
    pub eer: f64,
    pub eer_threshold: f64,
    pub threshold_used: f64,
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub bias: f64,
    pub variance: f64,
    pub n_videos: usize,
    pub n_frames: usize,
    /// Videos with fewer frames than the manifest's `frames_per_video`.
    pub n_short_videos: usize,
    pub provenance: Provenance,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, file: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::malformed(file, e.line(), e.to_string()))
    }
}

struct VideoSummary {
    label: Label,
    prob: f64,
    frames: Vec<f64>,
}

fn summarize(groups: &[&VideoGroup]) -> Result<Vec<VideoSummary>> {
    // per-video work in parallel, collected in input order
    groups
        .par_iter()
        .map(|g| {
            let frames = g.scores()?;
            Ok(VideoSummary {
                label: g.label,
                prob: video_probability(&frames)?,
                frames,
            })
        })
        .collect()
}

fn groups_in<'a>(groups: &'a [VideoGroup], datasets: &[String]) -> Vec<&'a VideoGroup> {
    let mut out: Vec<&VideoGroup> = groups.iter().filter(|g| datasets.contains(&g.dataset_id)).collect();
    out.sort_by(|a, b| {
        (&a.dataset_id, &a.video_id, &a.learner_id).cmp(&(&b.dataset_id, &b.video_id, &b.learner_id))
    });
    out
}

pub fn evaluate(groups: &[VideoGroup], manifest: &ProtocolManifest) -> Result<EvaluationReport> {
    evaluate_with_levels(groups, manifest, &DEFAULT_FPR_LEVELS)
}

/// Scores the manifest's test videos. Groups from other datasets are only
/// used when an `eer:<split>` policy names them.
pub fn evaluate_with_levels(
    groups: &[VideoGroup],
    manifest: &ProtocolManifest,
    fpr_levels: &[f64],
) -> Result<EvaluationReport> {
    let test = groups_in(groups, &manifest.test_datasets);
    if test.is_empty() {
        return Err(Error::Invalid(format!(
            "no videos from test datasets {:?}",
            manifest.test_datasets
        )));
    }
    let mut learners: Vec<&Option<String>> = test.iter().map(|g| &g.learner_id).collect();
    learners.dedup();
    if learners.len() > 1 {
        return Err(Error::Invalid(
            "scores come from several learners; fuse them before evaluating".into(),
        ));
    }

    let videos = summarize(&test)?;
    let probs: Vec<f64> = videos.iter().map(|v| v.prob).collect();
    let labels: Vec<Label> = videos.iter().map(|v| v.label).collect();

    let curve = roc_curve(&probs, &labels)?;
    let eer = eer_from_curve(&curve)?;
    let threshold_used = match &manifest.threshold_policy {
        ThresholdPolicy::Fixed(t) => *t,
        ThresholdPolicy::EerOnSplit(split) => {
            let ids = manifest.split_datasets(split)?;
            let calib = summarize(&groups_in(groups, &ids))?;
            if calib.is_empty() {
                return Err(Error::Invalid(format!("threshold split {split:?} has no videos")));
            }
            let p: Vec<f64> = calib.iter().map(|v| v.prob).collect();
            let l: Vec<Label> = calib.iter().map(|v| v.label).collect();
            eer_threshold(&p, &l)?.threshold
        }
    };
    let point = hter(&probs, &labels, threshold_used)?;

    let pairs: Vec<(Label, f64)> = videos.iter().map(|v| (v.label, v.prob)).collect();
    let frame_lists: Vec<&[f64]> = videos.iter().map(|v| v.frames.as_slice()).collect();

    let test_groups: Vec<VideoGroup> = test.iter().map(|g| (*g).clone()).collect();
    Ok(EvaluationReport {
        hter: point.hter,
        far: point.far,
        frr: point.frr,
        auc: auc(&curve),
        eer: eer.eer,
        eer_threshold: eer.threshold,
        threshold_used,
        tpr_at_fpr: fpr_levels
            .iter()
            .map(|&l| (format!("{l}"), tpr_at_fpr(&curve, l)))
            .collect(),
        bias: bias(&pairs)?,
        variance: variance(&frame_lists)?,
        n_videos: videos.len(),
        n_frames: videos.iter().map(|v| v.frames.len()).sum(),
        n_short_videos: count_short_videos(&test_groups, manifest.frames_per_video),
        provenance: Provenance {
            manifest: manifest.name.clone(),
            seed: manifest.seed,
            seed_source: manifest.seed_source,
            manifest_seed: manifest.declared_seed,
            threshold_policy: manifest.threshold_policy.to_string(),
            decision_rule: "live iff score > threshold".into(),
            extra: BTreeMap::new(),
        },
    })
}
