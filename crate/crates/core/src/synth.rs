//! Seeded synthetic data: feature files and score files with controllable
//! class separation, per-domain shift and within-video frame noise.
//!
//! Domains are named `A`, `B`, `C`, ... and every video alternates live
//! (even index) and spoof (odd index).

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::sigmoid;
use crate::ingest::{encode_features, encode_scores, FrameRecord, Label, Payload, ProtocolManifest};
use crate::rng::{self, streams, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_domains: usize,
    pub videos_per_domain: usize,
    pub frames_per_video: usize,
    pub feature_dim: usize,
    /// Distance between the live and spoof class centres.
    pub separation: f64,
    /// Norm of each domain's mean offset.
    pub domain_shift: f64,
    /// Isotropic per-frame noise std.
    pub frame_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_domains: 4,
            videos_per_domain: 40,
            frames_per_video: 32,
            feature_dim: 16,
            separation: 10.0,
            domain_shift: 1.0,
            frame_noise: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_domains == 0 || self.videos_per_domain == 0 || self.frames_per_video == 0 || self.feature_dim == 0 {
            return Err(Error::Invalid("synthetic counts must all be at least 1".into()));
        }
        if self.n_domains > 26 {
            return Err(Error::Invalid("at most 26 synthetic domains".into()));
        }
        for (name, v) in [
            ("separation", self.separation),
            ("domain_shift", self.domain_shift),
            ("frame_noise", self.frame_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn domain_ids(&self) -> Vec<String> {
        (0..self.n_domains).map(|i| ((b'A' + i as u8) as char).to_string()).collect()
    }
}

fn video_label(v: usize) -> Label {
    if v % 2 == 0 {
        Label::Live
    } else {
        Label::Spoof
    }
}

fn video_id(v: usize) -> String {
    format!("v{v:04}")
}

fn unit_vector(rng: &mut StreamRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// One leave-one-out manifest per domain, e.g. `BCD->A`. Empty for one domain.
pub fn leave_one_out_manifests(config: &SynthConfig) -> Result<Vec<ProtocolManifest>> {
    let ids = config.domain_ids();
    if ids.len() < 2 {
        return Ok(Vec::new());
    }
    ids.iter()
        .map(|held| {
            let train: Vec<String> = ids.iter().filter(|d| *d != held).cloned().collect();
            let name = format!("{}->{held}", train.concat());
            let mut m = ProtocolManifest::new(name, train, vec![held.clone()])?.with_seed(config.seed);
            m.frames_per_video = config.frames_per_video as u32;
            Ok(m)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SynthFeatures {
    pub records: Vec<FrameRecord>,
    pub manifests: Vec<ProtocolManifest>,
}

/// Feature frames: `class centre + domain offset + frame noise`, where the
/// class centres sit at `+-separation/2` along one random unit direction.
pub fn generate(config: &SynthConfig) -> Result<SynthFeatures> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, streams::SYNTH);
    let dim = config.feature_dim;
    let class_dir = unit_vector(&mut rng, dim);
    let mut records = Vec::with_capacity(config.n_domains * config.videos_per_domain * config.frames_per_video);
    for domain in config.domain_ids() {
        let offset: Vec<f64> = unit_vector(&mut rng, dim)
            .into_iter()
            .map(|x| x * config.domain_shift)
            .collect();
        for v in 0..config.videos_per_domain {
            let label = video_label(v);
            let sign = if label == Label::Live { 0.5 } else { -0.5 };
            let latent: Vec<f64> = class_dir
                .iter()
                .zip(&offset)
                .map(|(c, o)| sign * config.separation * c + o)
                .collect();
            for f in 0..config.frames_per_video {
                let feature = latent
                    .iter()
                    .map(|m| {
                        let eps: f64 = rng.sample(StandardNormal);
                        // stored as f32 on disk; round now so in-memory == on-disk
                        (m + config.frame_noise * eps) as f32 as f64
                    })
                    .collect();
                records.push(FrameRecord {
                    dataset_id: domain.clone(),
                    video_id: video_id(v),
                    frame_idx: f as u64,
                    label,
                    payload: Payload::Feature(feature),
                    learner_id: None,
                });
            }
        }
    }
    Ok(SynthFeatures {
        records,
        manifests: leave_one_out_manifests(config)?,
    })
}

/// Ground truth for one generated score video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoTruth {
    pub dataset: String,
    pub video_id: String,
    pub label: Label,
    /// Video-level latent on the logit scale.
    pub latent: f64,
    pub mean: f64,
    /// Population std of the emitted frame probabilities.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub config: SynthConfig,
    pub videos: Vec<VideoTruth>,
}

#[derive(Clone, Debug)]
pub struct SynthScores {
    pub records: Vec<FrameRecord>,
    pub sidecar: Sidecar,
    pub manifests: Vec<ProtocolManifest>,
}

/// Compensated sum, independent of the plain summation used by the metrics.
fn neumaier_sum(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Score frames generated directly on the logit scale:
/// `p = sigmoid(+-separation/2 + domain offset + frame_noise * eps)`.
///
/// Random draws do not depend on the magnitudes, so two configs that differ
/// only in `frame_noise` share every draw.
pub fn generate_scores(config: &SynthConfig) -> Result<SynthScores> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, streams::SYNTH);
    let mut records = Vec::new();
    let mut videos = Vec::new();
    for domain in config.domain_ids() {
        let offset = if rng.random::<bool>() {
            config.domain_shift
        } else {
            -config.domain_shift
        };
        for v in 0..config.videos_per_domain {
            let label = video_label(v);
            let sign = if label == Label::Live { 0.5 } else { -0.5 };
            let latent = sign * config.separation + offset;
            let probs: Vec<f64> = (0..config.frames_per_video)
                .map(|_| {
                    let eps: f64 = rng.sample(StandardNormal);
                    sigmoid(latent + config.frame_noise * eps).clamp(0.0, 1.0)
                })
                .collect();
            let n = probs.len() as f64;
            let mean = neumaier_sum(&probs) / n;
            let sq: Vec<f64> = probs.iter().map(|p| (p - mean) * (p - mean)).collect();
            let std = (neumaier_sum(&sq) / n).sqrt();
            for (f, &p) in probs.iter().enumerate() {
                records.push(FrameRecord {
                    dataset_id: domain.clone(),
                    video_id: video_id(v),
                    frame_idx: f as u64,
                    label,
                    payload: Payload::Score(p),
                    learner_id: None,
                });
            }
            videos.push(VideoTruth {
                dataset: domain.clone(),
                video_id: video_id(v),
                label,
                latent,
                mean,
                std,
            });
        }
    }
    Ok(SynthScores {
        records,
        sidecar: Sidecar {
            config: config.clone(),
            videos,
        },
        manifests: leave_one_out_manifests(config)?,
    })
}

/// Files written by [`write_features_dir`] or [`write_scores_dir`].
#[derive(Clone, Debug, Default)]
pub struct WrittenFiles {
    pub meta: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub manifests: Vec<PathBuf>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_manifests(dir: &Path, manifests: &[ProtocolManifest]) -> Result<Vec<PathBuf>> {
    manifests
        .iter()
        .map(|m| {
            let path = dir.join(format!("protocol_{}.json", m.test_datasets.concat()));
            write(&path, m.to_json())?;
            Ok(path)
        })
        .collect()
}

/// Writes `features.meta.jsonl`, `features.fasf` and `protocol_<held-out>.json`.
pub fn write_features_dir(data: &SynthFeatures, dir: impl AsRef<Path>) -> Result<WrittenFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (meta, blob) = encode_features(&data.records)?;
    let meta_path = dir.join("features.meta.jsonl");
    let blob_path = dir.join("features.fasf");
    write(&meta_path, meta)?;
    write(&blob_path, blob)?;
    Ok(WrittenFiles {
        meta: Some(meta_path),
        features: Some(blob_path),
        manifests: write_manifests(dir, &data.manifests)?,
        ..WrittenFiles::default()
    })
}

/// Writes `scores.jsonl`, `sidecar.json` and `protocol_<held-out>.json`.
pub fn write_scores_dir(data: &SynthScores, dir: impl AsRef<Path>) -> Result<WrittenFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let scores_path = dir.join("scores.jsonl");
    let sidecar_path = dir.join("sidecar.json");
    write(&scores_path, encode_scores(&data.records)?)?;
    let mut side = serde_json::to_string_pretty(&data.sidecar).map_err(|e| Error::Internal(e.to_string()))?;
    side.push('\n');
    write(&sidecar_path, side)?;
    Ok(WrittenFiles {
        scores: Some(scores_path),
        sidecar: Some(sidecar_path),
        manifests: write_manifests(dir, &data.manifests)?,
        ..WrittenFiles::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{decode_features, group_videos, parse_scores_str};
    use crate::metrics::variance;

    fn small() -> SynthConfig {
        SynthConfig {
            n_domains: 3,
            videos_per_domain: 4,
            frames_per_video: 5,
            feature_dim: 6,
            seed: 9,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn features_are_deterministic_and_valid() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        let (ma, ba) = encode_features(&a.records).unwrap();
        let (mb, bb) = encode_features(&b.records).unwrap();
        assert_eq!((ma.as_str(), ba.as_slice()), (mb.as_str(), bb.as_slice()));
        let parsed = decode_features(&ma, &ba, "m", "b").unwrap();
        assert_eq!(parsed, a.records);
        assert_eq!(parsed.len(), 3 * 4 * 5);
        assert_eq!(a.manifests.len(), 3);
        assert_eq!(a.manifests[0].name, "BC->A");
    }

    #[test]
    fn zero_noise_scores_have_zero_variance() {
        let cfg = SynthConfig {
            frame_noise: 0.0,
            ..small()
        };
        let s = generate_scores(&cfg).unwrap();
        let groups = group_videos(&s.records).unwrap();
        let lists: Vec<Vec<f64>> = groups.iter().map(|g| g.scores().unwrap()).collect();
        assert_eq!(variance(&lists).unwrap(), 0.0);
    }

    #[test]
    fn emitted_scores_parse() {
        let s = generate_scores(&small()).unwrap();
        let text = encode_scores(&s.records).unwrap();
        assert_eq!(parse_scores_str(&text, "s").unwrap(), s.records);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SynthConfig { n_domains: 0, ..small() }).is_err());
        assert!(generate(&SynthConfig { separation: -1.0, ..small() }).is_err());
        assert!(generate_scores(&SynthConfig { frame_noise: f64::NAN, ..small() }).is_err());
    }
}
