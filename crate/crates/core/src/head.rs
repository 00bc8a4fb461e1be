//! MLP classifier head with Monte-Carlo dropout.
//!
//! Architecture: `D -> H (ReLU) -> dropout(p) -> 1 logit`. Dropout is the
//! inverted kind, so kept units are scaled by `1 / (1 - p)` and a masked pass
//! is unbiased for the unmasked one. Training draws several masks per example
//! and averages their logits (or their losses) before one BCE; inference
//! averages a few sampled logits and applies a sigmoid.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FrameRecord, Label, Payload, VideoGroup};
use crate::rng::{self, streams};

pub const DEFAULT_HIDDEN: usize = 512;
pub const DEFAULT_DROPOUT: f64 = 0.5;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const INIT_SCHEME: &str = "w ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0";

/// Parameters live in one flat buffer: `w1 (H x D, row-major) | b1 (H) | w2 (H) | b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    input_dim: usize,
    hidden_dim: usize,
    dropout: f64,
    params: Vec<f64>,
}

fn param_count(d: usize, h: usize) -> usize {
    h * d + h + h + 1
}

fn check_dims(d: usize, h: usize, p: f64) -> Result<()> {
    if d == 0 || h == 0 {
        return Err(Error::Invalid(format!("head dims must be positive, got D={d}, H={h}")));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Invalid(format!("dropout rate {p} outside [0, 1)")));
    }
    Ok(())
}

impl MlpHead {
    pub fn from_params(input_dim: usize, hidden_dim: usize, dropout: f64, params: Vec<f64>) -> Result<Self> {
        check_dims(input_dim, hidden_dim, dropout)?;
        let expected = param_count(input_dim, hidden_dim);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "head parameters",
                expected,
                found: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("head parameter {i} = {}", params[i])));
        }
        Ok(MlpHead {
            input_dim,
            hidden_dim,
            dropout,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[..self.hidden_dim * self.input_dim]
    }

    pub fn b1(&self) -> &[f64] {
        let o = self.hidden_dim * self.input_dim;
        &self.params[o..o + self.hidden_dim]
    }

    pub fn w2(&self) -> &[f64] {
        let o = self.hidden_dim * self.input_dim + self.hidden_dim;
        &self.params[o..o + self.hidden_dim]
    }

    pub fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "head input",
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// Hidden pre-activations `W1 x + b1`.
    fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        self.w1()
            .chunks_exact(d)
            .zip(self.b1())
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn logit_from_pre(&self, pre: &[f64], mask: Option<&DropoutMask>) -> f64 {
        let w2 = self.w2();
        let mut z = self.b2();
        for (h, &a) in pre.iter().enumerate() {
            let act = a.max(0.0) * mask.map_or(1.0, |m| m.scale[h]);
            z += w2[h] * act;
        }
        z
    }
}

/// Seeded initialisation; see [`INIT_SCHEME`].
pub fn init_head(input_dim: usize, hidden_dim: usize, dropout: f64, seed: u64) -> Result<MlpHead> {
    check_dims(input_dim, hidden_dim, dropout)?;
    let mut rng = rng::stream(seed, streams::INIT);
    let mut params = vec![0.0; param_count(input_dim, hidden_dim)];
    let b1 = 1.0 / (input_dim as f64).sqrt();
    let u1 = Uniform::new(-b1, b1).map_err(|e| Error::Internal(e.to_string()))?;
    for w in &mut params[..hidden_dim * input_dim] {
        *w = u1.sample(&mut rng);
    }
    let b2 = 1.0 / (hidden_dim as f64).sqrt();
    let u2 = Uniform::new(-b2, b2).map_err(|e| Error::Internal(e.to_string()))?;
    let o = hidden_dim * input_dim + hidden_dim;
    for w in &mut params[o..o + hidden_dim] {
        *w = u2.sample(&mut rng);
    }
    MlpHead::from_params(input_dim, hidden_dim, dropout, params)
}

/// Per-unit multipliers: `0` for a dropped unit, `1 / (1 - p)` for a kept one.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    scale: Vec<f64>,
}

impl DropoutMask {
    pub fn identity(width: usize) -> Self {
        DropoutMask {
            scale: vec![1.0; width],
        }
    }

    /// Draws one uniform per unit; a unit is kept when its draw is `>= p`.
    pub fn sample<R: Rng + ?Sized>(width: usize, p: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - p);
        DropoutMask {
            scale: (0..width)
                .map(|_| if rng.random::<f64>() >= p { keep } else { 0.0 })
                .collect(),
        }
    }

    pub fn from_scales(scale: Vec<f64>) -> Self {
        DropoutMask { scale }
    }

    pub fn scales(&self) -> &[f64] {
        &self.scale
    }

    pub fn width(&self) -> usize {
        self.scale.len()
    }
}

/// Logit for one input. `None` means evaluation mode (no dropout).
pub fn forward(head: &MlpHead, x: &[f64], mask: Option<&DropoutMask>) -> Result<f64> {
    head.check_input(x)?;
    if let Some(m) = mask {
        if m.width() != head.hidden_dim {
            return Err(Error::DimensionMismatch {
                context: "dropout mask",
                expected: head.hidden_dim,
                found: m.width(),
            });
        }
    }
    Ok(head.logit_from_pre(&head.pre_activations(x), mask))
}

#[derive(Clone, Debug, PartialEq)]
pub struct McForward {
    pub mean_logit: f64,
    pub samples: Vec<f64>,
}

/// `samples` stochastic passes, each under a fresh mask. Consumes exactly
/// `samples * H` uniforms from `rng`.
pub fn mc_forward<R: Rng + ?Sized>(head: &MlpHead, x: &[f64], samples: usize, rng: &mut R) -> Result<McForward> {
    if samples == 0 {
        return Err(Error::Invalid("sample count must be at least 1".into()));
    }
    head.check_input(x)?;
    let pre = head.pre_activations(x);
    let logits: Vec<f64> = (0..samples)
        .map(|_| {
            let mask = DropoutMask::sample(head.hidden_dim, head.dropout, rng);
            head.logit_from_pre(&pre, Some(&mask))
        })
        .collect();
    Ok(McForward {
        mean_logit: logits.iter().sum::<f64>() / samples as f64,
        samples: logits,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy from a logit, `softplus(z) - y z`.
pub fn bce_loss(logit: f64, label: Label) -> Result<f64> {
    if !logit.is_finite() {
        return Err(Error::NonFinite(format!("logit {logit}")));
    }
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    Ok(softplus - label.as_f64() * logit)
}

/// How the training-time samples of one example become one loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Average the sampled logits, then one BCE.
    #[default]
    AvgLogit,
    /// Average the per-sample BCE values.
    AvgLoss,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg-logit" => Ok(LossMode::AvgLogit),
            "avg-loss" => Ok(LossMode::AvgLoss),
            other => Err(Error::Invalid(format!("unknown loss mode {other:?}"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::AvgLogit => "avg-logit",
            LossMode::AvgLoss => "avg-loss",
        })
    }
}

/// One labelled input row.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub label: Label,
}

/// Mean batch loss under fixed masks; `masks[i]` holds example `i`'s samples.
pub fn batch_loss(head: &MlpHead, batch: &[Example<'_>], masks: &[Vec<DropoutMask>], mode: LossMode) -> Result<f64> {
    check_batch(head, batch, masks)?;
    let mut total = 0.0;
    for (ex, ms) in batch.iter().zip(masks) {
        let logits = ms
            .iter()
            .map(|m| forward(head, ex.x, Some(m)))
            .collect::<Result<Vec<f64>>>()?;
        total += match mode {
            LossMode::AvgLogit => bce_loss(logits.iter().sum::<f64>() / logits.len() as f64, ex.label)?,
            LossMode::AvgLoss => {
                let mut s = 0.0;
                for &z in &logits {
                    s += bce_loss(z, ex.label)?;
                }
                s / logits.len() as f64
            }
        };
    }
    Ok(total / batch.len() as f64)
}

fn check_batch(head: &MlpHead, batch: &[Example<'_>], masks: &[Vec<DropoutMask>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if masks.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            context: "masks per batch",
            expected: batch.len(),
            found: masks.len(),
        });
    }
    for (ex, ms) in batch.iter().zip(masks) {
        head.check_input(ex.x)?;
        if ms.is_empty() {
            return Err(Error::Invalid("each example needs at least one mask".into()));
        }
        if let Some(m) = ms.iter().find(|m| m.width() != head.hidden_dim) {
            return Err(Error::DimensionMismatch {
                context: "dropout mask",
                expected: head.hidden_dim,
                found: m.width(),
            });
        }
    }
    Ok(())
}

/// Reverse-mode gradients of [`batch_loss`] for every parameter, in the
/// head's flat layout. Returns `(loss, gradients)`.
pub fn backward(
    head: &MlpHead,
    batch: &[Example<'_>],
    masks: &[Vec<DropoutMask>],
    mode: LossMode,
) -> Result<(f64, Vec<f64>)> {
    check_batch(head, batch, masks)?;
    let (d, h) = (head.input_dim, head.hidden_dim);
    let n = batch.len() as f64;
    let mut grad = vec![0.0; head.params.len()];
    let (o_b1, o_w2) = (h * d, h * d + h);
    let o_b2 = o_w2 + h;
    let w2 = head.w2();
    let mut total = 0.0;

    for (ex, ms) in batch.iter().zip(masks) {
        let pre = head.pre_activations(ex.x);
        let logits: Vec<f64> = ms.iter().map(|m| head.logit_from_pre(&pre, Some(m))).collect();
        let s = logits.len() as f64;
        let y = ex.label.as_f64();

        // dL/dz for each sampled logit, already divided by the batch size
        let dz: Vec<f64> = match mode {
            LossMode::AvgLogit => {
                let zbar = logits.iter().sum::<f64>() / s;
                total += bce_loss(zbar, ex.label)?;
                vec![(sigmoid(zbar) - y) / (s * n); logits.len()]
            }
            LossMode::AvgLoss => {
                let mut out = Vec::with_capacity(logits.len());
                for &z in &logits {
                    total += bce_loss(z, ex.label)? / s;
                    out.push((sigmoid(z) - y) / (s * n));
                }
                out
            }
        };

        for (m, &g) in ms.iter().zip(&dz) {
            grad[o_b2] += g;
            for u in 0..h {
                let relu = pre[u].max(0.0);
                let scale = m.scale[u];
                grad[o_w2 + u] += g * relu * scale;
                if pre[u] > 0.0 && scale != 0.0 {
                    let dpre = g * w2[u] * scale;
                    grad[o_b1 + u] += dpre;
                    let row = &mut grad[u * d..(u + 1) * d];
                    for (gw, xv) in row.iter_mut().zip(ex.x) {
                        *gw += dpre * xv;
                    }
                }
            }
        }
    }
    Ok((total / n, grad))
}

/// Bias-corrected Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// Decoupled weight decay `p *= 1 - lr * wd`, then the Adam update.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "adam state",
                expected: self.m.len(),
                found: if params.len() != self.m.len() { params.len() } else { grads.len() },
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] = params[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) -> Result<()> {
    state.step(params, grads, lr, weight_decay)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_samples: usize,
    pub infer_samples: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-6,
            weight_decay: 1e-6,
            batch_size: 16,
            epochs: 100,
            train_samples: 10,
            infer_samples: 3,
            seed: 0,
            loss_mode: LossMode::AvgLogit,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Invalid(format!("weight decay {} must be non-negative", self.weight_decay)));
        }
        if self.batch_size == 0 || self.train_samples == 0 || self.infer_samples == 0 {
            return Err(Error::Invalid("batch size and sample counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub head: MlpHead,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch Adam on labelled feature frames. A pure function of
/// `(head, data, config)`.
pub fn train(head: &MlpHead, data: &[FrameRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    let examples = data
        .iter()
        .map(|r| {
            let x = r
                .feature()
                .ok_or_else(|| Error::Invalid("training needs feature records".into()))?;
            head.check_input(x)?;
            Ok(Example { x, label: r.label })
        })
        .collect::<Result<Vec<_>>>()?;
    let live = examples.iter().filter(|e| e.label == Label::Live).count();
    if live == 0 || live == examples.len() {
        return Err(Error::SingleClass("training data holds a single class".into()));
    }

    let mut head = head.clone();
    let mut adam = AdamState::new(head.params.len());
    let mut shuffle_rng = rng::stream(config.seed, streams::SHUFFLE);
    let mut mask_rng = rng::stream(config.seed, streams::TRAIN_MASKS);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut loss_trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| examples[i]).collect();
            let masks: Vec<Vec<DropoutMask>> = batch
                .iter()
                .map(|_| {
                    (0..config.train_samples)
                        .map(|_| DropoutMask::sample(head.hidden_dim, head.dropout, &mut mask_rng))
                        .collect()
                })
                .collect();
            let (loss, grads) = backward(&head, &batch, &masks, config.loss_mode)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "training diverged at epoch {epoch}, batch {b}: loss {loss}"
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.step(&mut head.params, &grads, config.learning_rate, config.weight_decay)?;
        }
        loss_trace.push(epoch_loss / examples.len() as f64);
    }
    Ok(TrainOutcome { head, loss_trace })
}

/// FNV-1a over the frame identity; selects the frame's random substream.
fn frame_stream(r: &FrameRecord) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(r.dataset_id.as_bytes());
    eat(&[0]);
    eat(r.video_id.as_bytes());
    eat(&[0]);
    eat(&r.frame_idx.to_le_bytes());
    streams::PREDICT_BASE.wrapping_add(h >> 1)
}

/// Scores one feature frame: sigmoid of the mean of `samples` sampled logits.
pub fn score_frame(head: &MlpHead, record: &FrameRecord, samples: usize, seed: u64) -> Result<f64> {
    let x = record
        .feature()
        .ok_or_else(|| Error::Invalid("prediction needs feature records".into()))?;
    let mut r = rng::stream(seed, frame_stream(record));
    Ok(sigmoid(mc_forward(head, x, samples, &mut r)?.mean_logit))
}

/// Replaces feature payloads by live probabilities. Each frame draws from
/// its own substream keyed by identity, so the output does not depend on
/// record order or thread scheduling.
pub fn predict_records(
    head: &MlpHead,
    records: &[FrameRecord],
    samples: usize,
    seed: u64,
    learner_id: Option<&str>,
) -> Result<Vec<FrameRecord>> {
    records
        .par_iter()
        .map(|r| {
            let score = score_frame(head, r, samples, seed)?;
            Ok(FrameRecord {
                dataset_id: r.dataset_id.clone(),
                video_id: r.video_id.clone(),
                frame_idx: r.frame_idx,
                label: r.label,
                payload: Payload::Score(score),
                learner_id: learner_id.map(str::to_string).or_else(|| r.learner_id.clone()),
            })
        })
        .collect()
}

pub fn predict(head: &MlpHead, groups: &[VideoGroup], samples: usize, seed: u64) -> Result<Vec<VideoGroup>> {
    groups
        .iter()
        .map(|g| {
            Ok(VideoGroup {
                frames: predict_records(head, &g.frames, samples, seed, None)?,
                ..g.clone()
            })
        })
        .collect()
}

pub const FASH_MAGIC: [u8; 4] = *b"FASH";
pub const FASH_VERSION: u32 = 1;
const FASH_HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

/// `FASH | version u32 | D u32 | H u32 | p f64 | params f64...`, little-endian.
pub fn encode_head(head: &MlpHead) -> Vec<u8> {
    let mut out = Vec::with_capacity(FASH_HEADER_LEN + head.params.len() * 8);
    out.extend_from_slice(&FASH_MAGIC);
    out.extend_from_slice(&FASH_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(head.hidden_dim as u32).to_le_bytes());
    out.extend_from_slice(&head.dropout.to_le_bytes());
    for p in &head.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_head(bytes: &[u8], file: &str) -> Result<MlpHead> {
    let bad = |m: &str| Error::malformed(file, 0, m.to_string());
    if bytes.len() < FASH_HEADER_LEN {
        return Err(bad("truncated FASH header"));
    }
    if bytes[..4] != FASH_MAGIC {
        return Err(bad("bad magic, expected \"FASH\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FASH_VERSION {
        return Err(bad(&format!("unsupported FASH version {version}")));
    }
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let p = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let body = &bytes[FASH_HEADER_LEN..];
    if body.len() != param_count(d, h) * 8 {
        return Err(bad(&format!(
            "parameter payload holds {} bytes, expected {} for D={d}, H={h}",
            body.len(),
            param_count(d, h) * 8
        )));
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MlpHead::from_params(d, h, p, params)
}

/// JSON written next to a head file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSidecar {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f64,
    pub train_config: TrainConfig,
    pub init_scheme: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_trace: Vec<f64>,
}

impl HeadSidecar {
    pub fn new(head: &MlpHead, config: &TrainConfig, loss_trace: Vec<f64>) -> Self {
        HeadSidecar {
            input_dim: head.input_dim,
            hidden_dim: head.hidden_dim,
            dropout: head.dropout,
            train_config: config.clone(),
            init_scheme: INIT_SCHEME.to_string(),
            adam_beta1: ADAM_BETA1,
            adam_beta2: ADAM_BETA2,
            adam_eps: ADAM_EPS,
            loss_trace,
        }
    }
}

/// Sidecar path for a head file: `head.fash` -> `head.fash.json`.
pub fn sidecar_path(head_path: &Path) -> std::path::PathBuf {
    let mut s = head_path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

pub fn write_head(head: &MlpHead, sidecar: &HeadSidecar, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_head(head)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(sidecar).map_err(|e| Error::Internal(e.to_string()))?;
    json.push('\n');
    fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn read_head(path: impl AsRef<Path>) -> Result<MlpHead> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_head(&bytes, &path.display().to_string())
}

pub fn read_sidecar(head_path: impl AsRef<Path>) -> Result<HeadSidecar> {
    let side = sidecar_path(head_path.as_ref());
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(side.display().to_string(), e.line(), e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_head(d: usize, h: usize, p: f64, seed: u64) -> MlpHead {
        let mut head = init_head(d, h, p, seed).unwrap();
        // non-zero biases so their gradients are exercised too
        let mut r = rng::stream(seed, 99);
        for v in head.params_mut() {
            *v += r.random_range(-0.3..0.3);
        }
        head
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_head(4, 3, 0.5, 11).unwrap();
        assert_eq!(a, init_head(4, 3, 0.5, 11).unwrap());
        assert_ne!(a, init_head(4, 3, 0.5, 12).unwrap());
        let tiny = init_head(1, 1, 0.5, 1).unwrap();
        assert_eq!(tiny.params().len(), 4);
        assert_eq!((tiny.b1(), tiny.b2()), (&[0.0][..], 0.0));
        assert!(init_head(0, 3, 0.5, 1).is_err());
        assert!(init_head(3, 3, 1.0, 1).is_err());
    }

    #[test]
    fn zero_head_is_half() {
        let head = MlpHead::from_params(3, 2, 0.5, vec![0.0; param_count(3, 2)]).unwrap();
        let z = forward(&head, &[1.0, -2.0, 3.0], None).unwrap();
        assert_eq!(z, 0.0);
        assert_eq!(sigmoid(z), 0.5);
    }

    #[test]
    fn forward_matches_straight_line_arithmetic() {
        let head = random_head(3, 2, 0.5, 5);
        let x = [0.4, -1.1, 2.0];
        let p = head.params();
        // w1 = p[0..6], b1 = p[6..8], w2 = p[8..10], b2 = p[10]
        let h0 = (p[0] * x[0] + p[1] * x[1] + p[2] * x[2] + p[6]).max(0.0);
        let h1 = (p[3] * x[0] + p[4] * x[1] + p[5] * x[2] + p[7]).max(0.0);
        let expected = p[8] * h0 * 2.0 + p[9] * h1 * 0.0 + p[10];
        let mask = DropoutMask::from_scales(vec![2.0, 0.0]);
        assert!((forward(&head, &x, Some(&mask)).unwrap() - expected).abs() < 1e-12);
        assert!(forward(&head, &[1.0], None).is_err());
        assert!(forward(&head, &x, Some(&DropoutMask::identity(3))).is_err());
    }

    #[test]
    fn zero_rate_mask_is_identity() {
        let head = random_head(4, 6, 0.0, 2);
        let x = [0.1, 0.2, -0.3, 0.9];
        let mut r = rng::stream(1, 1);
        let m = DropoutMask::sample(6, 0.0, &mut r);
        assert_eq!(m, DropoutMask::identity(6));
        let plain = forward(&head, &x, None).unwrap();
        assert_eq!(forward(&head, &x, Some(&m)).unwrap(), plain);
        let mc = mc_forward(&head, &x, 7, &mut r).unwrap();
        assert!((mc.mean_logit - plain).abs() < 1e-12);
    }

    #[test]
    fn mc_single_sample_and_draw_count() {
        let head = random_head(4, 6, 0.5, 2);
        let x = [0.1, 0.2, -0.3, 0.9];
        let mut r = rng::stream(1, 1);
        let mc = mc_forward(&head, &x, 1, &mut r).unwrap();
        assert_eq!(mc.mean_logit, mc.samples[0]);

        // S * H uniforms consumed
        let mut a = rng::stream(3, 3);
        let mut b = rng::stream(3, 3);
        mc_forward(&head, &x, 4, &mut a).unwrap();
        for _ in 0..4 * 6 {
            let _: f64 = b.random();
        }
        assert_eq!(a.random::<u64>(), b.random::<u64>());
        assert!(mc_forward(&head, &x, 0, &mut a).is_err());
    }

    #[test]
    fn mc_mean_is_unbiased() {
        let head = random_head(5, 8, 0.5, 21);
        let x = [0.5, -0.2, 0.8, 1.0, -0.6];
        let plain = forward(&head, &x, None).unwrap();
        let mut r = rng::stream(2024, 0);
        let mc = mc_forward(&head, &x, 10_000, &mut r).unwrap();
        let n = mc.samples.len() as f64;
        let var = mc.samples.iter().map(|z| (z - mc.mean_logit).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mc.mean_logit - plain).abs() <= 3.0 * se, "{} vs {plain}, se {se}", mc.mean_logit);
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(0.0, Label::Live).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        let l = bce_loss(50.0, Label::Live).unwrap();
        assert!(l >= 0.0 && l < 1e-20);
        assert!((bce_loss(-700.0, Label::Live).unwrap() - 700.0).abs() < 1e-9);
        assert!((bce_loss(700.0, Label::Spoof).unwrap() - 700.0).abs() < 1e-9);
        assert!(bce_loss(f64::NAN, Label::Live).is_err());
    }

    fn finite_difference_check(mode: LossMode, seed: u64) {
        let (d, h) = (7, 5);
        let mut head = random_head(d, h, 0.5, seed);
        let mut r = rng::stream(seed, 7);
        let xs: Vec<Vec<f64>> = (0..4).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let batch: Vec<Example<'_>> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| Example {
                x,
                label: if i % 2 == 0 { Label::Live } else { Label::Spoof },
            })
            .collect();
        let masks: Vec<Vec<DropoutMask>> = (0..4)
            .map(|_| (0..3).map(|_| DropoutMask::sample(h, 0.5, &mut r)).collect())
            .collect();
        let (loss, grad) = backward(&head, &batch, &masks, mode).unwrap();
        assert!((loss - batch_loss(&head, &batch, &masks, mode).unwrap()).abs() < 1e-12);
        let step = 1e-5;
        for i in 0..grad.len() {
            let orig = head.params[i];
            head.params[i] = orig + step;
            let up = batch_loss(&head, &batch, &masks, mode).unwrap();
            head.params[i] = orig - step;
            let down = batch_loss(&head, &batch, &masks, mode).unwrap();
            head.params[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(1e-7);
            assert!(rel < 1e-4, "param {i}: analytic {} numeric {numeric}", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(LossMode::AvgLogit, 3);
        finite_difference_check(LossMode::AvgLoss, 4);
    }

    #[test]
    fn adam_zero_gradient_is_noop_without_decay() {
        let mut p = vec![0.3, -1.2, 4.0];
        let mut s = AdamState::new(3);
        adam_step(&mut s, &mut p, &[0.0; 3], 0.1, 0.0).unwrap();
        assert_eq!(p, vec![0.3, -1.2, 4.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec![1.0, 1.0, 1.0];
        let mut s = AdamState::new(3);
        let lr = 0.01;
        adam_step(&mut s, &mut p, &g, lr, 0.0).unwrap();
        for i in 0..3 {
            // m_hat = g, v_hat = g^2 after one step
            let expected = 1.0 - lr * g[i] / (g[i].abs() + ADAM_EPS);
            assert!((p[i] - expected).abs() < 1e-12, "{i}: {} vs {expected}", p[i]);
        }
        assert!(adam_step(&mut s, &mut p, &[0.0; 2], lr, 0.0).is_err());
    }

    #[test]
    fn adam_decoupled_decay() {
        let mut p = vec![2.0, -3.0];
        let mut s = AdamState::new(2);
        adam_step(&mut s, &mut p, &[0.0, 0.0], 0.1, 0.5).unwrap();
        assert!((p[0] - 2.0 * 0.95).abs() < 1e-15);
        assert!((p[1] + 3.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn head_file_round_trip() {
        let head = random_head(3, 4, 0.5, 8);
        let bytes = encode_head(&head);
        assert_eq!(&bytes[..4], b"FASH");
        assert_eq!(decode_head(&bytes, "h").unwrap(), head);
        assert!(decode_head(&bytes[..bytes.len() - 8], "h").is_err());
    }

    #[test]
    fn loss_mode_parsing() {
        assert_eq!("avg-logit".parse::<LossMode>().unwrap(), LossMode::AvgLogit);
        assert_eq!("avg-loss".parse::<LossMode>().unwrap(), LossMode::AvgLoss);
        assert!("mean".parse::<LossMode>().is_err());
        assert_eq!(LossMode::AvgLoss.to_string(), "avg-loss");
    }
}
