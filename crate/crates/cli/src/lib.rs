//! Command-line workflow: `gen-synth -> train-head -> predict -> fuse -> evaluate -> report`.
//!
//! Exit codes: 0 on success, 1 on input or validation errors, 2 when an
//! internal invariant breaks. Diagnostics go to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use spoofmeter::fusion::{self, FitProvenance, FusionConfig};
use spoofmeter::head::{self, HeadSidecar, LossMode, TrainConfig};
use spoofmeter::ingest::{self, FrameRecord, ProtocolManifest, SeedSource, ThresholdPolicy};
use spoofmeter::metrics::{self, EvaluationReport};
use spoofmeter::report;
use spoofmeter::synth::{self, SynthConfig};

pub const SEED_ENV: &str = "SPOOFMETER_SEED";

#[derive(Parser, Debug)]
#[command(name = "spoofmeter", version, about = "Face anti-spoofing robustness metrics and MC-dropout head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic feature or score corpus with leave-one-out manifests.
    GenSynth(GenSynthArgs),
    /// Train the MC-dropout head on the manifest's training datasets.
    TrainHead(TrainHeadArgs),
    /// Score feature frames with a trained head.
    Predict(PredictArgs),
    /// Fit fusion weights over several learners and fuse their scores.
    Fuse(FuseArgs),
    /// Compute HTER/AUC/EER/TPR@FPR/Bias/Variance on the test datasets.
    Evaluate(EvaluateArgs),
    /// Tabulate evaluation reports, one row per protocol.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthKind {
    Features,
    Scores,
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "features")]
    pub kind: SynthKind,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    pub domains: usize,
    #[arg(long, default_value_t = 40)]
    pub videos_per_domain: usize,
    #[arg(long, default_value_t = 32)]
    pub frames: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 10.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub domain_shift: f64,
    #[arg(long, default_value_t = 0.3)]
    pub frame_noise: f64,
}

#[derive(Args, Debug)]
pub struct TrainHeadArgs {
    /// FASF feature blob.
    #[arg(long)]
    pub features: PathBuf,
    /// Feature metadata JSONL.
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Head output; a `.json` sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dropout samples per training example.
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    #[arg(long, default_value = "avg-logit")]
    pub loss_mode: String,
    #[arg(long, default_value_t = head::DEFAULT_HIDDEN)]
    pub hidden: usize,
    #[arg(long, default_value_t = head::DEFAULT_DROPOUT)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub head: PathBuf,
    /// Score JSONL output.
    #[arg(long)]
    pub out: PathBuf,
    /// Only used for its seed.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dropout samples per frame at inference.
    #[arg(long, default_value_t = 3)]
    pub samples: usize,
    /// Learner id stamped on every output record.
    #[arg(long)]
    pub learner: Option<String>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Multi-learner score JSONL.
    #[arg(long)]
    pub scores: PathBuf,
    /// When given, weights are fitted on its fit split (or training datasets).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Fusion model: written after fitting, read when no manifest is given.
    #[arg(long)]
    pub fusion: Option<PathBuf>,
    /// Fused score JSONL output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report JSON output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fixed decision threshold, overriding the manifest policy.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Report JSON files.
    pub reports: Vec<PathBuf>,
    /// CSV output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv` (including the program name) and runs it.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<spoofmeter::Error>() {
        Some(inner) if inner.is_internal() => 2,
        _ => 1,
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenSynth(a) => gen_synth(a, out),
        Command::TrainHead(a) => train_head(a, err),
        Command::Predict(a) => predict(a),
        Command::Fuse(a) => fuse(a, err),
        Command::Evaluate(a) => evaluate(a, out, err),
        Command::Report(a) => report_cmd(a, out),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| anyhow!(spoofmeter::Error::Invalid(format!("{SEED_ENV}={v:?} is not a u64")))),
        Err(_) => Ok(None),
    }
}

/// `--seed` beats the manifest's seed, which beats the environment; 0 last.
fn resolve_seed(flag: Option<u64>, manifest_seed: Option<u64>) -> Result<(u64, SeedSource)> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Some(s) = manifest_seed {
        return Ok((s, SeedSource::Manifest));
    }
    if let Some(s) = env_seed()? {
        return Ok((s, SeedSource::Env));
    }
    Ok((0, SeedSource::Default))
}

fn load_manifest_with_seed(path: &Path, flag: Option<u64>) -> Result<ProtocolManifest> {
    let mut m = ingest::load_manifest(path)?;
    let (seed, source) = resolve_seed(flag, m.declared_seed)?;
    m.seed = seed;
    m.seed_source = source;
    Ok(m)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_synth(a: GenSynthArgs, out: &mut dyn Write) -> Result<()> {
    let (seed, _) = resolve_seed(a.seed, None)?;
    let config = SynthConfig {
        n_domains: a.domains,
        videos_per_domain: a.videos_per_domain,
        frames_per_video: a.frames,
        feature_dim: a.dim,
        separation: a.separation,
        domain_shift: a.domain_shift,
        frame_noise: a.frame_noise,
        seed,
    };
    let written = match a.kind {
        SynthKind::Features => synth::write_features_dir(&synth::generate(&config)?, &a.out)?,
        SynthKind::Scores => synth::write_scores_dir(&synth::generate_scores(&config)?, &a.out)?,
    };
    for p in [&written.meta, &written.features, &written.scores, &written.sidecar]
        .into_iter()
        .flatten()
        .chain(&written.manifests)
    {
        writeln!(out, "{}", p.display())?;
    }
    Ok(())
}

fn select(records: &[FrameRecord], datasets: &[String]) -> Vec<FrameRecord> {
    records
        .iter()
        .filter(|r| datasets.contains(&r.dataset_id))
        .cloned()
        .collect()
}

fn train_head(a: TrainHeadArgs, err: &mut dyn Write) -> Result<()> {
    let manifest = load_manifest_with_seed(&a.manifest, a.seed)?;
    let records = ingest::parse_features(&a.meta, &a.features)?;
    // fit datasets stay held out from head training
    let train_ids: Vec<String> = manifest
        .train_datasets
        .iter()
        .filter(|d| !manifest.fit_datasets.contains(d))
        .cloned()
        .collect();
    let data = select(&records, &train_ids);
    if data.is_empty() {
        bail!(spoofmeter::Error::Invalid(format!(
            "no feature frames from training datasets {train_ids:?}"
        )));
    }
    let dim = data[0].feature().map_or(0, |f| f.len());
    let config = TrainConfig {
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        train_samples: a.samples,
        infer_samples: TrainConfig::default().infer_samples,
        seed: manifest.seed,
        loss_mode: a.loss_mode.parse::<LossMode>()?,
    };
    let init = head::init_head(dim, a.hidden, a.dropout, manifest.seed)?;
    let outcome = head::train(&init, &data, &config)?;
    if let Some(last) = outcome.loss_trace.last() {
        writeln!(err, "trained on {} frames, final epoch loss {last:.6}", data.len())?;
    }
    let sidecar = HeadSidecar::new(&outcome.head, &config, outcome.loss_trace.clone());
    head::write_head(&outcome.head, &sidecar, &a.out)?;
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let declared = match &a.manifest {
        Some(p) => ingest::load_manifest(p)?.declared_seed,
        None => None,
    };
    let (seed, _) = resolve_seed(a.seed, declared)?;
    let head = head::read_head(&a.head)?;
    let records = ingest::parse_features(&a.meta, &a.features)?;
    let scored = head::predict_records(&head, &records, a.samples, seed, a.learner.as_deref())?;
    ingest::write_scores(&scored, &a.out)?;
    Ok(())
}

fn fuse(a: FuseArgs, err: &mut dyn Write) -> Result<()> {
    let records = ingest::parse_scores(&a.scores)?;
    let model = match &a.manifest {
        Some(path) => {
            let manifest = load_manifest_with_seed(path, a.seed)?;
            let split = if manifest.fit_datasets.is_empty() {
                manifest.train_datasets.clone()
            } else {
                manifest.fit_datasets.clone()
            };
            let fit_records = select(&records, &split);
            let mut ids = fusion::learner_ids(&records);
            ids.sort();
            let config = FusionConfig {
                seed: manifest.seed,
                ..FusionConfig::default()
            };
            let fit = fusion::fit_weights(&fit_records, &ids, &config)?;
            writeln!(
                err,
                "fusion fit on {split:?}: loss {:.6} -> {:.6}",
                fit.initial_loss, fit.final_loss
            )?;
            if let Some(path) = &a.fusion {
                let prov = FitProvenance {
                    fit_datasets: split,
                    n_frames: fit_records.len() / ids.len().max(1),
                    initial_loss: fit.initial_loss,
                    final_loss: fit.final_loss,
                    config,
                };
                fusion::write_fusion(&fit.model, Some(prov), path)?;
            }
            fit.model
        }
        None => {
            let path = a
                .fusion
                .as_ref()
                .ok_or_else(|| anyhow!(spoofmeter::Error::Invalid("fuse needs --manifest or --fusion".into())))?;
            fusion::read_fusion(path)?
        }
    };
    let fused = fusion::fuse_records(&model, &records)?;
    ingest::write_scores(&fused, &a.out)?;
    Ok(())
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut manifest = load_manifest_with_seed(&a.manifest, a.seed)?;
    if let Some(t) = a.threshold {
        manifest.threshold_policy = ThresholdPolicy::parse(&format!("fixed:{t}"))?;
    }
    let records = ingest::parse_scores(&a.scores)?;
    let groups = ingest::group_videos(&records)?;
    let report: EvaluationReport = metrics::evaluate(&groups, &manifest)?;
    if report.n_short_videos > 0 {
        writeln!(
            err,
            "warning: {} test videos have fewer than {} frames",
            report.n_short_videos, manifest.frames_per_video
        )?;
    }
    if let Some(path) = &a.out {
        write_file(path, report.to_json())?;
    }
    write!(out, "{}", report::render_text(std::slice::from_ref(&report)))?;
    Ok(())
}

fn report_cmd(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(EvaluationReport::from_json(&text, &p.display().to_string())?)
        })
        .collect::<Result<Vec<_>>>()?;
    write!(out, "{}", report::render_text(&reports))?;
    if let Some(path) = &a.out {
        write_file(path, report::render_csv(&reports))?;
    }
    Ok(())
}
