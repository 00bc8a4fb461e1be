//! Video-level robustness metrics and an uncertainty-aware scoring head for
//! face anti-spoofing.
//!
//! The crate is organised around the evaluation pipeline:
//!
//! - [`ingest`]: score files, feature files and protocol manifests.
//! - [`metrics`]: Bias, Variance, ROC/AUC, EER, HTER and TPR@FPR.
//! - [`head`]: an MLP classifier head with Monte-Carlo dropout, trained with Adam.
//! - [`fusion`]: learned convex weights over several base learners.
//! - [`synth`]: a seeded generator of synthetic feature and score files.
//! - [`report`]: plain-text and CSV tables over evaluation reports.
//!
//! Labels are coded `live = 1`, `spoof = 0` everywhere.

pub mod error;
pub mod fusion;
pub mod head;
pub mod ingest;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use ingest::{FrameRecord, Label, Payload, ProtocolManifest, ThresholdPolicy, VideoGroup};
pub use metrics::EvaluationReport;
