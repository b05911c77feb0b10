//! Error types shared across the pipeline crates.

use std::path::PathBuf;

use crate::domain::TaskDimension;

/// Violations of domain-type invariants.
#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("{0} must be non-empty")]
    EmptyField(&'static str),
    #[error("score {0} outside [0, 100]")]
    ScoreOutOfRange(i64),
    #[error("unknown dimension name {0:?}")]
    UnknownDimension(String),
    #[error("principle text for {0} is empty")]
    EmptyPrinciple(TaskDimension),
    #[error("principle set is missing dimension {0}")]
    MissingPrinciple(TaskDimension),
    #[error("template {0} is empty")]
    EmptyTemplate(&'static str),
    #[error("template {template} uses unknown slot {{{slot}}}")]
    UnknownSlot { template: &'static str, slot: String },
    #[error("template {template} is missing required slot {{{slot}}}")]
    MissingSlot { template: &'static str, slot: &'static str },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Problems loading or validating the run configuration or video manifest.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("missing required field {0}")]
    MissingField(&'static str),
    #[error("lambda {0} outside [0, 100]")]
    LambdaRange(i64),
    #[error("t_max must be >= 1, got {0}")]
    TMaxRange(i64),
    #[error("parallelism must be >= 1, got {0}")]
    ParallelismRange(i64),
    #[error("max_retries must be >= 1, got {0}")]
    RetriesRange(i64),
    #[error("remote backend requires a non-empty endpoint_url")]
    MissingEndpoint,
    #[error("scripted backend requires script_path")]
    MissingScript,
    #[error("duplicate video id {0:?} in manifest")]
    DuplicateVideo(String),
    #[error("schedule field {field} out of range: {detail}")]
    ScheduleRange { field: &'static str, detail: String },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Failures talking to (or scripting) the model backend. Distinct from
/// `ParseFailure`, which is recorded trajectory data, these abort the run.
#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure for {role} call after {attempts} attempt(s): {detail}")]
    Transport { role: &'static str, attempts: u32, detail: String },
    #[error("backend returned an empty reply for {role} call")]
    EmptyReply { role: &'static str },
    #[error("malformed {role} reply ({detail}); raw: {raw:?}")]
    MalformedReply { role: &'static str, detail: String, raw: String },
    #[error("script exhausted for {key} role {role} at call #{index}")]
    ScriptExhausted { key: String, role: &'static str, index: usize },
    #[error("no script entry for {key}")]
    ScriptMissingKey { key: String },
    #[error("reflect requested without a previous refinement to diagnose")]
    ReflectWithoutHistory,
    #[error("audit log write failed: {0}")]
    Audit(#[from] std::io::Error),
}

impl GatewayError {
    pub fn is_transport(&self) -> bool {
        matches!(self, GatewayError::Transport { .. })
    }
}

/// Trajectory store I/O and integrity errors.
#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("store i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store record at line {line} (key {key}): {detail}")]
    Corrupt { line: usize, key: String, detail: String },
}

/// Dataset construction errors.
#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("preference pair requires >= 2 scored steps, trajectory {key} has {steps}")]
    TooFewSteps { key: String, steps: usize },
    #[error("trajectory {key} has an unscored step at t={t}")]
    UnscoredStep { key: String, t: u32 },
}

/// Training-manifest export/validation errors.
#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("manifest i/o: {0}")]
    Io(#[source] std::io::Error),
    #[error("bad manifest header: {0}")]
    Header(String),
    #[error("source dataset checksum mismatch: manifest pinned {expected}, file has {actual}")]
    SourceMismatch { expected: String, actual: String },
    #[error("manifest rows checksum mismatch: header pinned {expected}, rows hash to {actual}")]
    RowsMismatch { expected: String, actual: String },
}

/// Toy-policy training errors.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("context {context} outside table of {contexts}")]
    ContextOutOfRange { context: usize, contexts: usize },
    #[error("token sequence of {tokens} exceeds context sequence of {contexts}")]
    SequenceMismatch { tokens: usize, contexts: usize },
    #[error(
        "non-finite loss at step {step} (epoch {epoch}, batch {batch}, lr {lr:e}): {detail}"
    )]
    NonFinite { step: usize, epoch: u32, batch: usize, lr: f64, detail: String },
    #[error("unknown ordering {0:?} (expected curriculum, shuffled, or anti)")]
    UnknownOrdering(String),
    #[error("empty dataset")]
    EmptyDataset,
}
