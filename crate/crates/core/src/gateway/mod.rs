//! Abstraction over the multimodal model backend.
//!
//! One backend serves all four loop roles (captioner, scorer, refiner,
//! reflector), distinguished only by instruction text. Two implementations
//! exist behind the same trait: [`remote::RemoteBackend`] speaks a
//! chat-completions-style HTTP protocol; [`scripted::ScriptedBackend`]
//! replays canned behavior for deterministic runs and tests. They are
//! observationally interchangeable.

pub mod parse;
pub mod remote;
pub mod scripted;

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::BackendDescriptor;
use crate::domain::{ChainOfThought, Prompt, PrincipleSet, Score, Suggestion, TaskDimension, VideoRef};
use crate::error::GatewayError;
pub use parse::{parse_refiner_reply, parse_scorer_reply, ParseFailure, ScorerReply};

/// Which of the four instruction roles a call serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallRole {
    Captioner,
    Scorer,
    Refiner,
    Reflector,
}

impl CallRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            CallRole::Captioner => "captioner",
            CallRole::Scorer => "scorer",
            CallRole::Refiner => "refiner",
            CallRole::Reflector => "reflector",
        }
    }
}

/// Per-call context: which (video, dimension) trajectory the call belongs
/// to. The scripted backend keys its canned replies on this.
#[derive(Debug, Clone, Copy)]
pub struct CallCtx<'a> {
    pub video: &'a VideoRef,
    pub dimension: TaskDimension,
}

impl CallCtx<'_> {
    pub fn key(&self) -> String {
        format!("{}/{}", self.video.id, self.dimension)
    }
}

/// Current round passed to the reflector.
#[derive(Debug, Clone, Copy)]
pub struct CurrentRound<'a> {
    pub prompt: &'a Prompt,
    pub caption: &'a str,
    pub score: Score,
}

/// Previous round passed to the reflector, including its chain-of-thought.
#[derive(Debug, Clone, Copy)]
pub struct PreviousRound<'a> {
    pub prompt: &'a Prompt,
    pub caption: &'a str,
    pub cot: &'a ChainOfThought,
}

/// The model backend interface. Calls within one trajectory are strictly
/// ordered by the caller; calls across trajectories may interleave freely.
#[async_trait]
pub trait Backend: Send + Sync {
    /// Produces a candidate caption for the video under the given prompt.
    async fn generate_caption(
        &self,
        ctx: &CallCtx<'_>,
        prompt: &Prompt,
    ) -> Result<String, GatewayError>;

    /// Scores a caption against the dimension's principles. A malformed
    /// reply is data (`ParseFailure`), not an error: the trajectory records
    /// it and terminates, matching how such cases are filtered later.
    async fn score_caption(
        &self,
        ctx: &CallCtx<'_>,
        caption: &str,
        principles: &PrincipleSet,
        scorer_instruction: &str,
    ) -> Result<Result<ScorerReply, ParseFailure>, GatewayError>;

    /// Asks the refiner for an improved prompt, guided by the suggestion.
    async fn refine_prompt(
        &self,
        ctx: &CallCtx<'_>,
        caption: &str,
        score: Score,
        suggestion: &Suggestion,
        refine_instruction: &str,
        principles: Option<&str>,
    ) -> Result<(Prompt, ChainOfThought), GatewayError>;

    /// Asks the reflector to diagnose a harmful update; the previous
    /// round's chain-of-thought travels in the request context.
    async fn reflect_prompt(
        &self,
        ctx: &CallCtx<'_>,
        current: CurrentRound<'_>,
        previous: PreviousRound<'_>,
        reflect_instruction: &str,
    ) -> Result<(Prompt, ChainOfThought), GatewayError>;
}

// ---------------------------------------------------------------------------
// Request bodies
// ---------------------------------------------------------------------------

/// Builds the chat-completions request body for a call. The same builder
/// serves the remote transport and the scripted backend's audit records, so
/// request digests are comparable across the two.
pub fn chat_body(descriptor: &BackendDescriptor, video: Option<&VideoRef>, text: &str) -> Value {
    let mut content = Vec::new();
    if let Some(v) = video {
        content.push(json!({ "type": "video_url", "video_url": { "url": v.uri } }));
    }
    content.push(json!({ "type": "text", "text": text }));
    json!({
        "model": descriptor.model_name,
        "messages": [ { "role": "user", "content": content } ],
        "temperature": descriptor.temperature,
    })
}

/// sha256 of the canonical (serde_json-serialized) request body.
pub fn request_digest(body: &Value) -> String {
    let bytes = serde_json::to_vec(body).expect("request body serializes");
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Audit log
// ---------------------------------------------------------------------------

/// One line of the append-only call audit log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub role: CallRole,
    pub request_digest: String,
    pub response_text: String,
    pub latency_ms: u64,
}

/// Append-only JSONL audit of every backend call, in global call order.
pub struct AuditLog {
    file: Mutex<std::fs::File>,
    seq: AtomicU64,
}

impl AuditLog {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file), seq: AtomicU64::new(0) })
    }

    /// Appends a record, assigning the next sequence number.
    pub fn record(
        &self,
        role: CallRole,
        request_digest: String,
        response_text: &str,
        latency_ms: u64,
    ) -> std::io::Result<u64> {
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        let rec = AuditRecord {
            seq,
            role,
            request_digest,
            response_text: response_text.to_string(),
            latency_ms,
        };
        let line = serde_json::to_string(&rec).expect("audit record serializes");
        let mut file = self.file.lock().expect("audit lock");
        writeln!(file, "{line}")?;
        Ok(seq)
    }

    pub fn read_all(path: &Path) -> std::io::Result<Vec<AuditRecord>> {
        let text = std::fs::read_to_string(path)?;
        let mut out = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec = serde_json::from_str(line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            out.push(rec);
        }
        Ok(out)
    }
}

/// State shared by both backend implementations: the descriptor, the
/// optional audit log, and the global in-flight limiter.
pub struct GatewayShared {
    pub descriptor: BackendDescriptor,
    pub audit: Option<std::sync::Arc<AuditLog>>,
    pub limiter: Option<std::sync::Arc<tokio::sync::Semaphore>>,
}

impl GatewayShared {
    pub fn new(descriptor: BackendDescriptor) -> Self {
        Self { descriptor, audit: None, limiter: None }
    }

    pub fn with_audit(mut self, audit: std::sync::Arc<AuditLog>) -> Self {
        self.audit = Some(audit);
        self
    }

    pub fn with_parallelism(mut self, max_in_flight: usize) -> Self {
        self.limiter =
            Some(std::sync::Arc::new(tokio::sync::Semaphore::new(max_in_flight.max(1))));
        self
    }

    pub(crate) async fn acquire(&self) -> Option<tokio::sync::OwnedSemaphorePermit> {
        match &self.limiter {
            Some(sem) => {
                Some(sem.clone().acquire_owned().await.expect("limiter never closed"))
            }
            None => None,
        }
    }

    pub(crate) fn log(
        &self,
        role: CallRole,
        body: &Value,
        response_text: &str,
        latency_ms: u64,
    ) -> Result<(), GatewayError> {
        if let Some(audit) = &self.audit {
            audit.record(role, request_digest(body), response_text, latency_ms)?;
        }
        Ok(())
    }
}

/// Renders the scorer instruction for a (caption, dimension) pair.
pub fn render_scorer_text(
    scorer_instruction: &str,
    caption: &str,
    principles: &PrincipleSet,
    dimension: TaskDimension,
) -> String {
    crate::domain::render_template(
        scorer_instruction,
        &[("caption", caption), ("principles", principles.get(dimension))],
    )
}

/// Renders the refine instruction; appends the principle text when the run
/// is configured to show it and the template has no `{principles}` slot.
pub fn render_refine_text(
    refine_instruction: &str,
    caption: &str,
    score: Score,
    suggestion: &Suggestion,
    principles: Option<&str>,
) -> String {
    let score_text = score.to_string();
    let mut values = vec![
        ("caption", caption),
        ("score", score_text.as_str()),
        ("suggestion", suggestion.text.as_str()),
    ];
    if let Some(p) = principles {
        values.push(("principles", p));
    }
    let mut text = crate::domain::render_template(refine_instruction, &values);
    if let Some(p) = principles {
        if !refine_instruction.contains("{principles}") {
            text.push_str("\n\nPrinciples in force:\n");
            text.push_str(p);
        }
    }
    text
}

/// Renders the reflect instruction from the current and previous rounds.
pub fn render_reflect_text(
    reflect_instruction: &str,
    current: &CurrentRound<'_>,
    previous: &PreviousRound<'_>,
) -> String {
    let score_text = current.score.to_string();
    crate::domain::render_template(
        reflect_instruction,
        &[
            ("prompt", current.prompt.text.as_str()),
            ("caption", current.caption),
            ("score", score_text.as_str()),
            ("prev_prompt", previous.prompt.text.as_str()),
            ("prev_caption", previous.caption),
            ("prev_cot", previous.cot.text.as_str()),
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_body_shape() {
        let d = BackendDescriptor::default();
        let v = VideoRef::new("v1", "file:///v1.mp4").unwrap();
        let body = chat_body(&d, Some(&v), "describe");
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"][0]["type"], "video_url");
        assert_eq!(body["messages"][0]["content"][0]["video_url"]["url"], "file:///v1.mp4");
        assert_eq!(body["messages"][0]["content"][1]["type"], "text");
        assert_eq!(body["messages"][0]["content"][1]["text"], "describe");

        let text_only = chat_body(&d, None, "improve");
        assert_eq!(text_only["messages"][0]["content"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn digest_is_stable() {
        let d = BackendDescriptor::default();
        let v = VideoRef::new("v1", "file:///v1.mp4").unwrap();
        let a = request_digest(&chat_body(&d, Some(&v), "judge"));
        let b = request_digest(&chat_body(&d, Some(&v), "judge"));
        assert_eq!(a, b);
        let c = request_digest(&chat_body(&d, Some(&v), "judge!"));
        assert_ne!(a, c);
    }

    #[test]
    fn audit_log_sequences_monotonically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calls.jsonl");
        let log = AuditLog::create(&path).unwrap();
        for _ in 0..3 {
            log.record(CallRole::Captioner, "d".into(), "text", 0).unwrap();
        }
        let recs = AuditLog::read_all(&path).unwrap();
        assert_eq!(recs.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
