//! Chat-completions HTTP client for the remote backend.
//!
//! Requests carry the video by URI; frame extraction is the inference
//! server's concern. Transport failures are retried up to the descriptor's
//! attempt budget; malformed payloads are not transport failures and are
//! surfaced immediately.

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::Value;

use crate::config::BackendDescriptor;
use crate::domain::{
    ChainOfThought, CotSource, Prompt, PromptOrigin, PrincipleSet, Score, Suggestion,
};
use crate::error::GatewayError;

use super::{
    chat_body, parse_refiner_reply, parse_scorer_reply, render_reflect_text, render_refine_text,
    render_scorer_text, Backend, CallCtx, CallRole, CurrentRound, GatewayShared, ParseFailure,
    PreviousRound, ScorerReply,
};

const RETRY_BASE_DELAY: Duration = Duration::from_millis(50);
const RETRY_MAX_DELAY: Duration = Duration::from_secs(2);

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    content: String,
}

/// HTTP backend speaking the chat-completions protocol described in
/// `docs/protocol.md`.
pub struct RemoteBackend {
    shared: GatewayShared,
    http: reqwest::Client,
    endpoint: String,
}

impl RemoteBackend {
    pub fn new(descriptor: BackendDescriptor) -> Result<Self, GatewayError> {
        let endpoint = descriptor.endpoint_url.clone().ok_or(GatewayError::Transport {
            role: "gateway",
            attempts: 0,
            detail: "remote backend has no endpoint_url".into(),
        })?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(descriptor.timeout_s.max(0.001)))
            .build()
            .map_err(|e| GatewayError::Transport {
                role: "gateway",
                attempts: 0,
                detail: e.to_string(),
            })?;
        Ok(Self { shared: GatewayShared::new(descriptor), http, endpoint })
    }

    pub fn with_audit(mut self, audit: Arc<super::AuditLog>) -> Self {
        self.shared = self.shared.with_audit(audit);
        self
    }

    pub fn with_parallelism(mut self, max_in_flight: usize) -> Self {
        self.shared = self.shared.with_parallelism(max_in_flight);
        self
    }

    /// POSTs the body, retrying transport-class failures (connect errors,
    /// timeouts, 429 and 5xx statuses) up to `max_retries` total attempts.
    /// Returns the assistant message content.
    async fn call(&self, role: CallRole, body: &Value) -> Result<String, GatewayError> {
        let _permit = self.shared.acquire().await;
        let attempts = self.shared.descriptor.max_retries.max(1);
        let token = std::env::var(&self.shared.descriptor.token_env).ok();
        let started = Instant::now();
        let mut last_error = String::new();

        for attempt in 1..=attempts {
            if attempt > 1 {
                let backoff = RETRY_BASE_DELAY * 2u32.pow(attempt - 2);
                tokio::time::sleep(backoff.min(RETRY_MAX_DELAY)).await;
            }
            let mut req = self.http.post(&self.endpoint).json(body);
            if let Some(token) = &token {
                req = req.bearer_auth(token);
            }
            let response = match req.send().await {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            if status.as_u16() == 429 || status.is_server_error() {
                last_error = format!("status {status}");
                continue;
            }
            if !status.is_success() {
                return Err(GatewayError::Transport {
                    role: role.as_str(),
                    attempts: attempt,
                    detail: format!("status {status}"),
                });
            }
            let text = response.text().await.map_err(|e| GatewayError::Transport {
                role: role.as_str(),
                attempts: attempt,
                detail: e.to_string(),
            })?;
            let parsed: ChatResponse =
                serde_json::from_str(&text).map_err(|e| GatewayError::MalformedReply {
                    role: role.as_str(),
                    detail: format!("undecodable chat response: {e}"),
                    raw: text.clone(),
                })?;
            let content = parsed
                .choices
                .into_iter()
                .next()
                .map(|c| c.message.content)
                .unwrap_or_default();
            if content.is_empty() {
                return Err(GatewayError::EmptyReply { role: role.as_str() });
            }
            let latency_ms = started.elapsed().as_millis() as u64;
            self.shared.log(role, body, &content, latency_ms)?;
            return Ok(content);
        }

        Err(GatewayError::Transport {
            role: role.as_str(),
            attempts,
            detail: last_error,
        })
    }
}

#[async_trait]
impl Backend for RemoteBackend {
    async fn generate_caption(
        &self,
        ctx: &CallCtx<'_>,
        prompt: &Prompt,
    ) -> Result<String, GatewayError> {
        let body = chat_body(&self.shared.descriptor, Some(ctx.video), &prompt.text);
        self.call(CallRole::Captioner, &body).await
    }

    async fn score_caption(
        &self,
        ctx: &CallCtx<'_>,
        caption: &str,
        principles: &PrincipleSet,
        scorer_instruction: &str,
    ) -> Result<Result<ScorerReply, ParseFailure>, GatewayError> {
        let text = render_scorer_text(scorer_instruction, caption, principles, ctx.dimension);
        let body = chat_body(&self.shared.descriptor, Some(ctx.video), &text);
        let raw = self.call(CallRole::Scorer, &body).await?;
        Ok(parse_scorer_reply(&raw))
    }

    async fn refine_prompt(
        &self,
        ctx: &CallCtx<'_>,
        caption: &str,
        score: Score,
        suggestion: &Suggestion,
        refine_instruction: &str,
        principles: Option<&str>,
    ) -> Result<(Prompt, ChainOfThought), GatewayError> {
        let _ = ctx;
        let text =
            render_refine_text(refine_instruction, caption, score, suggestion, principles);
        let body = chat_body(&self.shared.descriptor, None, &text);
        let raw = self.call(CallRole::Refiner, &body).await?;
        let (prompt, reasoning) =
            parse_refiner_reply(&raw).map_err(|detail| GatewayError::MalformedReply {
                role: "refiner",
                detail,
                raw: raw.clone(),
            })?;
        Ok((
            Prompt { text: prompt, origin: PromptOrigin::Refined },
            ChainOfThought { text: reasoning, produced_by: CotSource::Refiner },
        ))
    }

    async fn reflect_prompt(
        &self,
        ctx: &CallCtx<'_>,
        current: CurrentRound<'_>,
        previous: PreviousRound<'_>,
        reflect_instruction: &str,
    ) -> Result<(Prompt, ChainOfThought), GatewayError> {
        let _ = ctx;
        let text = render_reflect_text(reflect_instruction, &current, &previous);
        let body = chat_body(&self.shared.descriptor, None, &text);
        let raw = self.call(CallRole::Reflector, &body).await?;
        let (prompt, reasoning) =
            parse_refiner_reply(&raw).map_err(|detail| GatewayError::MalformedReply {
                role: "reflector",
                detail,
                raw: raw.clone(),
            })?;
        Ok((
            Prompt { text: prompt, origin: PromptOrigin::Reflected },
            ChainOfThought { text: reasoning, produced_by: CotSource::Reflector },
        ))
    }
}
