//! Scripted in-process backend: canned captions, scorer replies, and prompt
//! updates, consumed strictly in call order per (video, dimension). Script
//! exhaustion is an error, never silent recycling, so a test that makes one
//! call too many fails loudly.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::BackendDescriptor;
use crate::domain::{
    ChainOfThought, CotSource, Prompt, PromptOrigin, PrincipleSet, Score, Suggestion,
};
use crate::error::GatewayError;

use super::{
    chat_body, parse_scorer_reply, render_reflect_text, render_refine_text, render_scorer_text,
    Backend, CallCtx, CallRole, CurrentRound, GatewayShared, ParseFailure, PreviousRound,
    ScorerReply,
};

/// One scorer entry: either a structured reply or deliberately raw text
/// that exercises the lenient parser (including malformed cases).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptScore {
    Reply { score: i64, suggestions: String },
    Raw { raw: String },
}

/// One refiner/reflector entry: the prompt to hand back plus the
/// chain-of-thought that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptUpdate {
    pub prompt: String,
    pub reasoning: String,
}

/// Canned behavior for one (video, dimension) trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default)]
    pub captions: Vec<String>,
    #[serde(default)]
    pub scorer: Vec<ScriptScore>,
    #[serde(default)]
    pub refines: Vec<ScriptUpdate>,
    #[serde(default)]
    pub reflects: Vec<ScriptUpdate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScriptFileEntry {
    video_id: String,
    dimension: crate::domain::TaskDimension,
    #[serde(flatten)]
    entry: ScriptEntry,
}

/// The full script: entries keyed by `video_id/dimension`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScriptedBehavior {
    entries: HashMap<String, ScriptEntry>,
}

impl ScriptedBehavior {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        video_id: &str,
        dimension: crate::domain::TaskDimension,
        entry: ScriptEntry,
    ) -> &mut Self {
        self.entries.insert(format!("{video_id}/{dimension}"), entry);
        self
    }

    /// Loads a script from a JSON file: `{"entries": [{video_id, dimension,
    /// captions, scorer, refines, reflects}, ...]}`.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        #[derive(Deserialize)]
        struct File {
            entries: Vec<ScriptFileEntry>,
        }
        let text = std::fs::read_to_string(path)?;
        let file: File = serde_json::from_str(&text).map_err(|e| GatewayError::MalformedReply {
            role: "script",
            detail: e.to_string(),
            raw: path.display().to_string(),
        })?;
        let mut script = Self::new();
        for fe in file.entries {
            script.insert(&fe.video_id, fe.dimension, fe.entry);
        }
        Ok(script)
    }

    pub fn to_file_json(&self) -> serde_json::Value {
        let mut entries: Vec<_> = self
            .entries
            .iter()
            .map(|(key, entry)| {
                let (video_id, dim) = key.split_once('/').expect("key format");
                json!({
                    "video_id": video_id,
                    "dimension": dim,
                    "captions": entry.captions,
                    "scorer": entry.scorer,
                    "refines": entry.refines,
                    "reflects": entry.reflects,
                })
            })
            .collect();
        entries.sort_by_key(|e| {
            (e["video_id"].as_str().unwrap().to_string(), e["dimension"].as_str().unwrap().to_string())
        });
        json!({ "entries": entries })
    }
}

#[derive(Default)]
struct Cursors {
    by_key_role: HashMap<(String, CallRole), usize>,
}

/// Deterministic backend replaying a [`ScriptedBehavior`].
pub struct ScriptedBackend {
    shared: GatewayShared,
    script: ScriptedBehavior,
    cursors: Mutex<Cursors>,
}

impl ScriptedBackend {
    pub fn new(script: ScriptedBehavior, descriptor: BackendDescriptor) -> Self {
        Self {
            shared: GatewayShared::new(descriptor),
            script,
            cursors: Mutex::new(Cursors::default()),
        }
    }

    pub fn with_audit(mut self, audit: Arc<super::AuditLog>) -> Self {
        self.shared = self.shared.with_audit(audit);
        self
    }

    pub fn with_parallelism(mut self, max_in_flight: usize) -> Self {
        self.shared = self.shared.with_parallelism(max_in_flight);
        self
    }

    fn next_index(&self, key: &str, role: CallRole) -> usize {
        let mut cursors = self.cursors.lock().expect("cursor lock");
        let slot = cursors.by_key_role.entry((key.to_string(), role)).or_insert(0);
        let index = *slot;
        *slot += 1;
        index
    }

    fn entry(&self, key: &str) -> Result<&ScriptEntry, GatewayError> {
        self.script
            .entries
            .get(key)
            .ok_or_else(|| GatewayError::ScriptMissingKey { key: key.to_string() })
    }
}

#[async_trait]
impl Backend for ScriptedBackend {
    async fn generate_caption(
        &self,
        ctx: &CallCtx<'_>,
        prompt: &Prompt,
    ) -> Result<String, GatewayError> {
        let _permit = self.shared.acquire().await;
        let key = ctx.key();
        let entry = self.entry(&key)?;
        let index = self.next_index(&key, CallRole::Captioner);
        let caption = entry.captions.get(index).ok_or(GatewayError::ScriptExhausted {
            key: key.clone(),
            role: "captioner",
            index,
        })?;
        if caption.is_empty() {
            return Err(GatewayError::EmptyReply { role: "captioner" });
        }
        let body = chat_body(&self.shared.descriptor, Some(ctx.video), &prompt.text);
        self.shared.log(CallRole::Captioner, &body, caption, 0)?;
        Ok(caption.clone())
    }

    async fn score_caption(
        &self,
        ctx: &CallCtx<'_>,
        caption: &str,
        principles: &PrincipleSet,
        scorer_instruction: &str,
    ) -> Result<Result<ScorerReply, ParseFailure>, GatewayError> {
        let _permit = self.shared.acquire().await;
        let key = ctx.key();
        let entry = self.entry(&key)?;
        let index = self.next_index(&key, CallRole::Scorer);
        let scripted = entry.scorer.get(index).ok_or(GatewayError::ScriptExhausted {
            key: key.clone(),
            role: "scorer",
            index,
        })?;
        // raw text, structured or not, flows through the same lenient parser
        // the remote backend uses
        let raw = match scripted {
            ScriptScore::Raw { raw } => raw.clone(),
            ScriptScore::Reply { score, suggestions } => {
                json!({ "score": score, "suggestions": suggestions }).to_string()
            }
        };
        let text = render_scorer_text(scorer_instruction, caption, principles, ctx.dimension);
        let body = chat_body(&self.shared.descriptor, Some(ctx.video), &text);
        self.shared.log(CallRole::Scorer, &body, &raw, 0)?;
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
        let _permit = self.shared.acquire().await;
        let key = ctx.key();
        let entry = self.entry(&key)?;
        let index = self.next_index(&key, CallRole::Refiner);
        let update = entry.refines.get(index).ok_or(GatewayError::ScriptExhausted {
            key: key.clone(),
            role: "refiner",
            index,
        })?;
        if update.prompt.is_empty() {
            return Err(GatewayError::EmptyReply { role: "refiner" });
        }
        let text =
            render_refine_text(refine_instruction, caption, score, suggestion, principles);
        let body = chat_body(&self.shared.descriptor, None, &text);
        let raw = json!({ "reasoning": update.reasoning, "prompt": update.prompt }).to_string();
        self.shared.log(CallRole::Refiner, &body, &raw, 0)?;
        Ok((
            Prompt { text: update.prompt.clone(), origin: PromptOrigin::Refined },
            ChainOfThought { text: update.reasoning.clone(), produced_by: CotSource::Refiner },
        ))
    }

    async fn reflect_prompt(
        &self,
        ctx: &CallCtx<'_>,
        current: CurrentRound<'_>,
        previous: PreviousRound<'_>,
        reflect_instruction: &str,
    ) -> Result<(Prompt, ChainOfThought), GatewayError> {
        let _permit = self.shared.acquire().await;
        let key = ctx.key();
        let entry = self.entry(&key)?;
        let index = self.next_index(&key, CallRole::Reflector);
        let update = entry.reflects.get(index).ok_or(GatewayError::ScriptExhausted {
            key: key.clone(),
            role: "reflector",
            index,
        })?;
        if update.prompt.is_empty() {
            return Err(GatewayError::EmptyReply { role: "reflector" });
        }
        let text = render_reflect_text(reflect_instruction, &current, &previous);
        let body = chat_body(&self.shared.descriptor, None, &text);
        let raw = json!({ "reasoning": update.reasoning, "prompt": update.prompt }).to_string();
        self.shared.log(CallRole::Reflector, &body, &raw, 0)?;
        Ok((
            Prompt { text: update.prompt.clone(), origin: PromptOrigin::Reflected },
            ChainOfThought { text: update.reasoning.clone(), produced_by: CotSource::Reflector },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_principles;
    use crate::domain::{TaskDimension, VideoRef};

    fn ctx_video() -> VideoRef {
        VideoRef::new("v1", "file:///v1.mp4").unwrap()
    }

    fn one_entry_backend(entry: ScriptEntry) -> ScriptedBackend {
        let mut script = ScriptedBehavior::new();
        script.insert("v1", TaskDimension::Camera, entry);
        ScriptedBackend::new(script, BackendDescriptor::default())
    }

    #[tokio::test]
    async fn scripted_caption_echoes_in_order() {
        let backend = one_entry_backend(ScriptEntry {
            captions: vec!["a greenhouse scene".into(), "second".into()],
            ..Default::default()
        });
        let video = ctx_video();
        let ctx = CallCtx { video: &video, dimension: TaskDimension::Camera };
        let p = Prompt::new("go", PromptOrigin::Initial).unwrap();
        assert_eq!(backend.generate_caption(&ctx, &p).await.unwrap(), "a greenhouse scene");
        assert_eq!(backend.generate_caption(&ctx, &p).await.unwrap(), "second");
    }

    #[tokio::test]
    async fn exhausted_script_is_an_error() {
        let backend = one_entry_backend(ScriptEntry {
            captions: vec!["only".into()],
            ..Default::default()
        });
        let video = ctx_video();
        let ctx = CallCtx { video: &video, dimension: TaskDimension::Camera };
        let p = Prompt::new("go", PromptOrigin::Initial).unwrap();
        backend.generate_caption(&ctx, &p).await.unwrap();
        let err = backend.generate_caption(&ctx, &p).await.unwrap_err();
        assert!(matches!(err, GatewayError::ScriptExhausted { role: "captioner", index: 1, .. }));
    }

    #[tokio::test]
    async fn raw_scorer_entries_flow_through_the_parser() {
        let backend = one_entry_backend(ScriptEntry {
            scorer: vec![
                ScriptScore::Reply { score: 61, suggestions: "more detail".into() },
                ScriptScore::Raw { raw: "score: high".into() },
            ],
            ..Default::default()
        });
        let video = ctx_video();
        let ctx = CallCtx { video: &video, dimension: TaskDimension::Camera };
        let principles = default_principles();
        let ok = backend
            .score_caption(&ctx, "cap", &principles, "judge {caption} {principles}")
            .await
            .unwrap();
        assert_eq!(ok.unwrap().score.value(), 61);
        let bad = backend
            .score_caption(&ctx, "cap", &principles, "judge {caption} {principles}")
            .await
            .unwrap();
        assert!(bad.is_err());
    }

    #[tokio::test]
    async fn missing_key_is_an_error() {
        let backend = one_entry_backend(ScriptEntry::default());
        let video = VideoRef::new("other", "file:///other.mp4").unwrap();
        let ctx = CallCtx { video: &video, dimension: TaskDimension::Short };
        let p = Prompt::new("go", PromptOrigin::Initial).unwrap();
        assert!(matches!(
            backend.generate_caption(&ctx, &p).await.unwrap_err(),
            GatewayError::ScriptMissingKey { .. }
        ));
    }

    #[test]
    fn script_file_round_trip() {
        let mut script = ScriptedBehavior::new();
        script.insert(
            "v1",
            TaskDimension::Camera,
            ScriptEntry {
                captions: vec!["c0".into()],
                scorer: vec![ScriptScore::Reply { score: 95, suggestions: String::new() }],
                ..Default::default()
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        std::fs::write(&path, serde_json::to_string_pretty(&script.to_file_json()).unwrap())
            .unwrap();
        let loaded = ScriptedBehavior::load(&path).unwrap();
        assert_eq!(loaded, script);
    }
}
