//! Shared value types for the captioning pipeline.
//!
//! Everything here is an immutable value: cheap to clone, safe to send
//! across tasks, and round-trippable through serde without loss.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::DomainError;

/// Opaque reference to a video. The engine never decodes media; the locator
/// is passed through to the inference backend untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRef {
    pub id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
}

impl VideoRef {
    pub fn new(id: impl Into<String>, uri: impl Into<String>) -> Result<Self, DomainError> {
        let id = id.into();
        let uri = uri.into();
        if id.is_empty() {
            return Err(DomainError::EmptyField("video id"));
        }
        if uri.is_empty() {
            return Err(DomainError::EmptyField("video uri"));
        }
        Ok(Self { id, uri, duration_s: None })
    }
}

/// The five captioning task dimensions. Closed set; serialized names are
/// lowercase snake_case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskDimension {
    Camera,
    Short,
    Background,
    MainObject,
    Detailed,
}

impl TaskDimension {
    pub const ALL: [TaskDimension; 5] = [
        TaskDimension::Camera,
        TaskDimension::Short,
        TaskDimension::Background,
        TaskDimension::MainObject,
        TaskDimension::Detailed,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskDimension::Camera => "camera",
            TaskDimension::Short => "short",
            TaskDimension::Background => "background",
            TaskDimension::MainObject => "main_object",
            TaskDimension::Detailed => "detailed",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DomainError> {
        Self::ALL
            .iter()
            .copied()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| DomainError::UnknownDimension(s.to_string()))
    }
}

impl fmt::Display for TaskDimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Integer quality score in [0, 100]. Fractional scorer replies are
/// rejected upstream, never rounded, so score arithmetic stays exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct Score(u8);

impl Score {
    pub const MAX: Score = Score(100);

    pub fn new(value: i64) -> Result<Self, DomainError> {
        if (0..=100).contains(&value) {
            Ok(Score(value as u8))
        } else {
            Err(DomainError::ScoreOutOfRange(value))
        }
    }

    pub fn value(&self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for Score {
    type Error = DomainError;
    fn try_from(v: i64) -> Result<Self, Self::Error> {
        Score::new(v)
    }
}

impl From<Score> for i64 {
    fn from(s: Score) -> i64 {
        i64::from(s.0)
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Where a prompt came from in the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    Initial,
    Refined,
    Reflected,
}

/// A task prompt together with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub origin: PromptOrigin,
}

impl Prompt {
    pub fn new(text: impl Into<String>, origin: PromptOrigin) -> Result<Self, DomainError> {
        let text = text.into();
        if text.is_empty() {
            return Err(DomainError::EmptyField("prompt text"));
        }
        Ok(Self { text, origin })
    }
}

/// Scorer's improvement suggestion. May be empty when the caption already
/// meets the bar.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub text: String,
}

impl Suggestion {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: text.into() }
    }
}

/// Which stage produced a chain-of-thought text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotSource {
    Refiner,
    Reflector,
}

/// Intermediate reasoning emitted by the refiner or reflector, carried
/// forward as context for diagnosing a failed prompt update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOfThought {
    pub text: String,
    pub produced_by: CotSource,
}

/// The three prompt-update branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Stop,
    Refine,
    Reflect,
}

/// Why a trajectory ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Threshold,
    Cap,
    ParseError,
}

/// Categorized reason a scorer reply failed to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseFailReason {
    NoObject,
    BadScore,
    MissingField,
    NonInteger,
}

impl fmt::Display for ParseFailReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseFailReason::NoObject => "no_object",
            ParseFailReason::BadScore => "bad_score",
            ParseFailReason::MissingField => "missing_field",
            ParseFailReason::NonInteger => "non_integer",
        };
        f.write_str(s)
    }
}

/// One generate/score round of the loop.
///
/// `score` and `suggestion` are absent exactly when `parse_error` is set;
/// `branch_taken` is `None` only on a final step that was terminated by the
/// iteration cap or by a parse error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub t: u32,
    pub prompt: Prompt,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<Score>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<Suggestion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_taken: Option<Branch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cot: Option<ChainOfThought>,
    #[serde(default)]
    pub parse_error: bool,
    /// Reason and raw text of the unparseable scorer reply, kept as data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_fail_reason: Option<ParseFailReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_reply: Option<String>,
}

/// The ordered record of one agent run on one (video, dimension) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub video: VideoRef,
    pub dimension: TaskDimension,
    pub steps: Vec<TrajectoryStep>,
    pub terminal_reason: TerminalReason,
}

impl Trajectory {
    pub fn key(&self) -> (String, TaskDimension) {
        (self.video.id.clone(), self.dimension)
    }

    pub fn max_score(&self) -> Option<Score> {
        self.steps.iter().filter_map(|s| s.score).max()
    }

    /// Checks every structural invariant against the run parameters that
    /// produced this trajectory. Suitable for auditing any store record.
    pub fn validate(&self, lambda: Score, t_max: u32) -> Result<(), DomainError> {
        let n = self.steps.len();
        if n == 0 {
            return Err(DomainError::Invariant("trajectory has no steps".into()));
        }
        if n > t_max as usize + 1 {
            return Err(DomainError::Invariant(format!(
                "trajectory has {n} steps, cap allows {}",
                t_max + 1
            )));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.t != i as u32 {
                return Err(DomainError::Invariant(format!(
                    "step index {} at position {i} is not consecutive from 0",
                    step.t
                )));
            }
            if step.parse_error {
                if step.score.is_some() || step.suggestion.is_some() {
                    return Err(DomainError::Invariant(
                        "parse-error step carries a score or suggestion".into(),
                    ));
                }
                if i + 1 != n || self.terminal_reason != TerminalReason::ParseError {
                    return Err(DomainError::Invariant(
                        "parse-error step must be final with parse_error terminal".into(),
                    ));
                }
            } else if step.score.is_none() {
                return Err(DomainError::Invariant(format!("step {i} has no score")));
            }
            let is_last = i + 1 == n;
            if !is_last {
                match step.score {
                    Some(s) if s < lambda => {}
                    _ => {
                        return Err(DomainError::Invariant(format!(
                            "non-final step {i} must score below the threshold"
                        )));
                    }
                }
                match step.branch_taken {
                    Some(Branch::Refine) | Some(Branch::Reflect) => {}
                    _ => {
                        return Err(DomainError::Invariant(format!(
                            "non-final step {i} must take a refine or reflect branch"
                        )));
                    }
                }
            }
        }
        let last = self.steps.last().expect("non-empty");
        match self.terminal_reason {
            TerminalReason::Threshold => match last.score {
                Some(s) if s >= lambda => {}
                _ => {
                    return Err(DomainError::Invariant(
                        "threshold terminal requires final score >= lambda".into(),
                    ));
                }
            },
            TerminalReason::Cap => {
                if last.t != t_max {
                    return Err(DomainError::Invariant(
                        "cap terminal requires the final step at t = t_max".into(),
                    ));
                }
                if last.branch_taken.is_some() {
                    return Err(DomainError::Invariant(
                        "cap-terminated final step must record no branch".into(),
                    ));
                }
                match last.score {
                    Some(s) if s < lambda => {}
                    _ => {
                        return Err(DomainError::Invariant(
                            "cap terminal requires final score < lambda".into(),
                        ));
                    }
                }
            }
            TerminalReason::ParseError => {
                if !last.parse_error {
                    return Err(DomainError::Invariant(
                        "parse_error terminal requires a parse-error final step".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One training unit: the best and worst captions of a trajectory and
/// their score gap. Field layout matches the preference dataset JSONL rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTuple {
    pub video_id: String,
    pub dimension: TaskDimension,
    pub chosen: String,
    pub rejected: String,
    pub score_chosen: Score,
    pub score_rejected: Score,
    pub delta: u8,
}

impl PreferenceTuple {
    /// `delta` must always be recomputable from the member scores.
    pub fn check_consistency(&self) -> Result<(), DomainError> {
        let gap = i16::from(self.score_chosen.value()) - i16::from(self.score_rejected.value());
        if gap < 0 {
            return Err(DomainError::Invariant("chosen score below rejected score".into()));
        }
        if gap as u8 != self.delta {
            return Err(DomainError::Invariant(format!(
                "delta {} does not equal score gap {gap}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Per-dimension textual principles describing what a good caption covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrincipleSet {
    map: BTreeMap<TaskDimension, String>,
}

impl PrincipleSet {
    pub fn new(map: BTreeMap<TaskDimension, String>) -> Result<Self, DomainError> {
        for dim in TaskDimension::ALL {
            match map.get(&dim) {
                Some(text) if !text.is_empty() => {}
                Some(_) => return Err(DomainError::EmptyPrinciple(dim)),
                None => return Err(DomainError::MissingPrinciple(dim)),
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, dim: TaskDimension) -> &str {
        // new() guarantees all five are present
        self.map.get(&dim).expect("validated principle set")
    }
}

/// Placeholder slots recognized inside prompt templates.
///
/// `{prompt}` and `{prev_caption}` extend the core six so the reflection
/// payload can carry the full current and previous rounds (prompt, caption,
/// chain-of-thought), which the reflector needs to diagnose a failed update.
pub const TEMPLATE_SLOTS: [&str; 8] = [
    "caption",
    "score",
    "suggestion",
    "prompt",
    "prev_prompt",
    "prev_caption",
    "prev_cot",
    "principles",
];

/// The four instruction templates driving the loop's roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub initial: String,
    pub refine_instruction: String,
    pub reflect_instruction: String,
    pub scorer_instruction: String,
}

impl PromptTemplates {
    /// Validates that all four templates are present, non-empty, use only
    /// recognized placeholder slots, and contain the slots their role needs.
    pub fn validate(&self) -> Result<(), DomainError> {
        let fields: [(&str, &str, &[&str]); 4] = [
            ("initial", &self.initial, &[]),
            ("refine_instruction", &self.refine_instruction, &["caption", "score", "suggestion"]),
            (
                "reflect_instruction",
                &self.reflect_instruction,
                &["caption", "score", "prev_prompt", "prev_cot"],
            ),
            ("scorer_instruction", &self.scorer_instruction, &["caption", "principles"]),
        ];
        for (name, text, required) in fields {
            if text.is_empty() {
                return Err(DomainError::EmptyTemplate(name));
            }
            for slot in template_slots_used(text) {
                if !TEMPLATE_SLOTS.contains(&slot.as_str()) {
                    return Err(DomainError::UnknownSlot { template: name, slot });
                }
            }
            for slot in required {
                if !text.contains(&format!("{{{slot}}}")) {
                    return Err(DomainError::MissingSlot { template: name, slot });
                }
            }
        }
        Ok(())
    }
}

/// Extracts `{slot}` names appearing in a template. Doubled braces `{{`/`}}`
/// escape a literal brace.
pub fn template_slots_used(text: &str) -> Vec<String> {
    let mut slots = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if i + 1 < bytes.len() && bytes[i + 1] == b'{' {
                i += 2;
                continue;
            }
            if let Some(end) = text[i + 1..].find(['{', '}']) {
                let end = i + 1 + end;
                if bytes[end] == b'}' {
                    slots.push(text[i + 1..end].to_string());
                    i = end + 1;
                    continue;
                }
            }
        }
        i += 1;
    }
    slots
}

/// Renders a template by substituting `{slot}` occurrences from `values`
/// and unescaping doubled braces. Unknown slots are left untouched; the
/// template validator has already rejected them at load time.
pub fn render_template(text: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(text.len());
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if i + 1 < bytes.len() && bytes[i + 1] == b'{' {
                out.push('{');
                i += 2;
                continue;
            }
            if let Some(end) = text[i + 1..].find(['{', '}']) {
                let end = i + 1 + end;
                if bytes[end] == b'}' {
                    let slot = &text[i + 1..end];
                    if let Some((_, v)) = values.iter().find(|(k, _)| *k == slot) {
                        out.push_str(v);
                    } else {
                        out.push('{');
                        out.push_str(slot);
                        out.push('}');
                    }
                    i = end + 1;
                    continue;
                }
            }
            out.push('{');
            i += 1;
            continue;
        }
        if bytes[i] == b'}' && i + 1 < bytes.len() && bytes[i + 1] == b'}' {
            out.push('}');
            i += 2;
            continue;
        }
        let ch_len = text[i..].chars().next().map_or(1, char::len_utf8);
        out.push_str(&text[i..i + ch_len]);
        i += ch_len;
    }
    out
}
