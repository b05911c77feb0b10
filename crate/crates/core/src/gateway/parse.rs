//! Lenient extraction of structured replies from model output.
//!
//! Models wrap JSON in prose and code fences, so parsing happens in three
//! ordered steps: strip fence markers, locate the first balanced top-level
//! JSON object, then enforce the field contract. Total functions: every
//! input maps to a reply or a categorized failure, never a panic.

use serde_json::Value;

use crate::domain::{ParseFailReason, Score, Suggestion};

/// A validated scorer reply: integer score in [0,100] plus suggestion text.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerReply {
    pub score: Score,
    pub suggestion: Suggestion,
}

/// A scorer reply that could not be parsed. Recorded as trajectory data
/// (the trajectory terminates and is later filtered out), never retried.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseFailure {
    pub reason: ParseFailReason,
    pub raw: String,
}

/// Parses a raw scorer reply into a `ScorerReply`.
///
/// Leniency rules, in order:
/// 1. strip Markdown code-fence markers (the content between them is kept);
/// 2. scan for the first balanced top-level JSON object, quote-aware;
/// 3. require an integer `"score"` in [0,100] and a string `"suggestions"`.
pub fn parse_scorer_reply(raw: &str) -> Result<ScorerReply, ParseFailure> {
    let fail = |reason| Err(ParseFailure { reason, raw: raw.to_string() });

    let stripped = strip_fence_markers(raw);
    let object = match first_balanced_object(&stripped) {
        Some(obj) => obj,
        None => return fail(ParseFailReason::NoObject),
    };

    let score_field = match object.get("score") {
        Some(v) => v,
        None => return fail(ParseFailReason::MissingField),
    };
    let score = match score_field {
        Value::Number(n) => match n.as_i64() {
            Some(i) => match Score::new(i) {
                Ok(s) => s,
                Err(_) => return fail(ParseFailReason::BadScore),
            },
            // fractional or out of i64 range: rejected, never rounded
            None => return fail(ParseFailReason::NonInteger),
        },
        _ => return fail(ParseFailReason::NonInteger),
    };
    let suggestion = match object.get("suggestions") {
        Some(Value::String(s)) => Suggestion::new(s.clone()),
        _ => return fail(ParseFailReason::MissingField),
    };

    Ok(ScorerReply { score, suggestion })
}

/// Parses a refiner/reflector reply: a JSON object with non-empty string
/// fields `"prompt"` and `"reasoning"`. Returns `(prompt, reasoning)`.
/// Unlike scorer parse failures, a malformed reply here is an error for the
/// caller to surface, so only the failure detail is reported.
pub fn parse_refiner_reply(raw: &str) -> Result<(String, String), String> {
    let stripped = strip_fence_markers(raw);
    let object = first_balanced_object(&stripped).ok_or("no JSON object in reply")?;
    let prompt = match object.get("prompt") {
        Some(Value::String(s)) if !s.is_empty() => s.clone(),
        Some(Value::String(_)) => return Err("empty prompt section".into()),
        _ => return Err("missing prompt section".into()),
    };
    let reasoning = match object.get("reasoning") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err("missing reasoning section".into()),
    };
    Ok((prompt, reasoning))
}

/// Removes code-fence marker lines (``` with an optional language tag),
/// keeping the fenced content in place.
fn strip_fence_markers(text: &str) -> String {
    if !text.contains("```") {
        return text.to_string();
    }
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find("```") {
        out.push_str(&rest[..pos]);
        rest = &rest[pos + 3..];
        // swallow a language tag directly after the opening marker
        let tag_end = rest.find(|c: char| !c.is_ascii_alphanumeric()).unwrap_or(rest.len());
        if rest[..tag_end].eq_ignore_ascii_case("json") {
            rest = &rest[tag_end..];
        }
    }
    out.push_str(rest);
    out
}

/// Finds the first balanced `{...}` region that parses as a JSON object.
/// Braces inside JSON strings do not count toward the balance.
fn first_balanced_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = text.as_bytes();
    let starts = bytes.iter().enumerate().filter(|(_, &b)| b == b'{').map(|(i, _)| i);
    for start in starts {
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(Value::Object(map)) = serde_json::from_str(&text[start..=end]) {
                return Some(map);
            }
        }
    }
    None
}

/// Given a `{` at `start`, returns the index of its balancing `}`, tracking
/// string literals and escapes. `None` if the region never balances.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}
