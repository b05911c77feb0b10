//! Deterministic toy tokenization of preference tuples.
//!
//! Chosen and rejected captions must share one context sequence, so the
//! contexts derive from the pair's identity (video id + dimension) and the
//! tokens from the caption bytes. The mapping is a documented fixture
//! parameter, not a language model: it only needs to turn caption
//! differences into token differences deterministically.

use serde::{Deserialize, Serialize};

use crate::domain::PreferenceTuple;

/// Table dimensions and sequence length of the toy token space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub vocab: usize,
    pub contexts: usize,
    pub seq_len: usize,
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        Self { vocab: 24, contexts: 8, seq_len: 12 }
    }
}

/// One tuple mapped to the toy token space. `ctx` is shared by both
/// sequences; `delta` is carried through for ordering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedPair {
    pub ctx: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub delta: u8,
}

/// FNV-1a, used for stable context assignment independent of the platform
/// and toolchain.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Maps a tuple to token sequences: context `j` hashes (video, dimension,
/// j); token `j` folds the caption byte at `j` (cycling short captions)
/// into the vocabulary. Empty captions map to token 0 everywhere.
pub fn tokenize(tuple: &PreferenceTuple, spec: &TokenizerSpec) -> TokenizedPair {
    let ctx = (0..spec.seq_len)
        .map(|j| {
            let key = format!("{}/{}:{}", tuple.video_id, tuple.dimension, j);
            (fnv1a64(key.as_bytes()) % spec.contexts as u64) as usize
        })
        .collect();
    TokenizedPair {
        ctx,
        chosen: caption_tokens(&tuple.chosen, spec),
        rejected: caption_tokens(&tuple.rejected, spec),
        delta: tuple.delta,
    }
}

fn caption_tokens(caption: &str, spec: &TokenizerSpec) -> Vec<usize> {
    let bytes = caption.as_bytes();
    (0..spec.seq_len)
        .map(|j| {
            if bytes.is_empty() {
                0
            } else {
                (bytes[j % bytes.len()] as usize) % spec.vocab
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Score, TaskDimension};

    fn tuple(chosen: &str, rejected: &str) -> PreferenceTuple {
        PreferenceTuple {
            video_id: "v1".into(),
            dimension: TaskDimension::Camera,
            chosen: chosen.into(),
            rejected: rejected.into(),
            score_chosen: Score::new(80).unwrap(),
            score_rejected: Score::new(60).unwrap(),
            delta: 20,
        }
    }

    #[test]
    fn deterministic_and_shape_correct() {
        let spec = TokenizerSpec::default();
        let t = tuple("a camera pans left", "a static shot");
        let a = tokenize(&t, &spec);
        let b = tokenize(&t, &spec);
        assert_eq!(a, b);
        assert_eq!(a.ctx.len(), spec.seq_len);
        assert_eq!(a.chosen.len(), spec.seq_len);
        assert_eq!(a.rejected.len(), spec.seq_len);
        assert!(a.ctx.iter().all(|&c| c < spec.contexts));
        assert!(a.chosen.iter().chain(&a.rejected).all(|&t| t < spec.vocab));
    }

    #[test]
    fn different_captions_differ_somewhere() {
        let spec = TokenizerSpec::default();
        let t = tuple("wide shot of a garden", "close-up of a leaf");
        let p = tokenize(&t, &spec);
        assert_ne!(p.chosen, p.rejected);
    }

    #[test]
    fn contexts_shared_across_the_pair() {
        let spec = TokenizerSpec::default();
        let t = tuple("one", "two");
        let p = tokenize(&t, &spec);
        // both sequences score against the same contexts by construction
        assert_eq!(p.ctx.len(), p.chosen.len());
    }

    #[test]
    fn empty_caption_is_total() {
        let spec = TokenizerSpec::default();
        let t = tuple("", "x");
        let p = tokenize(&t, &spec);
        assert!(p.chosen.iter().all(|&t| t == 0));
    }
}
