//! A finite-context categorical sequence model with exact log-probabilities
//! and analytic gradients. It stands in for the trainable policy and its
//! frozen reference at desk scale: every quantity is auditable against
//! finite differences, which is the point.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::TrainError;

/// Dense context-table policy: `logits[c * vocab + v]` scores token `v`
/// in context `c`. The log-probability of a token sequence given a context
/// sequence is the sum over positions of `log_softmax(logits[ctx[j]])[tok[j]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    contexts: usize,
    vocab: usize,
    logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn zeros(contexts: usize, vocab: usize) -> Self {
        assert!(contexts > 0 && vocab > 1, "need a non-trivial table");
        Self { contexts, vocab, logits: vec![0.0; contexts * vocab] }
    }

    /// Gaussian-initialized table, deterministic in the seed.
    pub fn seeded(contexts: usize, vocab: usize, seed: u64, scale: f64) -> Self {
        let mut policy = Self::zeros(contexts, vocab);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for logit in &mut policy.logits {
            let z: f64 = StandardNormal.sample(&mut rng);
            *logit = scale * z;
        }
        policy
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn row(&self, context: usize) -> &[f64] {
        &self.logits[context * self.vocab..(context + 1) * self.vocab]
    }

    fn check_context(&self, context: usize) -> Result<(), TrainError> {
        if context >= self.contexts {
            return Err(TrainError::ContextOutOfRange { context, contexts: self.contexts });
        }
        Ok(())
    }

    fn check_token(&self, token: usize) -> Result<(), TrainError> {
        if token >= self.vocab {
            return Err(TrainError::TokenOutOfRange { token, vocab: self.vocab });
        }
        Ok(())
    }

    /// Numerically stable per-row log-softmax.
    pub fn log_softmax_row(&self, context: usize) -> Vec<f64> {
        let row = self.row(context);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        row.iter().map(|x| x - log_z).collect()
    }

    pub fn softmax_row(&self, context: usize) -> Vec<f64> {
        self.log_softmax_row(context).iter().map(|x| x.exp()).collect()
    }

    /// `log pi(tokens | ctx)`: sum of per-position log-softmax entries.
    /// The token sequence may be shorter than the context sequence; each
    /// position `j` conditions on `ctx[j]`.
    pub fn seq_logp(&self, ctx: &[usize], tokens: &[usize]) -> Result<f64, TrainError> {
        if tokens.len() > ctx.len() {
            return Err(TrainError::SequenceMismatch {
                tokens: tokens.len(),
                contexts: ctx.len(),
            });
        }
        let mut total = 0.0;
        for (j, (&c, &tok)) in ctx.iter().zip(tokens.iter()).enumerate() {
            let _ = j;
            self.check_context(c)?;
            self.check_token(tok)?;
            total += self.log_softmax_row(c)[tok];
        }
        Ok(total)
    }

    /// Accumulates `coef * d(log pi(tokens|ctx))/d(logits)` into `grad`,
    /// a table of the same shape as the logits. Per position `j` in
    /// context `c`: `+coef` at the realized token, `-coef * p(v|c)` at
    /// every `v`.
    pub fn accumulate_logp_grad(
        &self,
        ctx: &[usize],
        tokens: &[usize],
        coef: f64,
        grad: &mut [f64],
    ) -> Result<(), TrainError> {
        assert_eq!(grad.len(), self.logits.len(), "gradient table shape");
        if tokens.len() > ctx.len() {
            return Err(TrainError::SequenceMismatch {
                tokens: tokens.len(),
                contexts: ctx.len(),
            });
        }
        for (&c, &tok) in ctx.iter().zip(tokens.iter()) {
            self.check_context(c)?;
            self.check_token(tok)?;
            let probs = self.softmax_row(c);
            let base = c * self.vocab;
            grad[base + tok] += coef;
            for (v, p) in probs.iter().enumerate() {
                grad[base + v] -= coef * p;
            }
        }
        Ok(())
    }

    /// One gradient-descent step: `logits -= lr * grad`.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64) {
        assert_eq!(grad.len(), self.logits.len(), "gradient table shape");
        for (w, g) in self.logits.iter_mut().zip(grad.iter()) {
            *w -= lr * g;
        }
    }
}
