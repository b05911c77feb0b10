//! The preference loss and its analytic gradient.
//!
//! For margin `m = (logp_c^theta - logp_r^theta) - (logp_c^ref - logp_r^ref)`
//! the loss is `-log sigma(beta * m)`, computed in the numerically stable
//! form `softplus(-beta * m)`, and its gradient w.r.t. the policy logits is
//! `-beta * sigma(-beta * m) * (grad logp_c - grad logp_r)`.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;

use super::policy::ToyPolicy;
use super::tokenize::TokenizedPair;

/// The four log-probabilities entering one loss term, plus the score gap
/// carried along for ordering and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoBatchItem {
    pub logp_chosen_theta: f64,
    pub logp_rejected_theta: f64,
    pub logp_chosen_ref: f64,
    pub logp_rejected_ref: f64,
    pub delta: u8,
}

impl DpoBatchItem {
    pub fn margin(&self) -> f64 {
        (self.logp_chosen_theta - self.logp_rejected_theta)
            - (self.logp_chosen_ref - self.logp_rejected_ref)
    }
}

/// `ln(1 + e^x)` without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, stable on both tails.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-log sigma(beta * m)` as `softplus(-beta * m)`; always >= 0.
pub fn dpo_loss(item: &DpoBatchItem, beta: f64) -> f64 {
    debug_assert!(beta > 0.0);
    softplus(-beta * item.margin())
}

/// Evaluates the four log-probabilities of a tokenized pair under the
/// policy and the frozen reference.
pub fn batch_item(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &TokenizedPair,
) -> Result<DpoBatchItem, TrainError> {
    let item = DpoBatchItem {
        logp_chosen_theta: policy.seq_logp(&pair.ctx, &pair.chosen)?,
        logp_rejected_theta: policy.seq_logp(&pair.ctx, &pair.rejected)?,
        logp_chosen_ref: reference.seq_logp(&pair.ctx, &pair.chosen)?,
        logp_rejected_ref: reference.seq_logp(&pair.ctx, &pair.rejected)?,
        delta: pair.delta,
    };
    debug_assert!(
        item.logp_chosen_theta <= 0.0
            && item.logp_rejected_theta <= 0.0
            && item.logp_chosen_ref <= 0.0
            && item.logp_rejected_ref <= 0.0
    );
    Ok(item)
}

/// Exact gradient of [`dpo_loss`] w.r.t. every policy logit, as a table of
/// the same shape. The reference policy contributes only through the
/// margin; its parameters are frozen.
pub fn dpo_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &TokenizedPair,
    beta: f64,
) -> Result<Vec<f64>, TrainError> {
    let mut grad = vec![0.0; policy.logits().len()];
    accumulate_dpo_grad(policy, reference, pair, beta, 1.0, &mut grad)?;
    Ok(grad)
}

/// Adds `weight * grad(dpo_loss)` into an existing table; used by the batch
/// loop with `weight = 1 / batch_len` so items accumulate in a fixed order.
pub fn accumulate_dpo_grad(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pair: &TokenizedPair,
    beta: f64,
    weight: f64,
    grad: &mut [f64],
) -> Result<(), TrainError> {
    let item = batch_item(policy, reference, pair)?;
    let coef = -beta * sigmoid(-beta * item.margin()) * weight;
    policy.accumulate_logp_grad(&pair.ctx, &pair.chosen, coef, grad)?;
    policy.accumulate_logp_grad(&pair.ctx, &pair.rejected, -coef, grad)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = core::f64::consts::LN_2;

    fn item(ct: f64, rt: f64, cr: f64, rr: f64) -> DpoBatchItem {
        DpoBatchItem {
            logp_chosen_theta: ct,
            logp_rejected_theta: rt,
            logp_chosen_ref: cr,
            logp_rejected_ref: rr,
            delta: 0,
        }
    }

    #[test]
    fn loss_at_reference_is_ln_two() {
        // theta = ref: all four log-probs pairwise equal -> m = 0
        let it = item(-3.0, -4.0, -3.0, -4.0);
        assert_eq!(it.margin(), 0.0);
        assert!((dpo_loss(&it, 0.7) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn closed_form_example() {
        // beta = 0.1, theta logps (-5, -7), ref logps (-6, -6): m = 2,
        // loss = softplus(-0.2); value from a high-precision evaluation
        let it = item(-5.0, -7.0, -6.0, -6.0);
        assert_eq!(it.margin(), 2.0);
        let loss = dpo_loss(&it, 0.1);
        assert!((loss - 0.5981388693815918).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn softplus_asymptotes() {
        // m -> +inf: loss -> 0; m -> -inf: loss ~ -beta * m
        let hi = item(50.0 - 50.0, -50.0, -25.0, -25.0); // m = 50
        assert!(dpo_loss(&hi, 1.0) < 2e-22);
        assert!((dpo_loss(&hi, 1.0) - softplus(-50.0)).abs() < 1e-30);
        let lo = item(-50.0, 0.0, -25.0, -25.0); // m = -50
        let loss = dpo_loss(&lo, 1.0);
        assert!((loss - 50.0).abs() < 1e-9);
        assert!((loss - softplus(50.0)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_strictly_decreasing_in_margin() {
        let beta = 0.3;
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let m = -30.0 + 60.0 * (i as f64) / 1000.0;
            let it = item(m, 0.0, 0.0, 0.0);
            let loss = dpo_loss(&it, beta);
            assert!(loss < prev, "not strictly decreasing at m={m}");
            assert!(loss >= 0.0);
            prev = loss;
        }
    }

    #[test]
    fn stable_form_matches_direct_form() {
        for i in 0..=600 {
            let m = -30.0 + 60.0 * (i as f64) / 600.0;
            let it = item(m, 0.0, 0.0, 0.0);
            let stable = dpo_loss(&it, 1.0);
            let direct = -sigmoid(m).ln();
            assert!((stable - direct).abs() < 1e-12, "m={m}: {stable} vs {direct}");
        }
    }

    #[test]
    fn zero_gradient_when_theta_is_ref_and_sequences_equal() {
        let policy = ToyPolicy::seeded(3, 5, 9, 1.0);
        let pair = TokenizedPair {
            ctx: vec![0, 1, 2],
            chosen: vec![1, 2, 3],
            rejected: vec![1, 2, 3],
            delta: 10,
        };
        let grad = dpo_grad(&policy, &policy, &pair, 0.5).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn gradient_step_at_ref_increases_the_margin() {
        let reference = ToyPolicy::seeded(4, 6, 3, 0.5);
        let pair = TokenizedPair {
            ctx: vec![0, 1, 2, 3],
            chosen: vec![1, 2, 3, 4],
            rejected: vec![2, 1, 0, 5],
            delta: 30,
        };
        let mut policy = reference.clone();
        let before = policy.seq_logp(&pair.ctx, &pair.chosen).unwrap()
            - policy.seq_logp(&pair.ctx, &pair.rejected).unwrap();
        let grad = dpo_grad(&policy, &reference, &pair, 1.0).unwrap();
        policy.apply_gradient(&grad, 0.1);
        let after = policy.seq_logp(&pair.ctx, &pair.chosen).unwrap()
            - policy.seq_logp(&pair.ctx, &pair.rejected).unwrap();
        assert!(after > before, "margin did not increase: {before} -> {after}");
    }
}
