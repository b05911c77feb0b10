//! Deterministic gradient-descent training loop over tokenized preference
//! pairs. Plain GD on the context table, mean-reduced batch gradients in a
//! fixed accumulation order, cosine-decay learning rate: two runs with the
//! same seed produce bit-identical traces.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::TrainSchedule;
use crate::error::TrainError;

use super::loss::{accumulate_dpo_grad, batch_item, dpo_loss};
use super::order::{anti_order_by_delta, curriculum_order_by_delta, make_batches, OrderingArm};
use super::policy::ToyPolicy;
use super::schedule::cosine_lr;
use super::tokenize::TokenizedPair;

/// One optimizer step of the trace: the learning rate used, the batch loss
/// before the update, and full-dataset preference accuracy after it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub pref_acc: f64,
}

/// Everything a training arm produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    pub trace: Vec<TraceRow>,
    pub initial_pref_acc: f64,
    pub final_pref_acc: f64,
    pub final_mean_loss: f64,
}

/// Fraction of pairs whose chosen caption the policy strictly prefers.
pub fn preference_accuracy(
    policy: &ToyPolicy,
    pairs: &[TokenizedPair],
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut hits = 0usize;
    for pair in pairs {
        let chosen = policy.seq_logp(&pair.ctx, &pair.chosen)?;
        let rejected = policy.seq_logp(&pair.ctx, &pair.rejected)?;
        if chosen > rejected {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Mean loss over the whole dataset under the current policy.
pub fn mean_loss(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenizedPair],
    beta: f64,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    for pair in pairs {
        total += dpo_loss(&batch_item(policy, reference, pair)?, beta);
    }
    Ok(total / pairs.len() as f64)
}

fn epoch_order(
    arm: OrderingArm,
    deltas: &[u8],
    rng: &mut ChaCha20Rng,
) -> Vec<usize> {
    match arm {
        OrderingArm::Curriculum => curriculum_order_by_delta(deltas),
        OrderingArm::Anti => anti_order_by_delta(deltas),
        OrderingArm::Shuffled => {
            let mut order: Vec<usize> = (0..deltas.len()).collect();
            order.shuffle(rng);
            order
        }
    }
}

/// Runs gradient descent from `initial` against the frozen `reference`.
///
/// The chosen ordering is re-applied each epoch (for the shuffled arm that
/// means a fresh deterministic shuffle) unless the schedule says otherwise.
/// Aborts with a diagnostic error if the loss ever turns non-finite.
pub fn train(
    initial: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[TokenizedPair],
    schedule: &TrainSchedule,
    arm: OrderingArm,
) -> Result<TrainOutcome, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let deltas: Vec<u8> = pairs.iter().map(|p| p.delta).collect();
    let batches_per_epoch = pairs.len().div_ceil(schedule.batch_size);
    let total_steps = schedule.epochs as usize * batches_per_epoch;

    let mut policy = initial.clone();
    let mut rng = ChaCha20Rng::seed_from_u64(schedule.seed);
    let initial_pref_acc = preference_accuracy(&policy, pairs)?;
    let mut trace = Vec::with_capacity(total_steps);
    let mut grad = vec![0.0; policy.logits().len()];
    let mut fixed_order: Option<Vec<usize>> = None;
    let mut step = 0usize;

    for epoch in 0..schedule.epochs {
        let order = if schedule.reapply_order_each_epoch {
            epoch_order(arm, &deltas, &mut rng)
        } else {
            fixed_order
                .get_or_insert_with(|| epoch_order(arm, &deltas, &mut rng))
                .clone()
        };
        for (batch_idx, batch) in make_batches(&order, schedule.batch_size).iter().enumerate() {
            let lr = cosine_lr(step, total_steps, schedule.warmup_frac, schedule.lr0)?;
            let inv = 1.0 / batch.len() as f64;
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let pair = &pairs[i];
                batch_loss += dpo_loss(&batch_item(&policy, reference, pair)?, schedule.beta);
                accumulate_dpo_grad(&policy, reference, pair, schedule.beta, inv, &mut grad)?;
            }
            batch_loss *= inv;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    epoch,
                    batch: batch_idx,
                    lr,
                    detail: format!("batch loss {batch_loss}"),
                });
            }
            policy.apply_gradient(&grad, lr);
            let pref_acc = preference_accuracy(&policy, pairs)?;
            trace.push(TraceRow { step, lr, loss: batch_loss, pref_acc });
            step += 1;
        }
    }

    let final_pref_acc = trace.last().map_or(initial_pref_acc, |r| r.pref_acc);
    let final_mean_loss = mean_loss(&policy, reference, pairs, schedule.beta)?;
    Ok(TrainOutcome { policy, trace, initial_pref_acc, final_pref_acc, final_mean_loss })
}
