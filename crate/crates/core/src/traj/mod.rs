//! The closed-loop caption/score/refine state machine.
//!
//! Each iteration generates a caption, scores it, and either stops (score
//! reached the threshold), refines the prompt (score stalled or improved but
//! stayed below the threshold), or reflects on a harmful update (score
//! dropped). The loop caps at t = 0..=t_max, so a trajectory holds at most
//! t_max + 1 steps.

pub mod store;

use std::collections::HashMap;
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::config::{Manifest, PipelineConfig};
use crate::domain::{
    Branch, ChainOfThought, Prompt, PromptOrigin, PrincipleSet, PromptTemplates, Score,
    TaskDimension, TerminalReason, Trajectory, TrajectoryStep, VideoRef,
};
use crate::error::GatewayError;
use crate::gateway::{Backend, CallCtx, CurrentRound, PreviousRound};
use store::TrajectoryStore;

/// The rolling state the loop carries between iterations: everything the
/// reflect branch needs to diagnose the previous update.
#[derive(Debug, Clone)]
pub struct LoopState {
    pub t: u32,
    pub current_prompt: Prompt,
    pub prev: Option<PrevRound>,
}

/// The previous round's record, populated for all t >= 1.
#[derive(Debug, Clone)]
pub struct PrevRound {
    pub prompt: Prompt,
    pub caption: String,
    pub score: Score,
    pub cot: Option<ChainOfThought>,
}

/// Eq.-style three-way branch decision. Total over all inputs:
/// - stop when `s_t >= lambda`;
/// - reflect when a previous score exists and `s_t` dropped below it;
/// - refine otherwise, covering `s_t` in `[s_prev, lambda)` and the t=0
///   case (no previous score exists, so reflection is impossible).
pub fn decide_branch(s_t: Score, s_prev: Option<Score>, lambda: Score) -> Branch {
    if s_t >= lambda {
        Branch::Stop
    } else if s_prev.is_some_and(|p| s_t < p) {
        Branch::Reflect
    } else {
        Branch::Refine
    }
}

/// Runs one full trajectory for (video, dimension).
///
/// Transport failures abort with an error (the caller may retry the whole
/// trajectory); an unparseable scorer reply instead records a final step
/// flagged `parse_error` and terminates the trajectory as data.
pub async fn run_trajectory(
    video: &VideoRef,
    dimension: TaskDimension,
    cfg: &crate::config::RunConfig,
    templates: &PromptTemplates,
    principles: &PrincipleSet,
    backend: &dyn Backend,
) -> Result<Trajectory, GatewayError> {
    let ctx = CallCtx { video, dimension };
    let initial = Prompt { text: templates.initial.clone(), origin: PromptOrigin::Initial };
    let mut state = LoopState { t: 0, current_prompt: initial, prev: None };
    let mut steps: Vec<TrajectoryStep> = Vec::new();

    loop {
        let t = state.t;
        let caption = backend.generate_caption(&ctx, &state.current_prompt).await?;
        let scored = backend
            .score_caption(&ctx, &caption, principles, &templates.scorer_instruction)
            .await?;

        let (score, suggestion) = match scored {
            Err(failure) => {
                steps.push(TrajectoryStep {
                    t,
                    prompt: state.current_prompt.clone(),
                    caption,
                    score: None,
                    suggestion: None,
                    branch_taken: None,
                    cot: None,
                    parse_error: true,
                    parse_fail_reason: Some(failure.reason),
                    raw_reply: Some(failure.raw),
                });
                return Ok(Trajectory {
                    video: video.clone(),
                    dimension,
                    steps,
                    terminal_reason: TerminalReason::ParseError,
                });
            }
            Ok(reply) => (reply.score, reply.suggestion),
        };

        let mut step = TrajectoryStep {
            t,
            prompt: state.current_prompt.clone(),
            caption: caption.clone(),
            score: Some(score),
            suggestion: Some(suggestion.clone()),
            branch_taken: None,
            cot: None,
            parse_error: false,
            parse_fail_reason: None,
            raw_reply: None,
        };

        if score >= cfg.lambda {
            step.branch_taken = Some(Branch::Stop);
            steps.push(step);
            return Ok(Trajectory {
                video: video.clone(),
                dimension,
                steps,
                terminal_reason: TerminalReason::Threshold,
            });
        }
        if t == cfg.t_max {
            // cap reached: the step is recorded with no branch taken
            steps.push(step);
            return Ok(Trajectory {
                video: video.clone(),
                dimension,
                steps,
                terminal_reason: TerminalReason::Cap,
            });
        }

        let branch = decide_branch(score, state.prev.as_ref().map(|p| p.score), cfg.lambda);
        let (next_prompt, cot) = match branch {
            Branch::Stop => unreachable!("handled above"),
            Branch::Refine => {
                let refiner_principles =
                    cfg.refiner_sees_principles.then(|| principles.get(dimension));
                backend
                    .refine_prompt(
                        &ctx,
                        &caption,
                        score,
                        &suggestion,
                        &templates.refine_instruction,
                        refiner_principles,
                    )
                    .await?
            }
            Branch::Reflect => {
                let prev = state.prev.as_ref().expect("reflect requires a previous round");
                let prev_cot = prev.cot.as_ref().ok_or(GatewayError::ReflectWithoutHistory)?;
                backend
                    .reflect_prompt(
                        &ctx,
                        CurrentRound {
                            prompt: &state.current_prompt,
                            caption: &caption,
                            score,
                        },
                        PreviousRound {
                            prompt: &prev.prompt,
                            caption: &prev.caption,
                            cot: prev_cot,
                        },
                        &templates.reflect_instruction,
                    )
                    .await?
            }
        };

        step.branch_taken = Some(branch);
        step.cot = Some(cot.clone());
        steps.push(step);

        state.prev = Some(PrevRound {
            prompt: state.current_prompt.clone(),
            caption,
            score,
            cot: Some(cot),
        });
        state.current_prompt = next_prompt;
        state.t += 1;
    }
}

/// Counts of completed trajectories by terminal reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonCounts {
    pub threshold: usize,
    pub cap: usize,
    pub parse_error: usize,
}

impl ReasonCounts {
    fn add(&mut self, reason: TerminalReason) {
        match reason {
            TerminalReason::Threshold => self.threshold += 1,
            TerminalReason::Cap => self.cap += 1,
            TerminalReason::ParseError => self.parse_error += 1,
        }
    }
}

/// Outcome of a manifest run. Counts reflect the final store state for the
/// manifest's keys, so re-running a completed manifest reports identically.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// (video, dimension) pairs the manifest describes.
    pub total_keys: usize,
    /// Keys with a completed trajectory in the store.
    pub completed: usize,
    /// Keys skipped because an earlier run already completed them.
    pub skipped_existing: usize,
    pub by_reason: ReasonCounts,
    /// Per-trajectory run errors from this invocation (transport class).
    pub errors: Vec<String>,
}

/// Runs every (video, dimension) trajectory the manifest requests.
///
/// Trajectories execute concurrently up to `cfg.run.parallelism`, but
/// results are written to the store in manifest order, keeping store bytes
/// independent of scheduling. Already-completed keys are skipped. Transport
/// errors are collected per trajectory without halting the rest.
pub async fn run_manifest(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    backend: Arc<dyn Backend>,
    store: &TrajectoryStore,
) -> Result<RunReport, crate::error::StoreError> {
    let existing: HashMap<(String, TaskDimension), TerminalReason> =
        TrajectoryStore::completed_markers(store.path())?;

    let mut report = RunReport::default();
    let mut jobs: Vec<(VideoRef, TaskDimension)> = Vec::new();
    for entry in &manifest.entries {
        let dims = entry.dimensions.clone().unwrap_or_else(|| cfg.run.dimensions.clone());
        for dim in dims {
            report.total_keys += 1;
            let key = (entry.video_id.clone(), dim);
            if let Some(reason) = existing.get(&key) {
                report.completed += 1;
                report.skipped_existing += 1;
                report.by_reason.add(*reason);
                continue;
            }
            let video = VideoRef {
                id: entry.video_id.clone(),
                uri: entry.uri.clone(),
                duration_s: entry.duration_s,
            };
            jobs.push((video, dim));
        }
    }

    let results = stream::iter(jobs.into_iter().map(|(video, dim)| {
        let backend = Arc::clone(&backend);
        let cfg = cfg.clone();
        async move {
            let result = run_trajectory(
                &video,
                dim,
                &cfg.run,
                &cfg.templates,
                &cfg.principles,
                backend.as_ref(),
            )
            .await;
            (video, dim, result)
        }
    }))
    .buffered(cfg.run.parallelism.max(1));

    futures::pin_mut!(results);
    while let Some((video, dim, result)) = results.next().await {
        match result {
            Ok(traj) => {
                store.append_trajectory(&traj, cfg.run.lambda, cfg.run.t_max)?;
                report.completed += 1;
                report.by_reason.add(traj.terminal_reason);
            }
            Err(e) => {
                tracing::warn!(video = %video.id, dimension = %dim, error = %e, "trajectory failed");
                report.errors.push(format!("{}/{dim}: {e}", video.id));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: i64) -> Score {
        Score::new(v).unwrap()
    }

    #[test]
    fn branch_examples() {
        let lambda = s(90);
        assert_eq!(decide_branch(s(95), Some(s(80)), lambda), Branch::Stop);
        assert_eq!(decide_branch(s(85), Some(s(85)), lambda), Branch::Refine);
        assert_eq!(decide_branch(s(70), Some(s(80)), lambda), Branch::Reflect);
        assert_eq!(decide_branch(s(70), None, lambda), Branch::Refine);
    }

    #[test]
    fn branch_partitions_the_entire_grid() {
        // exhaustive over s_t, s_prev (including none), and several lambdas
        for lambda in [0, 50, 90, 100] {
            let lambda = s(lambda);
            for s_t in 0..=100 {
                let s_t = s(s_t);
                let mut prevs: Vec<Option<Score>> = (0..=100).map(|p| Some(s(p))).collect();
                prevs.push(None);
                for s_prev in prevs {
                    let b = decide_branch(s_t, s_prev, lambda);
                    let expect = if s_t >= lambda {
                        Branch::Stop
                    } else if s_prev.map_or(false, |p| s_t < p) {
                        Branch::Reflect
                    } else {
                        Branch::Refine
                    };
                    assert_eq!(b, expect);
                }
            }
        }
    }
}
