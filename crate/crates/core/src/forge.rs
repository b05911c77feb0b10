//! Rule-based trajectory filtering and preference-pair construction.
//!
//! Filtering removes two buckets, each counted exactly once: trajectories
//! that hit the threshold on their very first step (no learning signal) and
//! trajectories that ended in a scorer parse error. Every retained
//! trajectory contributes at most one (chosen, rejected, delta) tuple.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{PreferenceTuple, TaskDimension, TerminalReason, Trajectory};
use crate::error::ForgeError;

/// Histogram bin width for the delta distribution.
pub const DELTA_BIN_WIDTH: usize = 5;
/// Bins cover [0, 100] in widths of 5; delta 100 lands in the last bin.
pub const DELTA_BINS: usize = 20;

/// Bookkeeping from the filtering pass. `retained` always equals
/// `total_in - removed_single_step - removed_parse_error`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub total_in: usize,
    pub removed_single_step: usize,
    pub removed_parse_error: usize,
    pub retained: usize,
}

/// Summary statistics over the emitted tuples, including the zero-gap
/// trajectories that were dropped for lack of a preference direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub tuple_count: usize,
    pub zero_gap_dropped: usize,
    /// Counts per delta bin of width 5 over [0, 100].
    pub delta_hist: Vec<u64>,
    pub per_dimension: BTreeMap<TaskDimension, u64>,
    pub delta_min: Option<u8>,
    pub delta_max: Option<u8>,
    pub delta_mean: f64,
}

impl DatasetStats {
    pub fn from_tuples(tuples: &[PreferenceTuple], zero_gap_dropped: usize) -> Self {
        let mut delta_hist = vec![0u64; DELTA_BINS];
        let mut per_dimension = BTreeMap::new();
        let mut sum = 0u64;
        let mut min = None;
        let mut max = None;
        for t in tuples {
            let bin = (t.delta as usize / DELTA_BIN_WIDTH).min(DELTA_BINS - 1);
            delta_hist[bin] += 1;
            *per_dimension.entry(t.dimension).or_insert(0) += 1;
            sum += u64::from(t.delta);
            min = Some(min.map_or(t.delta, |m: u8| m.min(t.delta)));
            max = Some(max.map_or(t.delta, |m: u8| m.max(t.delta)));
        }
        let delta_mean =
            if tuples.is_empty() { 0.0 } else { sum as f64 / tuples.len() as f64 };
        Self {
            tuple_count: tuples.len(),
            zero_gap_dropped,
            delta_hist,
            per_dimension,
            delta_min: min,
            delta_max: max,
            delta_mean,
        }
    }
}

/// Applies the two filtering rules, preserving input order.
pub fn filter_trajectories(trajs: Vec<Trajectory>) -> (Vec<Trajectory>, FilterReport) {
    let mut report = FilterReport { total_in: trajs.len(), ..Default::default() };
    let mut retained = Vec::with_capacity(trajs.len());
    for traj in trajs {
        if traj.terminal_reason == TerminalReason::ParseError {
            report.removed_parse_error += 1;
        } else if traj.steps.len() == 1 && traj.terminal_reason == TerminalReason::Threshold {
            report.removed_single_step += 1;
        } else {
            retained.push(traj);
        }
    }
    report.retained = retained.len();
    (retained, report)
}

/// Builds the preference tuple for one retained trajectory.
///
/// Chosen is the max-score caption (ties break to the latest step, which
/// embodies the most refinement); rejected is the min-score caption (ties
/// break to the earliest). Returns `None` when every score is equal: a
/// zero gap carries no preference direction.
pub fn build_preference_tuple(
    traj: &Trajectory,
) -> Result<Option<PreferenceTuple>, ForgeError> {
    let key = || format!("{}/{}", traj.video.id, traj.dimension);
    if traj.steps.len() < 2 {
        return Err(ForgeError::TooFewSteps { key: key(), steps: traj.steps.len() });
    }
    let mut best: Option<(usize, u8)> = None;
    let mut worst: Option<(usize, u8)> = None;
    for (i, step) in traj.steps.iter().enumerate() {
        let score = step
            .score
            .ok_or_else(|| ForgeError::UnscoredStep { key: key(), t: step.t })?
            .value();
        // >= moves max ties to the latest index; strict < keeps min ties at
        // the earliest
        if best.map_or(true, |(_, s)| score >= s) {
            best = Some((i, score));
        }
        if worst.map_or(true, |(_, s)| score < s) {
            worst = Some((i, score));
        }
    }
    let (best_idx, s_plus) = best.expect("at least two steps");
    let (worst_idx, s_minus) = worst.expect("at least two steps");
    let delta = s_plus - s_minus;
    if delta == 0 {
        return Ok(None);
    }
    let chosen_step = &traj.steps[best_idx];
    let rejected_step = &traj.steps[worst_idx];
    Ok(Some(PreferenceTuple {
        video_id: traj.video.id.clone(),
        dimension: traj.dimension,
        chosen: chosen_step.caption.clone(),
        rejected: rejected_step.caption.clone(),
        score_chosen: chosen_step.score.expect("scored"),
        score_rejected: rejected_step.score.expect("scored"),
        delta,
    }))
}

/// Filter then pair: the full dataset construction pass. Output order
/// equals input order; each (video, dimension) contributes at most one
/// tuple.
pub fn build_dataset(
    trajs: Vec<Trajectory>,
) -> Result<(Vec<PreferenceTuple>, FilterReport, DatasetStats), ForgeError> {
    let (retained, report) = filter_trajectories(trajs);
    let mut tuples = Vec::with_capacity(retained.len());
    let mut zero_gap = 0usize;
    for traj in &retained {
        match build_preference_tuple(traj)? {
            Some(t) => tuples.push(t),
            None => zero_gap += 1,
        }
    }
    let stats = DatasetStats::from_tuples(&tuples, zero_gap);
    Ok((tuples, report, stats))
}

/// Writes the preference dataset as JSONL plus its stats sidecar, renaming
/// into place atomically. Returns the sidecar path.
pub fn write_dataset(
    tuples: &[PreferenceTuple],
    stats: &DatasetStats,
    out_path: &Path,
) -> std::io::Result<PathBuf> {
    let mut body = String::new();
    for t in tuples {
        body.push_str(&serde_json::to_string(t).expect("tuple serializes"));
        body.push('\n');
    }
    write_atomic(out_path, body.as_bytes())?;

    let stats_path = sidecar_stats_path(out_path);
    let stats_json = serde_json::to_string_pretty(stats).expect("stats serialize");
    write_atomic(&stats_path, stats_json.as_bytes())?;
    Ok(stats_path)
}

/// Reads a preference dataset written by [`write_dataset`], checking the
/// delta consistency of every row.
pub fn read_dataset(path: &Path) -> std::io::Result<Vec<PreferenceTuple>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tuple: PreferenceTuple = serde_json::from_str(line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        tuple.check_consistency().map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?;
        out.push(tuple);
    }
    Ok(out)
}

pub fn sidecar_stats_path(dataset_path: &Path) -> PathBuf {
    let mut name = dataset_path.file_name().unwrap_or_default().to_os_string();
    name.push(".stats.json");
    dataset_path.with_file_name(name)
}

/// Write-then-rename so readers never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Branch, Prompt, PromptOrigin, Score, Suggestion, TrajectoryStep, VideoRef};

    fn traj(id: &str, scores: &[i64], terminal: TerminalReason) -> Trajectory {
        let steps = scores
            .iter()
            .enumerate()
            .map(|(t, &score)| TrajectoryStep {
                t: t as u32,
                prompt: Prompt::new("p", PromptOrigin::Initial).unwrap(),
                caption: format!("caption {id} {t}"),
                score: Some(Score::new(score).unwrap()),
                suggestion: Some(Suggestion::default()),
                branch_taken: (t + 1 < scores.len()).then_some(Branch::Refine),
                cot: None,
                parse_error: false,
                parse_fail_reason: None,
                raw_reply: None,
            })
            .collect();
        Trajectory {
            video: VideoRef::new(id, format!("file:///{id}.mp4")).unwrap(),
            dimension: TaskDimension::Camera,
            steps,
            terminal_reason: terminal,
        }
    }

    fn parse_error_traj(id: &str) -> Trajectory {
        let mut t = traj(id, &[60], TerminalReason::ParseError);
        t.steps[0].score = None;
        t.steps[0].suggestion = None;
        t.steps[0].branch_taken = None;
        t.steps[0].parse_error = true;
        t
    }

    #[test]
    fn filter_buckets_are_disjoint_and_conserve() {
        let input = vec![
            traj("keep", &[60, 75, 92], TerminalReason::Threshold),
            traj("single", &[95], TerminalReason::Threshold),
            parse_error_traj("bad"),
        ];
        let (retained, report) = filter_trajectories(input);
        assert_eq!(report.total_in, 3);
        assert_eq!(report.removed_single_step, 1);
        assert_eq!(report.removed_parse_error, 1);
        assert_eq!(report.retained, 1);
        assert_eq!(retained[0].video.id, "keep");
    }

    #[test]
    fn single_step_parse_error_counts_once_as_parse_error() {
        let (_, report) = filter_trajectories(vec![parse_error_traj("bad")]);
        assert_eq!(report.removed_parse_error, 1);
        assert_eq!(report.removed_single_step, 0);
    }

    #[test]
    fn empty_input_gives_zero_report() {
        let (retained, report) = filter_trajectories(vec![]);
        assert!(retained.is_empty());
        assert_eq!(report, FilterReport::default());
    }

    #[test]
    fn pair_takes_max_and_min() {
        let t = traj("v", &[55, 70, 65], TerminalReason::Cap);
        let p = build_preference_tuple(&t).unwrap().unwrap();
        assert_eq!(p.score_chosen.value(), 70);
        assert_eq!(p.score_rejected.value(), 55);
        assert_eq!(p.delta, 15);
        assert_eq!(p.chosen, "caption v 1");
        assert_eq!(p.rejected, "caption v 0");
    }

    #[test]
    fn zero_gap_is_dropped() {
        let t = traj("v", &[60, 60, 60], TerminalReason::Cap);
        assert!(build_preference_tuple(&t).unwrap().is_none());
    }

    #[test]
    fn max_tie_takes_latest_min_tie_takes_earliest() {
        let t = traj("v", &[40, 90, 90], TerminalReason::Cap);
        let p = build_preference_tuple(&t).unwrap().unwrap();
        // verified against the brute-force selector below
        assert_eq!(p.chosen, "caption v 2");
        assert_eq!(p.rejected, "caption v 0");
        assert_eq!(p.delta, 50);

        let (bi, wi) = brute_force_pair(&[40, 90, 90]);
        assert_eq!((bi, wi), (2, 0));
    }

    /// Independent selector: enumerate all (max, min) index pairs and apply
    /// the documented tie rule directly.
    fn brute_force_pair(scores: &[i64]) -> (usize, usize) {
        let max = scores.iter().max().unwrap();
        let min = scores.iter().min().unwrap();
        let best = scores.iter().enumerate().filter(|(_, s)| *s == max).map(|(i, _)| i).max();
        let worst = scores.iter().enumerate().filter(|(_, s)| *s == min).map(|(i, _)| i).min();
        (best.unwrap(), worst.unwrap())
    }

    #[test]
    fn single_step_input_violates_precondition() {
        let t = traj("v", &[95], TerminalReason::Threshold);
        assert!(matches!(
            build_preference_tuple(&t),
            Err(ForgeError::TooFewSteps { steps: 1, .. })
        ));
    }

    #[test]
    fn build_dataset_counts_zero_gap_in_stats() {
        let input = vec![
            traj("a", &[10, 95], TerminalReason::Threshold),
            traj("b", &[50, 50], TerminalReason::Cap),
        ];
        let (tuples, report, stats) = build_dataset(input).unwrap();
        assert_eq!(report.retained, 2);
        assert_eq!(tuples.len(), 1);
        assert_eq!(stats.tuple_count, 1);
        assert_eq!(stats.zero_gap_dropped, 1);
        assert_eq!(tuples[0].delta, 85);
        assert_eq!(stats.delta_hist.iter().sum::<u64>(), 1);
        assert_eq!(stats.delta_hist[17], 1); // 85 / 5
    }

    #[test]
    fn dataset_file_round_trip() {
        let input = vec![traj("a", &[10, 95], TerminalReason::Threshold)];
        let (tuples, _, stats) = build_dataset(input).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dataset.jsonl");
        let stats_path = write_dataset(&tuples, &stats, &path).unwrap();
        assert!(stats_path.exists());
        let loaded = read_dataset(&path).unwrap();
        assert_eq!(loaded, tuples);
    }
}
