//! Append-only JSONL trajectory store.
//!
//! One `step` record per loop iteration plus one `complete` marker per
//! trajectory. The marker carries the run parameters (lambda, t_max) and the
//! video locator so any reader can validate and reconstruct trajectories
//! without the original config. Resume scans the markers: completed
//! (video, dimension) keys are skipped, anything else is re-run from
//! scratch, and a fresh attempt's t=0 step supersedes torn leftovers.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::domain::{Score, TaskDimension, TerminalReason, Trajectory, TrajectoryStep, VideoRef};
use crate::error::StoreError;

pub const STORE_FILE: &str = "trajectories.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum StoreRecord {
    Step {
        video_id: String,
        dimension: TaskDimension,
        #[serde(flatten)]
        step: TrajectoryStep,
    },
    Complete {
        video_id: String,
        dimension: TaskDimension,
        uri: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration_s: Option<f64>,
        terminal_reason: TerminalReason,
        steps: usize,
        lambda: Score,
        t_max: u32,
    },
}

/// Writer half: appends whole trajectories under a lock, one buffered
/// write per trajectory so concurrent workers never interleave records.
pub struct TrajectoryStore {
    path: PathBuf,
    file: Mutex<fs::File>,
}

impl TrajectoryStore {
    pub fn store_path(dir: &Path) -> PathBuf {
        dir.join(STORE_FILE)
    }

    /// Opens (creating if needed) the store file inside `dir`.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir)
            .map_err(|source| StoreError::Io { path: dir.to_path_buf(), source })?;
        let path = Self::store_path(dir);
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|source| StoreError::Io { path: path.clone(), source })?;
        Ok(Self { path, file: Mutex::new(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends every step of `traj` followed by its completion marker.
    pub fn append_trajectory(
        &self,
        traj: &Trajectory,
        lambda: Score,
        t_max: u32,
    ) -> Result<(), StoreError> {
        let mut block = String::new();
        for step in &traj.steps {
            let rec = StoreRecord::Step {
                video_id: traj.video.id.clone(),
                dimension: traj.dimension,
                step: step.clone(),
            };
            block.push_str(&serde_json::to_string(&rec).expect("store record serializes"));
            block.push('\n');
        }
        let marker = StoreRecord::Complete {
            video_id: traj.video.id.clone(),
            dimension: traj.dimension,
            uri: traj.video.uri.clone(),
            duration_s: traj.video.duration_s,
            terminal_reason: traj.terminal_reason,
            steps: traj.steps.len(),
            lambda,
            t_max,
        };
        block.push_str(&serde_json::to_string(&marker).expect("store record serializes"));
        block.push('\n');

        let mut file = self.file.lock().expect("store lock");
        file.write_all(block.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| StoreError::Io { path: self.path.clone(), source })
    }

    /// Returns the terminal reason of every completed (video, dimension)
    /// key in the store. Missing file means nothing is completed.
    pub fn completed_markers(
        path: &Path,
    ) -> Result<HashMap<(String, TaskDimension), TerminalReason>, StoreError> {
        let mut out = HashMap::new();
        if !path.exists() {
            return Ok(out);
        }
        for (line_no, line) in read_lines(path)?.into_iter().enumerate() {
            let rec = parse_record(path, line_no, &line)?;
            if let StoreRecord::Complete { video_id, dimension, terminal_reason, .. } = rec {
                out.insert((video_id, dimension), terminal_reason);
            }
        }
        Ok(out)
    }

    /// Reads every completed trajectory, in marker order, validating each
    /// against the lambda / t_max recorded on its marker.
    pub fn load_all(path: &Path) -> Result<Vec<Trajectory>, StoreError> {
        let mut pending: HashMap<(String, TaskDimension), Vec<TrajectoryStep>> = HashMap::new();
        let mut done: HashSet<(String, TaskDimension)> = HashSet::new();
        let mut out = Vec::new();

        for (line_no, line) in read_lines(path)?.into_iter().enumerate() {
            match parse_record(path, line_no, &line)? {
                StoreRecord::Step { video_id, dimension, step } => {
                    let key = (video_id, dimension);
                    if done.contains(&key) {
                        return Err(corrupt(line_no, &key, "step after completion marker"));
                    }
                    let steps = pending.entry(key.clone()).or_default();
                    if step.t == 0 && !steps.is_empty() {
                        // a fresh attempt supersedes torn leftovers from a
                        // killed run
                        steps.clear();
                    }
                    steps.push(step);
                }
                StoreRecord::Complete {
                    video_id,
                    dimension,
                    uri,
                    duration_s,
                    terminal_reason,
                    steps,
                    lambda,
                    t_max,
                } => {
                    let key = (video_id.clone(), dimension);
                    if done.contains(&key) {
                        return Err(corrupt(line_no, &key, "duplicate completion marker"));
                    }
                    let collected = pending.remove(&key).unwrap_or_default();
                    if collected.len() != steps {
                        return Err(corrupt(
                            line_no,
                            &key,
                            &format!("marker claims {steps} steps, found {}", collected.len()),
                        ));
                    }
                    let traj = Trajectory {
                        video: VideoRef { id: video_id, uri, duration_s },
                        dimension,
                        steps: collected,
                        terminal_reason,
                    };
                    traj.validate(lambda, t_max)
                        .map_err(|e| corrupt(line_no, &key, &e.to_string()))?;
                    done.insert(key);
                    out.push(traj);
                }
            }
        }
        Ok(out)
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, StoreError> {
    let file = fs::File::open(path)
        .map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
    let reader = BufReader::new(file);
    let mut lines = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|source| StoreError::Io { path: path.to_path_buf(), source })?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

fn parse_record(path: &Path, line_no: usize, line: &str) -> Result<StoreRecord, StoreError> {
    serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
        line: line_no + 1,
        key: extract_key_hint(line).unwrap_or_else(|| path.display().to_string()),
        detail: e.to_string(),
    })
}

/// Best-effort key extraction from a possibly-corrupt line, so the error
/// names the offending (video, dimension) when it can.
fn extract_key_hint(line: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(line).ok()?;
    let id = value.get("video_id")?.as_str()?;
    let dim = value.get("dimension")?.as_str()?;
    Some(format!("{id}/{dim}"))
}

fn corrupt(line_no: usize, key: &(String, TaskDimension), detail: &str) -> StoreError {
    StoreError::Corrupt {
        line: line_no + 1,
        key: format!("{}/{}", key.0, key.1),
        detail: detail.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Branch, Prompt, PromptOrigin, Suggestion};

    fn step(t: u32, score: i64, branch: Option<Branch>) -> TrajectoryStep {
        TrajectoryStep {
            t,
            prompt: Prompt::new("p", PromptOrigin::Initial).unwrap(),
            caption: format!("caption {t}"),
            score: Some(Score::new(score).unwrap()),
            suggestion: Some(Suggestion::new("s")),
            branch_taken: branch,
            cot: None,
            parse_error: false,
            parse_fail_reason: None,
            raw_reply: None,
        }
    }

    fn sample_traj() -> Trajectory {
        Trajectory {
            video: VideoRef::new("v1", "file:///v1.mp4").unwrap(),
            dimension: TaskDimension::Camera,
            steps: vec![step(0, 60, Some(Branch::Refine)), step(1, 92, Some(Branch::Stop))],
            terminal_reason: TerminalReason::Threshold,
        }
    }

    #[test]
    fn round_trip_through_store() {
        let dir = tempfile::tempdir().unwrap();
        let store = TrajectoryStore::open(dir.path()).unwrap();
        let traj = sample_traj();
        store.append_trajectory(&traj, Score::new(90).unwrap(), 4).unwrap();

        let loaded = TrajectoryStore::load_all(store.path()).unwrap();
        assert_eq!(loaded, vec![traj]);

        let markers = TrajectoryStore::completed_markers(store.path()).unwrap();
        assert_eq!(
            markers.get(&("v1".to_string(), TaskDimension::Camera)),
            Some(&TerminalReason::Threshold)
        );
    }

    #[test]
    fn truncated_line_names_the_offender() {
        let dir = tempfile::tempdir().unwrap();
        let store = TrajectoryStore::open(dir.path()).unwrap();
        store.append_trajectory(&sample_traj(), Score::new(90).unwrap(), 4).unwrap();

        let mut text = fs::read_to_string(store.path()).unwrap();
        text.truncate(text.len() - 10);
        fs::write(store.path(), text).unwrap();

        let err = TrajectoryStore::load_all(store.path()).unwrap_err();
        assert!(matches!(err, StoreError::Corrupt { .. }), "got {err:?}");
    }

    #[test]
    fn torn_attempt_is_superseded_by_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let store = TrajectoryStore::open(dir.path()).unwrap();
        // simulate a killed run: steps with no marker
        let torn = StoreRecord::Step {
            video_id: "v1".into(),
            dimension: TaskDimension::Camera,
            step: step(0, 55, Some(Branch::Refine)),
        };
        {
            let mut f = fs::OpenOptions::new().append(true).open(store.path()).unwrap();
            writeln!(f, "{}", serde_json::to_string(&torn).unwrap()).unwrap();
        }
        store.append_trajectory(&sample_traj(), Score::new(90).unwrap(), 4).unwrap();
        let loaded = TrajectoryStore::load_all(store.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].steps.len(), 2);
    }

    #[test]
    fn incomplete_tail_is_not_reported_completed() {
        let dir = tempfile::tempdir().unwrap();
        let store = TrajectoryStore::open(dir.path()).unwrap();
        let torn = StoreRecord::Step {
            video_id: "v9".into(),
            dimension: TaskDimension::Short,
            step: step(0, 55, Some(Branch::Refine)),
        };
        {
            let mut f = fs::OpenOptions::new().append(true).open(store.path()).unwrap();
            writeln!(f, "{}", serde_json::to_string(&torn).unwrap()).unwrap();
        }
        let markers = TrajectoryStore::completed_markers(store.path()).unwrap();
        assert!(markers.is_empty());
    }
}
