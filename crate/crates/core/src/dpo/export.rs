//! Curriculum-ordered training manifest for external full-scale trainers.
//!
//! The manifest is JSONL: one header line carrying checksums that tie it to
//! its source dataset file, then one row per tuple in exact curriculum
//! order with its delta and mini-batch index. Validation recomputes both
//! checksums, so edits to either file are detected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{PreferenceTuple, Score, TaskDimension};
use crate::error::ExportError;
use crate::forge::write_atomic;

use super::order::{curriculum_order, make_batches};

pub const MANIFEST_KIND: &str = "training_manifest";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub kind: String,
    pub version: u32,
    pub ordering: String,
    pub count: usize,
    pub batch_size: usize,
    /// sha256 of the source dataset file bytes.
    pub source_sha256: String,
    /// sha256 of the manifest row bytes following this header.
    pub rows_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub rank: usize,
    pub batch_index: usize,
    pub video_id: String,
    pub dimension: TaskDimension,
    pub delta: u8,
    pub chosen: String,
    pub rejected: String,
    pub score_chosen: Score,
    pub score_rejected: Score,
}

/// Summary of a written or validated manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportInfo {
    pub rows: usize,
    pub batches: usize,
    pub source_sha256: String,
    pub rows_sha256: String,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes the manifest for `tuples` (already in dataset order) into
/// `out_path`, ordered by descending delta and chunked into batches of
/// `batch_size` for the batch index column.
pub fn export_training_manifest(
    tuples: &[PreferenceTuple],
    dataset_path: &Path,
    batch_size: usize,
    out_path: &Path,
) -> Result<ExportInfo, ExportError> {
    let order = curriculum_order(tuples);
    let batches = make_batches(&order, batch_size);

    let mut rows = String::new();
    for (rank, &idx) in order.iter().enumerate() {
        let t = &tuples[idx];
        let row = ManifestRow {
            rank,
            batch_index: rank / batch_size,
            video_id: t.video_id.clone(),
            dimension: t.dimension,
            delta: t.delta,
            chosen: t.chosen.clone(),
            rejected: t.rejected.clone(),
            score_chosen: t.score_chosen,
            score_rejected: t.score_rejected,
        };
        rows.push_str(&serde_json::to_string(&row).expect("row serializes"));
        rows.push('\n');
    }

    let info = ExportInfo {
        rows: order.len(),
        batches: batches.len(),
        source_sha256: sha256_file(dataset_path).map_err(ExportError::Io)?,
        rows_sha256: hex::encode(Sha256::digest(rows.as_bytes())),
    };
    let header = ManifestHeader {
        kind: MANIFEST_KIND.into(),
        version: 1,
        ordering: "curriculum".into(),
        count: info.rows,
        batch_size,
        source_sha256: info.source_sha256.clone(),
        rows_sha256: info.rows_sha256.clone(),
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    text.push_str(&rows);
    write_atomic(out_path, text.as_bytes()).map_err(ExportError::Io)?;
    Ok(info)
}

/// Re-checks a manifest against its source dataset: header checksums must
/// match both the dataset bytes and the manifest's own row bytes.
pub fn validate_training_manifest(
    manifest_path: &Path,
    dataset_path: &Path,
) -> Result<ExportInfo, ExportError> {
    let text = fs::read_to_string(manifest_path).map_err(ExportError::Io)?;
    let (header_line, rows) = text
        .split_once('\n')
        .ok_or_else(|| ExportError::Header("manifest has no rows after the header".into()))?;
    let header: ManifestHeader = serde_json::from_str(header_line)
        .map_err(|e| ExportError::Header(e.to_string()))?;
    if header.kind != MANIFEST_KIND {
        return Err(ExportError::Header(format!("unexpected kind {:?}", header.kind)));
    }

    let rows_sha = hex::encode(Sha256::digest(rows.as_bytes()));
    if rows_sha != header.rows_sha256 {
        return Err(ExportError::RowsMismatch {
            expected: header.rows_sha256,
            actual: rows_sha,
        });
    }
    let source_sha = sha256_file(dataset_path).map_err(ExportError::Io)?;
    if source_sha != header.source_sha256 {
        return Err(ExportError::SourceMismatch {
            expected: header.source_sha256,
            actual: source_sha,
        });
    }

    let mut count = 0usize;
    let mut last_delta: Option<u8> = None;
    for (i, line) in rows.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line)
            .map_err(|e| ExportError::Header(format!("row {}: {e}", i + 1)))?;
        if row.rank != i {
            return Err(ExportError::Header(format!("row {} has rank {}", i + 1, row.rank)));
        }
        if let Some(prev) = last_delta {
            if row.delta > prev {
                return Err(ExportError::Header(format!(
                    "row {} breaks descending delta order",
                    i + 1
                )));
            }
        }
        last_delta = Some(row.delta);
        count += 1;
    }
    if count != header.count {
        return Err(ExportError::Header(format!(
            "header claims {} rows, found {count}",
            header.count
        )));
    }
    Ok(ExportInfo {
        rows: count,
        batches: count.div_ceil(header.batch_size.max(1)),
        source_sha256: source_sha,
        rows_sha256: rows_sha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Score;

    fn tuples(deltas: &[u8]) -> Vec<PreferenceTuple> {
        deltas
            .iter()
            .enumerate()
            .map(|(i, &delta)| PreferenceTuple {
                video_id: format!("v{i}"),
                dimension: TaskDimension::ALL[i % 5],
                chosen: format!("good {i}"),
                rejected: format!("bad {i}"),
                score_chosen: Score::new(i64::from(delta)).unwrap(),
                score_rejected: Score::new(0).unwrap(),
                delta,
            })
            .collect()
    }

    fn write_dataset(dir: &Path, tuples: &[PreferenceTuple]) -> std::path::PathBuf {
        let path = dir.join("dataset.jsonl");
        let mut text = String::new();
        for t in tuples {
            text.push_str(&serde_json::to_string(t).unwrap());
            text.push('\n');
        }
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn export_orders_by_descending_delta() {
        let dir = tempfile::tempdir().unwrap();
        let ts = tuples(&[5, 30, 12]);
        let dataset = write_dataset(dir.path(), &ts);
        let manifest = dir.path().join("manifest.jsonl");
        let info = export_training_manifest(&ts, &dataset, 2, &manifest).unwrap();
        assert_eq!(info.rows, 3);
        assert_eq!(info.batches, 2);

        let text = fs::read_to_string(&manifest).unwrap();
        let deltas: Vec<u8> = text
            .lines()
            .skip(1)
            .map(|l| serde_json::from_str::<ManifestRow>(l).unwrap().delta)
            .collect();
        assert_eq!(deltas, vec![30, 12, 5]);
    }

    #[test]
    fn re_export_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ts = tuples(&[5, 30, 12, 30]);
        let dataset = write_dataset(dir.path(), &ts);
        let m1 = dir.path().join("m1.jsonl");
        let m2 = dir.path().join("m2.jsonl");
        let a = export_training_manifest(&ts, &dataset, 2, &m1).unwrap();
        let b = export_training_manifest(&ts, &dataset, 2, &m2).unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::read(&m1).unwrap(), fs::read(&m2).unwrap());
    }

    #[test]
    fn validate_round_trip_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let ts = tuples(&[5, 30, 12]);
        let dataset = write_dataset(dir.path(), &ts);
        let manifest = dir.path().join("manifest.jsonl");
        export_training_manifest(&ts, &dataset, 16, &manifest).unwrap();
        validate_training_manifest(&manifest, &dataset).unwrap();

        // flip one byte in the source dataset
        let mut bytes = fs::read(&dataset).unwrap();
        bytes[5] ^= 1;
        fs::write(&dataset, &bytes).unwrap();
        assert!(matches!(
            validate_training_manifest(&manifest, &dataset),
            Err(ExportError::SourceMismatch { .. })
        ));

        // restore, then flip one byte in the manifest rows
        bytes[5] ^= 1;
        fs::write(&dataset, &bytes).unwrap();
        let mut text = fs::read_to_string(&manifest).unwrap();
        let flip_at = text.len() - 3;
        unsafe { text.as_bytes_mut()[flip_at] ^= 1 };
        fs::write(&manifest, &text).unwrap();
        assert!(matches!(
            validate_training_manifest(&manifest, &dataset),
            Err(ExportError::RowsMismatch { .. })
        ));
    }
}
