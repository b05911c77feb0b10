//! Run configuration: a single TOML document with `[run]`, `[backend]`,
//! `[templates]`, `[principles]`, and `[train]` sections, plus the video
//! manifest loader. Absent fields fall back to the documented defaults.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{PrincipleSet, PromptTemplates, Score, TaskDimension};
use crate::error::ConfigError;

pub const DEFAULT_LAMBDA: u8 = 90;
pub const DEFAULT_T_MAX: u32 = 4;
pub const DEFAULT_PARALLELISM: usize = 1;
pub const DEFAULT_TIMEOUT_S: f64 = 120.0;
pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const DEFAULT_TOKEN_ENV: &str = "CAPLOOP_API_KEY";

/// Which backend implementation serves the four model roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Scripted,
}

/// Endpoint descriptor for the model backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    /// Decoding temperature forwarded verbatim; never asserted anywhere.
    pub temperature: f64,
    /// Environment variable holding the bearer token for remote calls.
    pub token_env: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_path: Option<PathBuf>,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint_url: None,
            model_name: "scripted".into(),
            timeout_s: DEFAULT_TIMEOUT_S,
            max_retries: DEFAULT_MAX_RETRIES,
            temperature: DEFAULT_TEMPERATURE,
            token_env: DEFAULT_TOKEN_ENV.into(),
            script_path: None,
        }
    }
}

/// Validated agent-loop parameters; the single source of truth for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub lambda: Score,
    pub t_max: u32,
    pub dimensions: Vec<TaskDimension>,
    pub backend: BackendDescriptor,
    pub parallelism: usize,
    pub seed: u64,
    /// Whether the refiner also sees the principle text (off by default:
    /// the refiner works from the scorer's suggestion alone).
    pub refiner_sees_principles: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lambda: Score::new(i64::from(DEFAULT_LAMBDA)).expect("default lambda"),
            t_max: DEFAULT_T_MAX,
            dimensions: TaskDimension::ALL.to_vec(),
            backend: BackendDescriptor::default(),
            parallelism: DEFAULT_PARALLELISM,
            seed: 0,
            refiner_sees_principles: false,
        }
    }
}

/// Toy-trainer schedule; defaults mirror the full-scale recipe
/// (3 epochs, batch 16, lr 5e-5, 10% warmup).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr0: f64,
    pub warmup_frac: f64,
    pub beta: f64,
    pub seed: u64,
    /// Re-apply the chosen sampling order at every epoch boundary.
    pub reapply_order_each_epoch: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            lr0: 5e-5,
            warmup_frac: 0.10,
            beta: 0.1,
            seed: 0,
            reapply_order_each_epoch: true,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs < 1 {
            return Err(ConfigError::ScheduleRange {
                field: "epochs",
                detail: format!("must be >= 1, got {}", self.epochs),
            });
        }
        if self.batch_size < 1 {
            return Err(ConfigError::ScheduleRange {
                field: "batch_size",
                detail: format!("must be >= 1, got {}", self.batch_size),
            });
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(ConfigError::ScheduleRange {
                field: "warmup_frac",
                detail: format!("must be in [0, 1), got {}", self.warmup_frac),
            });
        }
        if !(self.beta > 0.0) {
            return Err(ConfigError::ScheduleRange {
                field: "beta",
                detail: format!("must be > 0, got {}", self.beta),
            });
        }
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return Err(ConfigError::ScheduleRange {
                field: "lr0",
                detail: format!("must be finite and >= 0, got {}", self.lr0),
            });
        }
        Ok(())
    }
}

/// Everything a pipeline run needs, loaded from one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub run: RunConfig,
    pub templates: PromptTemplates,
    pub principles: PrincipleSet,
    pub train: TrainSchedule,
}

// ---------------------------------------------------------------------------
// Raw document (everything optional) and validation into the typed config.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawConfig {
    #[serde(default)]
    pub run: RawRun,
    #[serde(default)]
    pub backend: RawBackend,
    #[serde(default)]
    pub templates: RawTemplates,
    #[serde(default)]
    pub principles: BTreeMap<String, String>,
    #[serde(default)]
    pub train: Option<TrainSchedule>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawRun {
    pub lambda: Option<i64>,
    pub t_max: Option<i64>,
    pub dimensions: Option<Vec<String>>,
    pub parallelism: Option<i64>,
    pub seed: Option<u64>,
    pub refiner_sees_principles: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawBackend {
    pub kind: Option<String>,
    pub endpoint_url: Option<String>,
    pub model_name: Option<String>,
    pub timeout_s: Option<f64>,
    pub max_retries: Option<i64>,
    pub temperature: Option<f64>,
    pub token_env: Option<String>,
    pub script_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct RawTemplates {
    pub initial: Option<String>,
    pub refine_instruction: Option<String>,
    pub reflect_instruction: Option<String>,
    pub scorer_instruction: Option<String>,
}

/// Validates a parsed config document into a `RunConfig`, filling the
/// documented defaults (lambda 90, cap 4, all five dimensions) for absent
/// fields.
pub fn validate_config(raw: &RawConfig) -> Result<RunConfig, ConfigError> {
    let defaults = RunConfig::default();

    let lambda = match raw.run.lambda {
        None => defaults.lambda,
        Some(v) => Score::new(v).map_err(|_| ConfigError::LambdaRange(v))?,
    };
    let t_max = match raw.run.t_max {
        None => defaults.t_max,
        Some(v) if v >= 1 => v as u32,
        Some(v) => return Err(ConfigError::TMaxRange(v)),
    };
    let dimensions = match &raw.run.dimensions {
        None => defaults.dimensions,
        Some(names) => {
            if names.is_empty() {
                return Err(ConfigError::MissingField("run.dimensions"));
            }
            names
                .iter()
                .map(|n| TaskDimension::parse(n).map_err(ConfigError::from))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let parallelism = match raw.run.parallelism {
        None => defaults.parallelism,
        Some(v) if v >= 1 => v as usize,
        Some(v) => return Err(ConfigError::ParallelismRange(v)),
    };

    let kind = match raw.backend.kind.as_deref() {
        None | Some("scripted") => BackendKind::Scripted,
        Some("remote") => BackendKind::Remote,
        Some(other) => {
            return Err(ConfigError::Parse {
                path: PathBuf::new(),
                detail: format!("unknown backend kind {other:?}"),
            });
        }
    };
    let max_retries = match raw.backend.max_retries {
        None => DEFAULT_MAX_RETRIES,
        Some(v) if v >= 1 => v as u32,
        Some(v) => return Err(ConfigError::RetriesRange(v)),
    };
    let backend = BackendDescriptor {
        kind,
        endpoint_url: raw.backend.endpoint_url.clone().filter(|s| !s.is_empty()),
        model_name: raw
            .backend
            .model_name
            .clone()
            .unwrap_or_else(|| BackendDescriptor::default().model_name),
        timeout_s: raw.backend.timeout_s.unwrap_or(DEFAULT_TIMEOUT_S),
        max_retries,
        temperature: raw.backend.temperature.unwrap_or(DEFAULT_TEMPERATURE),
        token_env: raw.backend.token_env.clone().unwrap_or_else(|| DEFAULT_TOKEN_ENV.into()),
        script_path: raw.backend.script_path.clone(),
    };
    if backend.kind == BackendKind::Remote && backend.endpoint_url.is_none() {
        return Err(ConfigError::MissingEndpoint);
    }

    Ok(RunConfig {
        lambda,
        t_max,
        dimensions,
        backend,
        parallelism,
        seed: raw.run.seed.unwrap_or(0),
        refiner_sees_principles: raw.run.refiner_sees_principles.unwrap_or(false),
    })
}

/// Validates the whole document: run section, templates (placeholder slots
/// checked at load time), principles (all five present), train schedule.
pub fn validate_pipeline_config(raw: &RawConfig) -> Result<PipelineConfig, ConfigError> {
    let run = validate_config(raw)?;

    let defaults = default_templates();
    let templates = PromptTemplates {
        initial: raw.templates.initial.clone().unwrap_or(defaults.initial),
        refine_instruction: raw
            .templates
            .refine_instruction
            .clone()
            .unwrap_or(defaults.refine_instruction),
        reflect_instruction: raw
            .templates
            .reflect_instruction
            .clone()
            .unwrap_or(defaults.reflect_instruction),
        scorer_instruction: raw
            .templates
            .scorer_instruction
            .clone()
            .unwrap_or(defaults.scorer_instruction),
    };
    templates.validate()?;

    let principles = if raw.principles.is_empty() {
        default_principles()
    } else {
        let mut map = BTreeMap::new();
        for (name, text) in &raw.principles {
            map.insert(TaskDimension::parse(name)?, text.clone());
        }
        PrincipleSet::new(map)?
    };

    let train = raw.train.clone().unwrap_or_default();
    train.validate()?;

    Ok(PipelineConfig { run, templates, principles, train })
}

/// Loads and validates the TOML config document at `path`.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    let raw: RawConfig = toml::from_str(&text)
        .map_err(|e| ConfigError::Parse { path: path.to_path_buf(), detail: e.to_string() })?;
    let mut cfg = validate_pipeline_config(&raw)?;
    // script_path is resolved relative to the config file's directory
    if let Some(script) = &cfg.run.backend.script_path {
        if script.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.run.backend.script_path = Some(dir.join(script));
            }
        }
    }
    Ok(cfg)
}

/// Built-in instruction templates. These ship as editable text in the
/// example config; the pipeline treats them as user content.
pub fn default_templates() -> PromptTemplates {
    PromptTemplates {
        initial: "Describe this video thoroughly. Cover what is shown, what happens, \
                  and how the shot is composed."
            .into(),
        refine_instruction: "You are improving the prompt given to a video captioning model.\n\
             The current prompt produced this caption (quality {score}/100):\n\
             ---\n{caption}\n---\n\
             Reviewer suggestion: {suggestion}\n\n\
             Think through what the next prompt must ask for, then answer with a single \
             JSON object with exactly two string fields: \"reasoning\" (your analysis) and \
             \"prompt\" (the full text of the improved prompt)."
            .into(),
        reflect_instruction: "Your last prompt update backfired: the new caption scored lower \
             than the one before it.\n\
             Current prompt:\n---\n{prompt}\n---\n\
             It produced this caption (quality {score}/100):\n---\n{caption}\n---\n\
             Previous prompt was:\n---\n{prev_prompt}\n---\n\
             Previous caption was:\n---\n{prev_caption}\n---\n\
             Your reasoning for that update was:\n---\n{prev_cot}\n---\n\
             Diagnose why the update hurt, avoid repeating the mistake, and answer with a \
             single JSON object with exactly two string fields: \"reasoning\" (the diagnosis) \
             and \"prompt\" (the full text of a more reliable prompt)."
            .into(),
        scorer_instruction: "Judge the caption below against these principles:\n{principles}\n\n\
             Caption:\n---\n{caption}\n---\n\
             Answer with a single JSON object with exactly two fields: \"score\", an integer \
             from 0 to 100, and \"suggestions\", a string describing how the prompt should be \
             revised (empty string if nothing to improve)."
            .into(),
    }
}

/// Built-in per-dimension principles; editable examples live in the config.
pub fn default_principles() -> PrincipleSet {
    let mut map = BTreeMap::new();
    map.insert(
        TaskDimension::Camera,
        "A good camera caption names the shot type, framing, and every camera movement \
         (pan, tilt, zoom, dolly, handheld shake), in the order they occur."
            .to_string(),
    );
    map.insert(
        TaskDimension::Short,
        "A good short caption summarizes the clip in one or two sentences: who or what, \
         doing what, where. No filler, no speculation."
            .to_string(),
    );
    map.insert(
        TaskDimension::Background,
        "A good background caption describes the setting: location, layout, lighting, \
         weather, time of day, and any background activity or signage."
            .to_string(),
    );
    map.insert(
        TaskDimension::MainObject,
        "A good main-object caption identifies the salient subjects, their appearance and \
         attributes, and how they act and interact over the clip."
            .to_string(),
    );
    map.insert(
        TaskDimension::Detailed,
        "A good detailed caption narrates the clip event by event in temporal order, \
         covering fine-grained actions, spatial relations, and transitions, without \
         inventing anything not visible."
            .to_string(),
    );
    PrincipleSet::new(map).expect("default principles cover all dimensions")
}

// ---------------------------------------------------------------------------
// Video manifest
// ---------------------------------------------------------------------------

/// One manifest line: a video plus an optional per-video dimension override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimensions: Option<Vec<TaskDimension>>,
}

/// The list of videos a generate run iterates over.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads a JSONL manifest, enforcing unique ids and non-empty uris.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let file = fs::File::open(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let reader = BufReader::new(file);
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line
                .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                ConfigError::Parse {
                    path: path.to_path_buf(),
                    detail: format!("line {}: {e}", lineno + 1),
                }
            })?;
            if entry.video_id.is_empty() {
                return Err(ConfigError::MissingField("manifest video_id"));
            }
            if entry.uri.is_empty() {
                return Err(ConfigError::MissingField("manifest uri"));
            }
            if !seen.insert(entry.video_id.clone()) {
                return Err(ConfigError::DuplicateVideo(entry.video_id));
            }
            entries.push(entry);
        }
        Ok(Self { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_empty_document() {
        let raw: RawConfig = toml::from_str("").unwrap();
        let cfg = validate_config(&raw).unwrap();
        assert_eq!(cfg.lambda.value(), 90);
        assert_eq!(cfg.t_max, 4);
        assert_eq!(cfg.dimensions, TaskDimension::ALL.to_vec());
    }

    #[test]
    fn explicit_paper_constants() {
        let raw: RawConfig = toml::from_str("[run]\nlambda = 90\nt_max = 4\n").unwrap();
        let cfg = validate_config(&raw).unwrap();
        assert_eq!(cfg.lambda.value(), 90);
        assert_eq!(cfg.t_max, 4);
        assert_eq!(cfg.dimensions.len(), 5);
    }

    #[test]
    fn lambda_out_of_range_is_rejected() {
        let raw: RawConfig = toml::from_str("[run]\nlambda = 101\n").unwrap();
        assert!(matches!(validate_config(&raw), Err(ConfigError::LambdaRange(101))));
    }

    #[test]
    fn t_max_below_one_is_rejected() {
        let raw: RawConfig = toml::from_str("[run]\nt_max = 0\n").unwrap();
        assert!(matches!(validate_config(&raw), Err(ConfigError::TMaxRange(0))));
    }

    #[test]
    fn unknown_dimension_is_rejected() {
        let raw: RawConfig = toml::from_str("[run]\ndimensions = [\"camera\", \"bogus\"]\n").unwrap();
        assert!(validate_config(&raw).is_err());
    }

    #[test]
    fn remote_requires_endpoint() {
        let raw: RawConfig = toml::from_str("[backend]\nkind = \"remote\"\n").unwrap();
        assert!(matches!(validate_config(&raw), Err(ConfigError::MissingEndpoint)));
    }

    #[test]
    fn default_templates_and_principles_validate() {
        let raw = RawConfig::default();
        let cfg = validate_pipeline_config(&raw).unwrap();
        cfg.templates.validate().unwrap();
        assert!(!cfg.principles.get(TaskDimension::Camera).is_empty());
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.lr0, 5e-5);
        assert_eq!(cfg.train.warmup_frac, 0.10);
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            "{\"video_id\":\"v1\",\"uri\":\"file:///a\"}\n{\"video_id\":\"v1\",\"uri\":\"file:///b\"}\n",
        )
        .unwrap();
        assert!(matches!(Manifest::load(&path), Err(ConfigError::DuplicateVideo(_))));
    }

    #[test]
    fn manifest_with_override_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        fs::write(
            &path,
            "{\"video_id\":\"v1\",\"uri\":\"file:///a\",\"dimensions\":[\"camera\",\"short\"]}\n",
        )
        .unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(
            m.entries[0].dimensions,
            Some(vec![TaskDimension::Camera, TaskDimension::Short])
        );
    }
}
