//! On-disk project layout, atomic writes, and reproducibility manifests.
//!
//! ```text
//! <root>/
//!   cogchain.toml
//!   traces/<id>/            raw bundles (never written by stages)
//!   derived/<id>/           steps, semantics, extraction, chains, annotations
//!   reports/{raw,annotated}/ fit and cross-validation reports
//!   reports/                tables and the success matrix
//!   agents/                 essential paths, adjudicated outcomes, scores
//!   fixtures/               recorded provider replies
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cogchain_core::chain::CognitiveChain;
use cogchain_core::trace::{read_steps, Trace, TraceBundle, TraceMeta, META_FILE, STEPS_FILE};

use crate::error::{CliError, Result};

pub const ANNOTATED_CHAINS_FILE: &str = "chains.annotated.json";
pub const ANNOTATION_STATE_FILE: &str = "annotation.json";
pub const ANNOTATION_LOG_FILE: &str = "annotations.log.jsonl";
pub const FIT_REPORT_FILE: &str = "fit_report.json";
pub const CV_REPORT_FILE: &str = "cv_report.json";
pub const SCATTER_FILE: &str = "scatter.csv";
pub const TABLE3_FILE: &str = "table3.csv";
pub const TABLE4_FILE: &str = "table4.csv";
pub const MATRIX_CSV_FILE: &str = "success_matrix.csv";
pub const MATRIX_JSON_FILE: &str = "success_matrix.json";
pub const ESSENTIAL_PATH_FILE: &str = "essential_path.json";
pub const AGENT_OUTCOMES_FILE: &str = "agent_outcomes.json";
pub const SCORED_STEPS_FILE: &str = "scored_steps.json";

/// Which chain set feeds fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainSource {
    /// Machine-extracted chains.
    Raw,
    /// Human-refined chains.
    Annotated,
}

impl ChainSource {
    pub const ALL: [ChainSource; 2] = [ChainSource::Raw, ChainSource::Annotated];

    pub fn as_str(self) -> &'static str {
        match self {
            ChainSource::Raw => "raw",
            ChainSource::Annotated => "annotated",
        }
    }

    pub fn chains_file(self) -> &'static str {
        match self {
            ChainSource::Raw => cogchain_core::extraction::CHAINS_FILE,
            ChainSource::Annotated => ANNOTATED_CHAINS_FILE,
        }
    }
}

/// Trace/task/user selection; empty lists select everything.
#[derive(Debug, Clone, Default)]
pub struct Filter {
    pub traces: Vec<String>,
    pub tasks: Vec<String>,
    pub users: Vec<String>,
}

impl Filter {
    fn admits(&self, id: &str, meta: &TraceMeta) -> bool {
        (self.traces.is_empty() || self.traces.iter().any(|t| t == id))
            && (self.tasks.is_empty() || self.tasks.contains(&meta.task_id))
            && (self.users.is_empty() || self.users.contains(&meta.user_id))
    }
}

#[derive(Debug, Clone)]
pub struct Project {
    pub root: PathBuf,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(CliError::io(dir))?;
    tmp.write_all(bytes).map_err(CliError::io(path))?;
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Inputs and outputs of one stage run, by content hash. Carries no clock
/// readings, so rerunning with unchanged inputs reproduces it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, config_sha256: &str) -> Self {
        Self {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: config_sha256.to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }
}

impl Project {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn traces_dir(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn bundle_dir(&self, id: &str) -> PathBuf {
        self.traces_dir().join(id)
    }

    pub fn derived_dir(&self, id: &str) -> PathBuf {
        self.root.join("derived").join(id)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn source_reports_dir(&self, source: ChainSource) -> PathBuf {
        self.reports_dir().join(source.as_str())
    }

    pub fn agents_dir(&self) -> PathBuf {
        self.root.join("agents")
    }

    pub fn fixtures_dir(&self) -> PathBuf {
        self.root.join("fixtures")
    }

    /// Project-relative display path with `/` separators.
    pub fn rel(&self, path: &Path) -> String {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        rel.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    /// Ids of every bundle under `traces/`, sorted.
    pub fn all_trace_ids(&self) -> Result<Vec<String>> {
        let dir = self.traces_dir();
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(CliError::Io { path: dir, source: e }),
        };
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(CliError::io(&dir))?;
            if entry.path().join(META_FILE).is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn meta(&self, id: &str) -> Result<TraceMeta> {
        read_json(&self.bundle_dir(id).join(META_FILE))
    }

    /// Selected trace ids; an explicitly named trace that does not exist is
    /// an error.
    pub fn select(&self, filter: &Filter) -> Result<Vec<String>> {
        let all = self.all_trace_ids()?;
        for t in &filter.traces {
            if !all.contains(t) {
                return Err(CliError::Validation(format!("no trace bundle named '{t}' under traces/")));
            }
        }
        let mut out = Vec::new();
        for id in all {
            if filter.admits(&id, &self.meta(&id)?) {
                out.push(id);
            }
        }
        if out.is_empty() {
            return Err(CliError::Validation("no traces selected".into()));
        }
        Ok(out)
    }

    pub fn load_bundle(&self, id: &str) -> Result<TraceBundle> {
        TraceBundle::load(self.bundle_dir(id)).map_err(|e| CliError::Validation(format!("trace {id}: {e}")))
    }

    pub fn steps_path(&self, id: &str) -> PathBuf {
        self.derived_dir(id).join(STEPS_FILE)
    }

    /// The grouped trace; requires the `group` stage.
    pub fn load_trace(&self, id: &str) -> Result<Trace> {
        let path = self.steps_path(id);
        if !path.is_file() {
            return Err(CliError::needs_stage("group", path));
        }
        let steps = read_steps(&path).map_err(|e| CliError::Validation(e.to_string()))?;
        let meta = self.meta(id)?;
        Trace::new(meta.task_id, meta.user_id, steps, meta.metadata, meta.start_ts)
            .map_err(|e| CliError::Validation(format!("trace {id}: {e}")))
    }

    pub fn chains_path(&self, id: &str, source: ChainSource) -> PathBuf {
        self.derived_dir(id).join(source.chains_file())
    }

    pub fn load_chains(&self, id: &str, source: ChainSource) -> Result<Vec<CognitiveChain>> {
        let path = self.chains_path(id, source);
        if !path.is_file() {
            return Err(match source {
                ChainSource::Raw => CliError::needs_stage("assemble", path),
                ChainSource::Annotated => CliError::Prerequisite {
                    path,
                    hint: "annotate the trace through `cogchain serve` first".into(),
                },
            });
        }
        read_json(&path)
    }

    /// Writes `<dir>/manifest.<stage>.json`, hashing every listed file.
    pub fn write_manifest(
        &self,
        dir: &Path,
        stage: &str,
        config_sha256: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<()> {
        let mut m = Manifest::new(stage, config_sha256);
        for p in inputs {
            m.inputs.insert(self.rel(p), sha256_file(p)?);
        }
        for p in outputs {
            m.outputs.insert(self.rel(p), sha256_file(p)?);
        }
        write_json(&dir.join(format!("manifest.{stage}.json")), &m)
    }
}
