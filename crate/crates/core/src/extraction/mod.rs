//! Two-stage LLM extraction: per-step semantics, then cognitive chains.
//!
//! Both stages run over fixed-size batches of motor steps. Replies are parsed
//! and validated; a rejected reply is retried with the errors appended to the
//! conversation, up to a bounded number of times. Timing never reaches the
//! model: step records carry kinds and payloads only.

pub mod provider;
pub mod schema;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::chain::CognitiveChain;
use crate::trace::{Trace, TraceBundle};

pub use provider::{ChatMessage, ChatProvider, ChatRequest, Part, ProviderConfig, ProviderError, ProviderMode};
pub use schema::{
    convert_entry, extract_json, parse_semantics, validate_extraction, validate_extraction_with, ChainEntry,
    EventAnalysis, EventDetails, ExtractionOutput, Rule, SemanticAnnotation, SemanticsProblem, TaskSummary,
    ValidationContext, Violation,
};

pub const SEMANTIC_SYSTEM_PROMPT: &str = include_str!("../../assets/prompts/semantic_analyzer.v1.txt");
pub const EXTRACTOR_SYSTEM_PROMPT: &str = include_str!("../../assets/prompts/cogchain_extractor.v1.txt");
const SEMANTIC_USER: &str = include_str!("../../assets/prompts/semantic_user.v1.txt");
const EXTRACTOR_USER: &str = include_str!("../../assets/prompts/extractor_user.v1.txt");
const RETRY: &str = include_str!("../../assets/prompts/retry.v1.txt");

/// Version tag of the bundled prompt set.
pub const PROMPT_VERSION: &str = "v1";

pub const SEMANTICS_FILE: &str = "semantics.json";
pub const EXTRACTION_RAW_FILE: &str = "extraction_raw.json";
pub const CHAINS_FILE: &str = "chains.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Semantics,
    Chains,
}

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("semantic analysis rejected after {attempts} attempts: {problem}")]
    Semantics {
        attempts: usize,
        raw: String,
        problem: SemanticsProblem,
    },
    #[error("chain extraction rejected after {attempts} attempts: {}", errors.join("; "))]
    Chains {
        attempts: usize,
        raw: String,
        errors: Vec<String>,
        violations: Vec<Violation>,
    },
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl ExtractionError {
    /// Raw reply of the final rejected attempt, if any.
    pub fn raw_reply(&self) -> Option<&str> {
        match self {
            ExtractionError::Semantics { raw, .. } | ExtractionError::Chains { raw, .. } => Some(raw),
            _ => None,
        }
    }
}

/// One motor step as presented to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub index: usize,
    /// Operational record: step kind and the payloads of its events.
    pub record: Value,
    pub screenshot: Option<PathBuf>,
}

/// Timing-free step records for every motor step of a trace.
pub fn step_inputs(bundle: &TraceBundle, trace: &Trace) -> Vec<StepInput> {
    let by_index: BTreeMap<usize, _> = bundle.events.iter().map(|e| (e.index, e)).collect();
    trace
        .steps
        .iter()
        .map(|step| {
            let events: Vec<Value> = step
                .source_events
                .iter()
                .filter_map(|i| by_index.get(i))
                .map(|e| json!({ "kind": e.kind, "payload": e.payload }))
                .collect();
            StepInput {
                index: step.step_index,
                record: json!({
                    "event_index": step.step_index,
                    "action": step.kind,
                    "events": events,
                }),
                screenshot: step.screenshot_ref.as_deref().map(|s| bundle.screenshot_path(s)),
            }
        })
        .collect()
}

/// Splits inputs into consecutive batches of at most `size` steps.
pub fn batches(inputs: &[StepInput], size: usize) -> Vec<&[StepInput]> {
    inputs.chunks(size.max(1)).collect()
}

/// Extraction settings shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionSettings {
    pub batch_size: usize,
    /// Retries after the first rejected reply.
    pub max_retries: usize,
}

impl Default for ExtractionSettings {
    fn default() -> Self {
        Self {
            batch_size: 10,
            max_retries: 2,
        }
    }
}

/// A provider bound to a model name.
pub struct LlmClient {
    pub provider: Box<dyn ChatProvider>,
    pub model: String,
}

impl LlmClient {
    pub fn new(provider: Box<dyn ChatProvider>, model: impl Into<String>) -> Self {
        Self {
            provider,
            model: model.into(),
        }
    }

    pub fn from_config(config: &ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self::new(config.build()?, config.model.clone()))
    }
}

fn image_part(index: usize, path: &Path, parts: &mut Vec<Part>) -> Result<(), ProviderError> {
    parts.push(Part::text(format!("[Image for Event {index}]")));
    parts.push(Part::image(path)?);
    Ok(())
}

/// The first-stage request for one batch.
pub fn semantics_request(batch: &[StepInput], model: &str) -> Result<ChatRequest, ProviderError> {
    let indices: Vec<String> = batch.iter().map(|s| s.index.to_string()).collect();
    let header = SEMANTIC_USER
        .replace("{{event_count}}", &batch.len().to_string())
        .replace("{{event_indices}}", &indices.join(", "));
    let mut parts = vec![Part::text(header.trim_end())];
    for step in batch {
        if let Some(path) = &step.screenshot {
            image_part(step.index, path, &mut parts)?;
        }
        parts.push(Part::text(format!("[Text for Event {}] {}", step.index, step.record)));
    }
    Ok(ChatRequest {
        model: model.to_string(),
        messages: vec![ChatMessage::system(SEMANTIC_SYSTEM_PROMPT), ChatMessage::user(parts)],
    })
}

/// The second-stage request for one batch.
pub fn chains_request(
    batch: &[StepInput],
    semantics: &[SemanticAnnotation],
    prev_summary: Option<&TaskSummary>,
    model: &str,
) -> Result<ChatRequest, ProviderError> {
    let summary = prev_summary
        .filter(|s| !s.is_empty())
        .map(TaskSummary::render)
        .unwrap_or_else(|| "(start of task)".into());
    let header = EXTRACTOR_USER.replace("{{prev_summary}}", &summary);
    let by_index: BTreeMap<usize, &SemanticAnnotation> = semantics.iter().map(|s| (s.event_index, s)).collect();
    let mut parts = vec![Part::text(header.trim_end())];
    for step in batch {
        if let Some(path) = &step.screenshot {
            image_part(step.index, path, &mut parts)?;
        }
        let mut text = json!({ "index": step.index });
        if let Some(sem) = by_index.get(&step.index) {
            text["Event Description"] = json!(sem.event_description);
            if !sem.image_description.is_empty() {
                text["Image Description"] = json!(sem.image_description);
            }
        } else {
            text["Event Record"] = step.record.clone();
        }
        parts.push(Part::text(format!("[Text for Event {}] {}", step.index, text)));
    }
    Ok(ChatRequest {
        model: model.to_string(),
        messages: vec![ChatMessage::system(EXTRACTOR_SYSTEM_PROMPT), ChatMessage::user(parts)],
    })
}

fn retry_message(errors: &[String]) -> ChatMessage {
    let list: Vec<String> = errors.iter().map(|e| format!("- {e}")).collect();
    ChatMessage::user(vec![Part::text(RETRY.replace("{{errors}}", &list.join("\n")).trim_end())])
}

/// Sends `request`, re-asking with the parser's complaints until it accepts
/// or the retry budget runs out. Returns the accepted value, or the last raw
/// reply and rejection.
fn converse<T, E>(
    client: &LlmClient,
    mut request: ChatRequest,
    max_retries: usize,
    parse: impl Fn(&str) -> Result<T, (Vec<String>, E)>,
) -> Result<Result<T, (usize, String, Vec<String>, E)>, ProviderError> {
    let mut attempt = 0;
    loop {
        attempt += 1;
        let raw = client.provider.complete(&request)?;
        match parse(&raw) {
            Ok(v) => return Ok(Ok(v)),
            Err((errors, detail)) if attempt > max_retries => return Ok(Err((attempt, raw, errors, detail))),
            Err((errors, _)) => {
                request.messages.push(ChatMessage::assistant(raw));
                request.messages.push(retry_message(&errors));
            }
        }
    }
}

/// First stage for one batch: one annotation per step, in input order.
pub fn analyze_semantics_batch(
    batch: &[StepInput],
    client: &LlmClient,
    max_retries: usize,
) -> Result<Vec<SemanticAnnotation>, ExtractionError> {
    let indices: Vec<usize> = batch.iter().map(|s| s.index).collect();
    let has_image: Vec<bool> = batch.iter().map(|s| s.screenshot.is_some()).collect();
    let request = semantics_request(batch, &client.model)?;
    converse(client, request, max_retries, |raw| {
        parse_semantics(raw, &indices, &has_image).map_err(|p| (vec![p.to_string()], p))
    })?
    .map_err(|(attempts, raw, _, problem)| ExtractionError::Semantics { attempts, raw, problem })
}

/// Parses and validates one extractor reply against its batch.
pub fn check_extraction_reply(
    raw: &str,
    expected: &[usize],
    previous_subtask: Option<&str>,
) -> Result<ExtractionOutput, (Vec<String>, Vec<Violation>)> {
    let out: ExtractionOutput =
        serde_json::from_str(extract_json(raw)).map_err(|e| (vec![format!("malformed reply: {e}")], Vec::new()))?;
    let ctx = ValidationContext {
        expected: Some(expected),
        previous_subtask,
    };
    let violations = validate_extraction_with(&out, &ctx);
    if violations.is_empty() {
        Ok(out)
    } else {
        Err((violations.iter().map(ToString::to_string).collect(), violations))
    }
}

/// Second stage for one batch.
pub fn extract_chains_batch(
    batch: &[StepInput],
    semantics: &[SemanticAnnotation],
    prev_summary: Option<&TaskSummary>,
    previous_subtask: Option<&str>,
    client: &LlmClient,
    max_retries: usize,
) -> Result<ExtractionOutput, ExtractionError> {
    let expected: Vec<usize> = batch.iter().map(|s| s.index).collect();
    let request = chains_request(batch, semantics, prev_summary, &client.model)?;
    converse(client, request, max_retries, |raw| {
        check_extraction_reply(raw, &expected, previous_subtask)
    })?
    .map_err(|(attempts, raw, errors, violations)| ExtractionError::Chains {
        attempts,
        raw,
        errors,
        violations,
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("steps {indices:?} have no analysis")]
    Gap { indices: Vec<usize> },
    #[error("steps {indices:?} are analyzed more than once")]
    Overlap { indices: Vec<usize> },
    #[error("analyses for steps {indices:?} are beyond the trace's {n_steps} steps")]
    OutOfRange { indices: Vec<usize>, n_steps: usize },
    #[error("invalid chain entry: {0}")]
    Invalid(Violation),
}

/// Stitches batch outputs into one chain per motor step of `0..n_steps`.
///
/// A step whose analysis has an empty chain is treated as a carrier of the
/// preceding thought: the last cognitive step of the nearest preceding
/// non-empty chain has its span extended over it, provided every step in
/// between is also a carrier. An `Execute`-only chain stays its own row.
pub fn assemble_trace_chains(outputs: &[ExtractionOutput], n_steps: usize) -> Result<Vec<CognitiveChain>, AssemblyError> {
    assemble_chains(outputs, 0..n_steps)
}

/// [`assemble_trace_chains`] over an arbitrary contiguous index range.
pub fn assemble_chains(
    outputs: &[ExtractionOutput],
    range: std::ops::Range<usize>,
) -> Result<Vec<CognitiveChain>, AssemblyError> {
    let mut all: Vec<&EventAnalysis> = outputs.iter().flat_map(|o| &o.event_analysis).collect();
    all.sort_by_key(|e| e.index);
    let mut dup: Vec<usize> = all.windows(2).filter(|w| w[0].index == w[1].index).map(|w| w[0].index).collect();
    dup.dedup();
    if !dup.is_empty() {
        return Err(AssemblyError::Overlap { indices: dup });
    }
    let beyond: Vec<usize> = all.iter().map(|e| e.index).filter(|i| !range.contains(i)).collect();
    if !beyond.is_empty() {
        return Err(AssemblyError::OutOfRange {
            indices: beyond,
            n_steps: range.end,
        });
    }
    let present: std::collections::BTreeSet<usize> = all.iter().map(|e| e.index).collect();
    let gaps: Vec<usize> = range.clone().filter(|i| !present.contains(i)).collect();
    if !gaps.is_empty() {
        return Err(AssemblyError::Gap { indices: gaps });
    }
    let mut chains: Vec<CognitiveChain> = Vec::with_capacity(range.len());
    // (position in `chains`, step position) of the thought a carrier extends.
    let mut owner: Option<(usize, usize)> = None;
    for ev in all {
        let chain = ev.to_chain().map_err(AssemblyError::Invalid)?;
        if chain.steps.is_empty() {
            if let Some((ci, pos)) = owner {
                let first = chains[ci].motor_step_index;
                chains[ci].steps[pos].span = Some((first, ev.index));
            }
        } else {
            let at = chains.len();
            owner = chain.steps.iter().rposition(|s| s.ctype.is_cognitive()).map(|pos| (at, pos));
        }
        chains.push(chain);
    }
    Ok(chains)
}

/// Everything the two stages produced for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRun {
    pub semantics: Vec<SemanticAnnotation>,
    pub raw_outputs: Vec<ExtractionOutput>,
    pub chains: Vec<CognitiveChain>,
}

/// Runs the first stage over all batches.
pub fn run_semantics(
    inputs: &[StepInput],
    client: &LlmClient,
    settings: &ExtractionSettings,
) -> Result<Vec<SemanticAnnotation>, ExtractionError> {
    let mut out = Vec::with_capacity(inputs.len());
    for batch in batches(inputs, settings.batch_size) {
        out.extend(analyze_semantics_batch(batch, client, settings.max_retries)?);
    }
    Ok(out)
}

/// Runs the second stage sequentially, feeding each batch's summary forward.
pub fn run_chains(
    inputs: &[StepInput],
    semantics: &[SemanticAnnotation],
    client: &LlmClient,
    settings: &ExtractionSettings,
) -> Result<Vec<ExtractionOutput>, ExtractionError> {
    let mut outputs: Vec<ExtractionOutput> = Vec::new();
    for batch in batches(inputs, settings.batch_size) {
        let prev = outputs.last();
        let prev_summary = prev.map(|o| &o.task_summary);
        let prev_subtask = prev
            .and_then(|o| o.event_analysis.last())
            .map(|e| e.details.current_subtask.clone());
        let out = extract_chains_batch(
            batch,
            semantics,
            prev_summary,
            prev_subtask.as_deref(),
            client,
            settings.max_retries,
        )?;
        outputs.push(out);
    }
    Ok(outputs)
}

/// Both stages plus assembly for one trace.
pub fn run_pipeline(
    inputs: &[StepInput],
    semantic_client: &LlmClient,
    chain_client: &LlmClient,
    settings: &ExtractionSettings,
) -> Result<ExtractionRun, ExtractionError> {
    let semantics = run_semantics(inputs, semantic_client, settings)?;
    let raw_outputs = run_chains(inputs, &semantics, chain_client, settings)?;
    let chains = assemble_trace_chains(&raw_outputs, inputs.len())?;
    Ok(ExtractionRun {
        semantics,
        raw_outputs,
        chains,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExtractionError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|source| ExtractionError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExtractionError> {
    let text = fs::read_to_string(path).map_err(|source| ExtractionError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| ExtractionError::Json {
        path: path.to_path_buf(),
        source,
    })
}

impl ExtractionRun {
    /// Writes the three stage artifacts into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ExtractionError> {
        fs::create_dir_all(dir).map_err(|source| ExtractionError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write_json(&dir.join(SEMANTICS_FILE), &self.semantics)?;
        write_json(&dir.join(EXTRACTION_RAW_FILE), &self.raw_outputs)?;
        write_json(&dir.join(CHAINS_FILE), &self.chains)
    }
}
