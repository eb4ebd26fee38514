//! Agent assessment: adjudicated outcomes on essential paths, scored by
//! difficulty and aggregated into type × difficulty-bin success matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{CognitiveChain, CognitiveStep, CognitiveType};
use crate::difficulty::{difficulty_index, BaseDifficulties, ModelConfig, ModelError};
use crate::trace::StepKind;

/// One motor step of an essential path with its chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub step_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<StepKind>,
    #[serde(default)]
    pub description: String,
    pub chain: CognitiveChain,
}

/// The minimal step sequence a task needs to succeed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EssentialPath {
    pub task_id: String,
    pub steps: Vec<PathStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "label", rename_all = "snake_case")]
pub enum OutcomeLabel {
    Success,
    /// Error originated at this position among the step's non-Execute
    /// cognitive steps.
    Failure { position: usize },
    ExcludedNotAttempted,
    ExcludedConsequent,
    /// The agent stopped before this step; counted as a failure of its first
    /// cognitive step.
    OmittedSelfTermination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentStepOutcome {
    pub task_id: String,
    pub agent_id: String,
    pub step_index: usize,
    #[serde(flatten)]
    pub label: OutcomeLabel,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub note: String,
}

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("{agent_id}/{task_id}: outcome for step {step_index}, which is not on the essential path")]
    UnknownStep {
        task_id: String,
        agent_id: String,
        step_index: usize,
    },
    #[error("{agent_id}/{task_id}: no outcome for path step {step_index}")]
    MissingOutcome {
        task_id: String,
        agent_id: String,
        step_index: usize,
    },
    #[error("{agent_id}/{task_id}: step {step_index} has more than one outcome")]
    DuplicateOutcome {
        task_id: String,
        agent_id: String,
        step_index: usize,
    },
    #[error("{agent_id}/{task_id}: step {step_index} failure position {position} but the chain has {len} cognitive steps")]
    InvalidPosition {
        task_id: String,
        agent_id: String,
        step_index: usize,
        position: usize,
        len: usize,
    },
    #[error("outcomes for task {task_id}, which has no essential path")]
    UnknownTask { task_id: String },
    #[error("path step {step_index}: {source}")]
    Model {
        step_index: usize,
        #[source]
        source: ModelError,
    },
    #[error("binning needs at least one finite value and one bin")]
    EmptyBinning,
    #[error("difficulty {0} is not finite")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepResult {
    Success,
    Failure,
}

/// One attempted cognitive step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredStep {
    pub task_id: String,
    pub agent_id: String,
    pub step_index: usize,
    /// Position among the step's non-Execute cognitive steps.
    pub position: usize,
    pub step: CognitiveStep,
    /// `K_type · index`, in ms.
    pub difficulty: f64,
    pub result: StepResult,
}

/// Scores one agent's outcomes on one path. Excluded steps produce no
/// records; within a failed chain, positions after the failure are
/// excluded as consequent.
pub fn score_agent_trace(
    path: &EssentialPath,
    outcomes: &[AgentStepOutcome],
    k: &BaseDifficulties,
    config: &ModelConfig,
) -> Result<Vec<ScoredStep>, AgentError> {
    let agent_id = outcomes.first().map(|o| o.agent_id.clone()).unwrap_or_default();
    let on_path: BTreeSet<usize> = path.steps.iter().map(|s| s.step_index).collect();
    let mut by_step: BTreeMap<usize, &AgentStepOutcome> = BTreeMap::new();
    for o in outcomes {
        let ids = || (path.task_id.clone(), o.agent_id.clone(), o.step_index);
        if o.task_id != path.task_id {
            return Err(AgentError::UnknownTask {
                task_id: o.task_id.clone(),
            });
        }
        if !on_path.contains(&o.step_index) {
            let (task_id, agent_id, step_index) = ids();
            return Err(AgentError::UnknownStep {
                task_id,
                agent_id,
                step_index,
            });
        }
        if by_step.insert(o.step_index, o).is_some() {
            let (task_id, agent_id, step_index) = ids();
            return Err(AgentError::DuplicateOutcome {
                task_id,
                agent_id,
                step_index,
            });
        }
    }
    let mut scored = Vec::new();
    for ps in &path.steps {
        let outcome = by_step.get(&ps.step_index).ok_or_else(|| AgentError::MissingOutcome {
            task_id: path.task_id.clone(),
            agent_id: agent_id.clone(),
            step_index: ps.step_index,
        })?;
        let cognitive: Vec<&CognitiveStep> = ps.chain.cognitive_steps().collect();
        let attempted = match outcome.label {
            OutcomeLabel::ExcludedNotAttempted | OutcomeLabel::ExcludedConsequent => continue,
            OutcomeLabel::Success => cognitive.len(),
            // Nothing to fail in an Execute-only step.
            OutcomeLabel::OmittedSelfTermination if cognitive.is_empty() => 0,
            OutcomeLabel::Failure { position } if position >= cognitive.len() => {
                return Err(AgentError::InvalidPosition {
                    task_id: path.task_id.clone(),
                    agent_id: outcome.agent_id.clone(),
                    step_index: ps.step_index,
                    position,
                    len: cognitive.len(),
                })
            }
            OutcomeLabel::Failure { position } => position + 1,
            OutcomeLabel::OmittedSelfTermination => 1,
        };
        let failed_at = match outcome.label {
            OutcomeLabel::Failure { position } => Some(position),
            OutcomeLabel::OmittedSelfTermination => Some(0),
            _ => None,
        };
        for (position, step) in cognitive.into_iter().enumerate().take(attempted) {
            let index = difficulty_index(step, config).map_err(|source| AgentError::Model {
                step_index: ps.step_index,
                source,
            })?;
            scored.push(ScoredStep {
                task_id: path.task_id.clone(),
                agent_id: outcome.agent_id.clone(),
                step_index: ps.step_index,
                position,
                step: step.clone(),
                difficulty: k.get(step.ctype) * index,
                result: if failed_at == Some(position) {
                    StepResult::Failure
                } else {
                    StepResult::Success
                },
            });
        }
    }
    Ok(scored)
}

/// Scores every (task, agent) group of an adjudication file.
pub fn score_all(
    paths: &[EssentialPath],
    outcomes: &[AgentStepOutcome],
    k: &BaseDifficulties,
    config: &ModelConfig,
) -> Result<Vec<ScoredStep>, AgentError> {
    let by_task: BTreeMap<&str, &EssentialPath> = paths.iter().map(|p| (p.task_id.as_str(), p)).collect();
    let mut groups: BTreeMap<(&str, &str), Vec<AgentStepOutcome>> = BTreeMap::new();
    for o in outcomes {
        groups
            .entry((o.task_id.as_str(), o.agent_id.as_str()))
            .or_default()
            .push(o.clone());
    }
    let mut out = Vec::new();
    for ((task, _), group) in groups {
        let path = by_task.get(task).ok_or_else(|| AgentError::UnknownTask {
            task_id: task.to_string(),
        })?;
        out.extend(score_agent_trace(path, &group, k, config)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub population: usize,
}

/// Equal-frequency binning of a value list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub bins: Vec<Bin>,
    /// Bin of each input value, in input order.
    pub assignment: Vec<usize>,
    /// Fewer distinct values than requested bins; the bin count was reduced.
    pub degenerate: bool,
}

/// Rank-based equal-frequency bins. Values are stably sorted and the rank
/// range is cut into `bin_count` near-equal runs, so populations differ by at
/// most one and tied values keep input order. Edges are each run's first and
/// last value.
pub fn equal_frequency_bins(values: &[f64], bin_count: usize) -> Result<Binning, AgentError> {
    if values.is_empty() || bin_count == 0 {
        return Err(AgentError::EmptyBinning);
    }
    if let Some(&bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(AgentError::NonFinite(bad));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut distinct = 1;
    for w in order.windows(2) {
        if values[w[0]] != values[w[1]] {
            distinct += 1;
        }
    }
    let degenerate = distinct < bin_count;
    let bins_used = bin_count.min(distinct).min(values.len());
    let n = values.len();
    let mut assignment = vec![0; n];
    let mut bins: Vec<Bin> = Vec::with_capacity(bins_used);
    for (rank, &i) in order.iter().enumerate() {
        let b = rank * bins_used / n;
        assignment[i] = b;
        if bins.len() == b {
            bins.push(Bin {
                low: values[i],
                high: values[i],
                population: 0,
            });
        }
        bins[b].high = values[i];
        bins[b].population += 1;
    }
    Ok(Binning {
        bins,
        assignment,
        degenerate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinningMode {
    /// Separate bins for each cognitive type.
    #[default]
    PerType,
    /// One set of bins over all types.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub ctype: CognitiveType,
    pub bin: usize,
    pub bin_low: f64,
    pub bin_high: f64,
    pub successes: usize,
    pub attempts: usize,
}

impl Cell {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.attempts as f64
    }
}

/// Success counts per (type, bin). Pairs without attempts have no cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessMatrix {
    pub mode: BinningMode,
    pub bin_count: usize,
    /// Bins keyed by type name, or by [`POOLED_KEY`] in pooled mode.
    pub bins: BTreeMap<String, Vec<Bin>>,
    pub cells: Vec<Cell>,
    /// Bin sets that had fewer distinct values than requested bins.
    pub degenerate: Vec<String>,
}

pub const POOLED_KEY: &str = "pooled";

impl SuccessMatrix {
    pub fn cell(&self, ctype: CognitiveType, bin: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.ctype == ctype && c.bin == bin)
    }

    pub fn total_attempts(&self) -> usize {
        self.cells.iter().map(|c| c.attempts).sum()
    }

    /// `type,bin_low,bin_high,successes,attempts,rate`, one line per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("type,bin_low,bin_high,successes,attempts,rate\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                c.ctype,
                c.bin_low,
                c.bin_high,
                c.successes,
                c.attempts,
                c.rate()
            );
        }
        out
    }
}

pub fn success_matrix(scored: &[ScoredStep], bin_count: usize, mode: BinningMode) -> Result<SuccessMatrix, AgentError> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, s) in scored.iter().enumerate() {
        let key = match mode {
            BinningMode::PerType => s.step.ctype.to_string(),
            BinningMode::Pooled => POOLED_KEY.to_string(),
        };
        groups.entry(key).or_default().push(i);
    }
    let mut bins = BTreeMap::new();
    let mut degenerate = Vec::new();
    let mut tally: BTreeMap<(CognitiveType, usize), (f64, f64, usize, usize)> = BTreeMap::new();
    for (key, members) in groups {
        let values: Vec<f64> = members.iter().map(|&i| scored[i].difficulty).collect();
        let binning = equal_frequency_bins(&values, bin_count)?;
        if binning.degenerate {
            degenerate.push(key.clone());
        }
        for (&i, &b) in members.iter().zip(&binning.assignment) {
            let edge = binning.bins[b];
            let entry = tally
                .entry((scored[i].step.ctype, b))
                .or_insert((edge.low, edge.high, 0, 0));
            entry.3 += 1;
            if scored[i].result == StepResult::Success {
                entry.2 += 1;
            }
        }
        bins.insert(key, binning.bins);
    }
    let cells = tally
        .into_iter()
        .map(|((ctype, bin), (bin_low, bin_high, successes, attempts))| Cell {
            ctype,
            bin,
            bin_low,
            bin_high,
            successes,
            attempts,
        })
        .collect();
    Ok(SuccessMatrix {
        mode,
        bin_count,
        bins,
        cells,
        degenerate,
    })
}
