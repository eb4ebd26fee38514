//! Cognitive step taxonomy, chains, and span merging.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CognitiveType {
    Orient,
    Find,
    Extract,
    Recall,
    DecideExplicit,
    DecideImplicit,
    Compute,
    Create,
    Verify,
    /// Marks the physical action closing a chain; never carries difficulty.
    Execute,
}

impl CognitiveType {
    pub const ALL: [CognitiveType; 10] = [
        CognitiveType::Orient,
        CognitiveType::Find,
        CognitiveType::Extract,
        CognitiveType::Recall,
        CognitiveType::DecideExplicit,
        CognitiveType::DecideImplicit,
        CognitiveType::Compute,
        CognitiveType::Create,
        CognitiveType::Verify,
        CognitiveType::Execute,
    ];

    /// Types that receive a fitted base difficulty, in column order.
    pub const FITTED: [CognitiveType; 9] = [
        CognitiveType::Orient,
        CognitiveType::Find,
        CognitiveType::Extract,
        CognitiveType::Recall,
        CognitiveType::DecideExplicit,
        CognitiveType::DecideImplicit,
        CognitiveType::Compute,
        CognitiveType::Create,
        CognitiveType::Verify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CognitiveType::Orient => "Orient",
            CognitiveType::Find => "Find",
            CognitiveType::Extract => "Extract",
            CognitiveType::Recall => "Recall",
            CognitiveType::DecideExplicit => "DecideExplicit",
            CognitiveType::DecideImplicit => "DecideImplicit",
            CognitiveType::Compute => "Compute",
            CognitiveType::Create => "Create",
            CognitiveType::Verify => "Verify",
            CognitiveType::Execute => "Execute",
        }
    }

    pub fn is_cognitive(self) -> bool {
        self != CognitiveType::Execute
    }

    /// Whether the index is a logarithm (and so rescales with the log base).
    pub fn is_log_family(self) -> bool {
        matches!(
            self,
            CognitiveType::Orient
                | CognitiveType::Find
                | CognitiveType::Extract
                | CognitiveType::DecideExplicit
                | CognitiveType::Create
                | CognitiveType::Verify
        )
    }
}

impl fmt::Display for CognitiveType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown cognitive type '{0}'")]
pub struct UnknownType(pub String);

impl FromStr for CognitiveType {
    type Err = UnknownType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CognitiveType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| UnknownType(s.to_string()))
    }
}

/// Difficulty factors. Which fields are required depends on the type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CogParams {
    /// Candidate elements or options.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<u32>,
    /// Information chunks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<u32>,
    /// Complexity or implicit decision space, in [0, 1].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    /// Steps since the recalled information was stored.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_old: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_new: Option<u32>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub located_before: bool,
}

impl CogParams {
    pub fn n(n: u32) -> Self {
        Self { n: Some(n), ..Default::default() }
    }

    pub fn m(m: u32) -> Self {
        Self { m: Some(m), ..Default::default() }
    }

    pub fn c(c: f64) -> Self {
        Self { c: Some(c), ..Default::default() }
    }

    pub fn d(d: u32) -> Self {
        Self { d: Some(d), ..Default::default() }
    }

    pub fn orient(s_old: u32, s_new: u32) -> Self {
        Self {
            s_old: Some(s_old),
            s_new: Some(s_new),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CognitiveStep {
    pub ctype: CognitiveType,
    #[serde(default)]
    pub params: CogParams,
    #[serde(default)]
    pub content: String,
    /// Inclusive motor-step range covered by this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<(usize, usize)>,
}

impl CognitiveStep {
    pub fn new(ctype: CognitiveType, params: CogParams) -> Self {
        Self {
            ctype,
            params,
            content: String::new(),
            span: None,
        }
    }

    pub fn execute() -> Self {
        Self::new(CognitiveType::Execute, CogParams::default())
    }

    pub fn with_content(mut self, content: impl Into<String>) -> Self {
        self.content = content.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CognitiveChain {
    pub motor_step_index: usize,
    #[serde(default)]
    pub steps: Vec<CognitiveStep>,
}

impl CognitiveChain {
    pub fn new(motor_step_index: usize, steps: Vec<CognitiveStep>) -> Self {
        Self { motor_step_index, steps }
    }

    pub fn empty(motor_step_index: usize) -> Self {
        Self::new(motor_step_index, Vec::new())
    }

    /// Steps other than `Execute`.
    pub fn cognitive_steps(&self) -> impl Iterator<Item = &CognitiveStep> {
        self.steps.iter().filter(|s| s.ctype.is_cognitive())
    }

    pub fn has_cognition(&self) -> bool {
        self.cognitive_steps().next().is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpanError {
    #[error("expected {expected} chains, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("chain at position {position} is for motor step {found}")]
    Misaligned { position: usize, found: usize },
    #[error("motor step {step}, cognitive step {position}: span {start}..={end} invalid for {len} motor steps")]
    InvalidSpan {
        step: usize,
        position: usize,
        start: usize,
        end: usize,
        len: usize,
    },
}

/// A timing row after span merging: motor steps `first..=last` with their
/// chains concatenated in order.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveStep {
    pub first: usize,
    pub last: usize,
    pub chain: CognitiveChain,
}

impl EffectiveStep {
    pub fn members(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

/// Checks chain/step alignment and span bounds.
pub fn check_alignment(chains: &[CognitiveChain], n_steps: usize) -> Result<(), SpanError> {
    if chains.len() != n_steps {
        return Err(SpanError::CountMismatch {
            expected: n_steps,
            found: chains.len(),
        });
    }
    for (position, chain) in chains.iter().enumerate() {
        if chain.motor_step_index != position {
            return Err(SpanError::Misaligned {
                position,
                found: chain.motor_step_index,
            });
        }
        for (p, step) in chain.steps.iter().enumerate() {
            if let Some((start, end)) = step.span {
                if start > end || end >= n_steps || position < start || position > end {
                    return Err(SpanError::InvalidSpan {
                        step: position,
                        position: p,
                        start,
                        end,
                        len: n_steps,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Collapses spanned motor steps into single rows. Motor steps covered by a
/// span become auxiliary carriers: their chains join the row of the first
/// covered step and they stop being separate timing rows.
pub fn merge_spans(chains: &[CognitiveChain], n_steps: usize) -> Result<Vec<EffectiveStep>, SpanError> {
    check_alignment(chains, n_steps)?;
    // reach[i] = furthest step that must share a row with step i.
    let mut reach: Vec<usize> = (0..n_steps).collect();
    for chain in chains {
        for step in &chain.steps {
            if let Some((start, end)) = step.span {
                reach[start] = reach[start].max(end);
            }
        }
    }
    let mut rows = Vec::new();
    let mut first = 0;
    while first < n_steps {
        let mut last = reach[first];
        let mut i = first;
        while i <= last {
            last = last.max(reach[i]);
            i += 1;
        }
        let steps = chains[first..=last]
            .iter()
            .flat_map(|c| c.steps.iter().cloned())
            .collect();
        rows.push(EffectiveStep {
            first,
            last,
            chain: CognitiveChain::new(first, steps),
        });
        first = last + 1;
    }
    Ok(rows)
}
