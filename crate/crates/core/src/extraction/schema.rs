//! Reply shapes of the two extraction stages and their validation rules.

use std::collections::BTreeSet;
use std::fmt;

use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::chain::{CogParams, CognitiveChain, CognitiveStep, CognitiveType};

/// Per-event output of the semantic analyzer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticAnnotation {
    pub event_index: usize,
    /// Empty when the event had no screenshot.
    pub image_description: String,
    pub event_description: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    #[serde(default)]
    pub review: String,
    #[serde(default)]
    pub current: String,
    #[serde(default)]
    pub outlook: String,
}

impl TaskSummary {
    pub fn is_empty(&self) -> bool {
        self.review.is_empty() && self.current.is_empty() && self.outlook.is_empty()
    }

    pub fn render(&self) -> String {
        [&self.review, &self.current, &self.outlook]
            .into_iter()
            .filter(|s| !s.is_empty())
            .cloned()
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// One cognitive-chain entry as emitted by the extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainEntry {
    #[serde(rename = "type")]
    pub ctype: String,
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub parameters: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventDetails {
    #[serde(default)]
    pub event_des: String,
    #[serde(default)]
    pub current_subtask: String,
    #[serde(default)]
    pub cognitive_chain: Vec<ChainEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventAnalysis {
    #[serde(deserialize_with = "index_from_number_or_string")]
    pub index: usize,
    #[serde(default)]
    pub reasoning: String,
    pub details: EventDetails,
}

/// Validated structured result of the chain extractor for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutput {
    pub task_summary: TaskSummary,
    pub event_analysis: Vec<EventAnalysis>,
}

fn index_from_number_or_string<'de, D: Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
    match Value::deserialize(d)? {
        Value::Number(n) => n
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| de::Error::custom(format!("index {n} is not a non-negative integer"))),
        Value::String(s) => s
            .trim()
            .parse()
            .map_err(|_| de::Error::custom(format!("index '{s}' is not an integer"))),
        other => Err(de::Error::custom(format!("index must be a number, got {other}"))),
    }
}

/// Cognitive types the extractor may emit.
pub const TYPE_WHITELIST: [&str; 9] = [
    "Orient", "Verify", "Find", "Extract", "Recall", "Decide", "Create", "Compute", "Execute",
];

/// Extractor parameter names and the difficulty factor each maps to.
pub const PARAMETER_MAP: [(&str, &str, &str); 10] = [
    ("Orient", "steps_old", "s_old"),
    ("Orient", "steps_new", "s_new"),
    ("Verify", "m", "m"),
    ("Find", "n", "n"),
    ("Extract", "m", "m"),
    ("Recall", "d", "d"),
    ("Decide", "n", "n"),
    ("Decide", "c", "c"),
    ("Create", "m", "m"),
    ("Compute", "c", "c"),
];

fn allowed_params(ctype: &str) -> impl Iterator<Item = &'static str> + '_ {
    PARAMETER_MAP
        .iter()
        .filter(move |(t, _, _)| *t == ctype)
        .map(|(_, name, _)| *name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    UnknownType,
    UnknownParameter,
    MissingParameter,
    InvalidParameter,
    DecideExclusivity,
    DuplicateIndex,
    OutOfOrder,
    MissingEvent,
    UnexpectedEvent,
    InitialOrient,
    LinkageVerify,
    LinkageOrient,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::UnknownType => "unknown_type",
            Rule::UnknownParameter => "unknown_parameter",
            Rule::MissingParameter => "missing_parameter",
            Rule::InvalidParameter => "invalid_parameter",
            Rule::DecideExclusivity => "decide_exclusivity",
            Rule::DuplicateIndex => "duplicate_index",
            Rule::OutOfOrder => "out_of_order",
            Rule::MissingEvent => "missing_event",
            Rule::UnexpectedEvent => "unexpected_event",
            Rule::InitialOrient => "initial_orient",
            Rule::LinkageVerify => "linkage_verify",
            Rule::LinkageOrient => "linkage_orient",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    pub event_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain_position: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] event {}", self.rule.as_str(), self.event_index)?;
        if let Some(p) = self.chain_position {
            write!(f, ", chain position {p}")?;
        }
        write!(f, ": {}", self.message)
    }
}

fn violation(rule: Rule, event_index: usize, chain_position: Option<usize>, message: impl Into<String>) -> Violation {
    Violation {
        rule,
        event_index,
        chain_position,
        message: message.into(),
    }
}

fn as_count(v: &Value) -> Option<u32> {
    match v {
        Value::Number(n) => n
            .as_u64()
            .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0 && *f >= 0.0).map(|f| f as u64))
            .and_then(|x| u32::try_from(x).ok()),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn as_fraction(v: &Value) -> Option<f64> {
    let x = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }?;
    (x.is_finite() && (0.0..=1.0).contains(&x)).then_some(x)
}

/// Maps one extractor entry to a [`CognitiveStep`], or explains why it cannot.
pub fn convert_entry(entry: &ChainEntry) -> Result<CognitiveStep, (Rule, String)> {
    let t = entry.ctype.trim();
    if !TYPE_WHITELIST.contains(&t) {
        return Err((Rule::UnknownType, format!("unknown cognitive type '{}'", entry.ctype)));
    }
    for name in entry.parameters.keys() {
        if !allowed_params(t).any(|p| p == name) {
            return Err((Rule::UnknownParameter, format!("parameter '{name}' is not defined for {t}")));
        }
    }
    let count = |name: &str| -> Result<Option<u32>, (Rule, String)> {
        match entry.parameters.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => as_count(v).map(Some).ok_or_else(|| {
                (Rule::InvalidParameter, format!("{t}.{name} must be a non-negative integer, got {v}"))
            }),
        }
    };
    let fraction = |name: &str| -> Result<Option<f64>, (Rule, String)> {
        match entry.parameters.get(name) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => as_fraction(v)
                .map(Some)
                .ok_or_else(|| (Rule::InvalidParameter, format!("{t}.{name} must be a number in [0, 1], got {v}"))),
        }
    };
    let need = |name: &str, v: Option<u32>| v.ok_or((Rule::MissingParameter, format!("{t} requires '{name}'")));
    let (ctype, params) = match t {
        "Orient" => (
            CognitiveType::Orient,
            CogParams::orient(need("steps_old", count("steps_old")?)?, need("steps_new", count("steps_new")?)?),
        ),
        "Verify" => (CognitiveType::Verify, CogParams::m(need("m", count("m")?)?)),
        "Extract" => (CognitiveType::Extract, CogParams::m(need("m", count("m")?)?)),
        "Create" => (CognitiveType::Create, CogParams::m(need("m", count("m")?)?)),
        "Find" => (CognitiveType::Find, CogParams::n(need("n", count("n")?)?)),
        "Recall" => (CognitiveType::Recall, CogParams::d(need("d", count("d")?)?)),
        "Compute" => (
            CognitiveType::Compute,
            CogParams::c(fraction("c")?.ok_or((Rule::MissingParameter, "Compute requires 'c'".to_string()))?),
        ),
        "Decide" => {
            let n = count("n")?.filter(|&n| n > 0);
            let c = fraction("c")?;
            match (n, c) {
                (Some(n), Some(c)) if c > 0.0 => {
                    return Err((
                        Rule::DecideExclusivity,
                        format!("Decide has both n={n} and c={c}; they are mutually exclusive"),
                    ))
                }
                (Some(n), _) => (CognitiveType::DecideExplicit, CogParams::n(n)),
                (None, Some(c)) => (CognitiveType::DecideImplicit, CogParams::c(c)),
                (None, None) => {
                    if entry.parameters.contains_key("n") {
                        (CognitiveType::DecideImplicit, CogParams::c(0.0))
                    } else {
                        return Err((Rule::MissingParameter, "Decide requires 'n' or 'c'".into()));
                    }
                }
            }
        }
        _ => (CognitiveType::Execute, CogParams::default()),
    };
    Ok(CognitiveStep::new(ctype, params).with_content(entry.content.clone()))
}

/// Context a batch is validated against.
#[derive(Debug, Clone, Default)]
pub struct ValidationContext<'a> {
    /// Indices the batch must cover, in order.
    pub expected: Option<&'a [usize]>,
    /// Subtask of the event preceding the batch.
    pub previous_subtask: Option<&'a str>,
}

fn has_type(details: &EventDetails, ctype: &str) -> bool {
    details.cognitive_chain.iter().any(|e| e.ctype.trim() == ctype)
}

/// Every rule violation in an extractor output; empty when compliant.
pub fn validate_extraction(out: &ExtractionOutput) -> Vec<Violation> {
    validate_extraction_with(out, &ValidationContext::default())
}

pub fn validate_extraction_with(out: &ExtractionOutput, ctx: &ValidationContext<'_>) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    let mut last: Option<usize> = None;
    for ev in &out.event_analysis {
        if !seen.insert(ev.index) {
            violations.push(violation(Rule::DuplicateIndex, ev.index, None, "index analyzed more than once"));
        } else if let Some(prev) = last.filter(|&p| ev.index < p) {
            violations.push(violation(
                Rule::OutOfOrder,
                ev.index,
                None,
                format!("index {} follows {prev}", ev.index),
            ));
        }
        last = Some(last.map_or(ev.index, |p| p.max(ev.index)));
        for (pos, entry) in ev.details.cognitive_chain.iter().enumerate() {
            if let Err((rule, message)) = convert_entry(entry) {
                violations.push(violation(rule, ev.index, Some(pos), message));
            }
        }
    }
    if let Some(expected) = ctx.expected {
        let want: BTreeSet<usize> = expected.iter().copied().collect();
        for &i in want.difference(&seen) {
            violations.push(violation(Rule::MissingEvent, i, None, "event has no analysis"));
        }
        for &i in seen.difference(&want) {
            violations.push(violation(Rule::UnexpectedEvent, i, None, "analysis for an event not in the batch"));
        }
    }
    if let Some(first) = out.event_analysis.iter().find(|e| e.index == 0) {
        if !has_type(&first.details, "Orient") {
            violations.push(violation(Rule::InitialOrient, 0, None, "event 0 must contain Orient"));
        }
    }
    let subtask = |e: &EventAnalysis| e.details.current_subtask.trim().to_string();
    if let (Some(prev), Some(first)) = (ctx.previous_subtask, out.event_analysis.first()) {
        if first.index != 0 && prev.trim() != subtask(first) && !has_type(&first.details, "Orient") {
            violations.push(violation(
                Rule::LinkageOrient,
                first.index,
                None,
                "subtask changed from the previous batch but chain has no Orient",
            ));
        }
    }
    for pair in out.event_analysis.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        if subtask(prev) == subtask(next) {
            continue;
        }
        let ends_with_verify = prev
            .details
            .cognitive_chain
            .last()
            .is_some_and(|e| e.ctype.trim() == "Verify");
        if !ends_with_verify {
            violations.push(violation(
                Rule::LinkageVerify,
                prev.index,
                Some(prev.details.cognitive_chain.len()),
                format!("subtask changes at event {}; chain must end with Verify", next.index),
            ));
        }
        if !has_type(&next.details, "Orient") {
            violations.push(violation(
                Rule::LinkageOrient,
                next.index,
                None,
                "subtask changed but chain has no Orient",
            ));
        }
    }
    violations
}

impl ExtractionOutput {
    /// Indices in output order.
    pub fn indices(&self) -> Vec<usize> {
        self.event_analysis.iter().map(|e| e.index).collect()
    }
}

impl EventAnalysis {
    /// Converted chain; the first failing entry is reported.
    pub fn to_chain(&self) -> Result<CognitiveChain, Violation> {
        let steps = self
            .details
            .cognitive_chain
            .iter()
            .enumerate()
            .map(|(pos, e)| convert_entry(e).map_err(|(rule, msg)| violation(rule, self.index, Some(pos), msg)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(CognitiveChain::new(self.index, steps))
    }
}

/// Strips Markdown code fences and surrounding prose from a JSON reply.
pub fn extract_json(reply: &str) -> &str {
    let trimmed = reply.trim();
    let start = trimmed.find('{');
    let end = trimmed.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if s < e => &trimmed[s..=e],
        _ => trimmed,
    }
}

/// What was wrong with a semantic-analyzer reply.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticsProblem {
    Malformed(String),
    CountMismatch { missing: Vec<usize>, unexpected: Vec<usize> },
}

impl fmt::Display for SemanticsProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemanticsProblem::Malformed(m) => write!(f, "malformed reply: {m}"),
            SemanticsProblem::CountMismatch { missing, unexpected } => {
                write!(f, "reply must contain one entry per event")?;
                if !missing.is_empty() {
                    write!(f, "; missing event indices {missing:?}")?;
                }
                if !unexpected.is_empty() {
                    write!(f, "; unexpected event indices {unexpected:?}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Deserialize)]
struct SemanticEntry {
    #[serde(default)]
    image_description: String,
    event_description: String,
}

/// Parses an analyzer reply keyed by event index. `has_image[i]` says whether
/// `indices[i]` was sent with a screenshot; image descriptions of events
/// without one are forced empty.
pub fn parse_semantics(reply: &str, indices: &[usize], has_image: &[bool]) -> Result<Vec<SemanticAnnotation>, SemanticsProblem> {
    let map: Map<String, Value> =
        serde_json::from_str(extract_json(reply)).map_err(|e| SemanticsProblem::Malformed(e.to_string()))?;
    let mut parsed = std::collections::BTreeMap::new();
    let mut unexpected = Vec::new();
    for (key, value) in map {
        let idx: usize = key
            .trim()
            .parse()
            .map_err(|_| SemanticsProblem::Malformed(format!("key '{key}' is not an event index")))?;
        if !indices.contains(&idx) {
            unexpected.push(idx);
            continue;
        }
        let entry: SemanticEntry = serde_json::from_value(value)
            .map_err(|e| SemanticsProblem::Malformed(format!("event {idx}: {e}")))?;
        parsed.insert(idx, entry);
    }
    let missing: Vec<usize> = indices.iter().copied().filter(|i| !parsed.contains_key(i)).collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        unexpected.sort_unstable();
        return Err(SemanticsProblem::CountMismatch { missing, unexpected });
    }
    Ok(indices
        .iter()
        .zip(has_image)
        .map(|(&i, &img)| {
            let entry = parsed.remove(&i).expect("presence checked");
            SemanticAnnotation {
                event_index: i,
                image_description: if img { entry.image_description } else { String::new() },
                event_description: entry.event_description,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn entry(t: &str, params: Value) -> ChainEntry {
        ChainEntry {
            ctype: t.into(),
            content: String::new(),
            parameters: params.as_object().cloned().unwrap_or_default(),
        }
    }

    #[test]
    fn parameter_names_normalize() {
        let step = convert_entry(&entry("Orient", json!({"steps_old": 12, "steps_new": "4"}))).unwrap();
        assert_eq!(step.ctype, CognitiveType::Orient);
        assert_eq!((step.params.s_old, step.params.s_new), (Some(12), Some(4)));
        let err = convert_entry(&entry("Orient", json!({"s_old": 1, "s_new": 2}))).unwrap_err();
        assert_eq!(err.0, Rule::UnknownParameter);
        for (t, name, factor) in PARAMETER_MAP {
            if t == "Orient" {
                continue;
            }
            let value = if name == "c" { json!(0.5) } else { json!(3) };
            let step = convert_entry(&entry(t, json!({ name: value }))).unwrap();
            let got = serde_json::to_value(&step.params).unwrap();
            assert!(got.get(factor).is_some(), "{t}.{name} -> {factor}: {got}");
        }
    }

    #[test]
    fn decide_splits_by_parameter() {
        let s = convert_entry(&entry("Decide", json!({"n": 0, "c": 0.3}))).unwrap();
        assert_eq!(s.ctype, CognitiveType::DecideImplicit);
        assert_eq!(s.params, CogParams::c(0.3));
        let s = convert_entry(&entry("Decide", json!({"n": 4, "c": 0}))).unwrap();
        assert_eq!(s.ctype, CognitiveType::DecideExplicit);
        assert_eq!(s.params, CogParams::n(4));
        let err = convert_entry(&entry("Decide", json!({"n": 3, "c": 0.5}))).unwrap_err();
        assert_eq!(err.0, Rule::DecideExclusivity);
        assert_eq!(convert_entry(&entry("Decide", json!({}))).unwrap_err().0, Rule::MissingParameter);
    }

    #[test]
    fn invalid_values_and_types() {
        assert_eq!(convert_entry(&entry("Compute", json!({"c": 1.4}))).unwrap_err().0, Rule::InvalidParameter);
        assert_eq!(convert_entry(&entry("Find", json!({"n": -2}))).unwrap_err().0, Rule::InvalidParameter);
        assert_eq!(convert_entry(&entry("Find", json!({}))).unwrap_err().0, Rule::MissingParameter);
        let err = convert_entry(&entry("Daydream", json!({}))).unwrap_err();
        assert_eq!(err.0, Rule::UnknownType);
        assert!(err.1.contains("Daydream"));
        assert_eq!(convert_entry(&entry("Execute", json!({}))).unwrap().ctype, CognitiveType::Execute);
    }

    #[test]
    fn index_accepts_strings() {
        let ev: EventAnalysis = serde_json::from_value(json!({
            "index": "7", "details": {"current_subtask": "s", "cognitive_chain": []}
        }))
        .unwrap();
        assert_eq!(ev.index, 7);
        let bad: Result<EventAnalysis, _> = serde_json::from_value(json!({
            "index": "...", "details": {"current_subtask": "s", "cognitive_chain": []}
        }));
        assert!(bad.is_err());
    }

    #[test]
    fn semantics_reply_one_to_one() {
        let reply = "```json\n{\"0\": {\"image_description\": \"sheet\", \"event_description\": \"click\"}, \
                     \"1\": {\"image_description\": \"ghost\", \"event_description\": \"type\"}}\n```";
        let out = parse_semantics(reply, &[0, 1], &[true, false]).unwrap();
        assert_eq!(out[0].image_description, "sheet");
        assert_eq!(out[1].image_description, "");
        let err = parse_semantics(reply, &[0, 1, 2], &[true, true, true]).unwrap_err();
        assert_eq!(
            err,
            SemanticsProblem::CountMismatch {
                missing: vec![2],
                unexpected: vec![]
            }
        );
        assert!(matches!(parse_semantics("not json", &[0], &[false]), Err(SemanticsProblem::Malformed(_))));
    }
}
