//! Deterministic demo data: recorder bundles whose timing follows a known
//! model, and an offline provider that answers both extraction stages with
//! valid replies consistent with those bundles.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

use crate::difficulty::{predict_step_time, BaseDifficulties, ModelConfig};
use crate::extraction::provider::{ChatProvider, ChatRequest, Part, ProviderError, Role};
use crate::extraction::schema::{ChainEntry, EventAnalysis, EventDetails, ExtractionOutput, TaskSummary};
use crate::extraction::{EXTRACTOR_SYSTEM_PROMPT, SEMANTIC_SYSTEM_PROMPT};
use crate::trace::{EventKind, EventPayload, RawEvent, TraceMeta};

/// A 1×1 grey PNG used for every demo screenshot.
pub const PIXEL_PNG: &[u8] = &[
    0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a, 0x00, 0x00, 0x00, 0x0d, 0x49, 0x48, 0x44, 0x52, 0x00, 0x00,
    0x00, 0x01, 0x00, 0x00, 0x00, 0x01, 0x08, 0x00, 0x00, 0x00, 0x00, 0x3a, 0x7e, 0x9b, 0x55, 0x00, 0x00, 0x00,
    0x0a, 0x49, 0x44, 0x41, 0x54, 0x78, 0x9c, 0x63, 0x68, 0x00, 0x00, 0x00, 0x82, 0x00, 0x81, 0x4c, 0x17, 0xd7,
    0xdf, 0x00, 0x00, 0x00, 0x00, 0x49, 0x45, 0x4e, 0x44, 0xae, 0x42, 0x60, 0x82,
];

fn rng_for(seed: u64, index: usize, salt: u64) -> StdRng {
    StdRng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0x2545_f491) ^ salt)
}

fn starts_subtask(seed: u64, index: usize) -> bool {
    index == 0 || rng_for(seed, index, 1).random_range(0..6) == 0
}

fn subtask_of(seed: u64, index: usize) -> usize {
    (1..=index).filter(|&i| starts_subtask(seed, i)).count()
}

fn entry(ctype: &str, content: &str, params: Value) -> ChainEntry {
    ChainEntry {
        ctype: ctype.into(),
        content: content.into(),
        parameters: params.as_object().cloned().unwrap_or_default(),
    }
}

/// The analysis the demo extractor gives step `index` of the trace with
/// `seed`. Depends only on `(seed, index)`, so batch boundaries do not matter.
pub fn demo_analysis(seed: u64, index: usize) -> EventAnalysis {
    let mut rng = rng_for(seed, index, 2);
    let mut chain = Vec::new();
    let new_subtask = starts_subtask(seed, index);
    if new_subtask {
        let len = (index + 1..index + 40).take_while(|&i| !starts_subtask(seed, i)).count() + 1;
        chain.push(entry(
            "Orient",
            "Plan the next subtask.",
            json!({"steps_old": index, "steps_new": len}),
        ));
    }
    let body = rng.random_range(0..10);
    match body {
        0 => chain.push(entry("Find", "Locate the target control.", json!({"n": rng.random_range(1..=12)}))),
        1 => chain.push(entry("Extract", "Read the value needed.", json!({"m": rng.random_range(1..=10)}))),
        2 => chain.push(entry("Recall", "Retrieve an earlier value.", json!({"d": rng.random_range(0..=25)}))),
        3 => chain.push(entry("Decide", "Pick among visible options.", json!({"n": rng.random_range(2..=6), "c": 0}))),
        4 => chain.push(entry(
            "Decide",
            "Settle on an approach.",
            json!({"n": 0, "c": (rng.random_range(1..=9) as f64) / 10.0}),
        )),
        5 => chain.push(entry(
            "Compute",
            "Work out a figure.",
            json!({"c": (rng.random_range(1..=9) as f64) / 10.0}),
        )),
        6 => chain.push(entry("Create", "Compose new text.", json!({"m": rng.random_range(1..=5)}))),
        7 => chain.push(entry("Execute", "Continue the planned sequence.", json!({}))),
        // Carrier of the preceding thought, unless it opens a subtask.
        _ => {}
    }
    if body < 7 && rng.random_bool(0.5) {
        chain.push(entry("Execute", "Perform the action.", json!({})));
    }
    if starts_subtask(seed, index + 1) {
        chain.push(entry("Verify", "Check the subtask result.", json!({"m": rng.random_range(1..=4)})));
    }
    if index == 0 && chain.len() == 1 {
        chain.push(entry("Execute", "Perform the action.", json!({})));
    }
    EventAnalysis {
        index,
        reasoning: format!("Step {index} within subtask {}.", subtask_of(seed, index)),
        details: EventDetails {
            event_des: format!("Demo step {index}."),
            current_subtask: format!("Subtask {}", subtask_of(seed, index)),
            cognitive_chain: chain,
        },
    }
}

/// A recorder bundle of `n_steps` motor steps. Step times are drawn from
/// `truth` applied to the demo chains, with multiplicative noise and a
/// per-recording speed factor.
pub fn demo_recording(
    user_id: &str,
    task_id: &str,
    n_steps: usize,
    seed: u64,
    truth: &BaseDifficulties,
    noise: f64,
    speed: f64,
) -> (TraceMeta, Vec<RawEvent>, Vec<(String, Vec<u8>)>) {
    let config = ModelConfig::default();
    // Payloads carry the seed, so recordings of equal length still produce
    // distinct provider requests.
    let mut rng = rng_for(seed, 0, 3);
    let mut events = Vec::new();
    let mut screens = Vec::new();
    let mut t = 0u64;
    for i in 0..n_steps {
        let chain = demo_analysis(seed, i).to_chain().expect("demo chains are valid");
        let clean = predict_step_time(&chain, truth, &config).expect("demo params are valid");
        let factor = (1.0 + noise * (rng.random::<f64>() * 2.0 - 1.0) * 1.732).max(0.05);
        t += (speed * clean * factor).round().max(1.0) as u64;
        let shot = (i % 7 != 6).then(|| format!("step_{i:03}.png"));
        if let Some(name) = &shot {
            screens.push((name.clone(), PIXEL_PNG.to_vec()));
        }
        let app = Some(if i % 2 == 0 { "Spreadsheet" } else { "Slides" }.to_string());
        if i % 5 == 3 {
            for k in 0..3 {
                let ch = char::from(b'a' + ((seed as usize + i + k) % 26) as u8);
                events.push(RawEvent {
                    index: events.len(),
                    timestamp: t,
                    kind: EventKind::KeyPress,
                    payload: EventPayload {
                        key: Some(ch.to_string()),
                        app: app.clone(),
                        ..Default::default()
                    },
                    screenshot_ref: if k == 0 { shot.clone() } else { None },
                });
                if k < 2 {
                    t += 120;
                }
            }
        } else {
            events.push(RawEvent {
                index: events.len(),
                timestamp: t,
                kind: EventKind::MouseClick,
                payload: EventPayload {
                    button: Some("left".into()),
                    x: Some(100.0 + (i * 13 % 600) as f64 + (seed % 1000) as f64 / 1000.0),
                    y: Some(80.0 + (i * 29 % 400) as f64),
                    app,
                    ..Default::default()
                },
                screenshot_ref: shot,
            });
        }
        t += 60;
    }
    let meta = TraceMeta {
        task_id: task_id.into(),
        user_id: user_id.into(),
        metadata: [("source".to_string(), "demo".to_string())].into_iter().collect(),
        start_ts: 0,
    };
    (meta, events, screens)
}

/// Offline stand-in for a vision-language model. Replies are valid for
/// either stage and depend only on the request.
#[derive(Debug, Clone, Copy)]
pub struct DemoProvider {
    pub seed: u64,
}

struct SeenEvent {
    index: usize,
    has_image: bool,
    text: Value,
}

fn batch_events(request: &ChatRequest) -> Vec<SeenEvent> {
    let mut out = Vec::new();
    let Some(user) = request.messages.iter().find(|m| m.role == Role::User) else {
        return out;
    };
    let mut image_pending = false;
    for part in &user.parts {
        match part {
            Part::Image { .. } => image_pending = true,
            Part::Text { text } => {
                let Some(rest) = text.strip_prefix("[Text for Event ") else {
                    continue;
                };
                let Some((idx, body)) = rest.split_once("] ") else {
                    continue;
                };
                if let Ok(index) = idx.parse() {
                    out.push(SeenEvent {
                        index,
                        has_image: image_pending,
                        text: serde_json::from_str(body).unwrap_or(Value::Null),
                    });
                }
                image_pending = false;
            }
        }
    }
    out
}

/// Keys, pointer position and application named in an event record.
fn payload_detail(record: &Value) -> String {
    let events = record.get("events").and_then(Value::as_array).cloned().unwrap_or_default();
    let payloads: Vec<&Value> = events.iter().filter_map(|e| e.get("payload")).collect();
    let keys: String = payloads.iter().filter_map(|p| p.get("key").and_then(Value::as_str)).collect();
    let mut out = String::new();
    if !keys.is_empty() {
        out.push_str(&format!(" typing '{keys}'"));
    }
    if let Some(p) = payloads.first() {
        if let (Some(x), Some(y)) = (p.get("x").and_then(Value::as_f64), p.get("y").and_then(Value::as_f64)) {
            out.push_str(&format!(" at ({x}, {y})"));
        }
        if let Some(app) = p.get("app").and_then(Value::as_str) {
            out.push_str(&format!(" in {app}"));
        }
    }
    out
}

impl DemoProvider {
    fn semantics(&self, events: &[SeenEvent]) -> String {
        let mut map = Map::new();
        for e in events {
            let action = e.text.get("action").and_then(Value::as_str).unwrap_or("Action");
            let detail = payload_detail(&e.text);
            map.insert(
                e.index.to_string(),
                json!({
                    "image_description": if e.has_image { format!("Application window before step {}.", e.index) } else { String::new() },
                    "event_description": format!("User performed a {action}{detail} (step {}).", e.index),
                }),
            );
        }
        serde_json::to_string_pretty(&Value::Object(map)).expect("reply serializes")
    }

    fn chains(&self, events: &[SeenEvent]) -> String {
        let first = events.first().map_or(0, |e| e.index);
        let last = events.last().map_or(0, |e| e.index);
        let out = ExtractionOutput {
            task_summary: TaskSummary {
                review: format!("Review: steps before {first} are complete."),
                current: format!("Current: steps {first} to {last}."),
                outlook: format!("Outlook: continue after step {last}."),
            },
            event_analysis: events.iter().map(|e| demo_analysis(self.seed, e.index)).collect(),
        };
        serde_json::to_string_pretty(&out).expect("reply serializes")
    }
}

impl ChatProvider for DemoProvider {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .and_then(|m| match m.parts.first() {
                Some(Part::Text { text }) => Some(text.as_str()),
                _ => None,
            })
            .unwrap_or_default();
        let events = batch_events(request);
        if system == SEMANTIC_SYSTEM_PROMPT {
            Ok(self.semantics(&events))
        } else if system == EXTRACTOR_SYSTEM_PROMPT {
            Ok(self.chains(&events))
        } else {
            Err(ProviderError::MalformedResponse("demo provider: unrecognized system prompt".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::schema::{validate_extraction, ValidationContext};
    use crate::extraction::validate_extraction_with;
    use crate::trace::{GroupingConfig, TraceBundle};

    #[test]
    fn demo_chains_obey_rules() {
        for seed in 0..5 {
            let out = ExtractionOutput {
                task_summary: TaskSummary::default(),
                event_analysis: (0..60).map(|i| demo_analysis(seed, i)).collect(),
            };
            assert_eq!(validate_extraction(&out), vec![], "seed {seed}");
            let tail = ExtractionOutput {
                task_summary: TaskSummary::default(),
                event_analysis: out.event_analysis[30..].to_vec(),
            };
            let prev = out.event_analysis[29].details.current_subtask.clone();
            let ctx = ValidationContext {
                expected: None,
                previous_subtask: Some(&prev),
            };
            assert_eq!(validate_extraction_with(&tail, &ctx), vec![]);
        }
    }

    #[test]
    fn recording_groups_to_requested_steps() {
        let dir = tempfile::tempdir().unwrap();
        let (meta, events, screens) = demo_recording("P01", "T01", 20, 3, &BaseDifficulties::reference(), 0.1, 1.0);
        TraceBundle::write(dir.path(), &meta, &events, &screens).unwrap();
        let bundle = TraceBundle::load(dir.path()).unwrap();
        let trace = bundle.to_trace(&GroupingConfig::default()).unwrap();
        assert_eq!(trace.len(), 20);
    }
}
