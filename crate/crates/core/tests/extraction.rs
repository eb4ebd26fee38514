use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use cogchain_core::chain::{merge_spans, CogParams, CognitiveType};
use cogchain_core::demo::{demo_analysis, demo_recording, DemoProvider};
use cogchain_core::extraction::provider::{FixtureProvider, RecordingProvider};
use cogchain_core::extraction::*;
use cogchain_core::trace::{GroupingConfig, TraceBundle};
use cogchain_core::BaseDifficulties;

/// Replies from a queue; remembers every request.
struct Scripted {
    replies: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl Scripted {
    fn new(replies: &[&str]) -> Arc<Self> {
        Arc::new(Self {
            replies: Mutex::new(replies.iter().map(|s| s.to_string()).collect()),
            seen: Mutex::new(Vec::new()),
        })
    }
}

impl ChatProvider for Scripted {
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        self.seen.lock().unwrap().push(request.clone());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| ProviderError::MalformedResponse("script exhausted".into()))
    }
}

fn client(p: &Arc<Scripted>) -> LlmClient {
    LlmClient::new(Box::new(p.clone()), "test-model")
}

fn bundle(dir: &std::path::Path, n: usize, seed: u64) -> (TraceBundle, Vec<StepInput>) {
    let (meta, events, screens) = demo_recording("P01", "T01", n, seed, &BaseDifficulties::reference(), 0.1, 1.0);
    TraceBundle::write(dir, &meta, &events, &screens).unwrap();
    let bundle = TraceBundle::load(dir).unwrap();
    let trace = bundle.to_trace(&GroupingConfig::default()).unwrap();
    let inputs = step_inputs(&bundle, &trace);
    (bundle, inputs)
}

fn analysis_json(seed: u64, range: std::ops::Range<usize>) -> String {
    let out = ExtractionOutput {
        task_summary: TaskSummary::default(),
        event_analysis: range.map(|i| demo_analysis(seed, i)).collect(),
    };
    serde_json::to_string(&out).unwrap()
}

#[test]
fn requests_carry_no_timing() {
    let dir = tempfile::tempdir().unwrap();
    let (_, inputs) = bundle(dir.path(), 12, 4);
    let sem = serde_json::to_string(&semantics_request(&inputs, "m").unwrap()).unwrap();
    let chains = serde_json::to_string(&chains_request(&inputs, &[], None, "m").unwrap()).unwrap();
    for text in [sem, chains] {
        assert!(!text.contains("timestamp"));
        assert!(!text.contains("start_ts") && !text.contains("end_ts"));
    }
}

#[test]
fn rejected_reply_is_retried_with_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, inputs) = bundle(dir.path(), 5, 1);
    let bad = analysis_json(1, 0..5).replacen("\"type\":\"Orient\"", "\"type\":\"Daydream\"", 1);
    let good = analysis_json(1, 0..5);
    let script = Scripted::new(&[&bad, &good]);
    let out = extract_chains_batch(&inputs, &[], None, None, &client(&script), 2).unwrap();
    assert_eq!(out.event_analysis.len(), 5);
    let seen = script.seen.lock().unwrap();
    assert_eq!(seen.len(), 2);
    let retry = &seen[1].messages;
    assert_eq!(retry.len(), 4);
    let text = serde_json::to_string(&retry[3]).unwrap();
    assert!(text.contains("unknown_type") && text.contains("Daydream"), "{text}");
}

#[test]
fn retries_are_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let (_, inputs) = bundle(dir.path(), 3, 1);
    let script = Scripted::new(&["nope", "still no", "{}", "unused"]);
    let err = extract_chains_batch(&inputs, &[], None, None, &client(&script), 2).unwrap_err();
    match err {
        ExtractionError::Chains { attempts, ref raw, .. } => {
            assert_eq!(attempts, 3);
            assert_eq!(raw, "{}");
        }
        other => panic!("unexpected {other}"),
    }
    assert_eq!(script.replies.lock().unwrap().len(), 1);
}

#[test]
fn semantic_count_mismatch_names_missing() {
    let dir = tempfile::tempdir().unwrap();
    let (_, inputs) = bundle(dir.path(), 3, 1);
    let reply = r#"{"0": {"image_description": "", "event_description": "a"},
                    "1": {"image_description": "", "event_description": "b"}}"#;
    let script = Scripted::new(&[reply]);
    let err = analyze_semantics_batch(&inputs, &client(&script), 0).unwrap_err();
    match err {
        ExtractionError::Semantics { problem, .. } => assert_eq!(
            problem,
            SemanticsProblem::CountMismatch {
                missing: vec![2],
                unexpected: vec![]
            }
        ),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn fixture_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, inputs) = bundle(&dir.path().join("trace"), 20, 9);
    let fixtures = dir.path().join("fixtures");
    let settings = ExtractionSettings::default();
    let recorder = || LlmClient::new(Box::new(RecordingProvider::new(DemoProvider { seed: 9 }, &fixtures)), "m");
    let recorded = run_pipeline(&inputs, &recorder(), &recorder(), &settings).unwrap();
    assert_eq!(recorded.raw_outputs.len(), 2);

    let mut bytes = Vec::new();
    for run in 0..2 {
        let replay = || LlmClient::new(Box::new(FixtureProvider::new(&fixtures)), "m");
        let result = run_pipeline(&inputs, &replay(), &replay(), &settings).unwrap();
        let out = dir.path().join(format!("run{run}"));
        result.write(&out).unwrap();
        bytes.push(std::fs::read(out.join(CHAINS_FILE)).unwrap());
        assert_eq!(result, recorded);
    }
    assert_eq!(bytes[0], bytes[1]);

    let other = || LlmClient::new(Box::new(FixtureProvider::new(&fixtures)), "other-model");
    let err = run_pipeline(&inputs, &other(), &other(), &settings).unwrap_err();
    assert!(matches!(err, ExtractionError::Provider(ProviderError::FixtureMissing { .. })));
}

const WORKED_EXAMPLE: &str = r#"```json
{
  "task_summary": {"review": "Review: formatted.", "current": "Current: grouping.", "outlook": "Outlook: move."},
  "event_analysis": [
    {"index": 48, "reasoning": "r", "details": {"event_des": "font color", "current_subtask": "Adjust overall slide layout",
      "cognitive_chain": [
        {"type": "Find", "content": "font color button", "parameters": {"n": 5}},
        {"type": "Execute", "content": "click", "parameters": {}}]}},
    {"index": 49, "reasoning": "r", "details": {"event_des": "ctrl", "current_subtask": "Adjust overall slide layout",
      "cognitive_chain": [
        {"type": "Decide", "content": "move together", "parameters": {"n": 0, "c": 0.3}},
        {"type": "Execute", "content": "press ctrl", "parameters": {}}]}},
    {"index": 50, "reasoning": "r", "details": {"event_des": "select title", "current_subtask": "Adjust overall slide layout",
      "cognitive_chain": [
        {"type": "Execute", "content": "click title", "parameters": {}}]}}
  ]
}
```"#;

#[test]
fn worked_example_round_trips() {
    let out = check_extraction_reply(WORKED_EXAMPLE, &[48, 49, 50], None).unwrap();
    let chains = assemble_chains(&[out], 48..51).unwrap();
    let cog: Vec<Vec<(CognitiveType, CogParams)>> = chains
        .iter()
        .map(|c| c.cognitive_steps().map(|s| (s.ctype, s.params.clone())).collect())
        .collect();
    assert_eq!(
        cog,
        vec![
            vec![(CognitiveType::Find, CogParams::n(5))],
            vec![(CognitiveType::DecideImplicit, CogParams::c(0.3))],
            vec![],
        ]
    );
}

#[test]
fn empty_chain_spans_previous_thought() {
    let mut out: ExtractionOutput = serde_json::from_str(extract_json(WORKED_EXAMPLE)).unwrap();
    out.event_analysis[2].details.cognitive_chain.clear();
    let chains = assemble_chains(&[out], 48..51).unwrap();
    let decide = &chains[1].steps[0];
    assert_eq!(decide.span, Some((49, 50)));
    assert_eq!(chains[2].steps.len(), 0);
}

#[test]
fn assembly_spans_merge_rows() {
    let mut outputs: Vec<ExtractionOutput> = (0..2)
        .map(|b| ExtractionOutput {
            task_summary: TaskSummary::default(),
            event_analysis: (b * 5..b * 5 + 5).map(|i| demo_analysis(2, i)).collect(),
        })
        .collect();
    outputs[0].event_analysis[3].details.cognitive_chain = vec![ChainEntry {
        ctype: "Find".into(),
        content: String::new(),
        parameters: serde_json::json!({"n": 3}).as_object().unwrap().clone(),
    }];
    outputs[0].event_analysis[4].details.cognitive_chain.clear();
    outputs[1].event_analysis[0].details.cognitive_chain.clear();
    outputs[1].event_analysis[0].details.current_subtask = outputs[0].event_analysis[4].details.current_subtask.clone();
    let chains = assemble_trace_chains(&outputs, 10).unwrap();
    assert_eq!(chains[3].steps[0].span, Some((3, 5)));
    let rows = merge_spans(&chains, 10).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!((rows[3].first, rows[3].last), (3, 5));
}

#[test]
fn assembly_reports_gaps_and_overlaps() {
    let part = |r: std::ops::Range<usize>| ExtractionOutput {
        task_summary: TaskSummary::default(),
        event_analysis: r.map(|i| demo_analysis(0, i)).collect(),
    };
    assert_eq!(
        assemble_trace_chains(&[part(0..4), part(5..8)], 8),
        Err(AssemblyError::Gap { indices: vec![4] })
    );
    assert_eq!(
        assemble_trace_chains(&[part(0..5), part(4..8)], 8),
        Err(AssemblyError::Overlap { indices: vec![4] })
    );
}

#[test]
fn event_zero_needs_orient() {
    let mut out = ExtractionOutput {
        task_summary: TaskSummary::default(),
        event_analysis: (0..3).map(|i| demo_analysis(5, i)).collect(),
    };
    assert!(validate_extraction(&out).is_empty());
    out.event_analysis[0].details.cognitive_chain.retain(|e| e.ctype != "Orient");
    let v = validate_extraction(&out);
    assert!(v.iter().any(|v| v.rule == Rule::InitialOrient && v.event_index == 0), "{v:?}");
}

#[test]
fn linkage_requires_trailing_verify() {
    let out = ExtractionOutput {
        task_summary: TaskSummary::default(),
        event_analysis: (0..40).map(|i| demo_analysis(6, i)).collect(),
    };
    let n = (1..40)
        .find(|&i| out.event_analysis[i].details.current_subtask != out.event_analysis[i - 1].details.current_subtask)
        .expect("demo trace changes subtask");
    let mut broken = out.clone();
    broken.event_analysis[n - 1].details.cognitive_chain.pop();
    let v = validate_extraction(&broken);
    assert_eq!(v.len(), 1, "{v:?}");
    assert_eq!((v[0].rule, v[0].event_index), (Rule::LinkageVerify, n - 1));
}
