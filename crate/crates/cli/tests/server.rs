use std::fs;
use std::path::Path;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use cogchain_cli::demo::{create_demo_project, DemoOptions};
use cogchain_cli::project::{write_json, ANNOTATED_CHAINS_FILE, ANNOTATION_LOG_FILE};
use cogchain_cli::server::{router, AppState};
use cogchain_cli::stages::{rows_for, run_stage, RunOptions, Stage};
use cogchain_cli::{ChainSource, Config, Project};
use cogchain_core::chain::{CogParams, CognitiveChain, CognitiveStep, CognitiveType};
use cogchain_core::trace::{EventKind, EventPayload, RawEvent, TraceBundle, TraceMeta};

const FORBIDDEN: [&str; 4] = ["target_ms", "start_ts", "end_ts", "timestamp"];

fn forbidden_keys(v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                if FORBIDDEN.contains(&k.as_str()) {
                    out.push(k.clone());
                }
                forbidden_keys(child, out);
            }
        }
        Value::Array(items) => items.iter().for_each(|i| forbidden_keys(i, out)),
        _ => {}
    }
}

async fn call(project: &Project, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(AppState::new(project.clone())).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn get_json(project: &Project, uri: &str) -> Value {
    let (status, body) = call(project, Method::GET, uri, None).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&body));
    let v: Value = serde_json::from_slice(&body).unwrap();
    let mut bad = Vec::new();
    forbidden_keys(&v, &mut bad);
    assert!(bad.is_empty(), "{uri} exposes {bad:?}");
    v
}

fn step(ctype: CognitiveType, params: CogParams) -> CognitiveStep {
    CognitiveStep::new(ctype, params)
}

/// One user, one task, three clicks; chains written as if assembled.
fn three_step_project(root: &Path) -> (Project, Vec<CognitiveChain>) {
    let events: Vec<RawEvent> = [0u64, 3_000, 7_500]
        .iter()
        .enumerate()
        .map(|(i, &t)| RawEvent {
            index: i,
            timestamp: t,
            kind: EventKind::MouseClick,
            payload: EventPayload {
                x: Some(10.0 * i as f64),
                y: Some(5.0),
                ..Default::default()
            },
            screenshot_ref: Some(format!("s{i}.png")),
        })
        .collect();
    let meta = TraceMeta {
        task_id: "T01".into(),
        user_id: "U01".into(),
        metadata: Default::default(),
        start_ts: 0,
    };
    let screens: Vec<(String, Vec<u8>)> = (0..3)
        .map(|i| (format!("s{i}.png"), cogchain_core::demo::PIXEL_PNG.to_vec()))
        .collect();
    TraceBundle::write(root.join("traces/U01_T01"), &meta, &events, &screens).unwrap();
    let project = Project::new(root);
    let config = Config::default();
    run_stage(&project, &config, Stage::Group, &RunOptions::default()).unwrap();
    use CognitiveType::*;
    let chains = vec![
        CognitiveChain::new(0, vec![step(Orient, CogParams::orient(0, 3)), step(Find, CogParams::n(4)), step(Execute, CogParams::default())]),
        CognitiveChain::new(1, vec![step(DecideExplicit, CogParams::n(3)), step(Execute, CogParams::default())]),
        CognitiveChain::new(2, vec![step(Extract, CogParams::m(2)), step(Verify, CogParams::m(1))]),
    ];
    write_json(&project.chains_path("U01_T01", ChainSource::Raw), &chains).unwrap();
    (project, chains)
}

#[tokio::test]
async fn annotate_then_fit_changes_only_edited_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (project, mut chains) = three_step_project(dir.path());
    let config = Config::default();
    let ids = vec!["U01_T01".to_string()];
    let (raw_rows, _) = rows_for(&project, &config, &ids, ChainSource::Raw).unwrap();
    assert_eq!(raw_rows.len(), 3);

    chains[1].steps[0] = step(CognitiveType::DecideExplicit, CogParams::n(5));
    let (status, body) = call(
        &project,
        Method::PUT,
        "/traces/U01_T01/chains",
        Some(json!({ "revision": 0, "chains": chains, "note": "five options on screen" })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let resp: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(resp, json!({ "revision": 1, "changed_steps": [1] }));

    let (ann_rows, _) = rows_for(&project, &config, &ids, ChainSource::Annotated).unwrap();
    assert_eq!(ann_rows.len(), raw_rows.len());
    let changed: Vec<usize> = raw_rows
        .iter()
        .zip(&ann_rows)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.step_index)
        .collect();
    assert_eq!(changed, vec![1]);
    assert_eq!(raw_rows[1].target_ms, ann_rows[1].target_ms);

    let derived = project.derived_dir("U01_T01");
    let saved = fs::read_to_string(derived.join(ANNOTATED_CHAINS_FILE)).unwrap();
    for key in FORBIDDEN {
        assert!(!saved.contains(key), "annotated chains contain {key}");
    }
    let log = fs::read_to_string(derived.join(ANNOTATION_LOG_FILE)).unwrap();
    let entry: Value = serde_json::from_str(log.trim()).unwrap();
    assert_eq!(entry, json!({ "revision": 1, "changed_steps": [1], "note": "five options on screen" }));
}

#[tokio::test]
async fn stale_revision_conflicts() {
    let dir = tempfile::tempdir().unwrap();
    let (project, chains) = three_step_project(dir.path());
    let put = |rev: u64| json!({ "revision": rev, "chains": chains.clone() });
    let (s1, _) = call(&project, Method::PUT, "/traces/U01_T01/chains", Some(put(0))).await;
    assert_eq!(s1, StatusCode::OK);
    let (s2, body) = call(&project, Method::PUT, "/traces/U01_T01/chains", Some(put(0))).await;
    assert_eq!(s2, StatusCode::CONFLICT);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["current_revision"], 1);
    let (s3, _) = call(&project, Method::PUT, "/traces/U01_T01/chains", Some(put(1))).await;
    assert_eq!(s3, StatusCode::OK);
    let current = get_json(&project, "/traces/U01_T01/chains").await;
    assert_eq!(current["revision"], 2);
    assert_eq!(current["annotated"], true);
}

#[tokio::test]
async fn invalid_edits_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (project, chains) = three_step_project(dir.path());
    let short = json!({ "revision": 0, "chains": chains[..2] });
    let (s, _) = call(&project, Method::PUT, "/traces/U01_T01/chains", Some(short)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let mut bad = chains.clone();
    bad[1].steps[0] = step(CognitiveType::DecideExplicit, CogParams::n(0));
    let (s, _) = call(&project, Method::PUT, "/traces/U01_T01/chains", Some(json!({ "revision": 0, "chains": bad }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let mut spans = chains.clone();
    spans[2].steps[0].span = Some((2, 9));
    let (s, _) = call(&project, Method::PUT, "/traces/U01_T01/chains", Some(json!({ "revision": 0, "chains": spans }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!project.chains_path("U01_T01", ChainSource::Annotated).exists());
}

#[tokio::test]
async fn responses_never_carry_timing() {
    let dir = tempfile::tempdir().unwrap();
    let opts = DemoOptions {
        users: 2,
        tasks: 2,
        steps: 6,
        seed: 3,
        noise: 0.1,
    };
    let project = create_demo_project(dir.path(), &opts).unwrap();
    let config = Config::load(None, &project.root).unwrap();
    for stage in [Stage::Group, Stage::Semantics, Stage::Extract, Stage::Assemble] {
        run_stage(&project, &config, stage, &RunOptions::default()).unwrap();
    }
    let list = get_json(&project, "/traces").await;
    assert_eq!(list.as_array().unwrap().len(), 4);
    for t in list.as_array().unwrap() {
        let id = t["id"].as_str().unwrap();
        let trace = get_json(&project, &format!("/traces/{id}")).await;
        let steps = trace["steps"].as_array().unwrap();
        assert_eq!(Some(steps.len() as u64), t["n_steps"].as_u64());
        assert!(steps.iter().all(|s| s["machine_chain"].is_object() && s["event_description"].is_string()));
        let chains = get_json(&project, &format!("/traces/{id}/chains")).await;
        assert_eq!(chains["annotated"], false);
        if let Some(url) = steps.iter().find_map(|s| s["screenshot_url"].as_str()) {
            let (status, bytes) = call(&project, Method::GET, url, None).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(bytes, cogchain_core::demo::PIXEL_PNG);
        }
    }
    let (status, _) = call(&project, Method::GET, "/traces/..%2Fagents", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&project, Method::GET, "/traces/U01_T01/steps/999/screenshot", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn reports_are_served_except_scatter() {
    let dir = tempfile::tempdir().unwrap();
    let opts = DemoOptions {
        users: 3,
        tasks: 6,
        steps: 8,
        seed: 5,
        noise: 0.1,
    };
    let project = create_demo_project(dir.path(), &opts).unwrap();
    let config = Config::load(None, &project.root).unwrap();
    let (status, _) = call(&project, Method::GET, "/reports/table4", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    for stage in Stage::ALL {
        run_stage(&project, &config, stage, &RunOptions::default()).unwrap();
    }
    for kind in ["table3", "table4", "matrix"] {
        let (status, body) = call(&project, Method::GET, &format!("/reports/{kind}"), None).await;
        assert_eq!(status, StatusCode::OK, "{kind}");
        let text = String::from_utf8(body).unwrap();
        assert_eq!(text, fs::read_to_string(project.reports_dir().join(format!("{}.csv", match kind {
            "matrix" => "success_matrix",
            k => k,
        })))
        .unwrap());
    }
    let (status, _) = call(&project, Method::GET, "/reports/scatter", None).await;
    assert_eq!(status, StatusCode::FORBIDDEN);
    let (status, _) = call(&project, Method::GET, "/reports/nonsense", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
