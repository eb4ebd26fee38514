use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use cogchain_cli::demo::{create_demo_project, DemoOptions};
use cogchain_cli::project::sha256_file;
use cogchain_cli::stages::{run_stage, RunOptions, SourceSelection, Stage};
use cogchain_cli::{CliError, Config, Project};

fn small_demo(root: &Path) -> Project {
    let opts = DemoOptions {
        users: 3,
        tasks: 7,
        steps: 10,
        seed: 11,
        noise: 0.2,
    };
    create_demo_project(root, &opts).unwrap()
}

fn run_all(project: &Project) {
    let config = Config::load(None, &project.root).unwrap();
    for stage in Stage::ALL {
        run_stage(project, &config, stage, &RunOptions::default()).unwrap_or_else(|e| panic!("{}: {e}", stage.name()));
    }
}

/// Content hash of every file under `root`, keyed by relative path.
fn tree(root: &Path) -> BTreeMap<String, String> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, sha256_file(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cogchain"))
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args).output().unwrap().status.code().unwrap()
}

#[test]
fn demo_pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let project = small_demo(dir.path());
    run_all(&project);
    let reports = project.reports_dir();
    for f in ["raw/fit_report.json", "raw/cv_report.json", "scatter.csv", "table3.csv", "table4.csv", "success_matrix.csv"] {
        assert!(reports.join(f).is_file(), "{f}");
    }
    let table3 = fs::read_to_string(reports.join("table3.csv")).unwrap();
    assert_eq!(table3.lines().next().unwrap(), "model,chains,r2_step,r2_task,rmse_pct");
    assert_eq!(table3.lines().count(), 4);
    let table4 = fs::read_to_string(reports.join("table4.csv")).unwrap();
    assert!(table4.lines().any(|l| l.starts_with("Intercept,")));
    let scatter = fs::read_to_string(reports.join("scatter.csv")).unwrap();
    assert!(scatter.lines().any(|l| l.starts_with("raw,task,")));
    let matrix = fs::read_to_string(reports.join("success_matrix.csv")).unwrap();
    for line in matrix.lines().skip(1) {
        let attempts: usize = line.split(',').nth(4).unwrap().parse().unwrap();
        assert!(attempts > 0, "absent cells must be omitted: {line}");
    }
    let manifest = fs::read_to_string(project.derived_dir("U01_T01").join("manifest.assemble.json")).unwrap();
    assert!(manifest.contains("config_sha256") && manifest.contains("extraction_raw.json"));
}

#[test]
fn fixture_reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = small_demo(a.path());
    let pb = small_demo(b.path());
    run_all(&pa);
    let first = tree(a.path());
    run_all(&pa);
    assert_eq!(tree(a.path()), first, "rerun in place");
    run_all(&pb);
    assert_eq!(tree(b.path()), first, "fresh project, same seed");
}

#[test]
fn missing_prerequisites_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    small_demo(dir.path());
    let p = dir.path().to_str().unwrap();
    assert_eq!(exit_code(&["run", "semantics", "--project", p]), 2);
    assert_eq!(exit_code(&["run", "group", "--project", p]), 0);
    assert_eq!(exit_code(&["run", "fit", "--project", p]), 2);
    assert_eq!(exit_code(&["run", "agent-eval", "--project", p]), 2);
    assert_eq!(exit_code(&["report", "table3", "--project", p]), 2);
}

#[test]
fn provider_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    small_demo(dir.path());
    let p = dir.path().to_str().unwrap();
    assert_eq!(exit_code(&["run", "group", "--project", p]), 0);
    fs::rename(dir.path().join("fixtures"), dir.path().join("fixtures.off")).unwrap();
    assert_eq!(exit_code(&["run", "semantics", "--project", p]), 3);
    fs::rename(dir.path().join("fixtures.off"), dir.path().join("fixtures")).unwrap();

    let live = dir.path().join("live.toml");
    fs::write(&live, "[extraction.semantic]\nmode = \"live\"\napi_key_env = \"COGCHAIN_TEST_UNSET_KEY\"\n").unwrap();
    let out = bin()
        .args(["run", "semantics", "--project", p, "--config", live.to_str().unwrap()])
        .env_remove("COGCHAIN_TEST_UNSET_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("COGCHAIN_TEST_UNSET_KEY"));
}

#[test]
fn validation_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let project = small_demo(dir.path());
    let p = dir.path().to_str().unwrap();
    for stage in ["group", "semantics", "extract"] {
        assert_eq!(exit_code(&["run", stage, "--project", p]), 0);
    }
    // A reply whose first step lacks Orient must not assemble.
    let raw = project.derived_dir("U01_T01").join("extraction_raw.json");
    let mut outputs: serde_json::Value = serde_json::from_str(&fs::read_to_string(&raw).unwrap()).unwrap();
    outputs[0]["event_analysis"][0]["details"]["cognitive_chain"] = serde_json::json!([]);
    fs::write(&raw, serde_json::to_string(&outputs).unwrap()).unwrap();
    let out = bin().args(["run", "assemble", "--project", p]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("initial_orient"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[model]\nlog_base = 1.0\n").unwrap();
    assert_eq!(exit_code(&["run", "group", "--project", p, "--config", bad.to_str().unwrap()]), 1);
    assert_eq!(exit_code(&["run", "group", "--project", p, "--trace", "nope"]), 1);
}

#[test]
fn annotated_source_requires_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let project = small_demo(dir.path());
    let config = Config::load(None, &project.root).unwrap();
    for stage in [Stage::Group, Stage::Semantics, Stage::Extract, Stage::Assemble] {
        run_stage(&project, &config, stage, &RunOptions::default()).unwrap();
    }
    let opts = RunOptions {
        source: SourceSelection::Annotated,
        ..Default::default()
    };
    let err = run_stage(&project, &config, Stage::Fit, &opts).unwrap_err();
    assert!(matches!(err, CliError::Prerequisite { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);

    // Default selection fits raw only while annotation is partial.
    let id = "U01_T01";
    fs::copy(project.chains_path(id, cogchain_cli::ChainSource::Raw), project.chains_path(id, cogchain_cli::ChainSource::Annotated)).unwrap();
    let lines = run_stage(&project, &config, Stage::Fit, &RunOptions::default()).unwrap();
    assert!(lines.iter().any(|l| l.contains("annotated: skipped, 1 of 21")), "{lines:?}");
    assert!(!project.source_reports_dir(cogchain_cli::ChainSource::Annotated).exists());
}

#[test]
fn filters_restrict_traces() {
    let dir = tempfile::tempdir().unwrap();
    let project = small_demo(dir.path());
    let config = Config::load(None, &project.root).unwrap();
    let opts = RunOptions {
        filter: cogchain_cli::Filter {
            users: vec!["U02".into()],
            ..Default::default()
        },
        ..Default::default()
    };
    let lines = run_stage(&project, &config, Stage::Group, &opts).unwrap();
    assert_eq!(lines.len(), 7);
    assert!(lines.iter().all(|l| l.starts_with("U02_")));
}

#[test]
fn demo_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    small_demo(dir.path());
    let err = create_demo_project(dir.path(), &DemoOptions::default()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
