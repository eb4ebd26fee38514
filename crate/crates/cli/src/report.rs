//! Tabular reports rendered from stage outputs.

use std::collections::BTreeMap;

use cogchain_core::agent::SuccessMatrix;
use cogchain_core::fitting::{CvReport, FitReport, Predictor};

use crate::error::{CliError, Result};
use crate::project::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    /// Actual vs fitted times, per step and per task.
    Scatter,
    /// Model comparison: R² and cross-validated error per chain source.
    Table3,
    /// Fitted base difficulty per type.
    Table4,
    /// Agent success rates per (type, difficulty bin).
    Matrix,
}

pub const SCATTER_NOTE: &str = "scatter values are raw milliseconds; display both axes on a log scale";

impl ReportKind {
    pub const ALL: [ReportKind; 4] = [ReportKind::Scatter, ReportKind::Table3, ReportKind::Table4, ReportKind::Matrix];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::Scatter => "scatter",
            ReportKind::Table3 => "table3",
            ReportKind::Table4 => "table4",
            ReportKind::Matrix => "matrix",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn file_name(self) -> &'static str {
        match self {
            ReportKind::Scatter => SCATTER_FILE,
            ReportKind::Table3 => TABLE3_FILE,
            ReportKind::Table4 => TABLE4_FILE,
            ReportKind::Matrix => MATRIX_CSV_FILE,
        }
    }
}

fn fit_reports(project: &Project) -> Result<Vec<(ChainSource, FitReport)>> {
    let mut out = Vec::new();
    for source in ChainSource::ALL {
        let path = project.source_reports_dir(source).join(FIT_REPORT_FILE);
        if path.is_file() {
            out.push((source, read_json(&path)?));
        }
    }
    if out.is_empty() {
        return Err(CliError::needs_stage(
            "fit",
            project.source_reports_dir(ChainSource::Raw).join(FIT_REPORT_FILE),
        ));
    }
    Ok(out)
}

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn scatter(project: &Project) -> Result<String> {
    let mut rows = Vec::new();
    for (source, report) in fit_reports(project)? {
        let mut tasks: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
        for r in &report.residuals {
            rows.push(vec![
                source.as_str().into(),
                "step".into(),
                r.trace_id.clone(),
                r.step_index.to_string(),
                r.last_step_index.to_string(),
                r.target_ms.to_string(),
                r.fitted_ms.to_string(),
            ]);
            let t = tasks.entry(&r.trace_id).or_default();
            t.0 += r.target_ms;
            t.1 += r.fitted_ms;
        }
        for (trace, (actual, fitted)) in tasks {
            rows.push(vec![
                source.as_str().into(),
                "task".into(),
                trace.into(),
                String::new(),
                String::new(),
                actual.to_string(),
                fitted.to_string(),
            ]);
        }
    }
    Ok(csv_text(
        &["chains", "level", "trace_id", "step_index", "last_step_index", "actual_ms", "fitted_ms"],
        rows,
    ))
}

fn table3(project: &Project) -> Result<String> {
    let mut rows = Vec::new();
    for (source, report) in fit_reports(project)? {
        let cv_path = project.source_reports_dir(source).join(CV_REPORT_FILE);
        let cv: Option<CvReport> = if cv_path.is_file() { Some(read_json(&cv_path)?) } else { None };
        for kind in Predictor::ALL {
            let score = report.score(kind);
            let rmse = cv.as_ref().and_then(|c| c.rmse_pct_of(kind));
            rows.push(vec![
                kind.name().into(),
                source.as_str().into(),
                score.r2_step.to_string(),
                score.r2_task.to_string(),
                rmse.map(|v| v.to_string()).unwrap_or_default(),
            ]);
        }
    }
    Ok(csv_text(&["model", "chains", "r2_step", "r2_task", "rmse_pct"], rows))
}

/// Coefficients of the annotated fit when present, else the raw fit.
fn table4(project: &Project) -> Result<String> {
    let (source, report) = fit_reports(project)?.pop().expect("at least one fit report");
    let fit = report.fit;
    let mut rows: Vec<Vec<String>> = fit
        .k
        .iter()
        .map(|(t, k)| vec![t.to_string(), k.to_string(), source.as_str().into()])
        .collect();
    rows.extend(
        fit.unfitted
            .iter()
            .map(|t| vec![t.to_string(), String::new(), source.as_str().into()]),
    );
    rows.push(vec!["Intercept".into(), fit.intercept_ms.to_string(), source.as_str().into()]);
    Ok(csv_text(&["type", "k_ms", "chains"], rows))
}

fn matrix(project: &Project) -> Result<String> {
    let path = project.reports_dir().join(MATRIX_JSON_FILE);
    if !path.is_file() {
        return Err(CliError::needs_stage("agent-eval", path));
    }
    let m: SuccessMatrix = read_json(&path)?;
    Ok(m.to_csv())
}

/// Renders one report as CSV text.
pub fn render(project: &Project, kind: ReportKind) -> Result<String> {
    match kind {
        ReportKind::Scatter => scatter(project),
        ReportKind::Table3 => table3(project),
        ReportKind::Table4 => table4(project),
        ReportKind::Matrix => matrix(project),
    }
}

/// Renders and writes one report under `reports/`.
pub fn write_report(project: &Project, kind: ReportKind) -> Result<Vec<String>> {
    let text = render(project, kind)?;
    let path = project.reports_dir().join(kind.file_name());
    write_atomic(&path, text.as_bytes())?;
    let mut lines = vec![format!("wrote {}", project.rel(&path))];
    if kind == ReportKind::Scatter {
        lines.push(SCATTER_NOTE.into());
    }
    Ok(lines)
}

/// Every report whose inputs exist; fails only when none can be produced.
pub fn write_all(project: &Project) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    let mut first_missing = None;
    for kind in ReportKind::ALL {
        match write_report(project, kind) {
            Ok(l) => lines.extend(l),
            Err(e @ CliError::Prerequisite { .. }) => {
                lines.push(format!("{}: skipped ({e})", kind.name()));
                first_missing.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    match first_missing {
        Some(e) if lines.iter().all(|l| l.contains("skipped")) => Err(e),
        _ => Ok(lines),
    }
}
