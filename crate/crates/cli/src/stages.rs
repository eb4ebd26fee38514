//! The pipeline stages. Each reads its prerequisites from the project,
//! writes its artifacts atomically, and records a manifest beside them.

use std::path::PathBuf;

use cogchain_core::agent::{score_all, success_matrix, AgentStepOutcome, EssentialPath};
use cogchain_core::extraction::{
    assemble_trace_chains, run_chains, run_semantics, step_inputs, ExtractionOutput, LlmClient, ProviderConfig,
    SemanticAnnotation, StepInput, ValidationContext, validate_extraction_with, CHAINS_FILE, EXTRACTION_RAW_FILE, SEMANTICS_FILE,
};
use cogchain_core::fitting::{design_rows, loso_cv, CvOptions, DesignRow, FitReport};
use cogchain_core::trace::{EVENTS_FILE, META_FILE};
use cogchain_core::BaseDifficulties;

use crate::config::{CoefficientSource, Config};
use crate::error::{CliError, Result};
use crate::project::*;
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Group,
    Semantics,
    Extract,
    Assemble,
    Fit,
    Cv,
    AgentEval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Group,
        Stage::Semantics,
        Stage::Extract,
        Stage::Assemble,
        Stage::Fit,
        Stage::Cv,
        Stage::AgentEval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Group => "group",
            Stage::Semantics => "semantics",
            Stage::Extract => "extract",
            Stage::Assemble => "assemble",
            Stage::Fit => "fit",
            Stage::Cv => "cv",
            Stage::AgentEval => "agent-eval",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Which chain sets `fit` and `cv` use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceSelection {
    Raw,
    Annotated,
    /// Raw, plus annotated when every selected trace has been annotated.
    #[default]
    All,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub filter: Filter,
    pub source: SourceSelection,
    pub calib_tasks: Option<usize>,
}

/// Runs one stage; returns human-readable summary lines.
pub fn run_stage(project: &Project, config: &Config, stage: Stage, opts: &RunOptions) -> Result<Vec<String>> {
    match stage {
        Stage::Group => group(project, config, &opts.filter),
        Stage::Semantics => semantics(project, config, &opts.filter),
        Stage::Extract => extract(project, config, &opts.filter),
        Stage::Assemble => assemble(project, config, &opts.filter),
        Stage::Fit => fit(project, config, opts),
        Stage::Cv => cv(project, config, opts),
        Stage::AgentEval => agent_eval(project, config),
        Stage::Report => report::write_all(project),
    }
}

/// Provider client with a relative or absent fixture directory resolved
/// against the project root.
pub fn client_for(project: &Project, provider: &ProviderConfig) -> Result<LlmClient> {
    let mut pc = provider.clone();
    pc.fixture_dir = Some(match pc.fixture_dir.take() {
        None => project.fixtures_dir(),
        Some(d) if d.is_relative() => project.root.join(d),
        Some(d) => d,
    });
    Ok(LlmClient::from_config(&pc)?)
}

fn bundle_files(project: &Project, id: &str) -> Vec<PathBuf> {
    let dir = project.bundle_dir(id);
    vec![dir.join(META_FILE), dir.join(EVENTS_FILE)]
}

fn group(project: &Project, config: &Config, filter: &Filter) -> Result<Vec<String>> {
    let sha = config.sha256();
    let mut lines = Vec::new();
    for id in project.select(filter)? {
        let bundle = project.load_bundle(&id)?;
        let trace = bundle
            .to_trace(&config.grouping)
            .map_err(|e| CliError::Validation(format!("trace {id}: {e}")))?;
        let out = project.steps_path(&id);
        write_json(&out, &trace.steps)?;
        project.write_manifest(&project.derived_dir(&id), "group", &sha, &bundle_files(project, &id), &[out])?;
        lines.push(format!("{id}: {} events -> {} motor steps", bundle.events.len(), trace.len()));
    }
    Ok(lines)
}

fn inputs_for(project: &Project, id: &str) -> Result<(Vec<StepInput>, Vec<PathBuf>)> {
    let trace = project.load_trace(id)?;
    let bundle = project.load_bundle(id)?;
    let inputs = step_inputs(&bundle, &trace);
    let mut files = bundle_files(project, id);
    files.push(project.steps_path(id));
    files.extend(inputs.iter().filter_map(|s| s.screenshot.clone()));
    Ok((inputs, files))
}

fn semantics(project: &Project, config: &Config, filter: &Filter) -> Result<Vec<String>> {
    let ids = project.select(filter)?;
    let client = client_for(project, &config.extraction.semantic)?;
    let settings = config.extraction.settings();
    let sha = config.sha256();
    let mut lines = Vec::new();
    for id in ids {
        let (inputs, files) = inputs_for(project, &id)?;
        let sem = run_semantics(&inputs, &client, &settings)?;
        let out = project.derived_dir(&id).join(SEMANTICS_FILE);
        write_json(&out, &sem)?;
        project.write_manifest(&project.derived_dir(&id), "semantics", &sha, &files, &[out])?;
        lines.push(format!("{id}: {} step descriptions", sem.len()));
    }
    Ok(lines)
}

fn extract(project: &Project, config: &Config, filter: &Filter) -> Result<Vec<String>> {
    let ids = project.select(filter)?;
    let client = client_for(project, &config.extraction.chain)?;
    let settings = config.extraction.settings();
    let sha = config.sha256();
    let mut lines = Vec::new();
    for id in ids {
        let (inputs, mut files) = inputs_for(project, &id)?;
        let sem_path = project.derived_dir(&id).join(SEMANTICS_FILE);
        if !sem_path.is_file() {
            return Err(CliError::needs_stage("semantics", sem_path));
        }
        let sem: Vec<SemanticAnnotation> = read_json(&sem_path)?;
        files.push(sem_path);
        let outputs = run_chains(&inputs, &sem, &client, &settings)?;
        let out = project.derived_dir(&id).join(EXTRACTION_RAW_FILE);
        write_json(&out, &outputs)?;
        project.write_manifest(&project.derived_dir(&id), "extract", &sha, &files, &[out])?;
        lines.push(format!("{id}: {} batches extracted", outputs.len()));
    }
    Ok(lines)
}

fn assemble(project: &Project, config: &Config, filter: &Filter) -> Result<Vec<String>> {
    let sha = config.sha256();
    let mut lines = Vec::new();
    for id in project.select(filter)? {
        let trace = project.load_trace(&id)?;
        let raw_path = project.derived_dir(&id).join(EXTRACTION_RAW_FILE);
        if !raw_path.is_file() {
            return Err(CliError::needs_stage("extract", raw_path));
        }
        let outputs: Vec<ExtractionOutput> = read_json(&raw_path)?;
        check_rules(&id, &outputs)?;
        let chains = assemble_trace_chains(&outputs, trace.len())
            .map_err(|e| CliError::Validation(format!("trace {id}: {e}")))?;
        let out = project.derived_dir(&id).join(CHAINS_FILE);
        write_json(&out, &chains)?;
        project.write_manifest(
            &project.derived_dir(&id),
            "assemble",
            &sha,
            &[project.steps_path(&id), raw_path],
            &[out],
        )?;
        let n: usize = chains.iter().map(|c| c.steps.len()).sum();
        lines.push(format!("{id}: {} chains, {n} cognitive steps", chains.len()));
    }
    Ok(lines)
}

/// Re-checks stored replies, which may have been edited since extraction.
fn check_rules(id: &str, outputs: &[ExtractionOutput]) -> Result<()> {
    let mut violations = Vec::new();
    let mut previous: Option<&str> = None;
    for out in outputs {
        let ctx = ValidationContext {
            expected: None,
            previous_subtask: previous,
        };
        violations.extend(validate_extraction_with(out, &ctx));
        previous = out.event_analysis.last().map(|e| e.details.current_subtask.as_str()).or(previous);
    }
    if violations.is_empty() {
        return Ok(());
    }
    let list: Vec<String> = violations.iter().map(|v| format!("  {v}")).collect();
    Err(CliError::Validation(format!("trace {id}: stored extraction breaks the chain rules\n{}", list.join("\n"))))
}

/// Chain sets to fit for the selected traces.
pub fn sources_for(project: &Project, ids: &[String], selection: SourceSelection) -> Result<Vec<ChainSource>> {
    let annotated = ids
        .iter()
        .filter(|id| project.chains_path(id, ChainSource::Annotated).is_file())
        .count();
    match selection {
        SourceSelection::Raw => Ok(vec![ChainSource::Raw]),
        SourceSelection::Annotated => {
            if let Some(missing) = ids.iter().find(|id| !project.chains_path(id, ChainSource::Annotated).is_file()) {
                project.load_chains(missing, ChainSource::Annotated)?;
            }
            Ok(vec![ChainSource::Annotated])
        }
        SourceSelection::All if annotated == ids.len() => Ok(vec![ChainSource::Raw, ChainSource::Annotated]),
        SourceSelection::All => Ok(vec![ChainSource::Raw]),
    }
}

/// Design rows for the selected traces under one chain source, with the
/// files they were read from.
pub fn rows_for(project: &Project, config: &Config, ids: &[String], source: ChainSource) -> Result<(Vec<DesignRow>, Vec<PathBuf>)> {
    let mut rows = Vec::new();
    let mut files = Vec::new();
    for id in ids {
        let trace = project.load_trace(id)?;
        let chains = project.load_chains(id, source)?;
        rows.extend(design_rows(&trace, &chains, &config.model).map_err(|e| CliError::Validation(format!("trace {id}: {e}")))?);
        files.push(project.steps_path(id));
        files.push(project.chains_path(id, source));
    }
    Ok((rows, files))
}

fn skipped_note(project: &Project, ids: &[String], opts: &RunOptions, sources: &[ChainSource]) -> Option<String> {
    let annotated = ids
        .iter()
        .filter(|id| project.chains_path(id, ChainSource::Annotated).is_file())
        .count();
    (opts.source == SourceSelection::All && !sources.contains(&ChainSource::Annotated) && annotated > 0).then(|| {
        format!(
            "annotated: skipped, {annotated} of {} selected traces annotated",
            ids.len()
        )
    })
}

fn fit(project: &Project, config: &Config, opts: &RunOptions) -> Result<Vec<String>> {
    let ids = project.select(&opts.filter)?;
    let sources = sources_for(project, &ids, opts.source)?;
    let sha = config.sha256();
    let mut lines = Vec::new();
    for &source in &sources {
        let (rows, files) = rows_for(project, config, &ids, source)?;
        let report = FitReport::compute(&rows).map_err(|e| CliError::Validation(format!("fit {}: {e}", source.as_str())))?;
        let dir = project.source_reports_dir(source);
        let out = dir.join(FIT_REPORT_FILE);
        write_json(&out, &report)?;
        project.write_manifest(&dir, "fit", &sha, &files, &[out])?;
        lines.push(format!(
            "fit {}: {} rows, step R² {:.3}, task R² {:.3}",
            source.as_str(),
            report.fit.n_rows,
            report.fit.r2_step,
            report.fit.r2_task
        ));
    }
    lines.extend(skipped_note(project, &ids, opts, &sources));
    Ok(lines)
}

fn cv(project: &Project, config: &Config, opts: &RunOptions) -> Result<Vec<String>> {
    let ids = project.select(&opts.filter)?;
    let sources = sources_for(project, &ids, opts.source)?;
    let options = CvOptions {
        calib_tasks: opts.calib_tasks.unwrap_or(config.cv.calib_tasks),
        ..Default::default()
    };
    let sha = config.sha256();
    let mut lines = Vec::new();
    for &source in &sources {
        let (rows, files) = rows_for(project, config, &ids, source)?;
        let report = loso_cv(&rows, &options).map_err(|e| CliError::Validation(format!("cv {}: {e}", source.as_str())))?;
        let dir = project.source_reports_dir(source);
        let out = dir.join(CV_REPORT_FILE);
        write_json(&out, &report)?;
        project.write_manifest(&dir, "cv", &sha, &files, &[out])?;
        lines.push(format!(
            "cv {}: {} users, RMSE {:.2}%",
            source.as_str(),
            report.folds.len(),
            report.rmse_pct
        ));
    }
    lines.extend(skipped_note(project, &ids, opts, &sources));
    Ok(lines)
}

/// Base difficulties for agent scoring, with the file they came from.
pub fn agent_coefficients(project: &Project, config: &Config) -> Result<(BaseDifficulties, Option<PathBuf>)> {
    if config.agent.coefficients == CoefficientSource::Reference {
        return Ok((BaseDifficulties::reference(), None));
    }
    for source in [ChainSource::Annotated, ChainSource::Raw] {
        let path = project.source_reports_dir(source).join(FIT_REPORT_FILE);
        if path.is_file() {
            let report: FitReport = read_json(&path)?;
            return Ok((report.fit.base_difficulties(), Some(path)));
        }
    }
    Err(CliError::needs_stage(
        "fit",
        project.source_reports_dir(ChainSource::Raw).join(FIT_REPORT_FILE),
    ))
}

fn agent_input(project: &Project, file: &str) -> Result<PathBuf> {
    let path = project.agents_dir().join(file);
    if !path.is_file() {
        return Err(CliError::Prerequisite {
            path,
            hint: "provide essential paths and adjudicated agent outcomes under agents/".into(),
        });
    }
    Ok(path)
}

fn agent_eval(project: &Project, config: &Config) -> Result<Vec<String>> {
    let paths_file = agent_input(project, ESSENTIAL_PATH_FILE)?;
    let outcomes_file = agent_input(project, AGENT_OUTCOMES_FILE)?;
    let paths: Vec<EssentialPath> = read_json(&paths_file)?;
    let outcomes: Vec<AgentStepOutcome> = read_json(&outcomes_file)?;
    let (k, k_file) = agent_coefficients(project, config)?;
    let scored = score_all(&paths, &outcomes, &k, &config.model).map_err(|e| CliError::Validation(e.to_string()))?;
    let matrix = success_matrix(&scored, config.agent.bin_count, config.agent.binning)
        .map_err(|e| CliError::Validation(e.to_string()))?;

    let scored_out = project.agents_dir().join(SCORED_STEPS_FILE);
    write_json(&scored_out, &scored)?;
    let json_out = project.reports_dir().join(MATRIX_JSON_FILE);
    write_json(&json_out, &matrix)?;
    let csv_out = project.reports_dir().join(MATRIX_CSV_FILE);
    write_atomic(&csv_out, matrix.to_csv().as_bytes())?;

    let mut inputs = vec![paths_file, outcomes_file];
    inputs.extend(k_file);
    project.write_manifest(
        &project.agents_dir(),
        "agent-eval",
        &config.sha256(),
        &inputs,
        &[scored_out, json_out, csv_out],
    )?;
    let mut lines = vec![format!(
        "agent-eval: {} scored cognitive steps, {} matrix cells",
        scored.len(),
        matrix.cells.len()
    )];
    if !matrix.degenerate.is_empty() {
        lines.push(format!("bins reduced for: {}", matrix.degenerate.join(", ")));
    }
    Ok(lines)
}
