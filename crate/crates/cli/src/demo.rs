//! Self-contained demo project: synthetic recordings, recorded provider
//! fixtures, and adjudicated agent outcomes, so every stage runs offline.

use std::fs;
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use cogchain_core::agent::{AgentStepOutcome, EssentialPath, OutcomeLabel, PathStep};
use cogchain_core::demo::{demo_recording, DemoProvider};
use cogchain_core::difficulty::difficulty_index;
use cogchain_core::extraction::provider::RecordingProvider;
use cogchain_core::extraction::{run_pipeline, step_inputs, ExtractionRun, LlmClient};
use cogchain_core::trace::{trace_id, Trace, TraceBundle};
use cogchain_core::BaseDifficulties;

use crate::config::{Config, CONFIG_FILE};
use crate::error::{CliError, Result};
use crate::project::*;

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub users: usize,
    pub tasks: usize,
    /// Nominal motor steps per recording; actual lengths vary up to +50%.
    pub steps: usize,
    pub seed: u64,
    /// Relative timing noise.
    pub noise: f64,
}

impl Default for DemoOptions {
    fn default() -> Self {
        Self {
            users: 4,
            tasks: 8,
            steps: 20,
            seed: 7,
            noise: 0.2,
        }
    }
}

/// `(agent id, difficulty scale in ms)`; a larger scale fails less often.
const AGENTS: [(&str, f64); 3] = [("agent-a", 12_000.0), ("agent-b", 6_000.0), ("agent-c", 3_000.0)];

pub fn user_name(u: usize) -> String {
    format!("U{:02}", u + 1)
}

pub fn task_name(t: usize) -> String {
    format!("T{:02}", t + 1)
}

/// Creates a demo project at `root`, which must not already hold traces.
pub fn create_demo_project(root: &Path, opts: &DemoOptions) -> Result<Project> {
    if opts.users == 0 || opts.tasks == 0 || opts.steps == 0 {
        return Err(CliError::Validation("demo needs at least one user, task and step".into()));
    }
    if opts.seed >= u64::MAX / 1000 || opts.users * opts.tasks > 999 {
        return Err(CliError::Validation("demo seed or size out of range".into()));
    }
    let project = Project::new(root);
    if !project.all_trace_ids()?.is_empty() {
        return Err(CliError::Validation(format!(
            "{} already contains traces",
            project.traces_dir().display()
        )));
    }
    fs::create_dir_all(root).map_err(CliError::io(root))?;
    let config = Config::default();
    write_atomic(&root.join(CONFIG_FILE), config.to_toml().as_bytes())?;

    let mut rng = StdRng::seed_from_u64(opts.seed);
    let speeds: Vec<f64> = (0..opts.users).map(|_| rng.random_range(0.8..1.25)).collect();
    let truth = BaseDifficulties::reference();
    let mut paths = Vec::new();
    for t in 0..opts.tasks {
        for (u, &speed) in speeds.iter().enumerate() {
            let (user, task) = (user_name(u), task_name(t));
            let trace_seed = opts.seed * 1000 + (t * opts.users + u) as u64;
            let n_steps = opts.steps + rng.random_range(0..=opts.steps / 2);
            let (mut meta, events, screens) =
                demo_recording(&user, &task, n_steps, trace_seed, &truth, opts.noise, speed);
            meta.metadata.insert("demo_seed".into(), trace_seed.to_string());
            let id = trace_id(&user, &task);
            let dir = project.bundle_dir(&id);
            TraceBundle::write(&dir, &meta, &events, &screens)
                .map_err(|e| CliError::Validation(format!("trace {id}: {e}")))?;

            let (trace, run) = record_fixtures(&project, &config, &id, trace_seed)?;
            if u == 0 {
                paths.push(EssentialPath {
                    task_id: task.clone(),
                    steps: trace
                        .steps
                        .iter()
                        .zip(run.chains)
                        .map(|(step, chain)| PathStep {
                            step_index: step.step_index,
                            kind: Some(step.kind),
                            description: format!("Demo step {}", step.step_index),
                            chain,
                        })
                        .collect(),
                });
            }
        }
    }
    let outcomes = agent_outcomes(&paths, &truth, &config, &mut rng)?;
    write_json(&project.agents_dir().join(ESSENTIAL_PATH_FILE), &paths)?;
    write_json(&project.agents_dir().join(AGENT_OUTCOMES_FILE), &outcomes)?;
    Ok(project)
}

/// Runs both extraction stages over bundle `id` against the offline demo
/// provider, recording every exchange under `fixtures/` so later
/// fixture-mode runs replay it.
pub fn record_fixtures(project: &Project, config: &Config, id: &str, seed: u64) -> Result<(Trace, ExtractionRun)> {
    let bundle = project.load_bundle(id)?;
    let trace = bundle
        .to_trace(&config.grouping)
        .map_err(|e| CliError::Validation(format!("trace {id}: {e}")))?;
    let inputs = step_inputs(&bundle, &trace);
    let recorder = |model: &str| {
        LlmClient::new(
            Box::new(RecordingProvider::new(DemoProvider { seed }, project.fixtures_dir())),
            model,
        )
    };
    let run = run_pipeline(
        &inputs,
        &recorder(&config.extraction.semantic.model),
        &recorder(&config.extraction.chain.model),
        &config.extraction.settings(),
    )?;
    Ok((trace, run))
}

/// Simulated adjudications: each cognitive step fails with probability
/// rising in its difficulty; agents occasionally stop early, and a failure
/// sometimes makes the next step moot.
fn agent_outcomes(
    paths: &[EssentialPath],
    k: &BaseDifficulties,
    config: &Config,
    rng: &mut StdRng,
) -> Result<Vec<AgentStepOutcome>> {
    let mut out = Vec::new();
    for path in paths {
        for (agent, scale) in AGENTS {
            let mut stopped = false;
            let mut skip_next = false;
            for ps in &path.steps {
                let label = if stopped {
                    OutcomeLabel::OmittedSelfTermination
                } else if skip_next {
                    skip_next = false;
                    OutcomeLabel::ExcludedConsequent
                } else if rng.random_bool(0.01) {
                    stopped = true;
                    OutcomeLabel::OmittedSelfTermination
                } else {
                    let mut label = OutcomeLabel::Success;
                    for (position, step) in ps.chain.cognitive_steps().enumerate() {
                        let index =
                            difficulty_index(step, &config.model).map_err(|e| CliError::Validation(e.to_string()))?;
                        let p_fail = 1.0 - (-(k.get(step.ctype) * index) / scale).exp();
                        if rng.random_bool(p_fail.clamp(0.0, 1.0)) {
                            label = OutcomeLabel::Failure { position };
                            skip_next = rng.random_bool(0.5);
                            break;
                        }
                    }
                    label
                };
                out.push(AgentStepOutcome {
                    task_id: path.task_id.clone(),
                    agent_id: agent.into(),
                    step_index: ps.step_index,
                    label,
                    note: String::new(),
                });
            }
        }
    }
    Ok(out)
}
