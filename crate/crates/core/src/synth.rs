//! Seeded synthetic users, tasks, and chains drawn from a known linear model.
//!
//! Used to check parameter recovery and predictor ordering without human
//! data, and to drive the benchmarks.

use std::collections::BTreeMap;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::chain::{CogParams, CognitiveChain, CognitiveStep, CognitiveType};
use crate::difficulty::{predict_step_time, BaseDifficulties, ModelConfig};
use crate::fitting::{design_rows, DesignRow};
use crate::trace::{MotorStep, StepKind, Trace};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub users: usize,
    pub tasks: usize,
    pub steps_min: usize,
    pub steps_max: usize,
    /// Standard deviation of the multiplicative noise factor `1 + noise·z`.
    pub noise: f64,
    pub seed: u64,
    /// Generating coefficients, interpreted with natural-log indices.
    pub truth: BaseDifficulties,
    /// Per-user speed factor range; `(1, 1)` disables it.
    pub user_speed: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 6,
            tasks: 18,
            steps_min: 15,
            steps_max: 25,
            noise: 0.0,
            seed: 0,
            truth: BaseDifficulties::reference(),
            user_speed: (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub user_id: String,
    pub task_id: String,
    pub chains: Vec<CognitiveChain>,
    /// Observed step times in ms.
    pub step_ms: Vec<f64>,
}

fn random_step(rng: &mut StdRng) -> CognitiveStep {
    use CognitiveType::*;
    let (ctype, params) = match rng.random_range(0..8) {
        0 => {
            if rng.random_bool(0.2) {
                (
                    Find,
                    CogParams {
                        located_before: true,
                        ..Default::default()
                    },
                )
            } else {
                (Find, CogParams::n(rng.random_range(1..=20)))
            }
        }
        1 => (Extract, CogParams::m(rng.random_range(1..=20))),
        2 => (Recall, CogParams::d(rng.random_range(0..=30))),
        3 => (DecideExplicit, CogParams::n(rng.random_range(1..=10))),
        4 => (DecideImplicit, CogParams::c(rng.random_range(0.0..=1.0))),
        5 => (Compute, CogParams::c(rng.random_range(0.0..=1.0))),
        6 => (Create, CogParams::m(rng.random_range(1..=10))),
        _ => (Verify, CogParams::m(rng.random_range(1..=10))),
    };
    CognitiveStep::new(ctype, params)
}

fn random_chains(rng: &mut StdRng, n_steps: usize) -> Vec<CognitiveChain> {
    let mut chains: Vec<CognitiveChain> = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let mut steps = Vec::new();
        let new_subtask = i == 0 || rng.random_bool(0.15);
        if new_subtask {
            if let Some(prev) = chains.last_mut() {
                prev.steps.push(CognitiveStep::new(
                    CognitiveType::Verify,
                    CogParams::m(rng.random_range(1..=5)),
                ));
            }
            steps.push(CognitiveStep::new(
                CognitiveType::Orient,
                CogParams::orient(i as u32, rng.random_range(1..=12)),
            ));
        }
        let extra = match rng.random_range(0..10) {
            0..=1 => 0,
            2..=5 => 1,
            6..=8 => 2,
            _ => 3,
        };
        for _ in 0..extra {
            steps.push(random_step(rng));
        }
        if rng.random_bool(0.5) {
            steps.push(CognitiveStep::execute());
        }
        chains.push(CognitiveChain::new(i, steps));
    }
    chains
}

/// Draws a dataset. Task ids are zero-padded so lexicographic order matches
/// generation order.
pub fn generate(spec: &SyntheticSpec) -> Vec<SyntheticTask> {
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let config = ModelConfig::default();
    let mut out = Vec::with_capacity(spec.users * spec.tasks);
    for u in 0..spec.users {
        let speed = if spec.user_speed.0 < spec.user_speed.1 {
            rng.random_range(spec.user_speed.0..spec.user_speed.1)
        } else {
            spec.user_speed.0
        };
        for t in 0..spec.tasks {
            let n_steps = rng.random_range(spec.steps_min..=spec.steps_max);
            let chains = random_chains(&mut rng, n_steps);
            let step_ms = chains
                .iter()
                .map(|c| {
                    let clean = predict_step_time(c, &spec.truth, &config).expect("generated params are valid");
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let factor = (1.0 + spec.noise * z).max(0.05);
                    speed * clean * factor
                })
                .collect();
            out.push(SyntheticTask {
                user_id: format!("P{:02}", u + 1),
                task_id: format!("T{:02}", t + 1),
                chains,
                step_ms,
            });
        }
    }
    out
}

impl SyntheticTask {
    pub fn trace_id(&self) -> String {
        crate::trace::trace_id(&self.user_id, &self.task_id)
    }

    /// Design rows with exact (unrounded) targets.
    pub fn rows(&self, config: &ModelConfig) -> Vec<DesignRow> {
        let features = crate::difficulty::chain_indices_by_type;
        self.chains
            .iter()
            .zip(&self.step_ms)
            .map(|(chain, &ms)| DesignRow {
                trace_id: self.trace_id(),
                user_id: self.user_id.clone(),
                task_id: self.task_id.clone(),
                step_index: chain.motor_step_index,
                last_step_index: chain.motor_step_index,
                features: features(chain, config).expect("generated params are valid"),
                counts: crate::difficulty::chain_counts_by_type(chain),
                target_ms: ms,
            })
            .collect()
    }

    /// A trace whose integer-ms timestamps reproduce the step times (rounded).
    /// Each step lasts `duration_ms` between its start and end.
    pub fn to_trace(&self, duration_ms: u64) -> (Trace, Vec<CognitiveChain>) {
        let mut t = 0u64;
        let mut steps = Vec::with_capacity(self.step_ms.len());
        for (i, &ms) in self.step_ms.iter().enumerate() {
            t += ms.round() as u64;
            steps.push(MotorStep {
                step_index: i,
                kind: StepKind::Click,
                start_ts: t,
                end_ts: t + duration_ms,
                source_events: vec![i],
                semantic: None,
                screenshot_ref: None,
            });
            t += duration_ms;
        }
        let trace = Trace::new(self.task_id.clone(), self.user_id.clone(), steps, BTreeMap::new(), 0)
            .expect("synthetic steps are ordered");
        (trace, self.chains.clone())
    }
}

/// Design rows of every task, in generation order.
pub fn rows(tasks: &[SyntheticTask], config: &ModelConfig) -> Vec<DesignRow> {
    tasks.iter().flat_map(|t| t.rows(config)).collect()
}

/// Design rows built through traces with rounded timestamps.
pub fn rows_via_traces(tasks: &[SyntheticTask], config: &ModelConfig) -> Vec<DesignRow> {
    tasks
        .iter()
        .flat_map(|t| {
            let (trace, chains) = t.to_trace(50);
            design_rows(&trace, &chains, config).expect("synthetic traces are aligned")
        })
        .collect()
}
