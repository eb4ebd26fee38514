//! Difficulty index functions and the linear step-time model.
//!
//! | type            | index                      |
//! |-----------------|----------------------------|
//! | Orient          | log(s_old) + log(s_new)    |
//! | Find            | log(n + 1), n = 1 if known |
//! | Extract         | log(m + 1)                 |
//! | Recall          | 1 - exp(-d / t)            |
//! | Decide explicit | log(n + 1)                 |
//! | Decide implicit | c                          |
//! | Compute         | c                          |
//! | Create          | log(m + 1)                 |
//! | Verify          | log(m + 1)                 |
//!
//! A step's predicted time is the intercept plus the sum over its chain of
//! base difficulty times index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{CogParams, CognitiveChain, CognitiveStep, CognitiveType};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("{ctype}: missing required parameter '{param}'")]
    MissingParameter { ctype: CognitiveType, param: &'static str },
    #[error("{ctype}: parameter '{param}' {reason}")]
    InvalidParameter {
        ctype: CognitiveType,
        param: &'static str,
        reason: String,
    },
    #[error("{ctype}: parameter '{param}' not allowed for this type")]
    ConflictingParameter { ctype: CognitiveType, param: &'static str },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("cognitive step {position}: {source}")]
    AtStep {
        position: usize,
        #[source]
        source: Box<ModelError>,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub log_base: f64,
    /// Memory decay constant of the Recall index, in steps.
    pub recall_decay_t: f64,
    /// Clamp Orient log arguments to at least 1.
    pub orient_guard: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            log_base: std::f64::consts::E,
            recall_decay_t: 10.0,
            orient_guard: true,
        }
    }
}

impl ModelConfig {
    pub fn with_log_base(log_base: f64) -> Self {
        Self {
            log_base,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.log_base.is_finite() && self.log_base > 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "log_base must be > 1, got {}",
                self.log_base
            )));
        }
        if !(self.recall_decay_t.is_finite() && self.recall_decay_t > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "recall_decay_t must be > 0, got {}",
                self.recall_decay_t
            )));
        }
        Ok(())
    }

    fn log(&self, x: f64) -> f64 {
        x.ln() / self.log_base.ln()
    }
}

fn required<T: Copy>(ctype: CognitiveType, param: &'static str, value: Option<T>) -> Result<T> {
    value.ok_or(ModelError::MissingParameter { ctype, param })
}

fn forbid<T>(ctype: CognitiveType, param: &'static str, value: &Option<T>) -> Result<()> {
    match value {
        Some(_) => Err(ModelError::ConflictingParameter { ctype, param }),
        None => Ok(()),
    }
}

fn unit_interval(ctype: CognitiveType, c: f64) -> Result<f64> {
    if c.is_finite() && (0.0..=1.0).contains(&c) {
        Ok(c)
    } else {
        Err(ModelError::InvalidParameter {
            ctype,
            param: "c",
            reason: format!("must lie in [0, 1], got {c}"),
        })
    }
}

/// Checks that `params` carries what `ctype` needs.
pub fn validate_params(ctype: CognitiveType, params: &CogParams) -> Result<()> {
    use CognitiveType::*;
    match ctype {
        Orient => {
            required(ctype, "s_old", params.s_old)?;
            required(ctype, "s_new", params.s_new)?;
        }
        Find => {
            if !params.located_before {
                required(ctype, "n", params.n)?;
            }
        }
        Extract | Create | Verify => {
            required(ctype, "m", params.m)?;
        }
        Recall => {
            required(ctype, "d", params.d)?;
        }
        DecideExplicit => {
            let n = required(ctype, "n", params.n)?;
            if n < 1 {
                return Err(ModelError::InvalidParameter {
                    ctype,
                    param: "n",
                    reason: "must be at least 1 for an explicit decision".into(),
                });
            }
            forbid(ctype, "c", &params.c)?;
        }
        DecideImplicit => {
            unit_interval(ctype, required(ctype, "c", params.c)?)?;
            forbid(ctype, "n", &params.n)?;
        }
        Compute => {
            unit_interval(ctype, required(ctype, "c", params.c)?)?;
        }
        Execute => {}
    }
    Ok(())
}

/// Largest f64 below 1.
const RECALL_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Difficulty index of a single cognitive step.
pub fn difficulty_index(step: &CognitiveStep, config: &ModelConfig) -> Result<f64> {
    use CognitiveType::*;
    let ctype = step.ctype;
    let p = &step.params;
    validate_params(ctype, p)?;
    let log_plus_one = |x: u32| config.log(f64::from(x) + 1.0);
    let index = match ctype {
        Orient => {
            let (s_old, s_new) = (p.s_old.unwrap_or(0), p.s_new.unwrap_or(0));
            let term = |param: &'static str, s: u32| -> Result<f64> {
                if config.orient_guard {
                    Ok(config.log(f64::from(s.max(1))))
                } else if s == 0 {
                    Err(ModelError::InvalidParameter {
                        ctype,
                        param,
                        reason: "log(0) is undefined; enable orient_guard".into(),
                    })
                } else {
                    Ok(config.log(f64::from(s)))
                }
            };
            term("s_old", s_old)? + term("s_new", s_new)?
        }
        Find => {
            let n = if p.located_before { 1 } else { p.n.unwrap_or(0) };
            log_plus_one(n)
        }
        Extract | Create | Verify => log_plus_one(p.m.unwrap_or(0)),
        // Clamped below 1: the exact value never reaches it, f64 would.
        Recall => (-(-f64::from(p.d.unwrap_or(0)) / config.recall_decay_t).exp_m1()).min(RECALL_MAX),
        DecideExplicit => log_plus_one(p.n.unwrap_or(0)),
        DecideImplicit | Compute => p.c.unwrap_or(0.0),
        Execute => 0.0,
    };
    Ok(index)
}

/// Per-type sums of difficulty indices over a chain. Every fitted type is
/// present in the result; `Execute` is never included.
pub fn chain_indices_by_type(
    chain: &CognitiveChain,
    config: &ModelConfig,
) -> Result<BTreeMap<CognitiveType, f64>> {
    let mut sums: BTreeMap<CognitiveType, f64> =
        CognitiveType::FITTED.iter().map(|&t| (t, 0.0)).collect();
    for (position, step) in chain.steps.iter().enumerate() {
        let index = difficulty_index(step, config).map_err(|e| ModelError::AtStep {
            position,
            source: Box::new(e),
        })?;
        if step.ctype.is_cognitive() {
            *sums.entry(step.ctype).or_insert(0.0) += index;
        }
    }
    Ok(sums)
}

/// Per-type counts of cognitive steps in a chain (every step weighted 1).
pub fn chain_counts_by_type(chain: &CognitiveChain) -> BTreeMap<CognitiveType, f64> {
    let mut counts: BTreeMap<CognitiveType, f64> =
        CognitiveType::FITTED.iter().map(|&t| (t, 0.0)).collect();
    for step in chain.cognitive_steps() {
        *counts.entry(step.ctype).or_insert(0.0) += 1.0;
    }
    counts
}

/// Base difficulty per cognitive type (ms per unit index) plus the motor
/// intercept. Types without a coefficient contribute nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseDifficulties {
    pub k: BTreeMap<CognitiveType, f64>,
    pub intercept_ms: f64,
}

impl BaseDifficulties {
    pub fn new(k: BTreeMap<CognitiveType, f64>, intercept_ms: f64) -> Self {
        Self { k, intercept_ms }
    }

    /// Published fit on annotated human traces (natural-log indices not
    /// guaranteed; the source does not name its base).
    pub fn reference() -> Self {
        use CognitiveType::*;
        let k = [
            (Orient, 4.7),
            (Find, 563.2),
            (Extract, 1415.9),
            (Recall, 446.6),
            (DecideExplicit, 742.0),
            (DecideImplicit, 1506.4),
            (Compute, 5120.1),
            (Create, 1422.1),
            (Verify, 778.1),
        ]
        .into_iter()
        .collect();
        Self::new(k, 859.1)
    }

    pub fn get(&self, ctype: CognitiveType) -> f64 {
        if ctype.is_cognitive() {
            self.k.get(&ctype).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    }

    /// Linear prediction from per-type index sums.
    pub fn predict(&self, features: &BTreeMap<CognitiveType, f64>) -> f64 {
        self.intercept_ms
            + features
                .iter()
                .map(|(&t, &x)| self.get(t) * x)
                .sum::<f64>()
    }
}

/// Predicted step time: intercept plus Σ K[type]·I over the chain.
pub fn predict_step_time(
    chain: &CognitiveChain,
    k: &BaseDifficulties,
    config: &ModelConfig,
) -> Result<f64> {
    Ok(k.predict(&chain_indices_by_type(chain, config)?))
}

/// Predicted task time: the sum of step predictions. Chains should already be
/// span-merged (one per timing row).
pub fn predict_task_time(
    chains: &[CognitiveChain],
    k: &BaseDifficulties,
    config: &ModelConfig,
) -> Result<f64> {
    chains
        .iter()
        .map(|c| predict_step_time(c, k, config))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use CognitiveType::*;

    fn step(ctype: CognitiveType, params: CogParams) -> CognitiveStep {
        CognitiveStep::new(ctype, params)
    }

    fn idx(ctype: CognitiveType, params: CogParams) -> f64 {
        difficulty_index(&step(ctype, params), &ModelConfig::default()).unwrap()
    }

    #[test]
    fn zero_cases() {
        assert_eq!(idx(Find, CogParams::n(0)), 0.0);
        assert_eq!(idx(Recall, CogParams::d(0)), 0.0);
        assert_eq!(idx(DecideImplicit, CogParams::c(0.3)), 0.3);
        assert_eq!(idx(Execute, CogParams::default()), 0.0);
    }

    #[test]
    fn interior_values() {
        assert_relative_eq!(idx(Find, CogParams::n(3)), 4f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(idx(Find, CogParams::n(3)), 1.3862943611198906, max_relative = 1e-12);
        assert_relative_eq!(idx(Recall, CogParams::d(10)), 1.0 - (-1f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(idx(Recall, CogParams::d(10)), 0.6321205588285577, max_relative = 1e-12);
        assert_relative_eq!(idx(Orient, CogParams::orient(4, 6)), 24f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn located_before_degrades_find() {
        let p = CogParams {
            n: Some(40),
            located_before: true,
            ..Default::default()
        };
        assert_relative_eq!(idx(Find, p), 2f64.ln());
        let p = CogParams {
            located_before: true,
            ..Default::default()
        };
        assert_relative_eq!(idx(Find, p), 2f64.ln());
    }

    #[test]
    fn orient_guard_handles_task_start() {
        assert_eq!(idx(Orient, CogParams::orient(0, 1)), 0.0);
        let cfg = ModelConfig {
            orient_guard: false,
            ..Default::default()
        };
        let err = difficulty_index(&step(Orient, CogParams::orient(0, 3)), &cfg).unwrap_err();
        assert!(matches!(err, ModelError::InvalidParameter { param: "s_old", .. }));
    }

    #[test]
    fn missing_and_conflicting_parameters() {
        let cfg = ModelConfig::default();
        let err = difficulty_index(&step(Extract, CogParams::n(3)), &cfg).unwrap_err();
        assert_eq!(err, ModelError::MissingParameter { ctype: Extract, param: "m" });
        let both = CogParams {
            n: Some(3),
            c: Some(0.5),
            ..Default::default()
        };
        assert!(matches!(
            difficulty_index(&step(DecideExplicit, both.clone()), &cfg),
            Err(ModelError::ConflictingParameter { param: "c", .. })
        ));
        assert!(matches!(
            difficulty_index(&step(DecideImplicit, both), &cfg),
            Err(ModelError::ConflictingParameter { param: "n", .. })
        ));
        assert!(difficulty_index(&step(DecideExplicit, CogParams::n(0)), &cfg).is_err());
        assert!(difficulty_index(&step(Compute, CogParams::c(1.5)), &cfg).is_err());
    }

    #[test]
    fn chain_sums_per_type() {
        let cfg = ModelConfig::default();
        let empty = chain_indices_by_type(&CognitiveChain::empty(0), &cfg).unwrap();
        assert!(empty.values().all(|&v| v == 0.0));
        assert_eq!(empty.len(), 9);

        let two_finds = CognitiveChain::new(0, vec![step(Find, CogParams::n(1)), step(Find, CogParams::n(1))]);
        let sums = chain_indices_by_type(&two_finds, &cfg).unwrap();
        assert_relative_eq!(sums[&Find], 2.0 * 2f64.ln());

        let mixed = CognitiveChain::new(
            0,
            vec![step(DecideExplicit, CogParams::n(3)), step(Verify, CogParams::m(1)), CognitiveStep::execute()],
        );
        let sums = chain_indices_by_type(&mixed, &cfg).unwrap();
        let nonzero: Vec<_> = sums.iter().filter(|(_, &v)| v != 0.0).map(|(&t, _)| t).collect();
        assert_eq!(nonzero, [DecideExplicit, Verify]);
        assert_relative_eq!(sums[&DecideExplicit], 4f64.ln());
        assert_relative_eq!(sums[&Verify], 2f64.ln());
    }

    #[test]
    fn chain_errors_name_position() {
        let chain = CognitiveChain::new(0, vec![step(Find, CogParams::n(1)), step(Recall, CogParams::default())]);
        match chain_indices_by_type(&chain, &ModelConfig::default()) {
            Err(ModelError::AtStep { position, .. }) => assert_eq!(position, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn step_and_task_prediction() {
        let k = BaseDifficulties::reference();
        let cfg = ModelConfig::default();
        assert_relative_eq!(predict_step_time(&CognitiveChain::empty(0), &k, &cfg).unwrap(), 859.1);
        let compute = CognitiveChain::new(0, vec![step(Compute, CogParams::c(1.0))]);
        assert_relative_eq!(predict_step_time(&compute, &k, &cfg).unwrap(), 5979.2, max_relative = 1e-12);

        let chains = vec![
            CognitiveChain::new(0, vec![step(Orient, CogParams::orient(1, 5)), step(Find, CogParams::n(4))]),
            CognitiveChain::new(1, vec![step(Recall, CogParams::d(3)), CognitiveStep::execute()]),
            CognitiveChain::new(2, vec![step(Verify, CogParams::m(2))]),
        ];
        // Brute force: each term evaluated by hand from the formulas.
        let expected = 3.0 * 859.1
            + 4.7 * (1f64.ln() + 5f64.ln())
            + 563.2 * 5f64.ln()
            + 446.6 * (1.0 - (-0.3f64).exp())
            + 778.1 * 3f64.ln();
        assert_relative_eq!(predict_task_time(&chains, &k, &cfg).unwrap(), expected, max_relative = 1e-12);
        let single = &chains[..1];
        assert_eq!(
            predict_task_time(single, &k, &cfg).unwrap(),
            predict_step_time(&chains[0], &k, &cfg).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::with_log_base(1.0).validate().is_err());
        assert!(ModelConfig { recall_decay_t: 0.0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig::with_log_base(2.0).validate().is_ok());
    }
}
