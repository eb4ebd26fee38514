//! Regression of observed step times on difficulty indices.
//!
//! Rows come from span-merged chains aligned with their traces. Base
//! difficulties are fitted by ordinary least squares with an intercept, and
//! predictive quality is measured with leave-one-subject-out cross-validation
//! where each held-out user gets a linear calibration fitted on a few of
//! their own tasks.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{merge_spans, CognitiveChain, CognitiveType, SpanError};
use crate::difficulty::{chain_counts_by_type, chain_indices_by_type, BaseDifficulties, ModelConfig, ModelError};
use crate::trace::{step_times, Trace, TraceError};

/// Relative tolerance for the rank check.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("trace {trace_id}: {source}")]
    Misaligned {
        trace_id: String,
        #[source]
        source: SpanError,
    },
    #[error("trace {trace_id}, motor step {step}: {source}")]
    Model {
        trace_id: String,
        step: usize,
        #[source]
        source: ModelError,
    },
    #[error("trace {trace_id}: {source}")]
    Timing {
        trace_id: String,
        #[source]
        source: TraceError,
    },
    #[error("need at least {needed} rows, got {rows}")]
    InsufficientRows { rows: usize, needed: usize },
    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("least-squares solve failed")]
    SolveFailed,
    #[error("R² undefined: actual values have zero variance")]
    ZeroVariance,
    #[error("length mismatch: {actual} actual vs {predicted} predicted")]
    LengthMismatch { actual: usize, predicted: usize },
    #[error("calibration for user {user_id} is degenerate: predictions are constant")]
    DegenerateCalibration { user_id: String },
    #[error("user {user_id} has {tasks} tasks; need more than {needed}")]
    InsufficientTasks {
        user_id: String,
        tasks: usize,
        needed: usize,
    },
    #[error("cross-validation needs at least 2 users, got {0}")]
    TooFewUsers(usize),
    #[error("no training rows")]
    EmptyTraining,
}

pub type Result<T, E = FitError> = std::result::Result<T, E>;

/// One timing row: a span-merged motor step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    pub trace_id: String,
    pub user_id: String,
    pub task_id: String,
    /// First motor step of the row.
    pub step_index: usize,
    /// Last motor step (equal to `step_index` unless spanned).
    pub last_step_index: usize,
    /// Summed difficulty index per fitted type.
    pub features: BTreeMap<CognitiveType, f64>,
    /// Number of cognitive steps per fitted type.
    pub counts: BTreeMap<CognitiveType, f64>,
    pub target_ms: f64,
}

/// Which per-type quantity enters the regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// Summed difficulty indices.
    Difficulty,
    /// Every cognitive step weighted 1.
    Unit,
}

impl DesignRow {
    pub fn column(&self, set: FeatureSet, ctype: CognitiveType) -> f64 {
        let map = match set {
            FeatureSet::Difficulty => &self.features,
            FeatureSet::Unit => &self.counts,
        };
        map.get(&ctype).copied().unwrap_or(0.0)
    }
}

/// Design rows for one trace from chains aligned to its motor steps.
pub fn design_rows(trace: &Trace, chains: &[CognitiveChain], config: &ModelConfig) -> Result<Vec<DesignRow>> {
    let trace_id = trace.id();
    let merged = merge_spans(chains, trace.len()).map_err(|source| FitError::Misaligned {
        trace_id: trace_id.clone(),
        source,
    })?;
    let times = step_times(trace).map_err(|source| FitError::Timing {
        trace_id: trace_id.clone(),
        source,
    })?;
    merged
        .into_iter()
        .map(|row| {
            let features = chain_indices_by_type(&row.chain, config).map_err(|source| FitError::Model {
                trace_id: trace_id.clone(),
                step: row.first,
                source,
            })?;
            let target_ms = row.members().map(|i| times[i] as f64).sum();
            Ok(DesignRow {
                trace_id: trace_id.clone(),
                user_id: trace.user_id.clone(),
                task_id: trace.task_id.clone(),
                step_index: row.first,
                last_step_index: row.last,
                features,
                counts: chain_counts_by_type(&row.chain),
                target_ms,
            })
        })
        .collect()
}

pub fn build_design_matrix(
    chained_traces: &[(Trace, Vec<CognitiveChain>)],
    config: &ModelConfig,
) -> Result<Vec<DesignRow>> {
    let mut rows = Vec::new();
    for (trace, chains) in chained_traces {
        rows.extend(design_rows(trace, chains, config)?);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// ms per unit index, for every fitted column.
    pub k: BTreeMap<CognitiveType, f64>,
    pub intercept_ms: f64,
    pub r2_step: f64,
    pub r2_task: f64,
    pub n_rows: usize,
    /// Types whose column was identically zero.
    pub unfitted: Vec<CognitiveType>,
    pub features: FeatureSet,
}

impl FitResult {
    pub fn base_difficulties(&self) -> BaseDifficulties {
        BaseDifficulties::new(self.k.clone(), self.intercept_ms)
    }

    pub fn predict_row(&self, row: &DesignRow) -> f64 {
        self.intercept_ms
            + self
                .k
                .iter()
                .map(|(&t, &coef)| coef * row.column(self.features, t))
                .sum::<f64>()
    }
}

/// 1 − SS_res / SS_tot against the mean of `actual`.
pub fn r2(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.len() != predicted.len() {
        return Err(FitError::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.len() < 2 {
        return Err(FitError::InsufficientRows {
            rows: actual.len(),
            needed: 2,
        });
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    let ss_res: f64 = actual.iter().zip(predicted).map(|(a, p)| (a - p).powi(2)).sum();
    let scale = actual.iter().map(|a| a * a).sum::<f64>().max(f64::MIN_POSITIVE);
    if ss_tot <= f64::EPSILON * scale {
        return Err(FitError::ZeroVariance);
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// R² where a constant target counts as 0 when the fit reproduces it.
fn r2_or_zero(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    match r2(actual, predicted) {
        Err(FitError::ZeroVariance) => Ok(0.0),
        other => other,
    }
}

/// Sums per-row values into per-task totals, keyed by trace id in first-seen
/// order.
pub fn task_totals<'a>(rows: &'a [DesignRow], values: &[f64]) -> Vec<(&'a str, f64)> {
    let mut order: Vec<&str> = Vec::new();
    let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
    for (row, v) in rows.iter().zip(values) {
        let entry = totals.entry(row.trace_id.as_str()).or_insert_with(|| {
            order.push(row.trace_id.as_str());
            0.0
        });
        *entry += v;
    }
    order.into_iter().map(|id| (id, totals[id])).collect()
}

/// Least-squares solution of `x β ≈ y` where `x` has full column rank.
fn solve_least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let xt = x.transpose();
    let xtx = &xt * x;
    let xty = &xt * y;
    if let Some(chol) = xtx.clone().cholesky() {
        return Ok(chol.solve(&xty));
    }
    x.clone()
        .svd(true, true)
        .solve(y, RANK_TOLERANCE)
        .map_err(|_| FitError::SolveFailed)
}

/// Columns (by position) linearly dependent on earlier ones, found by
/// Gram-Schmidt with re-orthogonalisation.
fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&r);
                r -= q * proj;
            }
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= RANK_TOLERANCE * norm {
            dependent.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    dependent
}

fn column_name(pos: usize, columns: &[CognitiveType]) -> String {
    if pos == 0 {
        "intercept".to_string()
    } else {
        columns[pos - 1].to_string()
    }
}

/// OLS of `target_ms` on the chosen feature set with an intercept.
pub fn fit_ols_with(rows: &[DesignRow], set: FeatureSet) -> Result<FitResult> {
    let (columns, unfitted): (Vec<CognitiveType>, Vec<CognitiveType>) = CognitiveType::FITTED
        .iter()
        .partition(|&&t| rows.iter().any(|r| r.column(set, t) != 0.0));
    let p = columns.len() + 1;
    if rows.len() < p + 1 {
        return Err(FitError::InsufficientRows {
            rows: rows.len(),
            needed: p + 1,
        });
    }
    let x = DMatrix::from_fn(rows.len(), p, |i, j| {
        if j == 0 {
            1.0
        } else {
            rows[i].column(set, columns[j - 1])
        }
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.target_ms));
    let dependent = dependent_columns(&x);
    if !dependent.is_empty() {
        return Err(FitError::RankDeficient {
            columns: dependent.iter().map(|&j| column_name(j, &columns)).collect(),
        });
    }
    let beta = solve_least_squares(&x, &y)?;
    let k: BTreeMap<_, _> = columns.iter().enumerate().map(|(j, &t)| (t, beta[j + 1])).collect();
    let mut fit = FitResult {
        k,
        intercept_ms: beta[0],
        r2_step: 0.0,
        r2_task: 0.0,
        n_rows: rows.len(),
        unfitted,
        features: set,
    };
    let fitted: Vec<f64> = rows.iter().map(|r| fit.predict_row(r)).collect();
    let actual: Vec<f64> = rows.iter().map(|r| r.target_ms).collect();
    fit.r2_step = r2_or_zero(&actual, &fitted)?;
    fit.r2_task = task_r2(rows, &fitted)?;
    Ok(fit)
}

/// OLS of observed step times on summed difficulty indices.
pub fn fit_ols(rows: &[DesignRow]) -> Result<FitResult> {
    fit_ols_with(rows, FeatureSet::Difficulty)
}

fn task_r2(rows: &[DesignRow], fitted: &[f64]) -> Result<f64> {
    let actual: Vec<f64> = rows.iter().map(|r| r.target_ms).collect();
    let actual_t: Vec<f64> = task_totals(rows, &actual).into_iter().map(|(_, v)| v).collect();
    let fitted_t: Vec<f64> = task_totals(rows, fitted).into_iter().map(|(_, v)| v).collect();
    if actual_t.len() < 2 {
        return Ok(0.0);
    }
    r2_or_zero(&actual_t, &fitted_t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    pub user_id: String,
    pub alpha: f64,
    pub beta: f64,
}

impl CalibrationParams {
    pub fn apply(&self, predicted: f64) -> f64 {
        self.alpha * predicted + self.beta
    }
}

/// Fits `observed ≈ alpha · predicted + beta` by least squares.
pub fn calibrate_user(user_id: &str, predicted: &[f64], observed: &[f64]) -> Result<CalibrationParams> {
    if predicted.len() != observed.len() {
        return Err(FitError::LengthMismatch {
            actual: observed.len(),
            predicted: predicted.len(),
        });
    }
    if predicted.len() < 2 {
        return Err(FitError::InsufficientTasks {
            user_id: user_id.to_string(),
            tasks: predicted.len(),
            needed: 1,
        });
    }
    let n = predicted.len() as f64;
    let mx = predicted.iter().sum::<f64>() / n;
    let my = observed.iter().sum::<f64>() / n;
    let sxx: f64 = predicted.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = predicted.iter().zip(observed).map(|(x, y)| (x - mx) * (y - my)).sum();
    let scale: f64 = predicted.iter().map(|x| x * x).sum();
    if sxx <= 1e-12 * scale.max(1.0) {
        return Err(FitError::DegenerateCalibration {
            user_id: user_id.to_string(),
        });
    }
    let alpha = sxy / sxx;
    Ok(CalibrationParams {
        user_id: user_id.to_string(),
        alpha,
        beta: my - alpha * mx,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    CognitiveChain,
    UnitDifficulty,
    StepMean,
}

impl Predictor {
    pub const ALL: [Predictor; 3] = [Predictor::CognitiveChain, Predictor::UnitDifficulty, Predictor::StepMean];

    pub fn name(self) -> &'static str {
        match self {
            Predictor::CognitiveChain => "cognitive_chain",
            Predictor::UnitDifficulty => "unit_difficulty",
            Predictor::StepMean => "step_mean",
        }
    }
}

/// A predictor fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedPredictor {
    Linear(FitResult),
    Constant(f64),
}

impl FittedPredictor {
    pub fn fit(kind: Predictor, train: &[DesignRow]) -> Result<Self> {
        if train.is_empty() {
            return Err(FitError::EmptyTraining);
        }
        Ok(match kind {
            Predictor::CognitiveChain => FittedPredictor::Linear(fit_ols_with(train, FeatureSet::Difficulty)?),
            Predictor::UnitDifficulty => FittedPredictor::Linear(fit_ols_with(train, FeatureSet::Unit)?),
            Predictor::StepMean => {
                FittedPredictor::Constant(train.iter().map(|r| r.target_ms).sum::<f64>() / train.len() as f64)
            }
        })
    }

    pub fn predict_row(&self, row: &DesignRow) -> f64 {
        match self {
            FittedPredictor::Linear(fit) => fit.predict_row(row),
            FittedPredictor::Constant(mean) => *mean,
        }
    }
}

/// Step predictions of a baseline trained on `train` for each `eval` row.
pub fn baseline_predictions(kind: Predictor, train: &[DesignRow], eval: &[DesignRow]) -> Result<Vec<f64>> {
    let model = FittedPredictor::fit(kind, train)?;
    Ok(eval.iter().map(|r| model.predict_row(r)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    pub task_id: String,
    pub actual_ms: f64,
    pub predicted_ms: f64,
    pub calibrated_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorFold {
    pub calibration: CalibrationParams,
    /// True when calibration predictions were constant and only an offset was
    /// fitted (alpha fixed at 1).
    pub offset_only: bool,
    pub predictions: Vec<TaskPrediction>,
    pub rmse_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub user_id: String,
    pub calibration_tasks: Vec<String>,
    pub results: BTreeMap<Predictor, PredictorFold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub calib_tasks: usize,
    pub folds: Vec<FoldReport>,
    /// Cognitive-chain model, averaged over users.
    pub rmse_pct: f64,
    pub baseline_rmse_pct: BTreeMap<String, f64>,
}

impl CvReport {
    pub fn rmse_pct_of(&self, kind: Predictor) -> Option<f64> {
        match kind {
            Predictor::CognitiveChain => Some(self.rmse_pct),
            other => self.baseline_rmse_pct.get(other.name()).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub calib_tasks: usize,
    pub baselines: Vec<Predictor>,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            calib_tasks: 5,
            baselines: vec![Predictor::UnitDifficulty, Predictor::StepMean],
        }
    }
}

struct TaskRows<'a> {
    task_id: &'a str,
    rows: Vec<&'a DesignRow>,
}

fn tasks_of<'a>(rows: &[&'a DesignRow]) -> Vec<TaskRows<'a>> {
    let mut by_task: BTreeMap<&str, Vec<&DesignRow>> = BTreeMap::new();
    for r in rows {
        by_task.entry(r.task_id.as_str()).or_default().push(r);
    }
    by_task
        .into_iter()
        .map(|(task_id, rows)| TaskRows { task_id, rows })
        .collect()
}

fn predictor_fold(
    kind: Predictor,
    user_id: &str,
    train: &[DesignRow],
    calib: &[TaskRows<'_>],
    eval: &[TaskRows<'_>],
) -> Result<PredictorFold> {
    let model = FittedPredictor::fit(kind, train)?;
    let total = |t: &TaskRows<'_>| -> (f64, f64) {
        (
            t.rows.iter().map(|r| r.target_ms).sum(),
            t.rows.iter().map(|r| model.predict_row(r)).sum(),
        )
    };
    let (cal_obs, cal_pred): (Vec<f64>, Vec<f64>) = calib.iter().map(total).unzip();
    let (calibration, offset_only) = match calibrate_user(user_id, &cal_pred, &cal_obs) {
        Ok(c) => (c, false),
        Err(FitError::DegenerateCalibration { .. }) => {
            let n = cal_obs.len() as f64;
            let beta = cal_obs.iter().zip(&cal_pred).map(|(o, p)| o - p).sum::<f64>() / n;
            (
                CalibrationParams {
                    user_id: user_id.to_string(),
                    alpha: 1.0,
                    beta,
                },
                true,
            )
        }
        Err(e) => return Err(e),
    };
    let predictions: Vec<TaskPrediction> = eval
        .iter()
        .map(|t| {
            let (actual_ms, predicted_ms) = total(t);
            TaskPrediction {
                task_id: t.task_id.to_string(),
                actual_ms,
                predicted_ms,
                calibrated_ms: calibration.apply(predicted_ms),
            }
        })
        .collect();
    let n = predictions.len() as f64;
    let mse = predictions.iter().map(|p| (p.calibrated_ms - p.actual_ms).powi(2)).sum::<f64>() / n;
    let mean_actual = predictions.iter().map(|p| p.actual_ms).sum::<f64>() / n;
    Ok(PredictorFold {
        calibration,
        offset_only,
        predictions,
        rmse_pct: 100.0 * mse.sqrt() / mean_actual,
    })
}

/// Leave-one-subject-out cross-validation with per-user calibration.
///
/// For each held-out user the first `calib_tasks` task ids (lexicographic)
/// calibrate the predictions, and RMSE over the remaining tasks is expressed
/// as a percentage of their mean actual time. Percentages are averaged over
/// users.
pub fn loso_cv(rows: &[DesignRow], options: &CvOptions) -> Result<CvReport> {
    let mut by_user: BTreeMap<&str, Vec<&DesignRow>> = BTreeMap::new();
    for r in rows {
        by_user.entry(r.user_id.as_str()).or_default().push(r);
    }
    if by_user.len() < 2 {
        return Err(FitError::TooFewUsers(by_user.len()));
    }
    for (user, user_rows) in &by_user {
        let tasks: BTreeSet<&str> = user_rows.iter().map(|r| r.task_id.as_str()).collect();
        if tasks.len() <= options.calib_tasks || options.calib_tasks < 2 {
            return Err(FitError::InsufficientTasks {
                user_id: user.to_string(),
                tasks: tasks.len(),
                needed: options.calib_tasks,
            });
        }
    }
    let mut kinds = vec![Predictor::CognitiveChain];
    kinds.extend(options.baselines.iter().copied().filter(|&k| k != Predictor::CognitiveChain));

    let mut folds = Vec::new();
    for (user, user_rows) in &by_user {
        let train: Vec<DesignRow> = rows.iter().filter(|r| r.user_id != *user).cloned().collect();
        let tasks = tasks_of(user_rows);
        let (calib, eval) = tasks.split_at(options.calib_tasks);
        let mut results = BTreeMap::new();
        for &kind in &kinds {
            results.insert(kind, predictor_fold(kind, user, &train, calib, eval)?);
        }
        folds.push(FoldReport {
            user_id: user.to_string(),
            calibration_tasks: calib.iter().map(|t| t.task_id.to_string()).collect(),
            results,
        });
    }
    let mean_over_users = |kind: Predictor| {
        folds.iter().map(|f| f.results[&kind].rmse_pct).sum::<f64>() / folds.len() as f64
    };
    let baseline_rmse_pct = kinds[1..]
        .iter()
        .map(|&k| (k.name().to_string(), mean_over_users(k)))
        .collect();
    Ok(CvReport {
        calib_tasks: options.calib_tasks,
        rmse_pct: mean_over_users(Predictor::CognitiveChain),
        baseline_rmse_pct,
        folds,
    })
}

/// In-sample fit of one predictor: step and task R².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InSampleScore {
    pub r2_step: f64,
    pub r2_task: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResidual {
    pub trace_id: String,
    pub step_index: usize,
    pub last_step_index: usize,
    pub target_ms: f64,
    pub fitted_ms: f64,
    pub residual_ms: f64,
}

/// Full-data fit with in-sample baseline scores and per-row residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fit: FitResult,
    pub unit_difficulty: FitResult,
    pub step_mean: InSampleScore,
    pub residuals: Vec<RowResidual>,
}

impl FitReport {
    pub fn compute(rows: &[DesignRow]) -> Result<Self> {
        let fit = fit_ols(rows)?;
        let unit_difficulty = fit_ols_with(rows, FeatureSet::Unit)?;
        let mean = rows.iter().map(|r| r.target_ms).sum::<f64>() / rows.len() as f64;
        let constant = vec![mean; rows.len()];
        let actual: Vec<f64> = rows.iter().map(|r| r.target_ms).collect();
        let step_mean = InSampleScore {
            r2_step: r2_or_zero(&actual, &constant)?,
            r2_task: task_r2(rows, &constant)?,
        };
        let residuals = rows
            .iter()
            .map(|r| {
                let fitted_ms = fit.predict_row(r);
                RowResidual {
                    trace_id: r.trace_id.clone(),
                    step_index: r.step_index,
                    last_step_index: r.last_step_index,
                    target_ms: r.target_ms,
                    fitted_ms,
                    residual_ms: r.target_ms - fitted_ms,
                }
            })
            .collect();
        Ok(Self {
            fit,
            unit_difficulty,
            step_mean,
            residuals,
        })
    }

    pub fn score(&self, kind: Predictor) -> InSampleScore {
        match kind {
            Predictor::CognitiveChain => InSampleScore {
                r2_step: self.fit.r2_step,
                r2_task: self.fit.r2_task,
            },
            Predictor::UnitDifficulty => InSampleScore {
                r2_step: self.unit_difficulty.r2_step,
                r2_task: self.unit_difficulty.r2_task,
            },
            Predictor::StepMean => self.step_mean.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{CogParams, CognitiveStep};
    use crate::trace::{MotorStep, StepKind};
    use approx::assert_relative_eq;
    use CognitiveType::*;

    fn row(trace: &str, user: &str, step: usize, feats: &[(CognitiveType, f64)], target: f64) -> DesignRow {
        let mut features: BTreeMap<_, _> = CognitiveType::FITTED.iter().map(|&t| (t, 0.0)).collect();
        let mut counts = features.clone();
        for &(t, v) in feats {
            features.insert(t, v);
            counts.insert(t, 1.0);
        }
        DesignRow {
            trace_id: trace.into(),
            user_id: user.into(),
            task_id: trace.into(),
            step_index: step,
            last_step_index: step,
            features,
            counts,
            target_ms: target,
        }
    }

    fn trace_with_gaps(gaps: &[u64]) -> Trace {
        let mut t = 0;
        let steps = gaps
            .iter()
            .enumerate()
            .map(|(i, g)| {
                t += g;
                let s = MotorStep {
                    step_index: i,
                    kind: StepKind::Click,
                    start_ts: t,
                    end_ts: t + 100,
                    source_events: vec![i],
                    semantic: None,
                    screenshot_ref: None,
                };
                t += 100;
                s
            })
            .collect();
        Trace::new("T1", "P1", steps, BTreeMap::new(), 0).unwrap()
    }

    #[test]
    fn empty_chain_row_is_all_zero() {
        let trace = trace_with_gaps(&[500]);
        let rows = design_rows(&trace, &[CognitiveChain::empty(0)], &ModelConfig::default()).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].features.values().all(|&v| v == 0.0));
        assert_eq!(rows[0].target_ms, 500.0);
    }

    #[test]
    fn features_match_independent_evaluation() {
        let trace = trace_with_gaps(&[500]);
        let chain = CognitiveChain::new(
            0,
            vec![
                CognitiveStep::new(Find, CogParams::n(3)),
                CognitiveStep::new(Verify, CogParams::m(1)),
            ],
        );
        let rows = design_rows(&trace, &[chain], &ModelConfig::default()).unwrap();
        assert_relative_eq!(rows[0].features[&Find], 4f64.ln());
        assert_relative_eq!(rows[0].features[&Verify], 2f64.ln());
        assert_eq!(rows[0].counts[&Find], 1.0);
    }

    #[test]
    fn spanned_row_sums_member_times() {
        let trace = trace_with_gaps(&[300, 700, 1100, 1900]);
        let mut chains: Vec<_> = (0..4).map(CognitiveChain::empty).collect();
        chains[1].steps.push(CognitiveStep {
            span: Some((1, 3)),
            ..CognitiveStep::new(Extract, CogParams::m(3))
        });
        let rows = design_rows(&trace, &chains, &ModelConfig::default()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].target_ms, 700.0 + 1100.0 + 1900.0);
        assert_eq!((rows[1].step_index, rows[1].last_step_index), (1, 3));
    }

    #[test]
    fn misaligned_chains_name_trace() {
        let trace = trace_with_gaps(&[300, 700]);
        let err = build_design_matrix(&[(trace, vec![CognitiveChain::empty(0)])], &ModelConfig::default()).unwrap_err();
        assert!(err.to_string().contains("P1_T1"), "{err}");
    }

    #[test]
    fn constant_targets_give_intercept_only() {
        let rows: Vec<_> = (0..5).map(|i| row("a", "u", i, &[], 1234.0)).collect();
        let fit = fit_ols(&rows).unwrap();
        assert_relative_eq!(fit.intercept_ms, 1234.0, max_relative = 1e-12);
        assert_eq!(fit.r2_step, 0.0);
        assert!(fit.k.is_empty());
        assert_eq!(fit.unfitted.len(), 9);
    }

    #[test]
    fn collinear_columns_are_reported() {
        let rows: Vec<_> = (0..6)
            .map(|i| {
                let x = i as f64 + 1.0;
                row("a", "u", i, &[(Find, x), (Extract, 2.0 * x)], 100.0 * x)
            })
            .collect();
        match fit_ols(&rows) {
            Err(FitError::RankDeficient { columns }) => assert_eq!(columns, ["Extract"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn too_few_rows() {
        let rows = vec![row("a", "u", 0, &[(Find, 1.0)], 1.0), row("a", "u", 1, &[(Find, 2.0)], 2.0)];
        assert!(matches!(fit_ols(&rows), Err(FitError::InsufficientRows { .. })));
    }

    #[test]
    fn r2_reference_points() {
        let a = [1.0, 2.0, 4.0, 7.0];
        assert_eq!(r2(&a, &a).unwrap(), 1.0);
        let mean = [3.5; 4];
        assert_relative_eq!(r2(&a, &mean).unwrap(), 0.0);
        assert!(matches!(r2(&[2.0, 2.0], &[1.0, 3.0]), Err(FitError::ZeroVariance)));
        assert!(r2(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn calibration_exact_lines() {
        let p = [1000.0, 2000.0, 3500.0];
        let id = calibrate_user("u", &p, &p).unwrap();
        assert_relative_eq!(id.alpha, 1.0);
        assert!(id.beta.abs() < 1e-9);
        let obs: Vec<f64> = p.iter().map(|x| 2.0 * x + 500.0).collect();
        let c = calibrate_user("u", &p, &obs).unwrap();
        assert_relative_eq!(c.alpha, 2.0, max_relative = 1e-12);
        assert_relative_eq!(c.beta, 500.0, max_relative = 1e-9);
        assert!(matches!(
            calibrate_user("u", &[5.0, 5.0], &[1.0, 2.0]),
            Err(FitError::DegenerateCalibration { .. })
        ));
        assert!(calibrate_user("u", &[5.0], &[1.0]).is_err());
    }

    #[test]
    fn step_mean_predicts_training_mean() {
        let train = vec![row("a", "u", 0, &[], 1000.0), row("a", "u", 1, &[], 3000.0)];
        let eval = vec![row("b", "v", 0, &[(Find, 5.0)], 10.0); 3];
        assert_eq!(baseline_predictions(Predictor::StepMean, &train, &eval).unwrap(), vec![2000.0; 3]);
    }

    #[test]
    fn loso_requires_enough_tasks() {
        let rows: Vec<_> = (0..4).map(|i| row(&format!("t{i}"), "u", 0, &[], 1.0)).collect();
        assert!(matches!(loso_cv(&rows, &CvOptions::default()), Err(FitError::TooFewUsers(1))));
        let mut two = rows.clone();
        two.extend((0..4).map(|i| row(&format!("t{i}"), "v", 0, &[], 1.0)));
        assert!(matches!(
            loso_cv(&two, &CvOptions::default()),
            Err(FitError::InsufficientTasks { .. })
        ));
    }
}
