//! The safeguarded alternating Anderson trainer.
//!
//! Each iteration optionally replaces the iterate with a moving average, evaluates
//! the residual, stores history on the storage schedule and then takes either a
//! plain fixed-point step or, on the acceleration schedule, an Anderson step that
//! is kept only if it strictly lowers the residual norm.

use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{HistoryBuffer, HistoryError};
use crate::linalg::{least_squares_in_place, DenseVector, LinalgError, TallMatrix};
use crate::smoothing::VarianceMonitor;

pub use crate::optimizers::{Evaluation, FixedPointOperator, OperatorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixingVariant {
    /// `w + β r − β (W + R) g`: the whole Anderson correction is scaled by β.
    #[default]
    Scaled,
    /// `w + β r − (W + β R) g`, the classical damped Anderson update.
    Damped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AccelerationConfig {
    /// Mixing weight in `[0, 1]`.
    pub beta: f64,
    /// Accelerate on iterations that are multiples of this period.
    pub acceleration_period: usize,
    /// Store history on iterations that are multiples of this period.
    pub storage_period: usize,
    /// Number of difference columns kept.
    pub history_depth: usize,
    /// Moving-average window; `None` means `min(3, history_depth)`.
    pub average_window: Option<usize>,
    /// Averaging stops once the window spread falls below this fraction of the residual.
    pub averaging_threshold: f64,
    /// Stop when the batch loss is at or below this value.
    pub loss_tolerance: f64,
    pub max_iterations: usize,
    pub mixing: MixingVariant,
    pub safeguard: bool,
    pub moving_average: bool,
    /// Once averaging switches off it stays off.
    pub latch_averaging: bool,
    pub clear_history_on_reject: bool,
    /// Restore the optimizer state consumed by a rejected candidate evaluation.
    pub rewind_on_reject: bool,
}

impl Default for AccelerationConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            acceleration_period: 1,
            storage_period: 1,
            history_depth: 5,
            average_window: None,
            averaging_threshold: 0.1,
            loss_tolerance: 0.0,
            max_iterations: 1000,
            mixing: MixingVariant::Scaled,
            safeguard: true,
            moving_average: true,
            latch_averaging: true,
            clear_history_on_reject: false,
            rewind_on_reject: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid `{field}`: {message}")]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError { field, message: message.into() }
}

impl AccelerationConfig {
    pub fn window_len(&self) -> usize {
        self.average_window.unwrap_or_else(|| self.history_depth.min(3))
    }

    /// Checks ranges and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(invalid("beta", format!("{} is outside [0, 1]", self.beta)));
        }
        if self.acceleration_period == 0 {
            return Err(invalid("acceleration_period", "must be at least 1"));
        }
        if self.storage_period == 0 {
            return Err(invalid("storage_period", "must be at least 1"));
        }
        if self.history_depth == 0 {
            return Err(invalid("history_depth", "must be at least 1"));
        }
        let t = self.window_len();
        if t == 0 {
            return Err(invalid("average_window", "must be at least 1"));
        }
        if t > self.history_depth {
            return Err(invalid(
                "average_window",
                format!("{t} exceeds history_depth {}", self.history_depth),
            ));
        }
        if !(self.averaging_threshold > 0.0 && self.averaging_threshold.is_finite()) {
            return Err(invalid("averaging_threshold", "must be positive and finite"));
        }
        if self.loss_tolerance.is_nan() || self.loss_tolerance < 0.0 {
            return Err(invalid("loss_tolerance", "must be non-negative"));
        }
        let mut warnings = Vec::new();
        if self.storage_period > self.acceleration_period {
            warnings.push(format!(
                "storage_period {} exceeds acceleration_period {}; some acceleration steps reuse stale history",
                self.storage_period, self.acceleration_period
            ));
        }
        Ok(warnings)
    }
}

/// True iff iteration `k` is on the acceleration schedule.
pub fn is_acceleration_step(k: usize, period: usize) -> bool {
    k >= 1 && period >= 1 && k.is_multiple_of(period)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AccelError {
    #[error("history holds no difference columns")]
    InsufficientHistory,
    #[error("history matrices have {w} and {r} columns")]
    ColumnMismatch { w: usize, r: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("extrapolation produced a non-finite value")]
    NonFinite,
}

impl From<LinalgError> for AccelError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::EmptyMatrix => AccelError::InsufficientHistory,
            LinalgError::DimensionMismatch { expected, found } => {
                AccelError::DimensionMismatch { expected, found }
            }
            _ => AccelError::NonFinite,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extrapolation {
    pub candidate: DenseVector,
    pub coefficients: Vec<f64>,
    pub degraded_rank: bool,
}

/// Anderson candidate from the current iterate, its residual and the
/// difference matrices `W` (iterates) and `R` (residuals).
pub fn anderson_extrapolate(
    w: &DenseVector,
    r: &DenseVector,
    w_diffs: &TallMatrix,
    r_diffs: &TallMatrix,
    beta: f64,
    mixing: MixingVariant,
) -> Result<Extrapolation, AccelError> {
    if w_diffs.cols() != r_diffs.cols() {
        return Err(AccelError::ColumnMismatch { w: w_diffs.cols(), r: r_diffs.cols() });
    }
    let w_cols: Vec<&[f64]> = w_diffs.columns().collect();
    let r_cols: Vec<&[f64]> = r_diffs.columns().collect();
    extrapolate_columns(w, r, &w_cols, &r_cols, beta, mixing, &mut AndersonWorkspace::default())
}

/// Buffers reused across Anderson steps, so repeated extrapolation at a
/// fixed size allocates only the candidate.
#[derive(Debug, Default)]
pub struct AndersonWorkspace {
    matrix: Option<TallMatrix>,
    rhs: Vec<f64>,
}

impl AndersonWorkspace {
    /// Same as [`anderson_extrapolate`], with the difference columns given as slices.
    pub fn extrapolate(
        &mut self,
        w: &DenseVector,
        r: &DenseVector,
        w_cols: &[&[f64]],
        r_cols: &[&[f64]],
        beta: f64,
        mixing: MixingVariant,
    ) -> Result<Extrapolation, AccelError> {
        extrapolate_columns(w, r, w_cols, r_cols, beta, mixing, self)
    }
}

fn extrapolate_columns(
    w: &DenseVector,
    r: &DenseVector,
    w_cols: &[&[f64]],
    r_cols: &[&[f64]],
    beta: f64,
    mixing: MixingVariant,
    ws: &mut AndersonWorkspace,
) -> Result<Extrapolation, AccelError> {
    if w_cols.is_empty() || r_cols.is_empty() {
        return Err(AccelError::InsufficientHistory);
    }
    if w_cols.len() != r_cols.len() {
        return Err(AccelError::ColumnMismatch { w: w_cols.len(), r: r_cols.len() });
    }
    let n = w.len();
    let lengths = w_cols.iter().chain(r_cols).map(|c| c.len());
    for found in std::iter::once(r.len()).chain(lengths) {
        if found != n {
            return Err(AccelError::DimensionMismatch { expected: n, found });
        }
    }

    let matrix = ws.matrix.get_or_insert_with(|| TallMatrix::with_rows(n));
    matrix.clear(n);
    for c in r_cols {
        matrix.push_column(c)?;
    }
    ws.rhs.clear();
    ws.rhs.extend_from_slice(r);
    let ls = least_squares_in_place(matrix, &mut ws.rhs)?;

    // Weight on the W g term; the R g term is always scaled by beta.
    let w_weight = match mixing {
        MixingVariant::Scaled => beta,
        MixingVariant::Damped => 1.0,
    };
    let mut out: Vec<f64> = w.iter().zip(r.iter()).map(|(wi, ri)| wi + beta * ri).collect();
    for ((wc, rc), &g) in w_cols.iter().zip(r_cols).zip(&ls.coefficients) {
        if g == 0.0 {
            continue;
        }
        let (a, b) = (w_weight * g, beta * g);
        for ((o, x), y) in out.iter_mut().zip(wc.iter()).zip(rc.iter()) {
            *o -= a * x + b * y;
        }
    }
    let candidate = DenseVector::new(out).map_err(|_| AccelError::NonFinite)?;
    Ok(Extrapolation { candidate, coefficients: ls.coefficients, degraded_rank: ls.degraded_rank })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Plain,
    AcceleratedAccepted,
    AcceleratedRejected,
    /// Accelerated with the safeguard disabled; the candidate is never evaluated.
    AcceleratedUnguarded,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Plain => "plain",
            StepKind::AcceleratedAccepted => "accelerated_accepted",
            StepKind::AcceleratedRejected => "accelerated_rejected",
            StepKind::AcceleratedUnguarded => "accelerated_unguarded",
        }
    }

    pub fn is_accelerated(self) -> bool {
        self != StepKind::Plain
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub kind: StepKind,
    pub residual_norm_before: f64,
    /// Residual norm at the Anderson candidate, when it was evaluated.
    pub residual_norm_after: Option<f64>,
    pub ma_applied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Completed data passes after this iteration.
    pub epoch: usize,
    /// Batch loss at the iterate the residual was evaluated at.
    pub loss: f64,
    pub outcome: StepOutcome,
    /// Whether averaging remains enabled after this iteration.
    pub ma_active: bool,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    LossTolerance,
    MaxIterations,
    Observer,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("initial iterate has length {found}, operator expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("initial iterate is not finite")]
    NonFiniteStart,
    #[error("operator failed at iteration {iteration}: {source}")]
    Operator {
        iteration: usize,
        #[source]
        source: OperatorError,
    },
    #[error("iterate became non-finite at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    History(#[from] HistoryError),
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: DenseVector,
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    /// Batch loss at the final evaluation.
    pub final_loss: f64,
}

/// Step-by-step driver; [`train`] runs one to completion.
pub struct Trainer<O: FixedPointOperator> {
    operator: O,
    cfg: AccelerationConfig,
    w: DenseVector,
    iteration: usize,
    last_residual: Option<DenseVector>,
    last_loss: f64,
    history: HistoryBuffer,
    monitor: Option<VarianceMonitor>,
    started: Instant,
    stopped: Option<StopReason>,
    workspace: AndersonWorkspace,
}

impl<O: FixedPointOperator> Trainer<O> {
    pub fn new(operator: O, w0: DenseVector, cfg: AccelerationConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if w0.len() != operator.dim() {
            return Err(TrainError::DimensionMismatch { expected: operator.dim(), found: w0.len() });
        }
        if !w0.iter().all(|x| x.is_finite()) {
            return Err(TrainError::NonFiniteStart);
        }
        let monitor = cfg
            .moving_average
            .then(|| VarianceMonitor::new(cfg.window_len(), cfg.averaging_threshold, cfg.latch_averaging));
        Ok(Self {
            history: HistoryBuffer::new(cfg.history_depth),
            operator,
            w: w0,
            iteration: 0,
            last_residual: None,
            last_loss: f64::NAN,
            monitor,
            started: Instant::now(),
            stopped: None,
            workspace: AndersonWorkspace::default(),
            cfg,
        })
    }

    pub fn weights(&self) -> &DenseVector {
        &self.w
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn operator(&self) -> &O {
        &self.operator
    }

    pub fn operator_mut(&mut self) -> &mut O {
        &mut self.operator
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    pub fn config(&self) -> &AccelerationConfig {
        &self.cfg
    }

    pub fn stop_reason(&self) -> Option<StopReason> {
        self.stopped
    }

    pub fn into_operator(self) -> O {
        self.operator
    }

    fn evaluate(&mut self, at: &DenseVector) -> Result<Evaluation, TrainError> {
        let iteration = self.iteration;
        self.operator.evaluate(at).map_err(|source| TrainError::Operator { iteration, source })
    }

    /// Runs one iteration. Returns `None` once a stopping rule has fired.
    pub fn step(&mut self) -> Result<Option<IterationRecord>, TrainError> {
        if self.stopped.is_some() {
            return Ok(None);
        }
        if self.iteration >= self.cfg.max_iterations {
            self.stopped = Some(StopReason::MaxIterations);
            return Ok(None);
        }
        let k = self.iteration;
        self.operator.begin_iteration(k);

        let ma_applied = match self.monitor.as_mut() {
            Some(m) => m.apply(&mut self.w, self.last_residual.as_ref()),
            None => false,
        };

        let Evaluation { residual, loss } = self.evaluate(&self.w.clone())?;
        self.last_loss = loss;
        if loss <= self.cfg.loss_tolerance {
            self.stopped = Some(StopReason::LossTolerance);
            self.last_residual = Some(residual);
            return Ok(None);
        }
        let before = residual.norm_l2();

        if k.is_multiple_of(self.cfg.storage_period) {
            self.history.push(&self.w, &residual)?;
        }

        let plain = |w: &DenseVector, r: &DenseVector| -> Result<DenseVector, TrainError> {
            w.add(r).map_err(|_| TrainError::NonFinite { iteration: k })
        };

        let accelerate = is_acceleration_step(k, self.cfg.acceleration_period) && self.history.columns() > 0;
        let (next, kind, after) = if !accelerate {
            (plain(&self.w, &residual)?, StepKind::Plain, None)
        } else {
            let w_cols: Vec<&[f64]> = self.history.w_columns().map(|c| c.as_slice()).collect();
            let r_cols: Vec<&[f64]> = self.history.r_columns().map(|c| c.as_slice()).collect();
            let candidate = extrapolate_columns(
                &self.w,
                &residual,
                &w_cols,
                &r_cols,
                self.cfg.beta,
                self.cfg.mixing,
                &mut self.workspace,
            )
            .ok()
            .map(|e| e.candidate);
            if !self.cfg.safeguard {
                match candidate {
                    Some(c) => (c, StepKind::AcceleratedUnguarded, None),
                    None => return Err(TrainError::NonFinite { iteration: k }),
                }
            } else {
                match candidate {
                    None => (plain(&self.w, &residual)?, StepKind::AcceleratedRejected, None),
                    Some(c) => {
                        let saved = self.cfg.rewind_on_reject.then(|| self.operator.checkpoint());
                        let after = match self.operator.evaluate(&c) {
                            Ok(e) => e.residual.norm_l2(),
                            Err(OperatorError::NonFinite) => f64::NAN,
                            Err(source) => return Err(TrainError::Operator { iteration: k, source }),
                        };
                        if after.is_finite() && after < before {
                            (c, StepKind::AcceleratedAccepted, Some(after))
                        } else {
                            if let Some(s) = saved {
                                self.operator.restore(s);
                            }
                            if self.cfg.clear_history_on_reject {
                                self.history.reset();
                            }
                            (plain(&self.w, &residual)?, StepKind::AcceleratedRejected, Some(after))
                        }
                    }
                }
            }
        };

        self.w = next;
        self.last_residual = Some(residual);
        self.iteration += 1;
        Ok(Some(IterationRecord {
            iteration: k,
            epoch: self.operator.epoch(),
            loss,
            outcome: StepOutcome {
                kind,
                residual_norm_before: before,
                residual_norm_after: after,
                ma_applied,
            },
            ma_active: self.monitor.as_ref().is_some_and(|m| m.is_active()),
            elapsed: self.started.elapsed(),
        }))
    }

    /// Iterates until a stopping rule fires or `observer` breaks. The observer
    /// sees each record together with the iterate produced by that step.
    pub fn run<F>(mut self, mut observer: F) -> Result<TrainOutput, TrainError>
    where
        F: FnMut(&IterationRecord, &DenseVector) -> ControlFlow<()>,
    {
        let mut records = Vec::with_capacity(self.cfg.max_iterations.min(1 << 20));
        while let Some(rec) = self.step()? {
            records.push(rec);
            if observer(&rec, &self.w).is_break() {
                self.stopped = Some(StopReason::Observer);
                break;
            }
        }
        Ok(TrainOutput {
            weights: self.w,
            records,
            stop: self.stopped.unwrap_or(StopReason::MaxIterations),
            final_loss: self.last_loss,
        })
    }
}

pub fn train<O, F>(
    operator: O,
    w0: DenseVector,
    cfg: &AccelerationConfig,
    observer: F,
) -> Result<TrainOutput, TrainError>
where
    O: FixedPointOperator,
    F: FnMut(&IterationRecord, &DenseVector) -> ControlFlow<()>,
{
    Trainer::new(operator, w0, cfg.clone())?.run(observer)
}
