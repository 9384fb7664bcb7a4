//! First-order stochastic optimizers written as fixed-point residuals.
//!
//! Each optimizer maps the current weights and a batch gradient to a residual
//! `r` such that the plain update is `w + r`. [`StochasticGradientOperator`]
//! binds an optimizer to a model, a dataset and a batch sampler and is the
//! [`FixedPointOperator`] the trainer drives.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BatchSampler, Dataset};
use crate::linalg::DenseVector;
use crate::models::{GradientModel, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("operator produced a non-finite residual or loss")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Result of one operator evaluation at `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `G(w) - w`.
    pub residual: DenseVector,
    /// Batch loss at the point where the gradient was taken.
    pub loss: f64,
}

/// A (possibly stochastic) fixed-point map `w -> w + r`.
///
/// Every call to [`evaluate`](Self::evaluate) consumes one batch draw and
/// advances internal optimizer state.
pub trait FixedPointOperator {
    /// Opaque snapshot of the internal optimizer state.
    type Checkpoint;

    fn dim(&self) -> usize;

    fn evaluate(&mut self, w: &DenseVector) -> Result<Evaluation, OperatorError>;

    /// Completed passes over the data, for operators that have data.
    fn epoch(&self) -> usize {
        0
    }

    /// Called by the trainer before each iteration. Operators with schedules
    /// use it as their clock, so candidate evaluations do not advance them.
    fn begin_iteration(&mut self, _iteration: usize) {}

    fn checkpoint(&self) -> Self::Checkpoint;

    fn restore(&mut self, checkpoint: Self::Checkpoint);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleUnit {
    #[default]
    Iterations,
    Epochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `initial * factor^(floor(clock / every))`, where the clock counts
    /// iterations or epochs.
    StepDecay {
        initial: f64,
        factor: f64,
        every: usize,
        #[serde(default)]
        unit: ScheduleUnit,
    },
    /// `initial * factor^j` once the clock has passed `j` of the milestones.
    Milestones {
        initial: f64,
        factor: f64,
        at: Vec<usize>,
        #[serde(default)]
        unit: ScheduleUnit,
    },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant { lr: 0.01 }
    }
}

impl ScheduleUnit {
    fn pick(self, iteration: usize, epoch: usize) -> usize {
        match self {
            ScheduleUnit::Iterations => iteration,
            ScheduleUnit::Epochs => epoch,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, iteration: usize, epoch: usize) -> f64 {
        let decayed = |initial: f64, factor: f64, drops: usize| {
            initial * factor.powi(drops.min(i32::MAX as usize) as i32)
        };
        match self {
            LrSchedule::Constant { lr } => *lr,
            LrSchedule::StepDecay { initial, factor, every, unit } => {
                decayed(*initial, *factor, unit.pick(iteration, epoch) / (*every).max(1))
            }
            LrSchedule::Milestones { initial, factor, at, unit } => {
                let clock = unit.pick(iteration, epoch);
                decayed(*initial, *factor, at.iter().filter(|&&m| clock >= m).count())
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if let LrSchedule::Milestones { initial, factor, at, .. } = self {
            if !(*initial > 0.0 && initial.is_finite() && *factor > 0.0 && factor.is_finite()) {
                return Err("initial and factor must be positive".into());
            }
            if at.windows(2).any(|p| p[0] >= p[1]) {
                return Err("milestones must be strictly increasing".into());
            }
            return Ok(());
        }
        match *self {
            LrSchedule::Constant { lr } if !(lr > 0.0 && lr.is_finite()) => Err("lr must be positive".into()),
            LrSchedule::StepDecay { initial, factor, every, .. } => {
                if !(initial > 0.0 && initial.is_finite()) {
                    Err("initial must be positive".into())
                } else if !(factor > 0.0 && factor.is_finite()) {
                    Err("factor must be positive".into())
                } else if every == 0 {
                    Err("every must be at least 1".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Plain SGD: `r = -lr * grad`.
pub fn sgd_residual(grad: &[f64], lr: f64) -> Vec<f64> {
    grad.iter().map(|g| -lr * g).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NesterovState {
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl NesterovState {
    pub fn new(n: usize, momentum: f64) -> Self {
        Self { momentum, velocity: vec![0.0; n] }
    }
}

/// Classical Nesterov momentum: the gradient is taken at the lookahead point
/// `w + mu * v`, then `v <- mu * v - lr * grad` and `r = v`.
///
/// Returns the loss at the lookahead point and the residual.
pub fn nesterov_residual<E>(
    w: &[f64],
    mut grad_fn: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    lr: f64,
    state: &mut NesterovState,
) -> Result<(f64, Vec<f64>), E> {
    let mu = state.momentum;
    let lookahead: Vec<f64> = w.iter().zip(&state.velocity).map(|(x, v)| x + mu * v).collect();
    let (loss, grad) = grad_fn(&lookahead)?;
    for (v, g) in state.velocity.iter_mut().zip(&grad) {
        *v = mu * *v - lr * g;
    }
    Ok((loss, state.velocity.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: i32,
}

impl AdamState {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Bias-corrected Adam step as a residual.
pub fn adam_residual(grad: &[f64], lr: f64, state: &mut AdamState) -> Vec<f64> {
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step);
    let c2 = 1.0 - b2.powi(state.step);
    let mut r = Vec::with_capacity(grad.len());
    for ((m, v), &g) in state.m.iter_mut().zip(state.v.iter_mut()).zip(grad) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        r.push(-lr * m_hat / (v_hat.sqrt() + state.eps));
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Nesterov {
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn nesterov() -> Self {
        OptimizerKind::Nesterov { momentum: 0.9 }
    }

    pub fn validate(&self) -> Result<(), String> {
        match *self {
            OptimizerKind::Sgd => Ok(()),
            OptimizerKind::Nesterov { momentum } if !(0.0..1.0).contains(&momentum) => {
                Err("momentum must be in [0, 1)".into())
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                    Err("beta1 and beta2 must be in [0, 1)".into())
                } else if eps.is_nan() || eps <= 0.0 {
                    Err("eps must be positive".into())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn build(&self, n: usize) -> Optimizer {
        match *self {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Nesterov { momentum } => Optimizer::Nesterov(NesterovState::new(n, momentum)),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                Optimizer::Adam(AdamState::new(n, beta1, beta2, eps))
            }
        }
    }
}

/// An optimizer together with its state.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Nesterov(NesterovState),
    Adam(AdamState),
}

impl Optimizer {
    /// Computes `(loss, r)` at `w`; `grad_fn` returns the batch loss and gradient.
    pub fn residual<E>(
        &mut self,
        w: &[f64],
        lr: f64,
        mut grad_fn: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
    ) -> Result<(f64, Vec<f64>), E> {
        match self {
            Optimizer::Sgd => {
                let (loss, g) = grad_fn(w)?;
                Ok((loss, sgd_residual(&g, lr)))
            }
            Optimizer::Nesterov(state) => nesterov_residual(w, grad_fn, lr, state),
            Optimizer::Adam(state) => {
                let (loss, g) = grad_fn(w)?;
                Ok((loss, adam_residual(&g, lr, state)))
            }
        }
    }
}

/// Mini-batch training of a [`GradientModel`] as a stochastic fixed-point map.
#[derive(Debug, Clone)]
pub struct StochasticGradientOperator<M> {
    model: M,
    data: Arc<Dataset>,
    sampler: BatchSampler,
    rng: ChaCha8Rng,
    optimizer: Optimizer,
    schedule: LrSchedule,
    evaluations: usize,
    /// Trainer iteration, when a trainer drives this operator.
    iteration: Option<usize>,
    batch_inputs: Vec<f64>,
    batch_targets: Vec<f64>,
}

impl<M: GradientModel> StochasticGradientOperator<M> {
    pub fn new(
        model: M,
        data: Arc<Dataset>,
        sampler: BatchSampler,
        optimizer: OptimizerKind,
        schedule: LrSchedule,
        seed: u64,
    ) -> Self {
        let optimizer = optimizer.build(model.num_params());
        Self {
            model,
            data,
            sampler,
            rng: ChaCha8Rng::seed_from_u64(seed),
            optimizer,
            schedule,
            evaluations: 0,
            iteration: None,
            batch_inputs: Vec::new(),
            batch_targets: Vec::new(),
        }
    }

    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    /// Learning rate for the next evaluation. Under a trainer the schedule
    /// follows trainer iterations and `iterations / batches_per_epoch` epochs;
    /// standalone it follows evaluations and completed data passes.
    pub fn current_lr(&self) -> f64 {
        match self.iteration {
            Some(k) => self.schedule.lr(k, k / self.sampler.batches_per_epoch()),
            None => self.schedule.lr(self.evaluations, self.sampler.epoch()),
        }
    }
}

impl<M: GradientModel> FixedPointOperator for StochasticGradientOperator<M> {
    type Checkpoint = Optimizer;

    fn dim(&self) -> usize {
        self.model.num_params()
    }

    fn evaluate(&mut self, w: &DenseVector) -> Result<Evaluation, OperatorError> {
        if w.len() != self.dim() {
            return Err(OperatorError::DimensionMismatch { expected: self.dim(), found: w.len() });
        }
        let lr = self.current_lr();
        let batch = self.sampler.next_batch(&mut self.rng);
        self.data.gather(&batch, &mut self.batch_inputs, &mut self.batch_targets);
        let (model, xs, ys) = (&self.model, &self.batch_inputs, &self.batch_targets);
        let (loss, r) = self.optimizer.residual(w, lr, |p| model.loss_grad(p, xs, ys))?;
        self.evaluations += 1;
        if !loss.is_finite() {
            return Err(OperatorError::NonFinite);
        }
        let residual = DenseVector::new(r).map_err(|_| OperatorError::NonFinite)?;
        Ok(Evaluation { residual, loss })
    }

    fn epoch(&self) -> usize {
        self.sampler.epoch()
    }

    fn begin_iteration(&mut self, iteration: usize) {
        self.iteration = Some(iteration);
    }

    fn checkpoint(&self) -> Optimizer {
        self.optimizer.clone()
    }

    fn restore(&mut self, checkpoint: Optimizer) {
        self.optimizer = checkpoint;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_regression, SamplingStrategy};
    use crate::models::{Activation, LossKind, Mlp, MlpSpec};

    #[test]
    fn sgd_examples() {
        assert_eq!(sgd_residual(&[2.0], 0.5), vec![-1.0]);
        assert_eq!(sgd_residual(&[0.0, 0.0], 0.5), vec![0.0, 0.0]);
    }

    #[test]
    fn sgd_on_quadratic_decays_geometrically() {
        // loss 0.5 * w^2, grad = w
        let mut w = 1.0_f64;
        for k in 1..=50 {
            w += sgd_residual(&[w], 0.1)[0];
            let exact = 0.9_f64.powi(k);
            assert!((w - exact).abs() <= 1e-13 * exact, "step {k}: {w} vs {exact}");
        }
    }

    fn quad_grad(x: &[f64]) -> Result<(f64, Vec<f64>), ()> {
        Ok((0.5 * x.iter().map(|v| v * v).sum::<f64>(), x.to_vec()))
    }

    #[test]
    fn nesterov_without_momentum_is_sgd() {
        let mut st = NesterovState::new(2, 0.0);
        let w = [0.3, -1.2];
        let (_, r) = nesterov_residual(&w, quad_grad, 0.1, &mut st).unwrap();
        assert_eq!(r, sgd_residual(&w, 0.1));
    }

    #[test]
    fn nesterov_first_step_uses_lookahead() {
        let mut st = NesterovState::new(1, 0.9);
        // velocity starts at zero so the lookahead is w itself
        let (_, r) = nesterov_residual(&[2.0], quad_grad, 0.1, &mut st).unwrap();
        assert_eq!(r, vec![-0.2]);
        // second step: lookahead = w + 0.9 * v
        let w1 = 2.0 - 0.2;
        let look = w1 + 0.9 * -0.2;
        let (_, r) = nesterov_residual(&[w1], quad_grad, 0.1, &mut st).unwrap();
        assert!((r[0] - (0.9 * -0.2 - 0.1 * look)).abs() < 1e-15);
    }

    #[test]
    fn nesterov_velocity_under_constant_gradient() {
        let mut st = NesterovState::new(1, 0.9);
        let g = 3.0;
        let lr = 0.01;
        let constant = |_: &[f64]| -> Result<(f64, Vec<f64>), ()> { Ok((0.0, vec![g])) };
        let mut r = vec![0.0];
        for k in 1..=200 {
            r = nesterov_residual(&[0.0], constant, lr, &mut st).unwrap().1;
            // partial geometric series -lr*g*(1 - mu^k)/(1 - mu)
            let expected = -lr * g * (1.0 - 0.9_f64.powi(k)) / (1.0 - 0.9);
            assert!((r[0] - expected).abs() < 1e-12);
        }
        assert!((r[0] + lr * g / (1.0 - 0.9)).abs() < 1e-8);
    }

    #[test]
    fn adam_first_step() {
        let mut st = AdamState::new(1, 0.9, 0.999, 1e-8);
        let r = adam_residual(&[1.0], 0.02, &mut st);
        // m_hat = 1, v_hat = 1
        assert!((r[0] + 0.02 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_still() {
        let mut st = AdamState::new(3, 0.9, 0.999, 1e-8);
        for _ in 0..10 {
            assert_eq!(adam_residual(&[0.0; 3], 0.02, &mut st), vec![0.0; 3]);
        }
    }

    #[test]
    fn adam_decreases_quadratic_bowl() {
        let scales = [1.0, 4.0, 0.25];
        let loss = |w: &[f64]| -> f64 { w.iter().zip(&scales).map(|(x, s)| 0.5 * s * x * x).sum() };
        let mut w = vec![1.0, -1.0, 2.0];
        let mut st = AdamState::new(3, 0.9, 0.999, 1e-8);
        let mut prev = loss(&w);
        for _ in 0..100 {
            let g: Vec<f64> = w.iter().zip(&scales).map(|(x, s)| s * x).collect();
            let r = adam_residual(&g, 0.02, &mut st);
            w.iter_mut().zip(&r).for_each(|(x, d)| *x += d);
            let l = loss(&w);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn schedules() {
        let s = LrSchedule::StepDecay { initial: 0.02, factor: 0.2, every: 1000, unit: ScheduleUnit::Epochs };
        assert_eq!(s.lr(5_000_000, 999), 0.02);
        assert!((s.lr(0, 1000) - 4e-3).abs() < 1e-18);
        let s =
            LrSchedule::StepDecay { initial: 1.0, factor: 0.5, every: 10, unit: ScheduleUnit::Iterations };
        assert_eq!(s.lr(25, 0), 0.25);
        assert!(LrSchedule::Constant { lr: 0.0 }.validate().is_err());
        let s = LrSchedule::Milestones {
            initial: 1.0,
            factor: 0.1,
            at: vec![30, 60, 80],
            unit: ScheduleUnit::Epochs,
        };
        assert_eq!(s.lr(0, 29), 1.0);
        assert!((s.lr(0, 60) - 0.01).abs() < 1e-15);
        assert!((s.lr(0, 500) - 1e-3).abs() < 1e-15);
        let bad =
            LrSchedule::Milestones { initial: 1.0, factor: 0.1, at: vec![5, 5], unit: ScheduleUnit::Epochs };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trainer_clock_drives_schedule() {
        let mut op = small_operator(OptimizerKind::Sgd, 0);
        op.schedule =
            LrSchedule::StepDecay { initial: 1.0, factor: 0.5, every: 2, unit: ScheduleUnit::Epochs };
        // 64 rows, batch 16: 4 batches per epoch
        let w = DenseVector::zeros(op.dim());
        for _ in 0..20 {
            op.evaluate(&w).unwrap();
        }
        assert_eq!(op.current_lr(), 0.25);
        op.begin_iteration(7);
        assert_eq!(op.current_lr(), 1.0);
        op.begin_iteration(8);
        assert_eq!(op.current_lr(), 0.5);
    }

    fn small_operator(kind: OptimizerKind, seed: u64) -> StochasticGradientOperator<Mlp> {
        let data = Arc::new(synthetic_regression(64, 3, 0.0, 5).unwrap());
        let spec = MlpSpec { layer_sizes: vec![3, 6, 1], activation: Activation::Tanh, init_seed: 1 };
        let model = Mlp::new(spec, LossKind::Mse).unwrap();
        let sampler = BatchSampler::new(64, 16, SamplingStrategy::ShuffleEachEpoch).unwrap();
        StochasticGradientOperator::new(model, data, sampler, kind, LrSchedule::Constant { lr: 0.01 }, seed)
    }

    #[test]
    fn operator_is_deterministic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::nesterov(), OptimizerKind::adam()] {
            let mut a = small_operator(kind, 3);
            let mut b = small_operator(kind, 3);
            let mut w = a.model().init_params();
            for _ in 0..20 {
                let ea = a.evaluate(&w).unwrap();
                let eb = b.evaluate(&w).unwrap();
                assert_eq!(ea, eb);
                w = w.add(&ea.residual).unwrap();
            }
            assert_eq!(a.epoch(), 5);
        }
    }

    #[test]
    fn sgd_residual_is_descent_direction() {
        let mut op = small_operator(OptimizerKind::Sgd, 9);
        let mut w = op.model().init_params();
        let mut descents = 0;
        let total = 200;
        for _ in 0..total {
            // Replay the same batch: gather it through a checkpointed clone.
            let mut probe = op.clone();
            let e = op.evaluate(&w).unwrap();
            let next = w.add(&e.residual).unwrap();
            let after = probe.evaluate(&next).unwrap().loss;
            if after < e.loss {
                descents += 1;
            }
            w = next;
        }
        assert!(descents as f64 >= 0.99 * total as f64, "{descents}/{total}");
    }
}
