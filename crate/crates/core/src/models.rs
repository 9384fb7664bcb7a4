//! Trainable problems: multilayer perceptrons with hand-written backprop,
//! logistic regression (a single-layer perceptron with a cross-entropy loss),
//! and stationary affine maps used as an exactness testbed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::DenseVector;
use crate::optimizers::{Evaluation, FixedPointOperator, OperatorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("an MLP needs at least two layers (input and output)")]
    TooFewLayers,
    #[error("layer sizes must be positive")]
    EmptyLayer,
    #[error("expected {expected} values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite value in model input or output")]
    NonFinite,
    #[error("affine map is not a contraction (norm estimate {0:.6})")]
    NotContractive(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// The relu derivative at exactly zero is taken as zero.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Batch mean of the squared error summed over outputs.
    #[default]
    Mse,
    /// Batch mean of the sigmoid cross-entropy summed over outputs; targets in [0, 1].
    LogisticCrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init_seed: u64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_sizes.len() < 2 {
            return Err(ModelError::TooFewLayers);
        }
        if self.layer_sizes.contains(&0) {
            return Err(ModelError::EmptyLayer);
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes.windows(2).map(|p| (p[0] + 1) * p[1]).sum()
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }
}

/// A model that can report its batch loss and gradient.
pub trait GradientModel {
    fn num_params(&self) -> usize;

    /// `inputs` and `targets` are row-major batches.
    fn loss_grad(&self, w: &[f64], inputs: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>), ModelError>;

    fn loss(&self, w: &[f64], inputs: &[f64], targets: &[f64]) -> Result<f64, ModelError>;
}

/// Fully connected network. Parameters are laid out layer by layer, each as
/// an `out x in` row-major weight block followed by `out` biases. Hidden
/// layers use the configured activation; the output layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    loss: LossKind,
    offsets: Vec<usize>,
}

struct ForwardPass {
    /// Layer outputs, `activations[0]` is the input batch.
    activations: Vec<Vec<f64>>,
    /// Pre-activations per layer (index l is the input of layer l + 1).
    pre: Vec<Vec<f64>>,
    rows: usize,
}

impl Mlp {
    pub fn new(spec: MlpSpec, loss: LossKind) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut offsets = Vec::with_capacity(spec.layer_sizes.len());
        let mut acc = 0;
        for p in spec.layer_sizes.windows(2) {
            offsets.push(acc);
            acc += (p[0] + 1) * p[1];
        }
        Ok(Self { spec, loss, offsets })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    /// Seeded uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// for both weights and biases.
    pub fn init_params(&self) -> DenseVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.init_seed);
        let mut w = Vec::with_capacity(self.spec.num_params());
        for p in self.spec.layer_sizes.windows(2) {
            let bound = 1.0 / (p[0] as f64).sqrt();
            for _ in 0..(p[0] + 1) * p[1] {
                w.push(rng.random_range(-bound..=bound));
            }
        }
        DenseVector::new(w).expect("finite init")
    }

    fn check(&self, w: &[f64], inputs: &[f64]) -> Result<usize, ModelError> {
        if w.len() != self.spec.num_params() {
            return Err(ModelError::DimensionMismatch { expected: self.spec.num_params(), found: w.len() });
        }
        let c = self.spec.inputs();
        if inputs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if !inputs.len().is_multiple_of(c) {
            return Err(ModelError::DimensionMismatch { expected: c, found: inputs.len() % c });
        }
        if !inputs.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(inputs.len() / c)
    }

    fn run_forward(&self, w: &[f64], inputs: &[f64], rows: usize) -> ForwardPass {
        let sizes = &self.spec.layer_sizes;
        let layers = sizes.len() - 1;
        let mut activations = Vec::with_capacity(sizes.len());
        let mut pre = Vec::with_capacity(layers);
        activations.push(inputs.to_vec());
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let weights = &w[self.offsets[l]..self.offsets[l] + fan_in * fan_out];
            let biases = &w[self.offsets[l] + fan_in * fan_out..self.offsets[l] + (fan_in + 1) * fan_out];
            let prev = &activations[l];
            let mut z = vec![0.0; rows * fan_out];
            for i in 0..rows {
                let a = &prev[i * fan_in..(i + 1) * fan_in];
                let zi = &mut z[i * fan_out..(i + 1) * fan_out];
                for (o, zo) in zi.iter_mut().enumerate() {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    *zo = biases[o] + row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
                }
            }
            let out = if l + 1 == layers {
                z.clone()
            } else {
                z.iter().map(|&v| self.spec.activation.apply(v)).collect()
            };
            pre.push(z);
            activations.push(out);
        }
        ForwardPass { activations, pre, rows }
    }

    /// Predictions for a row-major input batch.
    pub fn forward(&self, w: &[f64], inputs: &[f64]) -> Result<Vec<f64>, ModelError> {
        let rows = self.check(w, inputs)?;
        let mut pass = self.run_forward(w, inputs, rows);
        Ok(pass.activations.pop().expect("output layer"))
    }

    /// Loss value and `dLoss/dOutput` for every output entry.
    fn loss_and_output_grad(&self, out: &[f64], targets: &[f64], rows: usize) -> (f64, Vec<f64>) {
        let inv = 1.0 / rows as f64;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(out.len());
        match self.loss {
            LossKind::Mse => {
                for (z, y) in out.iter().zip(targets) {
                    let d = z - y;
                    loss += d * d;
                    grad.push(2.0 * d * inv);
                }
            }
            LossKind::LogisticCrossEntropy => {
                for (&z, &y) in out.iter().zip(targets) {
                    // softplus(z) - y z, evaluated stably
                    loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
                    let sigma = 1.0 / (1.0 + (-z).exp());
                    grad.push((sigma - y) * inv);
                }
            }
        }
        (loss * inv, grad)
    }

    fn check_targets(&self, rows: usize, targets: &[f64]) -> Result<(), ModelError> {
        let expected = rows * self.spec.outputs();
        if targets.len() != expected {
            return Err(ModelError::DimensionMismatch { expected, found: targets.len() });
        }
        if !targets.iter().all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok(())
    }
}

impl GradientModel for Mlp {
    fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    fn loss(&self, w: &[f64], inputs: &[f64], targets: &[f64]) -> Result<f64, ModelError> {
        let rows = self.check(w, inputs)?;
        self.check_targets(rows, targets)?;
        let pass = self.run_forward(w, inputs, rows);
        let out = pass.activations.last().expect("output layer");
        let (loss, _) = self.loss_and_output_grad(out, targets, rows);
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(ModelError::NonFinite)
        }
    }

    fn loss_grad(&self, w: &[f64], inputs: &[f64], targets: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        let rows = self.check(w, inputs)?;
        self.check_targets(rows, targets)?;
        let pass = self.run_forward(w, inputs, rows);
        let sizes = &self.spec.layer_sizes;
        let layers = sizes.len() - 1;
        let (loss, mut delta) =
            self.loss_and_output_grad(pass.activations.last().expect("output"), targets, pass.rows);

        let mut grad = vec![0.0; w.len()];
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let off = self.offsets[l];
            let prev = &pass.activations[l];
            {
                let (gw, gb) = grad[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                for i in 0..rows {
                    let a = &prev[i * fan_in..(i + 1) * fan_in];
                    let d = &delta[i * fan_out..(i + 1) * fan_out];
                    for (o, &dio) in d.iter().enumerate() {
                        if dio == 0.0 {
                            continue;
                        }
                        gb[o] += dio;
                        for (g, &x) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(a) {
                            *g += dio * x;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let weights = &w[off..off + fan_in * fan_out];
            let z_prev = &pass.pre[l - 1];
            let mut next = vec![0.0; rows * fan_in];
            for i in 0..rows {
                let d = &delta[i * fan_out..(i + 1) * fan_out];
                let back = &mut next[i * fan_in..(i + 1) * fan_in];
                for (o, &dio) in d.iter().enumerate() {
                    if dio == 0.0 {
                        continue;
                    }
                    for (b, &wv) in back.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *b += dio * wv;
                    }
                }
                for (j, b) in back.iter_mut().enumerate() {
                    let idx = i * fan_in + j;
                    *b *= self.spec.activation.derivative(z_prev[idx], prev[idx]);
                }
            }
            delta = next;
        }
        if !loss.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        Ok((loss, grad))
    }
}

/// Distribution of additive residual noise: zero mean, variance `sd^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    Uniform {
        sd: f64,
    },
    /// Gaussian truncated at three standard deviations, rescaled to variance `sd^2`.
    TruncatedGaussian {
        sd: f64,
    },
}

/// Variance of a unit normal truncated to [-3, 3].
const TRUNCATED_NORMAL_VARIANCE: f64 = 0.973_336_924_662_541_5;

impl NoiseModel {
    pub fn sd(&self) -> f64 {
        match *self {
            NoiseModel::Uniform { sd } | NoiseModel::TruncatedGaussian { sd } => sd,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            NoiseModel::Uniform { sd } => {
                if sd == 0.0 {
                    return 0.0;
                }
                let half = 3.0_f64.sqrt() * sd;
                rng.random_range(-half..half)
            }
            NoiseModel::TruncatedGaussian { sd } => {
                if sd == 0.0 {
                    return 0.0;
                }
                loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 3.0 {
                        return sd * z / TRUNCATED_NORMAL_VARIANCE.sqrt();
                    }
                }
            }
        }
    }
}

/// `r + eta` with i.i.d. entries of `eta` drawn from `noise`.
pub fn inject_noise(r: &DenseVector, noise: &NoiseModel, rng: &mut impl Rng) -> DenseVector {
    if noise.sd() == 0.0 {
        return r.clone();
    }
    let v = r.iter().map(|x| x + noise.sample(rng)).collect();
    DenseVector::new(v).expect("bounded noise keeps finite values finite")
}

/// Stationary affine map `G(w) = A w + b` with `||A||_2 < 1`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    n: usize,
    /// Row-major.
    a: Vec<f64>,
    b: Vec<f64>,
}

impl AffineMap {
    pub fn new(n: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self, ModelError> {
        if a.len() != n * n {
            return Err(ModelError::DimensionMismatch { expected: n * n, found: a.len() });
        }
        if b.len() != n {
            return Err(ModelError::DimensionMismatch { expected: n, found: b.len() });
        }
        if !a.iter().chain(&b).all(|x| x.is_finite()) {
            return Err(ModelError::NonFinite);
        }
        let map = Self { n, a, b };
        let norm = map.norm_estimate();
        if norm >= 1.0 {
            return Err(ModelError::NotContractive(norm));
        }
        Ok(map)
    }

    /// Symmetric map `Q diag(eigenvalues) Q^T + b` with a random orthogonal `Q`.
    /// Eigenvalues must lie strictly inside (-1, 1).
    pub fn random_symmetric(eigenvalues: &[f64], seed: u64) -> Result<Self, ModelError> {
        let n = eigenvalues.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_orthogonal(n, &mut rng);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| q[k][i] * eigenvalues[k] * q[k][j]).sum();
            }
        }
        let b = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::new(n, a, b)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let row = &self.a[i * self.n..(i + 1) * self.n];
                self.b[i] + row.iter().zip(w).map(|(p, q)| p * q).sum::<f64>()
            })
            .collect()
    }

    /// `r = A w + b - w`.
    pub fn residual(&self, w: &DenseVector) -> Result<DenseVector, ModelError> {
        if w.len() != self.n {
            return Err(ModelError::DimensionMismatch { expected: self.n, found: w.len() });
        }
        let gw = self.apply(w);
        DenseVector::new(gw.iter().zip(w.iter()).map(|(g, x)| g - x).collect())
            .map_err(|_| ModelError::NonFinite)
    }

    /// Spectral-norm estimate by power iteration on `A^T A`.
    pub fn norm_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 0.0;
        }
        let mut x: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_033_988_7).fract()).collect();
        let mut sigma2 = 0.0;
        for _ in 0..500 {
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 {
                return 0.0;
            }
            x.iter_mut().for_each(|v| *v /= nx);
            let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| self.a[i * n + j] * x[j]).sum()).collect();
            let atax: Vec<f64> = (0..n).map(|j| (0..n).map(|i| self.a[i * n + j] * ax[i]).sum()).collect();
            let next = x.iter().zip(&atax).map(|(p, q)| p * q).sum::<f64>();
            let converged = (next - sigma2).abs() <= 1e-14 * next.abs();
            sigma2 = next;
            x = atax;
            if converged {
                break;
            }
        }
        sigma2.max(0.0).sqrt()
    }

    /// Fixed point `(I - A)^{-1} b` by Gaussian elimination with partial pivoting.
    #[allow(clippy::needless_range_loop)]
    pub fn direct_fixed_point(&self) -> DenseVector {
        let n = self.n;
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> =
                    (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - self.a[i * n + j]).collect();
                row.push(self.b[i]);
                row
            })
            .collect();
        for col in 0..n {
            let piv =
                (col..n).max_by(|&p, &q| m[p][col].abs().total_cmp(&m[q][col].abs())).expect("non-empty");
            m.swap(col, piv);
            for row in col + 1..n {
                let f = m[row][col] / m[col][col];
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| m[i][j] * x[j]).sum();
            x[i] = (m[i][n] - s) / m[i][i];
        }
        DenseVector::new(x).expect("I - A is nonsingular for a contraction")
    }
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// The affine map as a fixed-point operator, optionally with additive
/// residual noise. The reported loss is `||r||_2`.
#[derive(Debug, Clone)]
pub struct AffineOperator {
    map: AffineMap,
    noise: Option<(NoiseModel, ChaCha8Rng)>,
    evaluations: usize,
}

impl AffineOperator {
    pub fn new(map: AffineMap) -> Self {
        Self { map, noise: None, evaluations: 0 }
    }

    pub fn with_noise(map: AffineMap, noise: NoiseModel, seed: u64) -> Self {
        Self { map, noise: Some((noise, ChaCha8Rng::seed_from_u64(seed))), evaluations: 0 }
    }

    pub fn map(&self) -> &AffineMap {
        &self.map
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }
}

impl FixedPointOperator for AffineOperator {
    type Checkpoint = ();

    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn evaluate(&mut self, w: &DenseVector) -> Result<Evaluation, OperatorError> {
        let mut r = self.map.residual(w)?;
        if let Some((noise, rng)) = self.noise.as_mut() {
            r = inject_noise(&r, noise, rng);
        }
        self.evaluations += 1;
        let loss = r.norm_l2();
        Ok(Evaluation { residual: r, loss })
    }

    fn checkpoint(&self) {}

    fn restore(&mut self, _: ()) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(n_in: usize, n_out: usize, act: Activation) -> Mlp {
        Mlp::new(MlpSpec { layer_sizes: vec![n_in, n_out], activation: act, init_seed: 0 }, LossKind::Mse)
            .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_predictions() {
        let mlp = Mlp::new(
            MlpSpec { layer_sizes: vec![3, 5, 2], activation: Activation::Relu, init_seed: 0 },
            LossKind::Mse,
        )
        .unwrap();
        let w = vec![0.0; mlp.num_params()];
        let out = mlp.forward(&w, &[1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn identity_layer_copies_inputs() {
        let mlp = linear(3, 3, Activation::Relu);
        let mut w = vec![0.0; mlp.num_params()];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let x = [0.5, -1.5, 2.0, 3.0, 4.0, -5.0];
        assert_eq!(mlp.forward(&w, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn single_neuron_closed_form() {
        let mlp = linear(1, 1, Activation::Tanh);
        let (w, b, x, y) = (0.7, -0.2, 1.5, 0.4);
        let (loss, g) = mlp.loss_grad(&[w, b], &[x], &[y]).unwrap();
        let e = w * x + b - y;
        assert!((loss - e * e).abs() < 1e-15);
        assert!((g[0] - 2.0 * e * x).abs() < 1e-15);
        assert!((g[1] - 2.0 * e).abs() < 1e-15);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let mlp = Mlp::new(
            MlpSpec { layer_sizes: vec![2, 4, 1], activation: Activation::Tanh, init_seed: 3 },
            LossKind::Mse,
        )
        .unwrap();
        let w = mlp.init_params();
        let x = [0.1, 0.2, -0.3, 0.4];
        let y = mlp.forward(&w, &x).unwrap();
        let (loss, g) = mlp.loss_grad(&w, &x, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn logistic_gradient_matches_closed_form() {
        let mlp = Mlp::new(
            MlpSpec { layer_sizes: vec![2, 1], activation: Activation::Relu, init_seed: 0 },
            LossKind::LogisticCrossEntropy,
        )
        .unwrap();
        let w = [0.5, -0.25, 0.1];
        let x = [1.0, 2.0];
        let z: f64 = 0.5 - 0.5 + 0.1;
        let s = 1.0 / (1.0 + (-z).exp());
        let (loss, g) = mlp.loss_grad(&w, &x, &[1.0]).unwrap();
        assert!((loss + s.ln()).abs() < 1e-14);
        assert!((g[0] - (s - 1.0)).abs() < 1e-14);
        assert!((g[1] - 2.0 * (s - 1.0)).abs() < 1e-14);
        assert!((g[2] - (s - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn shape_errors() {
        assert_eq!(
            Mlp::new(
                MlpSpec { layer_sizes: vec![3], activation: Activation::Relu, init_seed: 0 },
                LossKind::Mse
            )
            .unwrap_err(),
            ModelError::TooFewLayers
        );
        let mlp = linear(2, 1, Activation::Relu);
        assert!(matches!(mlp.forward(&[0.0; 2], &[1.0, 2.0]), Err(ModelError::DimensionMismatch { .. })));
        assert_eq!(mlp.forward(&[0.0; 3], &[]), Err(ModelError::EmptyBatch));
        assert_eq!(mlp.loss_grad(&[0.0; 3], &[1.0, f64::NAN], &[0.0]), Err(ModelError::NonFinite));
    }

    #[test]
    fn affine_residual_examples() {
        let map = AffineMap::random_symmetric(&[0.5, -0.3, 0.8], 4).unwrap();
        let star = map.direct_fixed_point();
        assert!(map.residual(&star).unwrap().norm_inf() < 1e-14);

        let zero = AffineMap::new(2, vec![0.0; 4], vec![1.0, -2.0]).unwrap();
        let w = DenseVector::from_slice(&[0.5, 0.5]).unwrap();
        assert_eq!(zero.residual(&w).unwrap().as_slice(), &[0.5, -2.5]);

        assert!(matches!(AffineMap::new(1, vec![1.5], vec![0.0]), Err(ModelError::NotContractive(_))));
    }

    #[test]
    fn plain_affine_iteration_rate_matches_spectral_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut eig: Vec<f64> = (0..9).map(|_| rng.random_range(-0.6..0.6)).collect();
        eig.push(0.85);
        let map = AffineMap::random_symmetric(&eig, 8).unwrap();
        assert!((map.norm_estimate() - 0.85).abs() < 1e-10);
        let star = map.direct_fixed_point();
        let mut w = DenseVector::zeros(10);
        let mut errs = Vec::new();
        for _ in 0..120 {
            w = w.add(&map.residual(&w).unwrap()).unwrap();
            errs.push(w.sub(&star).unwrap().norm_l2());
        }
        let rate = (errs[119] / errs[79]).powf(1.0 / 40.0);
        assert!((rate - 0.85).abs() < 1e-3, "rate {rate}");
    }

    #[test]
    fn noise_zero_scale_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = DenseVector::from_slice(&[1.0, 2.0]).unwrap();
        assert_eq!(inject_noise(&r, &NoiseModel::Uniform { sd: 0.0 }, &mut rng), r);
    }

    #[test]
    fn noise_moments() {
        for noise in [NoiseModel::Uniform { sd: 0.3 }, NoiseModel::TruncatedGaussian { sd: 0.3 }] {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            let n = 100_000;
            let zero = DenseVector::zeros(2);
            let mut sum = [0.0; 2];
            let mut sq = [0.0; 2];
            for _ in 0..n {
                let e = inject_noise(&zero, &noise, &mut rng);
                for j in 0..2 {
                    sum[j] += e[j];
                    sq[j] += e[j] * e[j];
                }
            }
            for j in 0..2 {
                let mean = sum[j] / n as f64;
                let var = sq[j] / n as f64 - mean * mean;
                assert!(mean.abs() <= 3.0 * 0.3 / (n as f64).sqrt(), "{noise:?} mean {mean}");
                assert!((var / 0.09 - 1.0).abs() <= 0.1, "{noise:?} var {var}");
            }
        }
    }
}
