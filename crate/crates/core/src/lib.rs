//! Safeguarded alternating Anderson acceleration for stochastic fixed-point
//! iterations, with moving-average regularization of the iterate sequence.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: vectors, tall matrices, Householder QR and least squares
//! - [`history`]: difference windows for the Anderson step, iterate window for averaging
//! - [`smoothing`]: moving average and the adaptive on/off criterion
//! - [`optimizers`]: SGD, Nesterov and Adam expressed as residuals `w -> r`
//! - [`models`]: affine maps, MLP with backprop, noise injection
//! - [`data`]: CSV loading, splits, batch sampling, synthetic regression
//! - [`accelerator`]: the trainer that ties all of the above together

pub mod accelerator;
pub mod data;
pub mod history;
pub mod linalg;
pub mod models;
pub mod optimizers;
pub mod smoothing;

pub use accelerator::{
    anderson_extrapolate, is_acceleration_step, train, AccelerationConfig, AndersonWorkspace, Evaluation,
    FixedPointOperator, IterationRecord, MixingVariant, StepKind, StepOutcome, TrainError, TrainOutput,
    Trainer,
};
pub use linalg::{DenseVector, TallMatrix};
