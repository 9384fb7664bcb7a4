//! Moving-average regularization of the iterate sequence and the adaptive
//! criterion that switches it off.
//!
//! The monitor compares the entry-wise standard deviation of the trailing
//! window against the magnitude of the residual:
//!
//! ```text
//! stop averaging  <=>  max_j sqrt(S_j) < epsilon * max_j |r_j|
//! ```
//!
//! Once the criterion holds the monitor latches off for the rest of the run,
//! unless it was built with `latch = false`.

use thiserror::Error;

use crate::history::IterateWindow;
use crate::linalg::DenseVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmoothingError {
    #[error("iterate window is empty")]
    EmptyWindow,
    #[error("sample variance needs at least two iterates, have {0}")]
    InsufficientSamples(usize),
}

/// Arithmetic mean of the iterates currently in the window.
pub fn moving_average(window: &IterateWindow) -> Result<DenseVector, SmoothingError> {
    let first = window.iter().next().ok_or(SmoothingError::EmptyWindow)?;
    let count = window.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for w in window.iter() {
        for (m, x) in mean.iter_mut().zip(w.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    // A mean of finite values is finite.
    Ok(DenseVector::new(mean).expect("finite mean"))
}

/// Entry-wise population variance over the window (two-pass).
pub fn sample_variance(window: &IterateWindow) -> Result<DenseVector, SmoothingError> {
    if window.len() < 2 {
        return Err(SmoothingError::InsufficientSamples(window.len()));
    }
    let mean = moving_average(window)?;
    let count = window.len() as f64;
    let mut var = vec![0.0; mean.len()];
    for w in window.iter() {
        for ((s, x), m) in var.iter_mut().zip(w.iter()).zip(mean.iter()) {
            let d = x - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s = (*s / count).max(0.0));
    DenseVector::new(var).map_err(|_| SmoothingError::InsufficientSamples(window.len()))
}

/// `false` once the window has settled relative to the residual.
pub fn should_keep_averaging(variance: &DenseVector, residual: &DenseVector, epsilon: f64) -> bool {
    let spread = variance.iter().fold(0.0_f64, |acc, s| acc.max(s.max(0.0).sqrt()));
    let scale = residual.norm_inf();
    if spread == 0.0 && scale == 0.0 {
        return false;
    }
    spread.partial_cmp(&(epsilon * scale)) != Some(std::cmp::Ordering::Less)
}

#[derive(Debug, Clone)]
pub struct VarianceMonitor {
    window: IterateWindow,
    epsilon: f64,
    active: bool,
    latch: bool,
}

impl VarianceMonitor {
    pub fn new(window_len: usize, epsilon: f64, latch: bool) -> Self {
        Self { window: IterateWindow::new(window_len), epsilon, active: true, latch }
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn window(&self) -> &IterateWindow {
        &self.window
    }

    /// Records `w` and re-evaluates the criterion. `residual` is the most
    /// recent fixed-point residual; the criterion is skipped until both it and
    /// two iterates are available. Returns whether averaging applies now.
    pub fn observe(&mut self, w: &DenseVector, residual: Option<&DenseVector>) -> bool {
        self.window.push(w);
        if self.latch && !self.active {
            return false;
        }
        if self.window.len() < 2 {
            return false;
        }
        if let Some(r) = residual {
            let s = sample_variance(&self.window).expect("window has two iterates");
            self.active = should_keep_averaging(&s, r, self.epsilon);
        }
        self.active
    }

    /// [`observe`](Self::observe), then replace `w` (and the newest window
    /// entry) with the window mean when averaging applies.
    pub fn apply(&mut self, w: &mut DenseVector, residual: Option<&DenseVector>) -> bool {
        if !self.observe(w, residual) {
            return false;
        }
        let mean = moving_average(&self.window).expect("non-empty window");
        self.window.replace_latest(&mean);
        *w = mean;
        true
    }
}
