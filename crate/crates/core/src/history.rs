//! Sliding windows over past iterates.
//!
//! [`HistoryBuffer`] keeps the last `m` differences of iterates and residuals
//! (the columns of the Anderson least-squares problem). [`IterateWindow`] keeps
//! the last `t` raw iterates for the moving average.

use std::collections::VecDeque;

use thiserror::Error;

use crate::linalg::{DenseVector, LinalgError, TallMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HistoryError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("history holds no difference columns yet")]
    InsufficientHistory,
    #[error("difference overflowed to a non-finite value")]
    NonFinite,
}

impl From<LinalgError> for HistoryError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::DimensionMismatch { expected, found } => {
                HistoryError::DimensionMismatch { expected, found }
            }
            _ => HistoryError::NonFinite,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    capacity: usize,
    w_diffs: VecDeque<DenseVector>,
    r_diffs: VecDeque<DenseVector>,
    last: Option<(DenseVector, DenseVector)>,
    pushes: usize,
}

impl HistoryBuffer {
    /// `capacity` is the history depth `m`; it is clamped to at least one column.
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            capacity,
            w_diffs: VecDeque::with_capacity(capacity),
            r_diffs: VecDeque::with_capacity(capacity),
            last: None,
            pushes: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of difference columns currently retained.
    pub fn columns(&self) -> usize {
        self.w_diffs.len()
    }

    /// Number of snapshots pushed since creation or the last reset.
    pub fn pushes(&self) -> usize {
        self.pushes
    }

    pub fn dim(&self) -> Option<usize> {
        self.last.as_ref().map(|(w, _)| w.len())
    }

    /// Records a snapshot `(w, r)`. Every push after the first appends the
    /// difference to the previous snapshot, evicting the oldest column when full.
    pub fn push(&mut self, w: &DenseVector, r: &DenseVector) -> Result<(), HistoryError> {
        if w.len() != r.len() {
            return Err(HistoryError::DimensionMismatch { expected: w.len(), found: r.len() });
        }
        let Some((last_w, last_r)) = self.last.as_mut() else {
            self.last = Some((w.clone(), r.clone()));
            self.pushes = 1;
            return Ok(());
        };
        if last_w.len() != w.len() {
            return Err(HistoryError::DimensionMismatch { expected: last_w.len(), found: w.len() });
        }

        // Reuse evicted columns so a full buffer never reallocates.
        let (mut dw, mut dr) = if self.w_diffs.len() == self.capacity {
            (self.w_diffs.pop_front().expect("full buffer"), self.r_diffs.pop_front().expect("full buffer"))
        } else {
            (DenseVector::zeros(w.len()), DenseVector::zeros(w.len()))
        };
        dw.assign_difference(w, last_w)?;
        dr.assign_difference(r, last_r)?;
        self.w_diffs.push_back(dw);
        self.r_diffs.push_back(dr);
        last_w.assign(w)?;
        last_r.assign(r)?;
        self.pushes += 1;
        Ok(())
    }

    /// Copies the retained columns into `(W, R)`, oldest column first.
    pub fn as_matrices(&self) -> Result<(TallMatrix, TallMatrix), HistoryError> {
        if self.w_diffs.is_empty() {
            return Err(HistoryError::InsufficientHistory);
        }
        let w: Vec<&[f64]> = self.w_diffs.iter().map(|c| c.as_slice()).collect();
        let r: Vec<&[f64]> = self.r_diffs.iter().map(|c| c.as_slice()).collect();
        Ok((TallMatrix::from_columns(&w)?, TallMatrix::from_columns(&r)?))
    }

    pub fn w_columns(&self) -> impl Iterator<Item = &DenseVector> {
        self.w_diffs.iter()
    }

    pub fn r_columns(&self) -> impl Iterator<Item = &DenseVector> {
        self.r_diffs.iter()
    }

    pub fn last_w(&self) -> Option<&DenseVector> {
        self.last.as_ref().map(|(w, _)| w)
    }

    pub fn reset(&mut self) {
        self.w_diffs.clear();
        self.r_diffs.clear();
        self.last = None;
        self.pushes = 0;
    }

    /// Number of `f64` values currently held.
    pub fn stored_floats(&self) -> usize {
        let cols: usize = self.w_diffs.iter().chain(&self.r_diffs).map(|c| c.len()).sum();
        cols + self.last.as_ref().map_or(0, |(w, r)| w.len() + r.len())
    }
}

/// The last `t` iterates in chronological order.
#[derive(Debug, Clone)]
pub struct IterateWindow {
    capacity: usize,
    iterates: VecDeque<DenseVector>,
}

impl IterateWindow {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self { capacity, iterates: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.iterates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    pub fn push(&mut self, w: &DenseVector) {
        if self.iterates.len() == self.capacity {
            let mut slot = self.iterates.pop_front().expect("full window");
            if slot.assign(w).is_err() {
                slot = w.clone();
            }
            self.iterates.push_back(slot);
        } else {
            self.iterates.push_back(w.clone());
        }
    }

    /// Replaces the most recent iterate, e.g. with its smoothed value.
    pub fn replace_latest(&mut self, w: &DenseVector) {
        if let Some(last) = self.iterates.back_mut() {
            *last = w.clone();
        }
    }

    pub fn latest(&self) -> Option<&DenseVector> {
        self.iterates.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DenseVector> {
        self.iterates.iter()
    }

    pub fn clear(&mut self) {
        self.iterates.clear();
    }
}
