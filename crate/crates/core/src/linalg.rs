//! Dense vector and tall-skinny matrix kernels.
//!
//! Everything here is plain `f64` and allocation-light. The least-squares
//! path factors the matrix with Householder reflections and never forms the
//! normal equations; columns that are numerically dependent on earlier ones
//! are dropped from the solve and receive a zero coefficient.

use std::ops::Deref;

use thiserror::Error;

/// Relative threshold on the diagonal of the triangular factor below which a
/// column is treated as linearly dependent on the columns before it.
pub const RANK_DROP_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix has no columns")]
    EmptyMatrix,
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("QR needs at least as many rows as columns ({rows} < {cols})")]
    WideMatrix { rows: usize, cols: usize },
}

/// A finite vector of `f64` values with a fixed length.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.iter().all(|x| x.is_finite()) {
            Ok(Self(data))
        } else {
            Err(LinalgError::NonFinite)
        }
    }

    pub fn from_slice(data: &[f64]) -> Result<Self, LinalgError> {
        Self::new(data.to_vec())
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Overwrites `self` with `src`. Lengths must match.
    pub fn assign(&mut self, src: &DenseVector) -> Result<(), LinalgError> {
        check_len(self.len(), src.len())?;
        self.0.copy_from_slice(&src.0);
        Ok(())
    }

    /// Writes `a - b` into `self`, reusing the allocation.
    pub(crate) fn assign_difference(&mut self, a: &DenseVector, b: &DenseVector) -> Result<(), LinalgError> {
        check_len(a.len(), b.len())?;
        self.0.clear();
        self.0.extend(a.iter().zip(b.iter()).map(|(x, y)| x - y));
        ensure_finite(&self.0)
    }

    pub fn norm_l2(&self) -> f64 {
        norm_l2(&self.0)
    }

    pub fn norm_inf(&self) -> f64 {
        norm_inf(&self.0)
    }

    pub fn sub(&self, other: &DenseVector) -> Result<DenseVector, LinalgError> {
        check_len(self.len(), other.len())?;
        DenseVector::new(self.iter().zip(other.iter()).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &DenseVector) -> Result<DenseVector, LinalgError> {
        axpy(1.0, other, self)
    }

    pub fn scale(&self, a: f64) -> Result<DenseVector, LinalgError> {
        DenseVector::new(self.iter().map(|x| a * x).collect())
    }
}

impl AsRef<[f64]> for DenseVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = LinalgError;

    fn try_from(v: Vec<f64>) -> Result<Self, LinalgError> {
        DenseVector::new(v)
    }
}

fn check_len(expected: usize, found: usize) -> Result<(), LinalgError> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch { expected, found })
    }
}

fn ensure_finite(v: &[f64]) -> Result<(), LinalgError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

pub fn norm_l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `y + a * x`.
pub fn axpy(a: f64, x: &DenseVector, y: &DenseVector) -> Result<DenseVector, LinalgError> {
    check_len(y.len(), x.len())?;
    DenseVector::new(y.iter().zip(x.iter()).map(|(yi, xi)| yi + a * xi).collect())
}

/// Column-major `rows x cols` matrix, intended for `cols` much smaller than `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct TallMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TallMatrix {
    /// Creates a matrix with `rows` rows and no columns.
    pub fn with_rows(rows: usize) -> Self {
        Self { rows, cols: 0, data: Vec::new() }
    }

    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self, LinalgError> {
        let rows = columns.first().map_or(0, |c| c.as_ref().len());
        let mut m = Self::with_rows(rows);
        for c in columns {
            m.push_column(c.as_ref())?;
        }
        Ok(m)
    }

    /// Removes all columns and sets the row count, keeping the allocation.
    pub fn clear(&mut self, rows: usize) {
        self.rows = rows;
        self.cols = 0;
        self.data.clear();
    }

    pub fn push_column(&mut self, column: &[f64]) -> Result<(), LinalgError> {
        check_len(self.rows, column.len())?;
        ensure_finite(column)?;
        self.data.extend_from_slice(column);
        self.cols += 1;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.cols).map(move |j| self.column(j))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    /// `A * x` for a coefficient vector of length `cols`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>, LinalgError> {
        check_len(self.cols, x.len())?;
        let mut out = vec![0.0; self.rows];
        for (col, &xj) in self.columns().zip(x) {
            if xj != 0.0 {
                for (o, a) in out.iter_mut().zip(col) {
                    *o += xj * a;
                }
            }
        }
        Ok(out)
    }

    /// Frobenius norm.
    pub fn norm_fro(&self) -> f64 {
        norm_l2(&self.data)
    }
}

/// Square upper-triangular factor, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperTriangular {
    size: usize,
    data: Vec<f64>,
}

impl UpperTriangular {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    pub fn diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.size).map(move |i| self.get(i, i))
    }
}

/// Thin QR factors of a tall matrix.
#[derive(Debug, Clone)]
pub struct QrFactors {
    pub q: TallMatrix,
    pub r: UpperTriangular,
    /// Columns whose diagonal entry fell below the drop tolerance.
    pub dependent_columns: Vec<usize>,
}

impl QrFactors {
    pub fn rank(&self) -> usize {
        self.r.size() - self.dependent_columns.len()
    }

    pub fn is_rank_deficient(&self) -> bool {
        !self.dependent_columns.is_empty()
    }
}

/// Householder reflector `I - tau * v v^T` acting on rows `pivot..`. The
/// vector `v` has an implicit leading 1 and its remaining entries are stored
/// below the diagonal of `column` in the work matrix.
struct Reflector {
    column: usize,
    pivot: usize,
    tau: f64,
}

impl Reflector {
    /// `stored` is the column-major prefix of the work matrix holding `self.column`.
    fn apply(&self, stored: &[f64], rows: usize, target: &mut [f64]) {
        let v = &stored[self.column * rows + self.pivot + 1..(self.column + 1) * rows];
        let tail = &mut target[self.pivot..];
        let s = self.tau * (tail[0] + dot(v, &tail[1..]));
        tail[0] -= s;
        for (t, vi) in tail[1..].iter_mut().zip(v) {
            *t -= s * vi;
        }
    }
}

/// Householder triangularization in place. When `drop_dependent` is set,
/// columns whose trailing norm is below the drop tolerance get no reflector
/// and no pivot row.
struct Triangularization {
    reflectors: Vec<Reflector>,
    /// Pivot row per column, `None` for dropped columns.
    pivots: Vec<Option<usize>>,
    dependent: Vec<usize>,
}

impl Triangularization {
    fn compute(work: &mut TallMatrix, drop_dependent: bool) -> Self {
        let rows = work.rows;
        let cols = work.cols;
        let mut reflectors: Vec<Reflector> = Vec::with_capacity(cols);
        let mut pivots = Vec::with_capacity(cols);
        let mut dependent = Vec::new();
        let mut reference: Option<f64> = None;
        let mut next_row = 0usize;

        for j in 0..cols {
            let (done, rest) = work.data.split_at_mut(j * rows);
            let col = &mut rest[..rows];
            for h in &reflectors {
                h.apply(done, rows, col);
            }
            if next_row >= rows {
                pivots.push(None);
                dependent.push(j);
                continue;
            }
            let tail = &mut col[next_row..];
            let norm = norm_l2(tail);
            let is_dependent = match reference {
                Some(r00) => norm < RANK_DROP_TOLERANCE * r00,
                None => norm == 0.0,
            };
            if is_dependent {
                dependent.push(j);
                if drop_dependent {
                    pivots.push(None);
                    continue;
                }
            }
            if norm > 0.0 {
                let alpha = if tail[0] >= 0.0 { -norm } else { norm };
                let v0 = tail[0] - alpha;
                let mut vtv = 1.0;
                for x in &mut tail[1..] {
                    *x /= v0;
                    vtv += *x * *x;
                }
                tail[0] = alpha;
                reflectors.push(Reflector { column: j, pivot: next_row, tau: 2.0 / vtv });
                if reference.is_none() {
                    reference = Some(norm);
                }
            }
            pivots.push(Some(next_row));
            next_row += 1;
        }
        Self { reflectors, pivots, dependent }
    }

    fn apply_qt(&self, work: &TallMatrix, v: &mut [f64]) {
        for h in &self.reflectors {
            h.apply(&work.data, work.rows, v);
        }
    }
}

/// Thin Householder QR factorization `A = Q R` with orthonormal `Q` (rows x cols).
pub fn qr_factorize(a: &TallMatrix) -> Result<QrFactors, LinalgError> {
    if a.cols == 0 {
        return Err(LinalgError::EmptyMatrix);
    }
    if a.rows < a.cols {
        return Err(LinalgError::WideMatrix { rows: a.rows, cols: a.cols });
    }
    ensure_finite(&a.data)?;

    let mut work = a.clone();
    let tri = Triangularization::compute(&mut work, false);
    let c = a.cols;
    let mut r = vec![0.0; c * c];
    for j in 0..c {
        for i in 0..=j {
            r[i * c + j] = work.get(i, j);
        }
    }

    // Q = H_1 H_2 ... H_c applied to the first c unit vectors.
    let mut q = TallMatrix::with_rows(a.rows);
    let mut e = vec![0.0; a.rows];
    for j in 0..c {
        e.iter_mut().for_each(|x| *x = 0.0);
        e[j] = 1.0;
        for h in tri.reflectors.iter().rev() {
            h.apply(&work.data, work.rows, &mut e);
        }
        q.push_column(&e)?;
    }

    Ok(QrFactors { q, r: UpperTriangular { size: c, data: r }, dependent_columns: tri.dependent })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresSolution {
    pub coefficients: Vec<f64>,
    pub rank: usize,
    /// Set when at least one column was dropped as dependent.
    pub degraded_rank: bool,
}

/// Solves `min_g ||rhs - A g||_2` through Householder QR.
pub fn least_squares(a: &TallMatrix, rhs: &[f64]) -> Result<LeastSquaresSolution, LinalgError> {
    least_squares_in_place(&mut a.clone(), &mut rhs.to_vec())
}

/// [`least_squares`] that overwrites `a` with its factorization and `rhs`
/// with `Q^T rhs`, so callers can reuse both buffers.
pub fn least_squares_in_place(
    a: &mut TallMatrix,
    rhs: &mut [f64],
) -> Result<LeastSquaresSolution, LinalgError> {
    if a.cols == 0 {
        return Err(LinalgError::EmptyMatrix);
    }
    check_len(a.rows, rhs.len())?;
    ensure_finite(&a.data)?;
    ensure_finite(rhs)?;

    let tri = Triangularization::compute(a, true);
    tri.apply_qt(a, rhs);

    let kept: Vec<(usize, usize)> =
        tri.pivots.iter().enumerate().filter_map(|(j, p)| p.map(|row| (j, row))).collect();

    let mut g = vec![0.0; a.cols];
    for idx in (0..kept.len()).rev() {
        let (j, row) = kept[idx];
        let mut s = rhs[row];
        for &(jj, _) in &kept[idx + 1..] {
            s -= a.get(row, jj) * g[jj];
        }
        g[j] = s / a.get(row, j);
    }
    ensure_finite(&g)?;

    Ok(LeastSquaresSolution { coefficients: g, rank: kept.len(), degraded_rank: !tri.dependent.is_empty() })
}
