//! Entropic optimal-transport allocation with a minimum per-class mass.
//!
//! The solver differs from the classical two-sided Sinkhorn in one step:
//! rows are always rescaled to their targets, but a column is rescaled
//! only when its mass falls below the column target, so every class ends
//! up with at least (not exactly) its target mass.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Cosine-distance cost `C[i,j] = 1 - w_j . f_i`, entries in `[0, 2]`.
#[derive(Debug, Clone)]
pub struct CostMatrix(Array2<f64>);

impl CostMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    /// Wraps a precomputed cost matrix; entries must lie in `[0, 2]` up to
    /// 1e-9. Meant for tests and synthetic instances.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        for &v in values.iter() {
            if !v.is_finite() || !(-1e-9..=2.0 + 1e-9).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "cost entry {v} outside [0, 2]"
                )));
            }
        }
        Ok(CostMatrix(values))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Soft class-assignment matrix: row i spreads sample i's unit mass over
/// the classes.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrix(Array2<f64>);

impl AllocationMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }

    /// Wraps an externally built allocation (e.g. hand-written soft
    /// targets); entries must be finite and nonnegative.
    pub fn from_values(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidConfig(
                "allocation entries must be finite and nonnegative".into(),
            ));
        }
        Ok(AllocationMatrix(values))
    }

    pub(crate) fn from_values_unchecked(values: Array2<f64>) -> Self {
        AllocationMatrix(values)
    }

    pub(crate) fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }

    /// Shannon entropy `-sum P ln P` over all entries.
    pub fn entropy(&self) -> f64 {
        self.0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

/// Row targets `p` (one unit per sample) and column targets `q` (the
/// min-size floor `k` per class, or exact per-class counts).
#[derive(Debug, Clone)]
pub struct Marginals {
    pub p: Array1<f64>,
    pub q: Array1<f64>,
}

impl Marginals {
    /// `p = 1` per sample, `q = k` per class.
    pub fn min_size(num_samples: usize, num_classes: usize, k: f64) -> Result<Self> {
        if !k.is_finite() || k <= 0.0 {
            return Err(Error::InvalidConfig(format!("min-size {k} must be positive")));
        }
        Ok(Marginals {
            p: Array1::ones(num_samples),
            q: Array1::from_elem(num_classes, k),
        })
    }

    /// `p = 1` per sample, `q` the exact per-class counts.
    pub fn exact(num_samples: usize, targets: &[f64]) -> Result<Self> {
        if targets.iter().any(|&t| !t.is_finite() || t <= 0.0) {
            return Err(Error::InvalidConfig("class targets must be positive".into()));
        }
        let total: f64 = targets.iter().sum();
        if (total - num_samples as f64).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "class targets sum to {total}, expected {num_samples}"
            )));
        }
        Ok(Marginals {
            p: Array1::ones(num_samples),
            q: Array1::from_vec(targets.to_vec()),
        })
    }

    fn check(&self, shape: (usize, usize)) -> Result<()> {
        if self.p.len() != shape.0 || self.q.len() != shape.1 {
            return Err(Error::DimensionMismatch {
                expected: shape.0,
                got: self.p.len(),
                context: "marginals vs cost matrix".into(),
            });
        }
        let positive = |&v: &f64| v.is_finite() && v > 0.0;
        if !self.p.iter().all(positive) || !self.q.iter().all(positive) {
            return Err(Error::InvalidConfig("marginals must be positive".into()));
        }
        Ok(())
    }
}

const UNIT_NORM_TOL: f64 = 1e-6;

/// Cosine distance between every sample row and every class weight column:
/// `C[i,j] = 1 - w_j . f_i`. Both sides must be unit norm within 1e-6.
pub fn cost_matrix(features: ArrayView2<f64>, weights: ArrayView2<f64>) -> Result<CostMatrix> {
    if features.ncols() != weights.nrows() {
        return Err(Error::DimensionMismatch {
            expected: features.ncols(),
            got: weights.nrows(),
            context: "feature dim vs weight dim".into(),
        });
    }
    for row in features.rows() {
        check_unit(row.dot(&row))?;
    }
    for col in weights.columns() {
        check_unit(col.dot(&col))?;
    }
    let mut c = features.dot(&weights);
    c.mapv_inplace(|dot| 1.0 - dot);
    Ok(CostMatrix(c))
}

fn check_unit(norm_sq: f64) -> Result<()> {
    let dev = (norm_sq.sqrt() - 1.0).abs();
    if dev.is_nan() || dev > UNIT_NORM_TOL {
        return Err(Error::NormViolation(dev));
    }
    Ok(())
}

/// Min-size Sinkhorn: starts from the row-wise softmax of `-lambda * C`,
/// then alternates a full row rescale with a rescale of only the columns
/// whose mass is below target.
///
/// Returns the allocation after exactly `iters` iterations (no early
/// exit). A non-finite intermediate aborts with an error rather than being
/// clamped; it signals that `lambda` is too large for the cost scale.
pub fn min_size_sinkhorn(
    cost: &CostMatrix,
    marginals: &Marginals,
    lambda: f64,
    iters: usize,
) -> Result<AllocationMatrix> {
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::InvalidConfig(format!("lambda {lambda} must be positive")));
    }
    if iters == 0 {
        return Err(Error::InvalidConfig("sinkhorn needs at least one iteration".into()));
    }
    marginals.check(cost.shape())?;

    let c = &cost.0;
    let (rows, cols) = c.dim();

    // Row-wise softmax of -lambda * C with per-row max subtraction.
    let mut p = Array2::<f64>::zeros((rows, cols));
    {
        let c_data = c.as_slice().expect("row-major cost");
        let p_data = p.as_slice_mut().expect("row-major allocation");
        for (c_row, p_row) in c_data.chunks_exact(cols).zip(p_data.chunks_exact_mut(cols)) {
            let row_min = c_row.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for (pv, cv) in p_row.iter_mut().zip(c_row) {
                let v = (-lambda * (cv - row_min)).exp();
                *pv = v;
                sum += v;
            }
            for pv in p_row.iter_mut() {
                *pv /= sum;
            }
        }
    }

    let p_data = p.as_slice_mut().expect("row-major allocation");
    let mut col_scale = vec![0.0f64; cols];
    for iter in 0..iters {
        // Rows: scale every row to its target; accumulate column masses in
        // the same pass.
        col_scale.fill(0.0);
        for (i, row) in p_data.chunks_exact_mut(cols).enumerate() {
            let sum: f64 = row.iter().sum();
            let scale = marginals.p[i] / sum;
            for (v, cs) in row.iter_mut().zip(col_scale.iter_mut()) {
                *v *= scale;
                *cs += *v;
            }
        }
        // Columns: lift only the deficient ones up to their target.
        let mut any_deficient = false;
        let mut finite = true;
        for (cs, &target) in col_scale.iter_mut().zip(marginals.q.iter()) {
            finite &= cs.is_finite();
            if *cs < target {
                any_deficient = true;
                *cs = target / *cs;
            } else {
                *cs = 1.0;
            }
        }
        if any_deficient {
            for row in p_data.chunks_exact_mut(cols) {
                for (v, &scale) in row.iter_mut().zip(col_scale.iter()) {
                    *v *= scale;
                }
            }
        }
        if !finite {
            return Err(Error::NonFinite(format!(
                "min-size sinkhorn iteration {iter} (lambda {lambda} too large for this cost scale?)"
            )));
        }
    }
    if p_data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "min-size sinkhorn result (lambda too large for this cost scale?)".into(),
        ));
    }

    Ok(AllocationMatrix(p))
}

/// Scales every row of `P` to sum exactly to its target, so downstream
/// consumers see a row-stochastic matrix even though the solver's last
/// operation is a column step.
pub fn row_normalize_final(p: &AllocationMatrix, row_targets: &Array1<f64>) -> AllocationMatrix {
    let mut out = p.0.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let sum = row.sum();
        if sum > 0.0 {
            let scale = row_targets[i] / sum;
            row.mapv_inplace(|v| v * scale);
        }
    }
    AllocationMatrix(out)
}

/// Convenience for tests and diagnostics: row and column sums.
pub fn marginal_sums(p: &AllocationMatrix) -> (Array1<f64>, Array1<f64>) {
    (p.0.sum_axis(Axis(1)), p.0.sum_axis(Axis(0)))
}
