//! Boosted Min-size Sinkhorn: the transductive EM loop.
//!
//! Each outer iteration recomputes the cosine cost from the current class
//! weights (E-step, together with the min-size Sinkhorn allocation), then
//! re-estimates the weights as allocation-weighted prototypes optionally
//! refined by a few epochs of logistic regression with a learned
//! temperature (M-step). The per-class minimum size `k` starts at the shot
//! count and is re-estimated from the running predictions, except in the
//! prior-aware variant where exact per-class counts replace it.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::ProcessedEpisode;
use crate::sinkhorn::{
    cost_matrix, min_size_sinkhorn, row_normalize_final, AllocationMatrix, Marginals,
};

/// Class weights, one unit-norm column per class.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    columns: Array2<f64>,
}

impl WeightMatrix {
    /// Matrix view, `d_eff x n`.
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.columns.view()
    }

    pub fn num_classes(&self) -> usize {
        self.columns.ncols()
    }

    fn from_unnormalized(mut columns: Array2<f64>) -> Result<Self> {
        for (j, mut col) in columns.columns_mut().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateSupport(j));
            }
            if !norm.is_finite() {
                return Err(Error::NonFinite("weight column norm".into()));
            }
            col.mapv_inplace(|v| v / norm);
        }
        Ok(WeightMatrix { columns })
    }
}

/// Variant selector: estimate the min-size floor, or use exact counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BmsMode {
    Bms,
    BmsStar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmsConfig {
    /// Entropic regularization strength; larger values concentrate the
    /// allocation.
    pub lambda: f64,
    pub outer_iters: usize,
    pub sinkhorn_iters: usize,
    /// Logistic-regression epochs per outer iteration. `None` picks the
    /// schedule by shot count: 0 (BMS) or 20 (BMS*) for 1-shot, 40 for
    /// multi-shot.
    pub epochs: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub kappa_init: f64,
    pub mode: BmsMode,
    /// Exact per-class sample counts; required for [`BmsMode::BmsStar`].
    pub exact_targets: Option<Vec<f64>>,
    /// Pin support rows of the allocation to their known labels before the
    /// M-step (ablation switch; off in the reference configuration).
    pub clamp_support: bool,
    /// Reset the temperature to `kappa_init` at every outer iteration
    /// instead of letting it persist.
    pub reset_kappa_each_iter: bool,
}

impl Default for BmsConfig {
    fn default() -> Self {
        BmsConfig {
            lambda: 8.5,
            outer_iters: 20,
            sinkhorn_iters: 50,
            epochs: None,
            lr: 0.1,
            momentum: 0.8,
            kappa_init: 10.0,
            mode: BmsMode::Bms,
            exact_targets: None,
            clamp_support: false,
            reset_kappa_each_iter: false,
        }
    }
}

impl BmsConfig {
    /// Epoch schedule resolved against the episode's shot count.
    pub fn effective_epochs(&self, shots: usize) -> usize {
        self.epochs.unwrap_or(match (self.mode, shots) {
            (BmsMode::Bms, 1) => 0,
            (BmsMode::BmsStar, 1) => 20,
            _ => 40,
        })
    }

    pub fn check(&self, num_samples: usize) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(Error::InvalidConfig("lambda must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        if !self.kappa_init.is_finite() || self.kappa_init <= 0.0 {
            return Err(Error::InvalidConfig("kappa_init must be positive".into()));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::InvalidConfig("sinkhorn_iters must be >= 1".into()));
        }
        if self.mode == BmsMode::BmsStar {
            let Some(targets) = &self.exact_targets else {
                return Err(Error::InvalidConfig(
                    "bms_star needs exact per-class targets".into(),
                ));
            };
            let total: f64 = targets.iter().sum();
            if (total - num_samples as f64).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!(
                    "exact targets sum to {total}, episode holds {num_samples} samples"
                )));
            }
        }
        Ok(())
    }
}

/// Normalized per-class support means (the NCM prototypes on the sphere).
pub fn init_weights(support: ArrayView2<f64>, labels: &[usize]) -> Result<WeightMatrix> {
    if support.nrows() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidConfig(
            "support rows and labels must align and be nonempty".into(),
        ));
    }
    let n = labels.iter().copied().max().unwrap() + 1;
    let d = support.ncols();
    let mut sums = Array2::<f64>::zeros((d, n));
    let mut counts = vec![0usize; n];
    for (row, &label) in support.rows().into_iter().zip(labels) {
        counts[label] += 1;
        let mut col = sums.column_mut(label);
        col += &row;
    }
    for (j, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::InvalidConfig(format!("class {j} has no support rows")));
        }
        let mut col = sums.column_mut(j);
        col.mapv_inplace(|v| v / count as f64);
    }
    WeightMatrix::from_unnormalized(sums)
}

/// Allocation-weighted prototypes: `u_j = sum_i P[i,j] f_i / sum_i P[i,j]`,
/// normalized per column.
pub fn prototype_update(
    features: ArrayView2<f64>,
    allocation: &AllocationMatrix,
) -> Result<WeightMatrix> {
    let p = allocation.values();
    if p.nrows() != features.nrows() {
        return Err(Error::DimensionMismatch {
            expected: features.nrows(),
            got: p.nrows(),
            context: "allocation rows vs feature rows".into(),
        });
    }
    let col_sums = p.sum_axis(Axis(0));
    if col_sums.iter().any(|&s| !s.is_finite() || s <= 0.0) {
        return Err(Error::InvalidConfig(
            "allocation has a column with zero mass".into(),
        ));
    }
    // u = F^T P, then divide each column by its mass.
    let mut weighted = features.t().dot(p);
    for (mut col, &mass) in weighted.columns_mut().into_iter().zip(col_sums.iter()) {
        col.mapv_inplace(|v| v / mass);
    }
    WeightMatrix::from_unnormalized(weighted)
}

/// Softmax cross-entropy against the soft allocation targets, with logits
/// `S[i,j] = kappa * w_j . f_i / ||w_j||`.
///
/// Returns the loss together with the gradients w.r.t. every weight entry
/// and kappa. Exposed for the refinement loop and its finite-difference
/// verification.
pub fn logistic_loss_and_grads(
    weights: &Array2<f64>,
    kappa: f64,
    features: ArrayView2<f64>,
    targets: &Array2<f64>,
) -> Result<(f64, Array2<f64>, f64)> {
    let num = features.nrows() as f64;
    let n = weights.ncols();
    let d = weights.nrows();

    let col_norms: Vec<f64> = weights
        .columns()
        .into_iter()
        .map(|c| c.dot(&c).sqrt())
        .collect();
    if col_norms.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::NonFinite("weight column norm".into()));
    }

    // a[i,j] = unit(w_j) . f_i ; S = kappa * a
    let mut unit = weights.clone();
    for (mut col, &norm) in unit.columns_mut().into_iter().zip(&col_norms) {
        col.mapv_inplace(|v| v / norm);
    }
    let a = features.dot(&unit);

    // Row softmax of S with max subtraction, loss accumulation.
    let mut sigma = Array2::<f64>::zeros(a.dim());
    let mut loss = 0.0;
    for (i, arow) in a.rows().into_iter().enumerate() {
        let smax = arow.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(kappa * v));
        let mut z = 0.0;
        for j in 0..n {
            let e = (kappa * arow[j] - smax).exp();
            sigma[[i, j]] = e;
            z += e;
        }
        let log_z = z.ln();
        for j in 0..n {
            sigma[[i, j]] /= z;
            // -log softmax = log_z + smax - S[i,j]
            loss += targets[[i, j]] * (log_z + smax - kappa * arow[j]);
        }
    }
    loss /= num;
    if !loss.is_finite() {
        return Err(Error::NonFinite("logistic refinement loss".into()));
    }

    // dL/dS = (sigma * rowsum(P) - P) / num
    let target_row_sums = targets.sum_axis(Axis(1));
    let mut dl_ds = sigma;
    for (i, mut row) in dl_ds.rows_mut().into_iter().enumerate() {
        for j in 0..n {
            row[j] = (row[j] * target_row_sums[i] - targets[[i, j]]) / num;
        }
    }

    let grad_kappa = dl_ds
        .iter()
        .zip(a.iter())
        .map(|(&d, &aij)| d * aij)
        .sum::<f64>();

    // grad w_j = (kappa / ||w_j||) * (sum_i D[i,j] f_i - (sum_i D[i,j] a[i,j]) unit(w_j))
    let fd = features.t().dot(&dl_ds); // d x n, column j = sum_i D[i,j] f_i
    let mut grad_w = Array2::<f64>::zeros((d, n));
    for j in 0..n {
        let da: f64 = (0..features.nrows()).map(|i| dl_ds[[i, j]] * a[[i, j]]).sum();
        let scale = kappa / col_norms[j];
        for r in 0..d {
            grad_w[[r, j]] = scale * (fd[[r, j]] - da * unit[[r, j]]);
        }
    }

    Ok((loss, grad_w, grad_kappa))
}

const KAPPA_FLOOR: f64 = 1e-3;

/// Runs `epochs` full-batch SGD-with-momentum steps on the logistic loss,
/// projecting weight columns back to the unit sphere after every epoch and
/// keeping the temperature positive. `epochs == 0` returns the inputs
/// untouched.
pub fn logistic_refine(
    weights: WeightMatrix,
    kappa: f64,
    features: ArrayView2<f64>,
    allocation: &AllocationMatrix,
    epochs: usize,
    lr: f64,
    momentum: f64,
) -> Result<(WeightMatrix, f64)> {
    if epochs == 0 {
        return Ok((weights, kappa));
    }
    let mut w = weights.columns;
    let mut kappa = kappa;
    let targets = allocation.values();

    let mut velocity_w = Array2::<f64>::zeros(w.dim());
    let mut velocity_kappa = 0.0;

    for _ in 0..epochs {
        let (_loss, grad_w, grad_kappa) =
            logistic_loss_and_grads(&w, kappa, features, targets)?;

        velocity_w.zip_mut_with(&grad_w, |v, &g| *v = momentum * *v - lr * g);
        velocity_kappa = momentum * velocity_kappa - lr * grad_kappa;

        w += &velocity_w;
        kappa += velocity_kappa;
        if kappa <= 0.0 {
            kappa = KAPPA_FLOOR;
        }

        // End-of-epoch projection to the unit hypersphere.
        for (j, mut col) in w.columns_mut().into_iter().enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateSupport(j));
            }
            if !norm.is_finite() {
                return Err(Error::NonFinite("weight column after refinement step".into()));
            }
            col.mapv_inplace(|v| v / norm);
        }
    }

    Ok((WeightMatrix { columns: w }, kappa))
}

/// Per-row argmax with ties broken toward the lowest class index.
pub fn predict(allocation: &AllocationMatrix) -> Vec<usize> {
    allocation
        .values()
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = j;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

/// Smallest predicted class count; a never-predicted class clamps the
/// estimate to 1 (a zero column target would break the Sinkhorn step) and
/// logs a warning.
pub fn estimate_min_size(labels: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &label in labels {
        counts[label] += 1;
    }
    let k = counts.into_iter().min().unwrap_or(0);
    if k == 0 {
        log::warn!("a class received no predictions; clamping min-size estimate to 1");
        return 1;
    }
    k
}

/// The full transductive loop. Returns predicted labels for the query rows.
///
/// With `outer_iters == 0` the loop never runs and predictions fall back
/// to the cosine scores of the initial support prototypes.
pub fn run_bms(episode: &ProcessedEpisode, cfg: &BmsConfig) -> Result<Vec<usize>> {
    let l = episode.support.nrows();
    let u = episode.query.nrows();
    let total = l + u;
    cfg.check(total)?;

    let n = episode.n_way();
    let shots = episode.shots();
    let epochs = cfg.effective_epochs(shots);
    let features = episode.stacked();

    let mut weights = init_weights(episode.support.view(), &episode.support_labels)?;
    let mut kappa = cfg.kappa_init;
    let mut k = shots.max(1);

    if cfg.outer_iters == 0 {
        let cost = cost_matrix(features.view(), weights.view())?;
        let scores = cost.values().mapv(|v| -v);
        let labels = predict(&AllocationMatrix::from_values_unchecked(scores));
        return Ok(labels[l..].to_vec());
    }

    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..cfg.outer_iters {
        let cost = cost_matrix(features.view(), weights.view())?;
        let marginals = match cfg.mode {
            BmsMode::Bms => Marginals::min_size(total, n, k as f64)?,
            BmsMode::BmsStar => {
                Marginals::exact(total, cfg.exact_targets.as_deref().expect("checked"))?
            }
        };
        let allocation = min_size_sinkhorn(&cost, &marginals, cfg.lambda, cfg.sinkhorn_iters)?;
        let mut allocation = row_normalize_final(&allocation, &marginals.p);
        if cfg.clamp_support {
            clamp_support_rows(&mut allocation, &episode.support_labels, n);
        }

        weights = prototype_update(features.view(), &allocation)?;
        if epochs > 0 {
            let kappa_in = if cfg.reset_kappa_each_iter { cfg.kappa_init } else { kappa };
            let (refined, kappa_out) = logistic_refine(
                weights,
                kappa_in,
                features.view(),
                &allocation,
                epochs,
                cfg.lr,
                cfg.momentum,
            )?;
            weights = refined;
            kappa = kappa_out;
        }

        labels = predict(&allocation);
        if cfg.mode == BmsMode::Bms {
            k = estimate_min_size(&labels, n);
        }
    }

    Ok(labels[l..].to_vec())
}

fn clamp_support_rows(allocation: &mut AllocationMatrix, labels: &[usize], n: usize) {
    let values = allocation.values_mut();
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..n {
            values[[i, j]] = if j == label { 1.0 } else { 0.0 };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn one_shot_init_copies_support_rows() {
        let support = array![[1.0, 0.0], [0.0, 1.0]];
        let w = init_weights(support.view(), &[0, 1]).unwrap();
        assert_abs_diff_eq!(w.view()[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w.view()[[1, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn antipodal_support_mean_is_degenerate() {
        let support = array![[1.0, 0.0], [-1.0, 0.0]];
        assert!(matches!(
            init_weights(support.view(), &[0, 0]),
            Err(Error::DegenerateSupport(0))
        ));
    }

    #[test]
    fn init_columns_are_unit_norm() {
        let support = array![[3.0, 4.0], [5.0, 12.0], [8.0, 15.0], [7.0, 24.0]];
        let w = init_weights(support.view(), &[0, 0, 1, 1]).unwrap();
        for col in w.view().columns() {
            assert_abs_diff_eq!(col.dot(&col).sqrt(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn one_hot_allocation_recovers_class_means() {
        let features = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        let p = AllocationMatrix::from_values_unchecked(array![
            [1.0, 1e-12],
            [1e-12, 1.0],
            [1.0, 1e-12],
            [1e-12, 1.0]
        ]);
        let w = prototype_update(features.view(), &p).unwrap();
        assert_abs_diff_eq!(w.view()[[0, 0]], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(w.view()[[1, 1]], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn uniform_allocation_collapses_to_global_mean() {
        let features = array![[1.0, 0.0], [0.0, 1.0]];
        let p = AllocationMatrix::from_values_unchecked(Array2::from_elem((2, 2), 0.5));
        let w = prototype_update(features.view(), &p).unwrap();
        let expected = 1.0 / 2.0_f64.sqrt();
        for &v in w.view().iter() {
            assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_epochs_returns_inputs_bit_identical() {
        let support = array![[1.0, 0.0], [0.0, 1.0]];
        let w = init_weights(support.view(), &[0, 1]).unwrap();
        let before = w.view().to_owned();
        let p = AllocationMatrix::from_values_unchecked(Array2::from_elem((2, 2), 0.5));
        let (after, kappa) =
            logistic_refine(w, 10.0, support.view(), &p, 0, 0.1, 0.8).unwrap();
        assert_eq!(after.view(), before.view());
        assert_eq!(kappa.to_bits(), 10.0_f64.to_bits());
    }

    #[test]
    fn predict_takes_row_argmax_with_low_index_ties() {
        let p = AllocationMatrix::from_values_unchecked(array![
            [0.1, 0.7, 0.2],
            [0.2, 1.4, 0.4],
            [0.5, 0.5, 0.0]
        ]);
        assert_eq!(predict(&p), vec![1, 1, 0]);
    }

    #[test]
    fn min_size_counts_predictions() {
        assert_eq!(estimate_min_size(&[0, 0, 1, 2], 3), 1);
        let balanced: Vec<usize> = (0..80).map(|i| i % 5).collect();
        assert_eq!(estimate_min_size(&balanced, 5), 16);
        assert_eq!(estimate_min_size(&[0, 0, 1, 1], 5), 1); // classes 2..4 unseen -> clamp
    }

    #[test]
    fn bms_star_requires_targets() {
        let cfg = BmsConfig {
            mode: BmsMode::BmsStar,
            ..BmsConfig::default()
        };
        assert!(matches!(cfg.check(80), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn epoch_schedule_follows_shots_and_mode() {
        let bms = BmsConfig::default();
        assert_eq!(bms.effective_epochs(1), 0);
        assert_eq!(bms.effective_epochs(5), 40);
        let star = BmsConfig {
            mode: BmsMode::BmsStar,
            ..BmsConfig::default()
        };
        assert_eq!(star.effective_epochs(1), 20);
        assert_eq!(star.effective_epochs(5), 40);
        let forced = BmsConfig {
            epochs: Some(7),
            ..BmsConfig::default()
        };
        assert_eq!(forced.effective_epochs(1), 7);
    }
}
