//! Shared oracles for the integration suites. Everything here is an
//! independent reference path: none of it calls into the solver code it
//! is used to check.

#![allow(dead_code)]

use ndarray::{Array1, Array2};

/// Classical two-sided Sinkhorn in the log domain, iterated to a tight
/// fixed point. Solves for P = diag(exp f) . exp(-lambda C) . diag(exp g)
/// with row sums `p` and column sums `q`.
pub fn two_sided_sinkhorn_log(
    cost: &Array2<f64>,
    p: &Array1<f64>,
    q: &Array1<f64>,
    lambda: f64,
    tol: f64,
    max_iters: usize,
) -> Array2<f64> {
    let (rows, cols) = cost.dim();
    let kernel_log = cost.mapv(|c| -lambda * c);
    let mut f = Array1::<f64>::zeros(rows);
    let mut g = Array1::<f64>::zeros(cols);

    for _ in 0..max_iters {
        let mut max_shift = 0.0f64;
        for i in 0..rows {
            let terms: Vec<f64> = (0..cols).map(|j| g[j] + kernel_log[[i, j]]).collect();
            let new_f = p[i].ln() - log_sum_exp(&terms);
            max_shift = max_shift.max((new_f - f[i]).abs());
            f[i] = new_f;
        }
        for j in 0..cols {
            let terms: Vec<f64> = (0..rows).map(|i| f[i] + kernel_log[[i, j]]).collect();
            let new_g = q[j].ln() - log_sum_exp(&terms);
            max_shift = max_shift.max((new_g - g[j]).abs());
            g[j] = new_g;
        }
        if max_shift < tol {
            break;
        }
    }

    Array2::from_shape_fn((rows, cols), |(i, j)| (f[i] + g[j] + kernel_log[[i, j]]).exp())
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// Central finite difference of a scalar function.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Brute-force nearest-centroid labels: plain loops, no shared code with
/// the classifier under test.
pub fn ncm_bruteforce(
    support: &Array2<f64>,
    support_labels: &[usize],
    query: &Array2<f64>,
) -> Vec<usize> {
    let n = support_labels.iter().copied().max().unwrap() + 1;
    let d = support.ncols();
    let mut sums = vec![vec![0.0f64; d]; n];
    let mut counts = vec![0usize; n];
    for (i, &label) in support_labels.iter().enumerate() {
        for k in 0..d {
            sums[label][k] += support[[i, k]];
        }
        counts[label] += 1;
    }
    for (j, sum) in sums.iter_mut().enumerate() {
        for v in sum.iter_mut() {
            *v /= counts[j] as f64;
        }
    }

    (0..query.nrows())
        .map(|i| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, centroid) in sums.iter().enumerate() {
                let mut dist = 0.0;
                for k in 0..d {
                    let diff = query[[i, k]] - centroid[k];
                    dist += diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Random cost matrix with entries uniform in [0, 2].
pub fn random_cost(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    use rand::Rng;
    let mut rng = fewshot_ot::seeding::rng_from_seed(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.0..2.0))
}
