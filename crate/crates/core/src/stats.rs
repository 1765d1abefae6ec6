//! Distribution diagnostics: sample skewness and the D'Agostino-Pearson
//! omnibus normality test, plus a per-(class, dimension) pass-rate sweep
//! over a feature store.
//!
//! The omnibus statistic combines a normalized skewness (D'Agostino 1970,
//! with the 1973 correction) and a normalized kurtosis (Anscombe & Glynn
//! 1983) into `K^2 = Z1^2 + Z2^2`, referred against chi-square with two
//! degrees of freedom. The transformation constants below follow the
//! published tests verbatim (the same ones scipy's `normaltest` uses).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::FeatureStore;
use crate::preprocess::{euclidean_normalize, power_transform};

/// Outcome of one omnibus normality test.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NormalityResult {
    pub k2: f64,
    pub p_value: f64,
    pub n_samples: usize,
}

fn central_moments(xs: &[f64]) -> (f64, f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (mean, m2 / n, m3 / n, m4 / n)
}

/// Moment-ratio skewness `g1 = m3 / m2^(3/2)`.
pub fn sample_skewness(xs: &[f64]) -> Result<f64> {
    if xs.len() < 3 {
        return Err(Error::TooFewSamples {
            got: xs.len(),
            min: 3,
        });
    }
    let (_, m2, m3, _) = central_moments(xs);
    if m2 == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok(m3 / m2.powf(1.5))
}

/// Moment-ratio kurtosis `b2 = m4 / m2^2` (not excess).
fn sample_kurtosis(xs: &[f64]) -> Result<f64> {
    let (_, m2, _, m4) = central_moments(xs);
    if m2 == 0.0 {
        return Err(Error::ConstantInput);
    }
    Ok(m4 / (m2 * m2))
}

/// Normalized skewness Z1(g1): D'Agostino (1970), corrected 1973.
fn skewness_z(g1: f64, n: usize) -> f64 {
    let n = n as f64;
    let y = g1 * ((n + 1.0) * (n + 3.0) / (6.0 * (n - 2.0))).sqrt();
    let beta2 = 3.0 * (n * n + 27.0 * n - 70.0) * (n + 1.0) * (n + 3.0)
        / ((n - 2.0) * (n + 5.0) * (n + 7.0) * (n + 9.0));
    let w2 = -1.0 + (2.0 * (beta2 - 1.0)).sqrt();
    let delta = 1.0 / (0.5 * w2.ln()).sqrt();
    let alpha = (2.0 / (w2 - 1.0)).sqrt();
    let t = y / alpha;
    delta * (t + (t * t + 1.0).sqrt()).ln()
}

/// Normalized kurtosis Z2(b2): Anscombe & Glynn (1983).
fn kurtosis_z(b2: f64, n: usize) -> f64 {
    let n = n as f64;
    let e = 3.0 * (n - 1.0) / (n + 1.0);
    let var = 24.0 * n * (n - 2.0) * (n - 3.0) / ((n + 1.0).powi(2) * (n + 3.0) * (n + 5.0));
    let x = (b2 - e) / var.sqrt();
    let sqrt_beta1 = 6.0 * (n * n - 5.0 * n + 2.0) / ((n + 7.0) * (n + 9.0))
        * (6.0 * (n + 3.0) * (n + 5.0) / (n * (n - 2.0) * (n - 3.0))).sqrt();
    let a = 6.0 + 8.0 / sqrt_beta1 * (2.0 / sqrt_beta1 + (1.0 + 4.0 / (sqrt_beta1 * sqrt_beta1)).sqrt());
    let term1 = 1.0 - 2.0 / (9.0 * a);
    let denom = 1.0 + x * (2.0 / (a - 4.0)).sqrt();
    let term2 = denom.signum() * ((1.0 - 2.0 / a) / denom.abs()).cbrt();
    (term1 - term2) / (2.0 / (9.0 * a)).sqrt()
}

/// D'Agostino-Pearson omnibus test. Needs at least 20 samples (the
/// validity floor of the kurtosis transformation) and nonzero variance.
pub fn dagostino_pearson(xs: &[f64]) -> Result<NormalityResult> {
    if xs.len() < 20 {
        return Err(Error::TooFewSamples {
            got: xs.len(),
            min: 20,
        });
    }
    let g1 = sample_skewness(xs)?;
    let b2 = sample_kurtosis(xs)?;
    let z1 = skewness_z(g1, xs.len());
    let z2 = kurtosis_z(b2, xs.len());
    let k2 = z1 * z1 + z2 * z2;
    // chi-square(2) survival function has the closed form exp(-x/2)
    let p_value = (-k2 / 2.0).exp();
    Ok(NormalityResult {
        k2,
        p_value,
        n_samples: xs.len(),
    })
}

/// Preprocessing applied to each vector before the per-dimension tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum StatsTransform {
    /// Power transform only.
    Power { beta: f64, epsilon: f64 },
    /// Power transform followed by Euclidean normalization.
    PowerNormalize { beta: f64, epsilon: f64 },
}

/// One (class, dimension) cell of the sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CellResult {
    pub class_id: u32,
    pub dim_index: usize,
    pub k2: f64,
    pub p_value: f64,
    pub pass: bool,
}

/// Result of the store-wide Gaussianity sweep.
#[derive(Debug, Clone, Serialize)]
pub struct PassRateReport {
    pub alpha: f64,
    pub pass_rate: f64,
    pub cells: Vec<CellResult>,
}

impl PassRateReport {
    /// TSV rows `class_id dim_index k2 p pass`, one per cell, with header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("class_id\tdim_index\tk2\tp\tpass\n");
        for cell in &self.cells {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6e}\t{}\n",
                cell.class_id, cell.dim_index, cell.k2, cell.p_value, cell.pass as u8
            ));
        }
        out
    }
}

/// Runs the omnibus test on every (class, dimension) cell of the store,
/// optionally transforming each vector first, and reports the fraction of
/// cells where normality is *not* rejected at level `alpha`.
pub fn gaussianity_pass_rate(
    store: &FeatureStore,
    transform: Option<StatsTransform>,
    alpha: f64,
) -> Result<PassRateReport> {
    if !alpha.is_finite() || alpha <= 0.0 || alpha >= 1.0 {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside (0, 1)")));
    }

    let per_class: Result<Vec<Vec<CellResult>>> = map_classes(store.classes(), |block| {
        let count = block.count();
        let dim = block.vectors.ncols();
        // transformed copy of this class's vectors, row-major
        let mut data = Vec::with_capacity(count * dim);
        for row in block.vectors.rows() {
            let raw: ndarray::Array1<f64> = row.mapv(f64::from);
            let vec = match transform {
                None => raw,
                Some(StatsTransform::Power { beta, epsilon }) => {
                    power_transform(raw.view(), beta, epsilon)?
                }
                Some(StatsTransform::PowerNormalize { beta, epsilon }) => {
                    let p = power_transform(raw.view(), beta, epsilon)?;
                    euclidean_normalize(p.view())?
                }
            };
            data.extend(vec.iter());
        }

        let mut cells = Vec::with_capacity(dim);
        let mut column = vec![0.0; count];
        for k in 0..dim {
            for i in 0..count {
                column[i] = data[i * dim + k];
            }
            let result = dagostino_pearson(&column)?;
            cells.push(CellResult {
                class_id: block.class_id,
                dim_index: k,
                k2: result.k2,
                p_value: result.p_value,
                pass: result.p_value > alpha,
            });
        }
        Ok(cells)
    });

    let cells: Vec<CellResult> = per_class?.into_iter().flatten().collect();
    let passed = cells.iter().filter(|c| c.pass).count();
    Ok(PassRateReport {
        alpha,
        pass_rate: passed as f64 / cells.len() as f64,
        cells,
    })
}

#[cfg(feature = "parallel")]
fn map_classes<T, F>(classes: &[crate::features::ClassBlock], job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&crate::features::ClassBlock) -> Result<T> + Sync + Send,
{
    use rayon::prelude::*;
    classes.par_iter().map(job).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_classes<T, F>(classes: &[crate::features::ClassBlock], job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&crate::features::ClassBlock) -> Result<T> + Sync + Send,
{
    classes.iter().map(job).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn symmetric_input_has_zero_skew() {
        let g1 = sample_skewness(&[-1.0, 0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(g1, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn right_tail_gives_positive_skew() {
        let g1 = sample_skewness(&[0.0, 0.0, 0.0, 10.0]).unwrap();
        assert!(g1 > 0.0);
    }

    #[test]
    fn skewness_needs_variation() {
        assert!(matches!(
            sample_skewness(&[2.0, 2.0, 2.0]),
            Err(Error::ConstantInput)
        ));
        assert!(matches!(
            sample_skewness(&[1.0, 2.0]),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn omnibus_needs_twenty_samples() {
        let xs: Vec<f64> = (0..10).map(|v| v as f64).collect();
        assert!(matches!(
            dagostino_pearson(&xs),
            Err(Error::TooFewSamples { got: 10, min: 20 })
        ));
    }

    #[test]
    fn omnibus_rejects_constant_input() {
        let xs = vec![1.0; 30];
        assert!(matches!(dagostino_pearson(&xs), Err(Error::ConstantInput)));
    }

    #[test]
    fn chi2_survival_closed_form() {
        // sanity: K^2 = 0 gives p = 1, large K^2 gives tiny p
        let xs: Vec<f64> = (0..100)
            .map(|i| {
                let t = (i as f64 + 0.5) / 100.0;
                // normal quantiles via inverse-ish spread; exact shape not
                // important here, only that p lands in (0, 1]
                (t - 0.5) * 6.0
            })
            .collect();
        let r = dagostino_pearson(&xs).unwrap();
        assert!(r.p_value > 0.0 && r.p_value <= 1.0);
    }
}
