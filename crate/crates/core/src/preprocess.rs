//! The PEME preprocessing chain and the per-episode QR reduction.
//!
//! Every feature vector passes through Power transform, Euclidean
//! normalization, Mean subtraction and a final Euclidean normalization, in
//! that order. The projection center used by the M step is either the mean
//! of the (power-transformed, normalized) base-dataset vectors or the mean
//! of the episode's own transformed vectors; both centers live in the same
//! space as the vectors they are subtracted from.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Episode, FeatureStore};

/// Projection center used by the mean-subtraction step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Mean of the transformed base-dataset vectors.
    BaseMean,
    /// Mean of the episode's own transformed support and query vectors.
    NovelMean,
    /// Skip mean subtraction.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Power-transform exponent; must be nonzero.
    pub beta: f64,
    /// Offset added before exponentiation; must be positive.
    pub epsilon: f64,
    pub center_mode: CenterMode,
    pub apply_qr: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            beta: 0.5,
            epsilon: 1e-6,
            center_mode: CenterMode::NovelMean,
            apply_qr: true,
        }
    }
}

impl PreprocessConfig {
    pub fn check(&self) -> Result<()> {
        if self.beta == 0.0 || !self.beta.is_finite() {
            return Err(Error::InvalidConfig("beta must be finite and nonzero".into()));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("epsilon must be finite and positive".into()));
        }
        Ok(())
    }
}

/// An episode after PEME (and optionally QR): all rows unit norm, feature
/// dimension `d_eff <= d`.
#[derive(Debug, Clone)]
pub struct ProcessedEpisode {
    pub support: Array2<f64>,
    pub support_labels: Vec<usize>,
    pub query: Array2<f64>,
    pub hidden_labels: Vec<usize>,
    pub d_eff: usize,
}

impl ProcessedEpisode {
    pub fn n_way(&self) -> usize {
        self.support_labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    pub fn shots(&self) -> usize {
        self.support_labels.len() / self.n_way()
    }

    /// Support rows stacked over query rows, the order used throughout the
    /// transductive solver.
    pub fn stacked(&self) -> Array2<f64> {
        let mut all = Array2::zeros((self.support.nrows() + self.query.nrows(), self.d_eff));
        all.slice_mut(ndarray::s![..self.support.nrows(), ..])
            .assign(&self.support);
        all.slice_mut(ndarray::s![self.support.nrows().., ..])
            .assign(&self.query);
        all
    }
}

/// Elementwise `(v_h + epsilon)^beta`; input entries must be nonnegative.
pub fn power_transform(v: ArrayView1<f64>, beta: f64, epsilon: f64) -> Result<Array1<f64>> {
    let mut out = v.to_owned();
    power_transform_in_place(out.view_mut(), beta, epsilon)?;
    Ok(out)
}

fn power_transform_in_place(mut v: ArrayViewMut1<f64>, beta: f64, epsilon: f64) -> Result<()> {
    for x in v.iter_mut() {
        if *x < 0.0 {
            return Err(Error::NegativeInput(*x));
        }
        *x = powf_nonneg(*x + epsilon, beta);
    }
    Ok(())
}

// beta = 0.5 is the default and sits on the per-episode hot path; sqrt is
// exact for nonnegative inputs and much cheaper than powf.
#[inline]
fn powf_nonneg(base: f64, beta: f64) -> f64 {
    if beta == 0.5 {
        base.sqrt()
    } else if beta == 1.0 {
        base
    } else {
        base.powf(beta)
    }
}

/// `v / ||v||_2`; rejects vectors of zero norm.
pub fn euclidean_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let mut out = v.to_owned();
    normalize_in_place(out.view_mut())?;
    Ok(out)
}

fn normalize_in_place(mut v: ArrayViewMut1<f64>) -> Result<()> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    if !norm.is_finite() {
        return Err(Error::NonFinite("euclidean normalization".into()));
    }
    v.mapv_inplace(|x| x / norm);
    Ok(())
}

/// `v - m`.
pub fn mean_subtract(v: ArrayView1<f64>, m: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.len() != m.len() {
        return Err(Error::DimensionMismatch {
            expected: v.len(),
            got: m.len(),
            context: "mean subtraction".into(),
        });
    }
    Ok(&v - &m)
}

/// Source of the projection center: the base dataset for
/// [`CenterMode::BaseMean`], the episode itself for
/// [`CenterMode::NovelMean`].
#[derive(Debug, Clone, Copy)]
pub enum CenterSource<'a> {
    Base(&'a FeatureStore),
    Novel(&'a Episode),
}

/// Mean of the power-transformed, normalized vectors of the source.
pub fn compute_projection_center(
    source: CenterSource<'_>,
    beta: f64,
    epsilon: f64,
) -> Result<Array1<f64>> {
    match source {
        CenterSource::Base(store) => {
            let mut sum = Array1::<f64>::zeros(store.dim());
            let mut count = 0usize;
            for block in store.classes() {
                for row in block.vectors.rows() {
                    let v: Array1<f64> = row.mapv(f64::from);
                    let pe = pe_stage(v, beta, epsilon)?;
                    sum += &pe;
                    count += 1;
                }
            }
            Ok(sum / count as f64)
        }
        CenterSource::Novel(episode) => {
            let mut sum = Array1::<f64>::zeros(episode.dim);
            let rows = episode.support.rows().into_iter().chain(episode.query.rows());
            let mut count = 0usize;
            for row in rows {
                let pe = pe_stage(row.to_owned(), beta, epsilon)?;
                sum += &pe;
                count += 1;
            }
            Ok(sum / count as f64)
        }
    }
}

fn pe_stage(mut v: Array1<f64>, beta: f64, epsilon: f64) -> Result<Array1<f64>> {
    power_transform_in_place(v.view_mut(), beta, epsilon)?;
    normalize_in_place(v.view_mut())?;
    Ok(v)
}

/// Applies the full chain to an episode. `base_store` is only consulted
/// when `cfg.center_mode` is [`CenterMode::BaseMean`].
pub fn peme(
    episode: &Episode,
    cfg: &PreprocessConfig,
    base_store: Option<&FeatureStore>,
) -> Result<ProcessedEpisode> {
    let base_center = match cfg.center_mode {
        CenterMode::BaseMean => {
            let store = base_store.ok_or_else(|| {
                Error::MissingCenterSource("base_mean centering needs a base store".into())
            })?;
            Some(compute_projection_center(
                CenterSource::Base(store),
                cfg.beta,
                cfg.epsilon,
            )?)
        }
        _ => None,
    };
    peme_with_center(episode, cfg, base_center.as_ref().map(|c| c.view()))
}

/// Like [`peme`] but with the base-dataset center already computed, so an
/// evaluation run can amortize it across episodes.
pub fn peme_with_center(
    episode: &Episode,
    cfg: &PreprocessConfig,
    base_center: Option<ArrayView1<f64>>,
) -> Result<ProcessedEpisode> {
    cfg.check()?;
    let l = episode.support.nrows();
    let u = episode.query.nrows();
    let d = episode.dim;

    let mut rows = Array2::<f64>::zeros((l + u, d));
    rows.slice_mut(ndarray::s![..l, ..]).assign(&episode.support);
    rows.slice_mut(ndarray::s![l.., ..]).assign(&episode.query);

    // P then E, per row.
    for mut row in rows.rows_mut() {
        power_transform_in_place(row.view_mut(), cfg.beta, cfg.epsilon)?;
        normalize_in_place(row.view_mut())?;
    }

    // M: subtract the projection center.
    match cfg.center_mode {
        CenterMode::None => {}
        CenterMode::BaseMean => {
            let center = base_center.ok_or_else(|| {
                Error::MissingCenterSource("base_mean centering needs a base store".into())
            })?;
            if center.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: center.len(),
                    context: "projection center".into(),
                });
            }
            for mut row in rows.rows_mut() {
                row -= &center;
            }
        }
        CenterMode::NovelMean => {
            let center = rows.mean_axis(Axis(0)).expect("at least one row");
            for mut row in rows.rows_mut() {
                row -= &center;
            }
        }
    }

    // Final E.
    for mut row in rows.rows_mut() {
        normalize_in_place(row.view_mut())?;
    }

    let rows = if cfg.apply_qr { qr_reduce(&rows)? } else { rows };
    let d_eff = rows.ncols();

    Ok(ProcessedEpisode {
        support: rows.slice(ndarray::s![..l, ..]).to_owned(),
        support_labels: episode.support_labels.clone(),
        query: rows.slice(ndarray::s![l.., ..]).to_owned(),
        hidden_labels: episode.hidden_labels.clone(),
        d_eff,
    })
}

/// Re-expresses the rows in an orthonormal basis of their span, shrinking
/// the feature dimension to `min(d, rows)` while preserving every pairwise
/// inner product.
///
/// Implemented as a Householder QR of the transpose: with `X^T = Q R` and
/// `Q` orthonormal, `Y = R^T` satisfies `Y Y^T = R^T R = X X^T`. The
/// reflections are applied to the rows of `X` directly (they are the
/// columns of `X^T`), which keeps every inner loop on contiguous memory.
pub fn qr_reduce(rows: &Array2<f64>) -> Result<Array2<f64>> {
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("qr_reduce input".into()));
    }
    let m = rows.nrows();
    let d = rows.ncols();
    let r = d.min(m);

    let mut x = rows.to_owned();
    let data = x.as_slice_mut().expect("owned row-major array");
    let mut reflector = vec![0.0; d];

    for k in 0..r {
        // Column k of X^T is row k of X; the active part starts at entry k.
        let pivot = &data[k * d + k..(k + 1) * d];
        let norm = pivot.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if pivot[0] >= 0.0 { -norm } else { norm };
        let v = &mut reflector[..d - k];
        v.copy_from_slice(pivot);
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();

        for j in (k + 1)..m {
            let row = &mut data[j * d + k..(j + 1) * d];
            let dot: f64 = row.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            let scale = 2.0 * dot / vnorm2;
            for (a, b) in row.iter_mut().zip(v.iter()) {
                *a -= scale * b;
            }
        }
        let pivot = &mut data[k * d + k..(k + 1) * d];
        pivot[0] = alpha;
        for entry in pivot.iter_mut().skip(1) {
            *entry = 0.0;
        }
    }

    // Y = R^T is the first r coordinates of each reduced row.
    Ok(x.slice(ndarray::s![.., ..r]).to_owned())
}
