//! Inductive nearest-class-mean classification and the episode-evaluation
//! harness.
//!
//! `evaluate` samples N episodes with per-episode seeds derived from a
//! master seed, runs preprocessing plus the chosen method on each, and
//! aggregates accuracy with a 95% confidence interval. Episodes are
//! independent, so the loop is data-parallel; results are collected in
//! episode order and reduced sequentially, which makes the report
//! identical for any worker count.

use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::bms::{run_bms, BmsConfig, BmsMode};
use crate::error::{Error, Result};
use crate::features::{sample_episode, EpisodeSpec, FeatureStore};
use crate::preprocess::{
    compute_projection_center, peme_with_center, CenterMode, CenterSource, PreprocessConfig,
    ProcessedEpisode,
};
use crate::seeding::episode_seed;

/// Classification method run on each episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ncm,
    Bms,
    BmsStar,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ncm => "ncm",
            Method::Bms => "bms",
            Method::BmsStar => "bms_star",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ncm" => Ok(Method::Ncm),
            "bms" => Ok(Method::Bms),
            "bms_star" => Ok(Method::BmsStar),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

/// Nearest class mean over the support set: each query goes to the class
/// whose (unnormalized) support centroid is closest in Euclidean distance,
/// ties toward the lowest class index.
pub fn ncm_classify(episode: &ProcessedEpisode) -> Vec<usize> {
    let n = episode.n_way();
    let d = episode.d_eff;
    let mut centroids = ndarray::Array2::<f64>::zeros((n, d));
    let mut counts = vec![0usize; n];
    for (row, &label) in episode.support.rows().into_iter().zip(&episode.support_labels) {
        let mut c = centroids.row_mut(label);
        c += &row;
        counts[label] += 1;
    }
    for (mut c, &count) in centroids.rows_mut().into_iter().zip(&counts) {
        c.mapv_inplace(|v| v / count as f64);
    }

    episode
        .query
        .rows()
        .into_iter()
        .map(|f| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (j, c) in centroids.rows().into_iter().enumerate() {
                let diff = &f - &c;
                let dist = diff.dot(&diff);
                if dist < best_d {
                    best_d = dist;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Everything that determines an evaluation run, echoed into the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub n_way: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub preprocess: PreprocessConfig,
    pub method: Method,
    pub bms: Option<BmsConfig>,
    pub episodes: usize,
    pub master_seed: u64,
}

/// Aggregate result of an evaluation run.
///
/// The JSON serialization deliberately omits the wall-clock timing field:
/// everything serialized is a pure function of the inputs and the master
/// seed, so two runs with the same settings produce byte-identical JSON
/// regardless of worker count. Timing is reported in the TSV line and the
/// struct itself.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub method: Method,
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub ci95: f64,
    #[serde(skip)]
    pub mean_episode_seconds: f64,
    pub config: RunSettings,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One-line summary: method, n, s, q, N, mean, ci95, secs/episode, seed.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.method.as_str(),
            self.config.n_way,
            self.config.shots,
            self.config.queries_per_class,
            self.episodes,
            self.mean_accuracy,
            self.ci95,
            self.mean_episode_seconds,
            self.seed
        )
    }
}

/// Runs one episode end to end and scores query accuracy.
fn run_episode(
    store: &FeatureStore,
    spec: &EpisodeSpec,
    prep: &PreprocessConfig,
    base_center: Option<&Array1<f64>>,
    method: Method,
    bms_cfg: &BmsConfig,
) -> Result<f64> {
    let episode = sample_episode(store, spec)?;
    let processed = peme_with_center(&episode, prep, base_center.map(|c| c.view()))?;
    let predicted = match method {
        Method::Ncm => ncm_classify(&processed),
        Method::Bms | Method::BmsStar => run_bms(&processed, bms_cfg)?,
    };
    let correct = predicted
        .iter()
        .zip(&processed.hidden_labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(correct as f64 / processed.hidden_labels.len() as f64)
}

/// Samples `episodes` few-shot tasks and reports mean query accuracy with
/// a 95% confidence interval (1.96 times the standard error of the
/// per-episode accuracies).
///
/// `threads` bounds the worker count: 0 uses the default pool, 1 forces a
/// sequential run. Builds without the `parallel` feature always run
/// sequentially. An episode failure aborts the whole run and names the
/// failing episode seed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    store: &FeatureStore,
    base_store: Option<&FeatureStore>,
    spec: &EpisodeSpec,
    prep: &PreprocessConfig,
    method: Method,
    bms_cfg: Option<&BmsConfig>,
    episodes: usize,
    master_seed: u64,
    threads: usize,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidConfig("need at least one episode".into()));
    }
    prep.check()?;

    let base_center = match prep.center_mode {
        CenterMode::BaseMean => {
            let base = base_store.ok_or_else(|| {
                Error::MissingCenterSource("base_mean centering needs a base store".into())
            })?;
            Some(compute_projection_center(
                CenterSource::Base(base),
                prep.beta,
                prep.epsilon,
            )?)
        }
        _ => None,
    };

    // Resolve the method configuration once. BMS* derives balanced exact
    // targets (s + q per class) from the episode spec when none are given.
    let mut cfg = bms_cfg.cloned().unwrap_or_default();
    match method {
        Method::Ncm => {}
        Method::Bms => cfg.mode = BmsMode::Bms,
        Method::BmsStar => {
            cfg.mode = BmsMode::BmsStar;
            if cfg.exact_targets.is_none() {
                cfg.exact_targets =
                    Some(vec![(spec.shots + spec.queries_per_class) as f64; spec.n_way]);
            }
        }
    }

    let one = |index: usize| -> Result<(f64, f64)> {
        let seed = episode_seed(master_seed, index as u64);
        let ep_spec = EpisodeSpec { seed, ..*spec };
        let start = Instant::now();
        let accuracy = run_episode(store, &ep_spec, prep, base_center.as_ref(), method, &cfg)
            .map_err(|source| Error::EpisodeFailed {
                seed,
                source: Box::new(source),
            })?;
        Ok((accuracy, start.elapsed().as_secs_f64()))
    };

    let results: Vec<Result<(f64, f64)>> = run_indexed(episodes, threads, one);

    let mut accuracies = Vec::with_capacity(episodes);
    let mut total_seconds = 0.0;
    for r in results {
        let (acc, secs) = r?;
        accuracies.push(acc);
        total_seconds += secs;
    }

    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let ci95 = if accuracies.len() > 1 {
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
        1.96 * (var / n).sqrt()
    } else {
        0.0
    };

    let config = RunSettings {
        n_way: spec.n_way,
        shots: spec.shots,
        queries_per_class: spec.queries_per_class,
        preprocess: *prep,
        method,
        bms: match method {
            Method::Ncm => None,
            _ => Some(cfg),
        },
        episodes,
        master_seed,
    };

    Ok(EvalReport {
        method,
        episodes,
        mean_accuracy: mean,
        ci95,
        mean_episode_seconds: total_seconds / n,
        config,
        seed: master_seed,
    })
}

#[cfg(feature = "parallel")]
fn run_indexed<T, F>(count: usize, threads: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    use rayon::prelude::*;

    if threads == 1 {
        return (0..count).map(job).collect();
    }
    let run = || (0..count).into_par_iter().map(&job).collect();
    if threads == 0 {
        run()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(run)
    }
}

#[cfg(not(feature = "parallel"))]
fn run_indexed<T, F>(count: usize, _threads: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    (0..count).map(job).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{generate_synthetic_store, SkewMode};
    use ndarray::array;

    fn processed_toy() -> ProcessedEpisode {
        // two orthogonal classes, queries sitting on the prototypes
        ProcessedEpisode {
            support: array![[1.0, 0.0], [0.0, 1.0]],
            support_labels: vec![0, 1],
            query: array![[1.0, 0.0], [0.0, 1.0]],
            hidden_labels: vec![0, 1],
            d_eff: 2,
        }
    }

    #[test]
    fn query_on_centroid_goes_to_that_class() {
        let ep = processed_toy();
        assert_eq!(ncm_classify(&ep), vec![0, 1]);
    }

    #[test]
    fn one_shot_ncm_is_nearest_support_vector() {
        // support vectors at angles 0.6 and 1.0 rad; queries sit slightly
        // off each support point
        let (a, b, qa, qb) = (0.6_f64, 1.0_f64, 0.65_f64, 0.95_f64);
        let ep = ProcessedEpisode {
            support: array![[a.cos(), a.sin()], [b.cos(), b.sin()]],
            support_labels: vec![0, 1],
            query: array![[qa.cos(), qa.sin()], [qb.cos(), qb.sin()]],
            hidden_labels: vec![0, 1],
            d_eff: 2,
        };
        assert_eq!(ncm_classify(&ep), vec![0, 1]);
    }

    #[test]
    fn permuting_class_ids_permutes_ncm_outputs() {
        let ep = processed_toy();
        let swapped = ProcessedEpisode {
            support: array![[0.0, 1.0], [1.0, 0.0]],
            support_labels: vec![0, 1],
            query: ep.query.clone(),
            hidden_labels: vec![1, 0],
            d_eff: 2,
        };
        let orig = ncm_classify(&ep);
        let perm = ncm_classify(&swapped);
        assert_eq!(orig, vec![0, 1]);
        assert_eq!(perm, vec![1, 0]);
    }

    #[test]
    fn identical_seeds_give_identical_reports() {
        let store = generate_synthetic_store(10, 16, 24, 6.0, SkewMode::Gaussian, 4).unwrap();
        let spec = EpisodeSpec {
            n_way: 5,
            shots: 1,
            queries_per_class: 5,
            seed: 0,
        };
        let prep = PreprocessConfig::default();
        let a = evaluate(&store, None, &spec, &prep, Method::Ncm, None, 20, 99, 1).unwrap();
        let b = evaluate(&store, None, &spec, &prep, Method::Ncm, None, 20, 99, 1).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.mean_accuracy.to_bits(), b.mean_accuracy.to_bits());
    }

    #[test]
    fn failing_episode_reports_its_seed() {
        let store = generate_synthetic_store(4, 8, 5, 1.0, SkewMode::Gaussian, 4).unwrap();
        // infeasible: 5-way from a 4-class store
        let spec = EpisodeSpec {
            n_way: 5,
            shots: 1,
            queries_per_class: 2,
            seed: 0,
        };
        let prep = PreprocessConfig::default();
        let err = evaluate(&store, None, &spec, &prep, Method::Ncm, None, 3, 1, 1).unwrap_err();
        assert!(matches!(err, Error::EpisodeFailed { .. }));
    }
}
