//! Property tests over the stated algebraic invariants.

use ndarray::{Array1, Array2};
use proptest::prelude::*;

use fewshot_ot::preprocess::{euclidean_normalize, power_transform};
use fewshot_ot::sinkhorn::marginal_sums;
use fewshot_ot::{
    concat_stores, generate_synthetic_store, qr_reduce, row_normalize_final, sample_skewness,
    AllocationMatrix, SkewMode,
};

proptest! {
    #[test]
    fn power_transform_is_monotone_per_coordinate(
        pairs in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..20),
        beta in 0.05f64..3.0,
    ) {
        let lo: Vec<f64> = pairs.iter().map(|(a, b)| a.min(*b)).collect();
        let hi: Vec<f64> = pairs.iter().map(|(a, b)| a.max(*b)).collect();
        let t_lo = power_transform(Array1::from_vec(lo).view(), beta, 1e-6).unwrap();
        let t_hi = power_transform(Array1::from_vec(hi).view(), beta, 1e-6).unwrap();
        for (a, b) in t_lo.iter().zip(t_hi.iter()) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn skewness_is_location_scale_equivariant(
        xs in proptest::collection::vec(-50.0f64..50.0, 8..40),
        a in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        b in -100.0f64..100.0,
    ) {
        let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - xs.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let base = sample_skewness(&xs).unwrap();
        let moved: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let scaled = sample_skewness(&moved).unwrap();
        prop_assert!((scaled - a.signum() * base).abs() < 1e-6 * (1.0 + base.abs()));
    }

    #[test]
    fn final_row_normalization_hits_targets_exactly(
        rows in 1usize..8,
        cols in 1usize..6,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = fewshot_ot::seeding::rng_from_seed(seed);
        let values = Array2::from_shape_fn((rows, cols), |_| rng.random_range(0.01..5.0));
        let p = AllocationMatrix::from_values(values).unwrap();
        let targets = Array1::ones(rows);
        let fixed = row_normalize_final(&p, &targets);
        let (row_sums, _) = marginal_sums(&fixed);
        for &s in row_sums.iter() {
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn qr_preserves_pairwise_distances(
        m in 2usize..12,
        d in 2usize..40,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = fewshot_ot::seeding::rng_from_seed(seed);
        let rows = Array2::from_shape_fn((m, d), |_| rng.random_range(-2.0..2.0));
        let reduced = qr_reduce(&rows).unwrap();
        for i in 0..m {
            for j in 0..m {
                let a = &rows.row(i) - &rows.row(j);
                let b = &reduced.row(i) - &reduced.row(j);
                let da = a.dot(&a).sqrt();
                let db = b.dot(&b).sqrt();
                prop_assert!((da - db).abs() < 1e-6, "distance {da} vs {db}");
            }
        }
    }

    #[test]
    fn cosine_and_euclidean_orderings_coincide_on_the_sphere(
        seed in any::<u64>(),
        d in 2usize..16,
        candidates in 2usize..6,
    ) {
        use rand::Rng;
        let mut rng = fewshot_ot::seeding::rng_from_seed(seed);
        let draw_unit = |rng: &mut rand_chacha::ChaCha8Rng, d: usize| {
            loop {
                let v = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
                if v.dot(&v) > 1e-6 {
                    return euclidean_normalize(v.view()).unwrap();
                }
            }
        };
        let query = draw_unit(&mut rng, d);
        let points: Vec<Array1<f64>> = (0..candidates).map(|_| draw_unit(&mut rng, d)).collect();

        let by_distance = points
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (&query - *a).mapv(|v| v * v).sum();
                let db = (&query - *b).mapv(|v| v * v).sum();
                da.partial_cmp(&db).unwrap()
            })
            .map(|(i, _)| i);
        let by_cosine = points
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                query.dot(*a).partial_cmp(&query.dot(*b)).unwrap()
            })
            .map(|(i, _)| i);
        prop_assert_eq!(by_distance, by_cosine);
    }
}

#[test]
fn concat_then_slice_recovers_originals_exactly() {
    let dims = [3usize, 5, 2];
    let stores: Vec<_> = dims
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            generate_synthetic_store(4, d, 6, 1.0 + i as f64, SkewMode::Gaussian, i as u64)
                .unwrap()
        })
        .collect();
    let merged = concat_stores(&stores).unwrap();
    assert_eq!(merged.dim(), 10);

    let mut offset = 0;
    for (store, &d) in stores.iter().zip(&dims) {
        for (block, merged_block) in store.classes().iter().zip(merged.classes()) {
            for i in 0..block.count() {
                for k in 0..d {
                    assert_eq!(
                        block.vectors[[i, k]],
                        merged_block.vectors[[i, offset + k]]
                    );
                }
            }
        }
        offset += d;
    }
}
