//! Invariants checked over generated inputs.
#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::HashSet;

use ndarray::{Array1, Array2};
use phenotyper_core::analysis::{
    auc, edge_scores, gini_sparsity, logit_significance, membership_stratification, overlap, Direction, EdgeOptions,
    SignificanceOptions,
};
use phenotyper_core::cohort::{
    cohort_from_jsonl_str, cohort_to_jsonl_string, Cohort, Covariates, Entity, EntityKind, Label, Patient, Provenance,
    Visit,
};
use phenotyper_core::embedding::{similarity_matrix, softmax_prob, EmbeddingTable, SimilaritySource};
use phenotyper_core::factorization::{predict, FactorModel, HyperParams};
use phenotyper_core::logistic::LogisticOptions;
use phenotyper_core::matching::{
    chi_square_yates, fit_propensity_with, match_cohort, standardized_bias, Candidate, ContingencyTable2x2,
};
use phenotyper_core::tensor::{build_transition_tensor, mean_transition_matrix, TensorMode};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(64)
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn labels(n: usize) -> impl Strategy<Value = Vec<Label>> {
    prop::collection::vec(any::<bool>(), n).prop_map(|mut v| {
        v[0] = true;
        v[1] = false;
        v.into_iter()
            .map(|b| if b { Label::Positive } else { Label::Negative })
            .collect()
    })
}

/// Patients as lists of visits, each a non-empty set of entity indices.
fn visits(n_entities: usize) -> impl Strategy<Value = Vec<Vec<Vec<usize>>>> {
    let visit = prop::collection::hash_set(0..n_entities, 1..=4).prop_map(|s| {
        let mut v: Vec<usize> = s.into_iter().collect();
        v.sort_unstable();
        v
    });
    prop::collection::vec(prop::collection::vec(visit, 1..6), 1..8)
}

fn build_cohort(n_entities: usize, raw: &[Vec<Vec<usize>>]) -> Cohort {
    let vocabulary = (0..n_entities)
        .map(|i| Entity {
            index: i,
            kind: if i % 2 == 0 { EntityKind::Diagnosis } else { EntityKind::Medication },
            code: format!("{}:{i:02}", if i % 2 == 0 { "D" } else { "M" }),
        })
        .collect();
    let patients = raw
        .iter()
        .enumerate()
        .map(|(id, vs)| Patient {
            id,
            visits: vs.iter().enumerate().map(|(t, v)| Visit::new(t, v.clone())).collect(),
            label: if id % 2 == 0 { Label::Positive } else { Label::Negative },
            covariates: Covariates::default(),
        })
        .collect();
    Cohort::new(vocabulary, patients, Provenance::Ingested).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn chi_square_symmetries(a in 1u64..500, b in 1u64..500, c in 1u64..500, d in 1u64..500) {
        let base = chi_square_yates(&ContingencyTable2x2::new([[a, b], [c, d]]).unwrap()).unwrap();
        let t = ContingencyTable2x2::new([[a, b], [c, d]]).unwrap().transposed();
        let transposed = chi_square_yates(&t).unwrap();
        let swapped = chi_square_yates(&ContingencyTable2x2::new([[d, c], [b, a]]).unwrap()).unwrap();
        for other in [transposed, swapped] {
            prop_assert!((base.statistic - other.statistic).abs() <= 1e-9 * base.statistic.max(1.0));
            prop_assert!((base.ln_p - other.ln_p).abs() <= 1e-9 * base.ln_p.abs().max(1.0));
        }
    }

    #[test]
    fn bias_is_shift_and_scale_invariant(
        case in prop::collection::vec(-10.0..10.0f64, 2..30),
        control in prop::collection::vec(-10.0..10.0f64, 2..30),
        shift in -100.0..100.0f64,
        scale in 0.01..100.0f64,
    ) {
        let base = standardized_bias(&case, &control).unwrap();
        let map = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
        let moved = standardized_bias(&map(&case), &map(&control)).unwrap();
        prop_assert!((base.percent - moved.percent).abs() <= 1e-6 * base.percent.max(1.0));
    }

    #[test]
    fn matching_uses_each_control_once(
        case_scores in prop::collection::vec(0.01..0.99f64, 1..40),
        control_scores in prop::collection::vec(0.01..0.99f64, 1..40),
        ages in prop::collection::vec(20.0..90.0f64, 80),
        caliper in 0.0..1.0f64,
        budget in 1.0..100.0f64,
    ) {
        let cand = |scores: &[f64], offset: usize| -> Vec<Candidate> {
            scores
                .iter()
                .enumerate()
                .map(|(i, &score)| Candidate {
                    id: i,
                    score,
                    covariates: Covariates { age_at_start: ages[offset + i], ..Default::default() },
                })
                .collect()
        };
        let cases = cand(&case_scores, 0);
        let controls = cand(&control_scores, 40);
        let result = match_cohort(&cases, &controls, caliper, budget).unwrap();
        prop_assert!(result.pairs.len() <= cases.len().min(controls.len()));
        let used: HashSet<usize> = result.pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(used.len(), result.pairs.len());
        let matched_cases: HashSet<usize> = result.pairs.iter().map(|p| p.0).collect();
        prop_assert_eq!(matched_cases.len(), result.pairs.len());
        prop_assert_eq!(result.dropped_cases, cases.len() - result.pairs.len());
    }

    #[test]
    fn auc_ignores_monotone_transforms(
        scores in prop::collection::vec(-3.0..3.0f64, 12),
        y in labels(12),
    ) {
        let base = auc(&scores, &y).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + s).collect();
        prop_assert_eq!(base, auc(&moved, &y).unwrap());
    }

    #[test]
    fn sparsity_and_overlap_ignore_column_scaling(
        b in matrix(6, 3, 0.0, 1.0),
        c in matrix(6, 3, 0.0, 1.0),
        factors in prop::collection::vec(0.01..100.0f64, 6),
    ) {
        let model = |b: Array2<f64>, c: Array2<f64>| FactorModel {
            a: Array2::zeros((1, 3)),
            b,
            c,
            theta: Array1::zeros(4),
            hyper: HyperParams { rank: 3, ..Default::default() },
        };
        let base = model(b.clone(), c.clone());
        let mut sb = b;
        let mut sc = c;
        for q in 0..3 {
            sb.column_mut(q).mapv_inplace(|v| v * factors[q]);
            sc.column_mut(q).mapv_inplace(|v| v * factors[3 + q]);
        }
        let scaled = model(sb.clone(), sc.clone());
        prop_assert!((gini_sparsity(&base) - gini_sparsity(&scaled)).abs() < 1e-12);
        // Overlap compares [b_r; c_r], so scale both halves of a phenotype together.
        let mut jb = base.b.clone();
        let mut jc = base.c.clone();
        for q in 0..3 {
            jb.column_mut(q).mapv_inplace(|v| v * factors[q]);
            jc.column_mut(q).mapv_inplace(|v| v * factors[q]);
        }
        let joint = model(jb, jc);
        prop_assert!((overlap(&base).unwrap() - overlap(&joint).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn edge_ranking_survives_joint_rescaling(
        raw in visits(6),
        b in matrix(6, 2, 0.0, 1.0),
        c in matrix(6, 2, 0.0, 1.0),
        factor in 0.01..100.0f64,
    ) {
        let cohort = build_cohort(6, &raw);
        let tensor = build_transition_tensor(&cohort, TensorMode::PatientNormalized, true);
        let Ok(mean) = mean_transition_matrix(&tensor) else {
            return Ok(());
        };
        let opts = EdgeOptions { top_k: 36, ..Default::default() };
        let base = edge_scores(1, b.view(), c.view(), &mean, cohort.vocabulary(), Direction::ADLikely, &opts).unwrap();
        let mut sb = b.clone();
        let mut sc = c.clone();
        sb.column_mut(1).mapv_inplace(|v| v * factor);
        sc.column_mut(1).mapv_inplace(|v| v * factor);
        let scaled = edge_scores(1, sb.view(), sc.view(), &mean, cohort.vocabulary(), Direction::ADLikely, &opts).unwrap();
        prop_assert_eq!(base.edges.len(), scaled.edges.len());
        for (x, y) in base.edges.iter().zip(&scaled.edges) {
            prop_assert!(x.score > 0.0);
            prop_assert!((x.score * factor * factor - y.score).abs() <= 1e-9 * y.score);
        }
        // Ranking is compared on distinct scores; exact ties may reorder
        // after rounding.
        let order = |g: &phenotyper_core::analysis::PhenotypeGraph| {
            let mut e: Vec<_> = g.edges.iter().map(|e| (e.from, e.to, e.score)).collect();
            e.sort_by_key(|x| (x.0, x.1));
            e
        };
        let (ob, os) = (order(&base), order(&scaled));
        for i in 0..ob.len() {
            for j in 0..ob.len() {
                if ob[i].2 > ob[j].2 * (1.0 + 1e-9) {
                    prop_assert!(os[i].2 > os[j].2);
                }
            }
        }
    }

    #[test]
    fn significance_z_ignores_affine_rescaling(
        x in matrix(60, 2, 0.0, 1.0),
        noise in prop::collection::vec(0.0..1.0f64, 60),
        scale in prop::collection::vec(0.1..10.0f64, 2),
        shift in prop::collection::vec(-5.0..5.0f64, 2),
    ) {
        let y: Vec<Label> = (0..60)
            .map(|i| {
                let p = 1.0 / (1.0 + (-(2.0 * x[[i, 0]] - 1.0)).exp());
                if noise[i] < p { Label::Positive } else { Label::Negative }
            })
            .collect();
        let opts = SignificanceOptions::default();
        let Ok(base) = logit_significance(x.view(), &y, &opts) else {
            return Ok(());
        };
        let mut moved = x.clone();
        for q in 0..2 {
            moved.column_mut(q).mapv_inplace(|v| scale[q] * v + shift[q]);
        }
        let other = logit_significance(moved.view(), &y, &opts).unwrap();
        for (p, q) in base.phenotypes().zip(other.phenotypes()) {
            prop_assert!((p.z - q.z).abs() < 1e-6, "{} vs {}", p.z, q.z);
        }
    }

    #[test]
    fn tensor_mass_and_normalization(raw in visits(7)) {
        let cohort = build_cohort(7, &raw);
        let counts = build_transition_tensor(&cohort, TensorMode::Counts, true);
        let expected: usize = raw
            .iter()
            .map(|vs| vs.windows(2).map(|w| w[0].len() * w[1].len()).sum::<usize>())
            .sum();
        prop_assert_eq!(counts.total_mass(), expected as f64);
        let normalized = build_transition_tensor(&cohort, TensorMode::PatientNormalized, true);
        for s in normalized.slices() {
            if !s.is_empty() {
                let total: f64 = s.iter().map(|e| e.value).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
        if let Ok(mean) = mean_transition_matrix(&normalized) {
            prop_assert!(mean.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn patient_order_only_permutes_slices(raw in visits(5), rotate in 0usize..8) {
        let n = raw.len();
        let k = rotate % n;
        let mut rotated = raw.clone();
        rotated.rotate_left(k);
        let base = build_transition_tensor(&build_cohort(5, &raw), TensorMode::Counts, true);
        let moved = build_transition_tensor(&build_cohort(5, &rotated), TensorMode::Counts, true);
        for i in 0..n {
            prop_assert_eq!(moved.slice(i), base.slice((i + k) % n));
        }
    }

    #[test]
    fn softmax_normalizes(
        input in matrix(5, 3, -2.0, 2.0),
        output in matrix(5, 3, -2.0, 2.0),
        center in 0usize..5,
    ) {
        let table = EmbeddingTable { input, output };
        let kinds = [
            EntityKind::Diagnosis,
            EntityKind::Medication,
            EntityKind::Diagnosis,
            EntityKind::Medication,
            EntityKind::Medication,
        ];
        let total: f64 = (0..5).map(|t| softmax_prob(center, t, &table, &kinds, None).unwrap()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
        let meds: f64 = [1, 3, 4]
            .iter()
            .map(|&t| softmax_prob(center, t, &table, &kinds, Some(EntityKind::Medication)).unwrap())
            .sum();
        prop_assert!((meds - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn similarity_is_a_valid_kernel(input in matrix(6, 4, -1.0, 1.0)) {
        let table = EmbeddingTable { output: input.clone(), input };
        let s = similarity_matrix(&table, SimilaritySource::Input);
        let v = s.values();
        for i in 0..6 {
            prop_assert_eq!(v[[i, i]], 1.0);
            for j in 0..6 {
                prop_assert!((0.0..=1.0).contains(&v[[i, j]]));
                prop_assert_eq!(v[[i, j]], v[[j, i]]);
            }
        }
    }

    #[test]
    fn predict_is_monotone_in_positive_weights(
        row in prop::collection::vec(0.0..3.0f64, 3),
        theta in prop::collection::vec(-2.0..2.0f64, 4),
        which in 0usize..3,
        bump in 0.0..5.0f64,
    ) {
        let theta = Array1::from(theta);
        let base = Array2::from_shape_vec((1, 3), row.clone()).unwrap();
        let mut up = base.clone();
        up[[0, which]] += bump;
        let (p0, p1) = (predict(base.view(), &theta).unwrap()[0], predict(up.view(), &theta).unwrap()[0]);
        if theta[which] > 0.0 {
            prop_assert!(p1 >= p0);
        } else {
            prop_assert!(p1 <= p0);
        }
    }

    #[test]
    fn jsonl_round_trip_is_identity(raw in visits(6)) {
        let first = cohort_from_jsonl_str(&cohort_to_jsonl_string(&build_cohort(6, &raw)), None).unwrap();
        let second = cohort_from_jsonl_str(&cohort_to_jsonl_string(&first), None).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn bins_partition_patients(a in matrix(15, 2, 0.0, 2.0), y in labels(15)) {
        let table = membership_stratification(a.view(), &y, &[0.0, 0.1, 0.5, 1.0]).unwrap();
        for row in &table.rows {
            let total: usize = row.positive.iter().chain(&row.negative).sum();
            prop_assert_eq!(total, 15);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn penalized_propensity_ignores_the_starting_point(
        ages in prop::collection::vec(30.0..80.0f64, 40),
        windows in prop::collection::vec(0.5..6.0f64, 40),
        exposed in prop::collection::vec(any::<bool>(), 40),
        init in prop::collection::vec(-3.0..3.0f64, 3),
    ) {
        let mut exposed = exposed;
        exposed[0] = true;
        exposed[1] = false;
        let covs: Vec<Covariates> = ages
            .iter()
            .zip(&windows)
            .map(|(&a, &w)| Covariates { age_at_start: a, observation_window: w, ..Default::default() })
            .collect();
        let opts = |init: Option<Vec<f64>>| LogisticOptions { l2: 0.5, init, ..Default::default() };
        let cold = fit_propensity_with(&covs, &exposed, &opts(None)).unwrap();
        let n = cold.weights.len() + 1;
        let start: Vec<f64> = (0..n).map(|i| init[i % init.len()]).collect();
        let warm = fit_propensity_with(&covs, &exposed, &opts(Some(start))).unwrap();
        for (a, b) in cold.weights.iter().zip(&warm.weights) {
            prop_assert!((a - b).abs() < 1e-6);
        }
        prop_assert!((cold.intercept - warm.intercept).abs() < 1e-6);
    }
}
