use proptest::prelude::*;

use coder_core::corpus_io::RelevanceJudgments;
use coder_core::embed_store::{open_embeddings, write_embeddings};
use coder_core::linalg::Matrix;
use coder_core::metrics::{mrr_at_k, ndcg_at_k, recall_at_k, GainMode, RunFile};
use coder_core::ranker::{listnet_loss, TargetLabels};

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(prop::option::weighted(0.3, 1u8..=3), n),
            0..n,
        )
            .prop_map(|(s, g, forced)| {
                let mut y: Vec<f64> = g
                    .iter()
                    .map(|g| g.map_or(f64::NEG_INFINITY, f64::from))
                    .collect();
                if y[forced].is_infinite() {
                    y[forced] = 2.0;
                }
                (s, y)
            })
    })
}

fn judged_run() -> impl Strategy<Value = (RunFile, RelevanceJudgments, usize)> {
    (
        Just((0..25).collect::<Vec<usize>>()).prop_shuffle(),
        prop::collection::vec(prop::option::weighted(0.4, 0u8..=3), 30),
        1usize..25,
    )
        .prop_filter_map("needs a grade-1 document", |(order, grades, k)| {
            if !grades.iter().any(|g| g.is_some_and(|g| g >= 1)) {
                return None;
            }
            let mut run = RunFile::new("p");
            run.insert_ranked(
                "q",
                order
                    .iter()
                    .enumerate()
                    .map(|(i, d)| (format!("d{d}"), -(i as f64))),
            );
            let mut qrels = RelevanceJudgments::new();
            for (d, g) in grades.iter().enumerate() {
                if let Some(g) = g {
                    qrels.insert("q", &format!("d{d}"), *g as i64).unwrap();
                }
            }
            Some((run, qrels, k))
        })
}

proptest! {
    #[test]
    fn listnet_permutation_equivariant((scores, y) in labelled_scores(), rot in 0usize..40) {
        let n = scores.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let (l, g) = listnet_loss(&scores, &TargetLabels::new(y.clone()).unwrap()).unwrap();
        let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let py: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let (lp, gp) = listnet_loss(&ps, &TargetLabels::new(py).unwrap()).unwrap();
        prop_assert!((l - lp).abs() <= 1e-12 * l.abs().max(1.0));
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((gp[j] - g[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn unjudged_candidates_get_positive_gradient((scores, y) in labelled_scores()) {
        let (_, g) = listnet_loss(&scores, &TargetLabels::new(y.clone()).unwrap()).unwrap();
        for (gi, yi) in g.iter().zip(&y) {
            if yi.is_infinite() {
                prop_assert!(*gi >= 0.0);
            }
        }
    }

    #[test]
    fn metrics_bounded_and_strict_never_exceeds_lenient((run, qrels, k) in judged_run()) {
        let m1 = mrr_at_k(&run, &qrels, k, 1).unwrap().aggregate;
        let r1 = recall_at_k(&run, &qrels, k, 1).unwrap().aggregate;
        let nd = ndcg_at_k(&run, &qrels, k, GainMode::Exponential).unwrap().aggregate;
        for v in [m1, r1, nd] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        }
        if let (Ok(m2), Ok(r2)) = (mrr_at_k(&run, &qrels, k, 2), recall_at_k(&run, &qrels, k, 2)) {
            prop_assert!(m2.aggregate <= m1);
            // recall has a different denominator per threshold, so only MRR is monotone here
            prop_assert!((0.0..=1.0).contains(&r2.aggregate));
        }
    }

    #[test]
    fn recall_grows_with_depth((run, qrels, k) in judged_run()) {
        let a = recall_at_k(&run, &qrels, k, 1).unwrap().aggregate;
        let b = recall_at_k(&run, &qrels, k + 1, 1).unwrap().aggregate;
        prop_assert!(b >= a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn embeddings_round_trip_bit_exact(rows in 1usize..20, cols in 1usize..12, bits in prop::collection::vec(any::<u32>(), 240)) {
        let data: Vec<f32> = bits
            .iter()
            .take(rows * cols)
            .map(|&b| f32::from_bits(b))
            .map(|v| if v.is_finite() { v } else { 0.5 })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.cdre");
        write_embeddings(&Matrix::from_vec(rows, cols, data.clone()), &path).unwrap();
        let store = open_embeddings(&path).unwrap();
        prop_assert_eq!(store.count(), rows);
        prop_assert_eq!(store.dim(), cols);
        prop_assert!(store.data().iter().map(|v| v.to_bits()).eq(data.iter().map(|v| v.to_bits())));
    }
}
