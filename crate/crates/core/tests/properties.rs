use paircfr::feature_model::{generate_paircad, EditMode, FeatureModelSpec, NEUTRAL};
use paircfr::linalg::Matrix;
use paircfr::losses::{
    ce_loss_and_grad, cl_loss_and_grad, combined_loss_and_grad, outer_sym, softmax, EmbeddingBatch, LossConfig,
    NoPositivePolicy, Similarity,
};
use paircfr::model::{init_model, Init};
use paircfr::stats::paired_ttest;
use paircfr::trainer::{
    ce_only_loss_and_grad, make_batches, pairs_colocated, BatchStrategy, Optimizer, OptimizerState,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn labelled_batch(max_n: usize, d: usize, classes: usize) -> impl Strategy<Value = EmbeddingBatch> {
    (2..=max_n).prop_flat_map(move |n| {
        (matrix(n, d, -2.0, 2.0), prop::collection::vec(0..classes, n))
            .prop_map(|(z, labels)| EmbeddingBatch { z, labels })
    })
}

fn two_labels(b: &EmbeddingBatch) -> bool {
    b.labels.iter().any(|&l| l != b.labels[0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution(row in prop::collection::vec(-700.0f64..700.0, 1..12)) {
        let p = softmax(&row);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ce_gradient_rows_sum_to_zero(
        (logits, labels) in (1usize..10, 2usize..5).prop_flat_map(|(n, k)| {
            (matrix(n, k, -30.0, 30.0), prop::collection::vec(0..k, n))
        })
    ) {
        let (loss, g) = ce_loss_and_grad(&logits, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        for r in 0..g.rows() {
            prop_assert!(g.row(r).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn outer_sym_is_symmetric(
        (a, b) in (1usize..8).prop_flat_map(|m| {
            (prop::collection::vec(-5.0f64..5.0, m), prop::collection::vec(-5.0f64..5.0, m))
        })
    ) {
        let s = outer_sym(&a, &b).unwrap();
        for r in 0..a.len() {
            for c in 0..a.len() {
                prop_assert_eq!(s.row(r)[c], s.row(c)[r]);
                prop_assert!((s.row(r)[c] - (a[r] * b[c] + b[r] * a[c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_loss_is_scale_invariant(batch in labelled_batch(8, 3, 2), scale in 0.1f64..10.0) {
        prop_assume!(two_labels(&batch));
        let cfg = LossConfig { similarity: Similarity::Cosine, ..LossConfig::default() };
        let (a, _) = cl_loss_and_grad(&batch, &cfg).unwrap();
        let scaled = EmbeddingBatch { z: batch.z.scaled(scale), labels: batch.labels.clone() };
        let (b, _) = cl_loss_and_grad(&scaled, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn neutral_samples_are_inert_when_excluded(
        batch in labelled_batch(8, 3, 2),
        neutral in matrix(3, 3, -2.0, 2.0),
        n_neutral in 1usize..=3,
        dot in any::<bool>(),
    ) {
        prop_assume!(two_labels(&batch));
        let cfg = LossConfig {
            neutral_excluded: true,
            similarity: if dot { Similarity::Dot } else { Similarity::Cosine },
            ..LossConfig::default()
        };
        let (base_loss, base_grad) = cl_loss_and_grad(&batch, &cfg).unwrap();
        let n = batch.z.rows();
        let mut rows: Vec<Vec<f64>> = (0..n).map(|r| batch.z.row(r).to_vec()).collect();
        let mut labels = batch.labels.clone();
        rows.extend((0..n_neutral).map(|r| neutral.row(r).to_vec()));
        labels.extend(std::iter::repeat_n(NEUTRAL, n_neutral));
        let grown = EmbeddingBatch { z: Matrix::from_rows(&rows).unwrap(), labels };
        let (loss, grad) = cl_loss_and_grad(&grown, &cfg).unwrap();
        prop_assert_eq!(loss.to_bits(), base_loss.to_bits());
        for r in 0..n {
            prop_assert_eq!(grad.row(r), base_grad.row(r));
        }
        for r in n..n + n_neutral {
            prop_assert!(grad.row(r).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn cl_gradient_matches_finite_differences(
        batch in labelled_batch(6, 3, 2),
        dot in any::<bool>(),
        skip in any::<bool>(),
        tau in 0.3f64..2.0,
    ) {
        prop_assume!(two_labels(&batch));
        prop_assume!((0..batch.z.rows()).all(|r| paircfr::linalg::norm(batch.z.row(r)) > 0.1));
        let cfg = LossConfig {
            tau,
            similarity: if dot { Similarity::Dot } else { Similarity::Cosine },
            no_positive_policy: if skip { NoPositivePolicy::SkipAnchor } else { NoPositivePolicy::RepulsionOnly },
            ..LossConfig::default()
        };
        let Ok((_, grad)) = cl_loss_and_grad(&batch, &cfg) else {
            // skip_anchor with no positives anywhere is undefined
            return Ok(());
        };
        let eps = 1e-6;
        let mut diff = 0.0f64;
        let mut scale = 1e-3f64;
        for i in 0..batch.z.as_slice().len() {
            let mut plus = batch.clone();
            plus.z.as_mut_slice()[i] += eps;
            let mut minus = batch.clone();
            minus.z.as_mut_slice()[i] -= eps;
            let fd = (cl_loss_and_grad(&plus, &cfg).unwrap().0 - cl_loss_and_grad(&minus, &cfg).unwrap().0) / (2.0 * eps);
            let a = grad.as_slice()[i];
            diff += (a - fd).powi(2);
            scale = scale.max(a.abs());
        }
        prop_assert!(diff.sqrt() / scale < 1e-5, "{} vs scale {}", diff.sqrt(), scale);
    }

    #[test]
    fn ttest_is_antisymmetric(
        (a, b) in (2usize..12).prop_flat_map(|n| {
            (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(0.0f64..1.0, n))
        })
    ) {
        let (Ok(ab), Ok(ba)) = (paired_ttest(&a, &b), paired_ttest(&b, &a)) else {
            return Ok(());
        };
        prop_assert_eq!(ab.t, -ba.t);
        prop_assert_eq!(ab.p, ba.p);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }

    #[test]
    fn sgd_step_is_exact(
        (theta, g) in (1usize..20).prop_flat_map(|n| {
            (prop::collection::vec(-10.0f64..10.0, n), prop::collection::vec(-10.0f64..10.0, n))
        }),
        lr in 1e-4f64..1.0,
    ) {
        let mut p = theta.clone();
        OptimizerState::new(Optimizer::Sgd { lr, momentum: 0.0 }, p.len()).step(&mut p, &g, lr).unwrap();
        for ((after, before), gi) in p.iter().zip(&theta).zip(&g) {
            prop_assert_eq!(*after, before - lr * gi);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn paircad_batches_keep_pairs_together(
        n_pairs in 1usize..60,
        batch_size in 2usize..40,
        seed in any::<u64>(),
    ) {
        let ds = generate_paircad(&FeatureModelSpec::canonical(), n_pairs, 1, EditMode::ExactOpposite, seed).unwrap();
        let batches = make_batches(&ds, BatchStrategy::PairCad, batch_size, seed).unwrap();
        prop_assert!(pairs_colocated(&ds, &batches));
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
        prop_assert!(batches.iter().all(|b| b.len() <= batch_size));
    }

    #[test]
    fn generation_replays_bit_identically(n_pairs in 1usize..40, seed in any::<u64>()) {
        let spec = FeatureModelSpec::canonical();
        let a = generate_paircad(&spec, n_pairs, 1, EditMode::ExactOpposite, seed).unwrap();
        let b = generate_paircad(&spec, n_pairs, 1, EditMode::ExactOpposite, seed).unwrap();
        prop_assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn zero_lambda_is_cross_entropy(n_pairs in 2usize..20, seed in any::<u64>(), tau in 0.1f64..2.0) {
        let spec = FeatureModelSpec::canonical();
        let ds = generate_paircad(&spec, n_pairs, 1, EditMode::ExactOpposite, seed).unwrap();
        let model = init_model(spec.layout, 4, 2, Init::ScaledNormal { std: 0.5 }, seed).unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let (x, y) = (ds.features_of(&idx), ds.labels_of(&idx));
        let cfg = LossConfig { lambda: 0.0, tau, ..LossConfig::default() };
        let (l0, g0) = combined_loss_and_grad(&model, &x, &y, &cfg).unwrap();
        let (l1, g1) = ce_only_loss_and_grad(&model, &x, &y).unwrap();
        prop_assert_eq!(l0.to_bits(), l1.to_bits());
        prop_assert_eq!(g0.flat(), g1.flat());
    }
}
