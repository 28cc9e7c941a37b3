use distvl_core::data::{mask_tokens, match_pairs, MaskBranch, MaskPolicy};
use distvl_core::gaussian::w2_squared_values;
use distvl_core::harness::hsd::tukey_hsd;
use distvl_core::harness::retrieval::recall_from_table;
use distvl_core::nn::{Linear, Session};
use distvl_core::objectives::{dmlm_predict, infonce, similarity_table};
use distvl_core::{DiagGaussianSeq, GaussianToken, LossConfig, ParamStore, SeededRng, Tape, Tensor};
use proptest::prelude::*;

fn token(d: usize) -> impl Strategy<Value = GaussianToken> {
    (prop::collection::vec(-5.0..5.0f64, d), prop::collection::vec(-3.0..3.0f64, d))
        .prop_map(|(mu, ls)| GaussianToken::new(mu, ls).unwrap())
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(lo..hi, cols), rows)
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

proptest! {
    #[test]
    fn w2_is_a_metric(a in token(8), b in token(8), c in token(8)) {
        let d = |x: &GaussianToken, y: &GaussianToken| w2_squared_values(x, y).unwrap();
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert!(d(&a, &c).sqrt() <= d(&a, &b).sqrt() + d(&b, &c).sqrt() + 1e-9);
    }

    #[test]
    fn entropy_shifts_with_log_sigma(a in token(5), delta in -2.0..2.0f64) {
        let shifted = GaussianToken::new(a.mu.clone(), a.log_sigma.iter().map(|l| l + delta).collect()).unwrap();
        prop_assert!((shifted.entropy() - a.entropy() - 5.0 * delta).abs() < 1e-9);
    }

    #[test]
    fn contrastive_loss_ignores_pair_order(
        mu_v in matrix(4, 3, -2.0, 2.0),
        mu_t in matrix(4, 3, -2.0, 2.0),
        ls in matrix(8, 3, -1.0, 1.0),
        perm in Just((0..4usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let cfg = LossConfig { a: -0.3, ..LossConfig::for_dim(3) };
        let loss = |order: &[usize]| {
            let pick = |m: &[Vec<f64>]| tensor(&order.iter().map(|&i| m[i].clone()).collect::<Vec<_>>());
            let tape = Tape::new();
            let v = DiagGaussianSeq { mu: tape.constant(pick(&mu_v)), log_sigma: tape.constant(pick(&ls[..4])) };
            let t = DiagGaussianSeq { mu: tape.constant(pick(&mu_t)), log_sigma: tape.constant(pick(&ls[4..])) };
            let sims = similarity_table(&tape, &v, &t, &cfg).unwrap();
            let l = infonce(&tape, sims, tape.constant(Tensor::scalar(cfg.log_tau_init))).unwrap();
            tape.item(l)
        };
        let base = loss(&[0, 1, 2, 3]);
        prop_assert!((loss(&perm) - base).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn softmax_rows_are_distributions(x in matrix(3, 6, -30.0, 30.0)) {
        let tape = Tape::new();
        let v = tape.constant(tensor(&x));
        let p = tape.value(tape.softmax_rows(v).unwrap()).clone();
        let lp = tape.value(tape.log_softmax_rows(v).unwrap()).clone();
        for r in 0..3 {
            prop_assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.row(r).iter().all(|&q| (0.0..=1.0).contains(&q)));
            for (q, l) in p.row(r).iter().zip(lp.row(r)) {
                prop_assert!((q.ln() - l).abs() < 1e-9 || *q < 1e-300);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix(4, 7, -10.0, 10.0)) {
        prop_assume!(x.iter().all(|r| {
            let m = r.iter().sum::<f64>() / 7.0;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 7.0 > 1e-2
        }));
        let tape = Tape::new();
        let y = tape.value(tape.layer_norm(tape.constant(tensor(&x))).unwrap()).clone();
        for r in 0..4 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dmlm_prediction_is_a_distribution(
        tok in token(6),
        k in 0usize..6,
        seed in any::<u64>(),
    ) {
        let mut store = ParamStore::new();
        let head = Linear::new(&mut store, "phi", 6, 9, true, &mut SeededRng::new(seed, 1)).unwrap();
        let tape = Tape::new();
        let s = Session::eval(&tape, &store);
        let phi = |x| head.forward(&s, x);
        let p = dmlm_predict(&tape, &tok.leaf(&tape), &phi, k, &mut SeededRng::new(seed, 2)).unwrap();
        prop_assert_eq!(p.len(), 9);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&q| q >= 0.0));
    }

    #[test]
    fn masking_respects_its_contract(
        tokens in prop::collection::vec(0usize..50, 1..40),
        seed in any::<u64>(),
    ) {
        let policy = MaskPolicy::default();
        let m = mask_tokens(&tokens, &mut SeededRng::new(seed, 0), &policy, 50, 50).unwrap();
        prop_assert!(!m.positions.is_empty());
        prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(m.tokens.len(), tokens.len());
        for (i, &t) in tokens.iter().enumerate() {
            match m.positions.iter().position(|&p| p == i) {
                None => prop_assert_eq!(m.tokens[i], t),
                Some(j) => {
                    prop_assert_eq!(m.labels[j], t);
                    match m.branches[j] {
                        MaskBranch::Mask => prop_assert_eq!(m.tokens[i], 50),
                        MaskBranch::Random => prop_assert!(m.tokens[i] < 50),
                        MaskBranch::Keep => prop_assert_eq!(m.tokens[i], t),
                    }
                }
            }
        }
    }

    #[test]
    fn match_pairs_mix_positives_and_negatives(b in 2usize..40, seed in any::<u64>()) {
        let p = match_pairs(b, &mut SeededRng::new(seed, 0)).unwrap();
        prop_assert_eq!(p.labels.iter().filter(|&&l| l == 0).count(), b / 2);
        for i in 0..b {
            let same = p.vision_idx[i] == p.text_idx[i];
            prop_assert_eq!(same, p.labels[i] == 1);
            prop_assert!(p.vision_idx[i] == i || p.text_idx[i] == i);
        }
    }

    #[test]
    fn recall_is_monotone_in_k(table in matrix(6, 6, -3.0, 3.0)) {
        let r = recall_from_table(&table, &[1, 2, 3, 6]).unwrap();
        for dir in [&r.i2t, &r.t2i] {
            let v: Vec<f64> = ["r@1", "r@2", "r@3", "r@6"].iter().map(|k| dir[*k]).collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(v[3], 1.0);
        }
    }

    #[test]
    fn hsd_p_values_are_bounded(scores in matrix(6, 3, 0.0, 1.0), seed in any::<u64>()) {
        let trials = 50;
        for r in tukey_hsd(&scores, trials, &mut SeededRng::new(seed, 0)).unwrap() {
            prop_assert!(r.p >= 1.0 / (trials + 1) as f64 && r.p <= 1.0);
        }
    }
}
