//! Property tests for the invariants that hold across the public API.

use fairprice_core::data::generate_synthetic;
use fairprice_core::dependence::{hgr_witsenhausen, rdc, RdcConfig};
use fairprice_core::fairmetrics::{disparate_impact, p_rule};
use fairprice_core::mlp::{gradient_check, Direction, Gradients, HiddenActivation, Mlp, Optimizer, OutputActivation};
use fairprice_core::models::{deviance, edr, gini, glm_fit, null_prediction, Family};
use fairprice_core::numkit::{matmul, pearson, svd_small};
use fairprice_core::pricing::QuantileBinner;
use fairprice_core::{Matrix, Rng, Task};
use proptest::prelude::*;

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn squared_loss(out: &Matrix, y: &Matrix) -> (f64, Matrix) {
    let mut g = out.clone();
    let mut loss = 0.0;
    for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
        let d = *gv - yv;
        loss += 0.5 * d * d;
        *gv = d;
    }
    (loss, g)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_is_associative(seed in 0u64..10_000, a in 1usize..6, b in 1usize..6, c in 1usize..6, d in 1usize..6) {
        let mut rng = Rng::new(seed);
        let (x, y, z) = (random_matrix(a, b, &mut rng), random_matrix(b, c, &mut rng), random_matrix(c, d, &mut rng));
        let left = matmul(&matmul(&x, &y).unwrap(), &z).unwrap();
        let right = matmul(&x, &matmul(&y, &z).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            prop_assert!((l - r).abs() <= 1e-9 * (1.0 + l.abs().max(r.abs())));
        }
    }

    #[test]
    fn svd_reconstructs_with_descending_values(seed in 0u64..10_000, rows in 1usize..9, cols in 1usize..9) {
        let a = random_matrix(rows, cols, &mut Rng::new(seed));
        let svd = svd_small(&a).unwrap();
        prop_assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let mut scaled = svd.left.clone();
        for r in 0..scaled.rows() {
            for (v, s) in scaled.row_mut(r).iter_mut().zip(&svd.singular_values) {
                *v *= s;
            }
        }
        let back = matmul(&scaled, &svd.right.transpose()).unwrap();
        let gap: f64 = back.data().iter().zip(a.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(gap <= 1e-9 * a.frobenius_norm());
    }

    #[test]
    fn pearson_flips_sign_under_negation(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let u: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let v: Vec<f64> = u.iter().map(|x| x + rng.normal()).collect();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        prop_assert!((pearson(&u, &v).unwrap() + pearson(&u, &neg).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rng_streams_with_equal_seeds_agree(seed in any::<u64>()) {
        let (mut a, mut b) = (Rng::new(seed), Rng::new(seed));
        prop_assert!((0..10_000).all(|_| a.next_u64() == b.next_u64()));
    }

    #[test]
    fn backprop_matches_finite_differences(
        seed in 0u64..10_000,
        hidden in proptest::collection::vec(1usize..6, 1..3),
        sigmoid in any::<bool>(),
    ) {
        let mut rng = Rng::new(seed);
        let mut dims = vec![3];
        dims.extend(&hidden);
        dims.push(2);
        let out = if sigmoid { OutputActivation::Sigmoid } else { OutputActivation::Identity };
        let net = Mlp::new(&dims, HiddenActivation::Tanh, out, &mut rng).unwrap();
        let x = random_matrix(8, 3, &mut rng);
        let y = random_matrix(8, 2, &mut rng);
        prop_assert!(gradient_check(&net, squared_loss, &x, &y, 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn zero_gradient_update_is_noop(seed in 0u64..10_000, adam in any::<bool>()) {
        let mut net = Mlp::new(&[4, 5, 1], HiddenActivation::Relu, OutputActivation::Identity, &mut Rng::new(seed)).unwrap();
        let before = net.params_flat();
        let mut opt = if adam { Optimizer::adam(1e-2) } else { Optimizer::sgd(1e-2) };
        let zero = Gradients::zeros_like(&net);
        net.apply_update(&zero, &mut opt, Direction::Descent).unwrap();
        prop_assert_eq!(before, net.params_flat());
    }

    #[test]
    fn estimates_lie_in_unit_interval(seed in 0u64..10_000, r in -1.0f64..1.0) {
        let mut rng = Rng::new(seed);
        let u: Vec<f64> = (0..1000).map(|_| rng.normal()).collect();
        let v: Vec<f64> = u.iter().map(|x| r * x + rng.normal()).collect();
        for value in [rdc(&u, &v, &RdcConfig::default()).unwrap().value, hgr_witsenhausen(&u, &v, 10).unwrap().value] {
            prop_assert!((0.0..=1.0).contains(&value));
        }
    }

    #[test]
    fn rdc_ignores_monotone_marginal_maps(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let u: Vec<f64> = (0..300).map(|_| rng.normal()).collect();
        let v: Vec<f64> = u.iter().map(|x| x * x + rng.normal()).collect();
        let ev: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let cfg = RdcConfig::default();
        prop_assert_eq!(rdc(&u, &v, &cfg).unwrap().value, rdc(&u, &ev, &cfg).unwrap().value);
    }

    #[test]
    fn p_rule_is_one_exactly_when_impact_is_zero(labels in proptest::collection::vec(any::<bool>(), 4..40), split in 1usize..3) {
        let l: Vec<f64> = labels.iter().map(|&b| f64::from(u8::from(b))).collect();
        let s: Vec<f64> = (0..l.len()).map(|i| f64::from(u8::from(i % (split + 1) == 0))).collect();
        if let (Ok(pr), Ok(di)) = (p_rule(&l, &s), disparate_impact(&l, &s)) {
            prop_assert!((0.0..=1.0).contains(&pr));
            prop_assert_eq!(pr == 1.0, di == 0.0);
        }
    }

    #[test]
    fn canonical_glms_balance_and_beat_the_null(seed in 0u64..10_000, poisson in any::<bool>()) {
        let mut rng = Rng::new(seed);
        let n = 400;
        let x = random_matrix(n, 2, &mut rng);
        let (family, task) = if poisson { (Family::PoissonLog, Task::Frequency) } else { (Family::BernoulliLogit, Task::Binary) };
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let eta = 0.3 + 0.5 * x.get(i, 0) - 0.4 * x.get(i, 1);
                if poisson { rng.poisson(eta.exp()) as f64 } else { f64::from(u8::from(rng.bernoulli(1.0 / (1.0 + (-eta).exp())))) }
            })
            .collect();
        let glm = glm_fit(&x, &y, family, None).unwrap();
        let fitted = glm.predict(&x, None).unwrap();
        let (sy, sf) = (y.iter().sum::<f64>(), fitted.iter().sum::<f64>());
        prop_assert!((sf - sy).abs() <= 1e-6 * sy);
        let null = null_prediction(task, &y, None);
        prop_assert!(deviance(task, &y, &fitted).unwrap() <= deviance(task, &y, &null).unwrap());
        prop_assert_eq!(edr(task, &y, &null, None).unwrap(), 0.0);
    }

    #[test]
    fn gini_ignores_increasing_transforms(seed in 0u64..10_000) {
        let mut rng = Rng::new(seed);
        let y: Vec<f64> = (0..100).map(|_| rng.poisson(1.0) as f64 + 0.5).collect();
        let pred: Vec<f64> = (0..100).map(|_| rng.normal()).collect();
        let moved: Vec<f64> = pred.iter().map(|p| (2.0 * p).exp() + 1.0).collect();
        prop_assert!((gini(&y, &pred, None).unwrap() - gini(&y, &moved, None).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn quantile_bins_hold_equal_shares(seed in 0u64..10_000, n in 10usize..300, bins in 1usize..10) {
        let values: Vec<f64> = Rng::new(seed).permutation(n).into_iter().map(|i| i as f64 * 0.5).collect();
        let binner = QuantileBinner::fit(&values, bins).unwrap();
        let mut counts = vec![0usize; bins];
        for &v in &values {
            counts[binner.bin(v)] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c.abs_diff(n / bins) <= 1));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn synthetic_generation_is_deterministic(seed in any::<u64>()) {
        let a = generate_synthetic(200, seed).unwrap();
        let b = generate_synthetic(200, seed).unwrap();
        prop_assert_eq!(a.x_p.data(), b.x_p.data());
        prop_assert_eq!(a.y, b.y);
        prop_assert_eq!(a.s.data(), b.s.data());
    }
}
