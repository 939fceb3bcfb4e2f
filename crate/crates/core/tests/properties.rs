use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hfat::attacks::{project_linf, run_attack_observed, AttackKind, AttackSpec, Bounds};
use hfat::auxiliary::transform_t;
use hfat::autodiff::Tensor;
use hfat::data::Dataset;
use hfat::eval::{evaluate, NamedAttack};
use hfat::hiders::{fit_gaussian, RatioSample};
use hfat::model::{Checkpoint, MlpSpec, ModelWeights};
use hfat::trainer::lambda_from_kls;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn kind() -> impl Strategy<Value = AttackKind> {
    prop_oneof![
        Just(AttackKind::Fgsm),
        Just(AttackKind::Pgd),
        Just(AttackKind::Mim),
        Just(AttackKind::Cw)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_inside(t in tensor(4, 3), eps in 0.0f64..1.0) {
        let p = project_linf(&t, eps);
        prop_assert!(p.max_abs() <= eps);
        prop_assert_eq!(project_linf(&p, eps), p);
    }

    #[test]
    fn every_attack_iterate_stays_in_ball_and_box(
        k in kind(),
        x in tensor(6, 3),
        eps in 0.01f64..0.5,
        seed in 0u64..1000,
        random_start in any::<bool>(),
        boxed in any::<bool>(),
    ) {
        let model = ModelWeights::init(&MlpSpec::with_hidden(3, &[8], 3).unwrap(), seed).unwrap();
        let bounds = boxed.then_some(Bounds { lo: -1.0, hi: 1.0 });
        let x = match bounds {
            Some(b) => x.map(|v| b.clamp(v)),
            None => x,
        };
        let y = [0, 1, 2, 0, 1, 2];
        let spec = AttackSpec { kind: k, eps, alpha: None, steps: 7, random_start, mim_decay: 1.0, cw_kappa: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        let adv = run_attack_observed(&model, &x, &y, &spec, bounds, &mut rng, &mut |_, d| worst = worst.max(d.max_abs()))
            .unwrap();
        prop_assert!(worst <= eps * (1.0 + 1e-12));
        prop_assert!(adv.x_adv.sub(&x).unwrap().max_abs() <= eps * (1.0 + 1e-12));
        if let Some(b) = bounds {
            prop_assert!(adv.x_adv.data().iter().all(|&v| v >= b.lo && v <= b.hi));
        }
    }

    #[test]
    fn lambda_weights_are_a_distribution(a in 0.0f64..1e3, b in 0.0f64..1e3) {
        let w = lambda_from_kls(a, b).unwrap();
        prop_assert!((w.lambda_S + w.lambda_A - 1.0).abs() <= 1e-12);
        prop_assert!(w.lambda_A > 0.0 && w.lambda_A < 1.0);
        prop_assert_eq!(w.lambda_A > 0.5, b > a);
    }

    #[test]
    fn transform_endpoints_and_ball(x in tensor(3, 2), d in tensor(3, 2), r in 0.0f64..3.0, eps in 0.05f64..0.5) {
        let x_adv = x.add(&project_linf(&d, eps)).unwrap();
        let none: Option<&mut ChaCha8Rng> = None;
        let p = transform_t(&x, &x_adv, r, eps, none, None).unwrap();
        prop_assert!(p.x_probe.sub(&x).unwrap().max_abs() <= eps * (1.0 + 1e-9));
        let none: Option<&mut ChaCha8Rng> = None;
        prop_assert_eq!(transform_t(&x, &x_adv, 0.0, eps, none, None).unwrap().x_probe, x.clone());
        let none: Option<&mut ChaCha8Rng> = None;
        prop_assert_eq!(transform_t(&x, &x_adv, 1.0, eps, none, None).unwrap().x_probe, x_adv);
    }

    #[test]
    fn checkpoint_bytes_roundtrip(seed in any::<u64>(), epoch in 0u64..1000, hidden in 1usize..10) {
        let w = ModelWeights::init(&MlpSpec::with_hidden(2, &[hidden], 3).unwrap(), seed).unwrap();
        let c = Checkpoint::new(w, epoch, seed);
        prop_assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn gaussian_fit_matches_sample_moments(rs in prop::collection::vec(-5.0f64..5.0, 2..200)) {
        let samples: Vec<RatioSample> = rs.iter().map(|&r| RatioSample { r, epoch_interval: 1 }).collect();
        let g = fit_gaussian(&samples).unwrap();
        let n = rs.len() as f64;
        let mean = rs.iter().sum::<f64>() / n;
        let var = rs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((g.mu - mean).abs() <= 1e-12);
        prop_assert!((g.sigma - var.sqrt()).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_csv_roundtrip(x in tensor(12, 3), labels in prop::collection::vec(0usize..4, 12)) {
        let dir = tempfile::tempdir().unwrap();
        let d = Dataset { x, y: labels, n_classes: 4, bounds: None };
        let path = dir.path().join("d.csv");
        d.write_csv(&path).unwrap();
        prop_assert_eq!(Dataset::read_csv(&path, Some(4), None).unwrap(), d);
    }

    #[test]
    fn natural_accuracy_is_permutation_invariant(x in tensor(20, 2), seed in 0u64..100, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let model = ModelWeights::init(&MlpSpec::with_hidden(2, &[6], 2).unwrap(), seed).unwrap();
        let ckpt = Checkpoint::new(model, 0, seed);
        let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let d = Dataset { x, y, n_classes: 2, bounds: None };
        let mut idx: Vec<usize> = (0..20).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
        let shuffled = d.subset(&idx);
        // FGSM without random start is deterministic per row
        let attacks = [NamedAttack::new("fgsm", AttackSpec::fgsm(0.2))];
        let a = evaluate(&ckpt, "m", &d, "d", &attacks, 0).unwrap();
        let b = evaluate(&ckpt, "m", &shuffled, "d", &attacks, 0).unwrap();
        prop_assert_eq!(a.natural, b.natural);
        prop_assert_eq!(a.attacks["fgsm"].accuracy, b.attacks["fgsm"].accuracy);
    }
}
