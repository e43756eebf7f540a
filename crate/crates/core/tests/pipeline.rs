use twin_uq::checkpoint::Checkpoint;
use twin_uq::dataset::Dataset;
use twin_uq::pipeline::{condition_split, evaluate_checkpoint, generate, train_on_dataset, EvalRequest, FixedVariance, GenConfig, TrainRequest};
use twin_uq::training::{Adam, PlateauScheduler, TrainConfig};
use twin_uq::uncertainty::regression_uncertainty;
use twin_uq::{Architecture, Error, ModelKind, Tensor};

fn small_data() -> Dataset {
    generate(&GenConfig {
        twins: 3,
        segments: 2,
        samples_per_twin: 90,
        seed: 4,
        ..GenConfig::default()
    })
    .unwrap()
}

fn request(kind: ModelKind, twins: Vec<u16>, epochs: usize) -> TrainRequest {
    TrainRequest {
        config: TrainConfig {
            epochs,
            batch_size: 32,
            learning_rate: 3e-3,
            draws: 8,
            kind,
            architecture: Architecture::Fc,
            seed: 9,
            ..TrainConfig::default()
        },
        train_twins: twins,
        fuse: false,
    }
}

#[test]
fn adam_matches_a_scalar_reference() {
    // Minimises x^2 from x = 1 and compares against the update rule written out.
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let mut x = Tensor::vector(vec![1.0]);
    let mut adam = Adam::new(&[1]);
    let (mut rx, mut m, mut v) = (1.0f64, 0.0, 0.0);
    for t in 1..=5 {
        let g = 2.0 * rx;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - f64::powi(b1, t));
        let vhat = v / (1.0 - f64::powi(b2, t));
        rx -= lr * mhat / (vhat.sqrt() + eps);
        let grad = Tensor::vector(vec![2.0 * x.data()[0]]);
        adam.step(&mut [&mut x], &[grad], lr).unwrap();
        assert!((x.data()[0] - rx).abs() < 1e-15, "step {t}: {} vs {rx}", x.data()[0]);
    }
}

#[test]
fn plateau_scheduler_decays_after_patience() {
    let mut s = PlateauScheduler::new(1.0, 0.1, 2, 0.0);
    assert_eq!(s.step(1.0), 1.0);
    assert_eq!(s.step(1.0), 1.0);
    assert!((s.step(1.0) - 0.1).abs() < 1e-15);
    assert!((s.step(0.5) - 0.1).abs() < 1e-15);
    assert!((s.step(0.6) - 0.1).abs() < 1e-15);
    assert!((s.step(0.6) - 0.01).abs() < 1e-15);
}

#[test]
fn regression_uncertainty_of_a_known_ensemble() {
    // Pass means 1, 2, 3 have unbiased variance 1; aleatoric variances average to 0.5.
    let r = regression_uncertainty(&[vec![1.0], vec![2.0], vec![3.0]], &[vec![0.4], vec![0.5], vec![0.6]]).unwrap();
    assert_eq!(r.mean, [2.0]);
    assert!((r.epistemic[0] - 1.0).abs() < 1e-15);
    assert!((r.aleatoric[0] - 0.5).abs() < 1e-15);
    assert_eq!(r.total[0], r.aleatoric[0] + r.epistemic[0]);
}

#[test]
fn generated_data_is_balanced_and_shares_conditions() {
    let data = small_data();
    let labels = data.condition_labels();
    for c in 0..3 {
        assert_eq!(labels.iter().filter(|&&l| l == c).count(), 30);
    }
    let per_twin = data.manifest.windows_per_twin;
    for i in 0..per_twin {
        let (a, b) = (&data.windows[i], &data.windows[per_twin + i]);
        assert_eq!((a.class, a.kappa), (b.class, b.kappa));
        assert_ne!(a.samples, b.samples);
    }
    assert_eq!(generate(&GenConfig { twins: 3, segments: 2, samples_per_twin: 90, seed: 4, ..GenConfig::default() }).unwrap(), data);
}

#[test]
fn dataset_round_trips_bit_exactly() {
    let data = small_data();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let bytes = std::fs::read(dir.path().join(twin_uq::dataset::RECORDS_FILE)).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, data);
    let again = tempfile::tempdir().unwrap();
    back.save(again.path()).unwrap();
    assert_eq!(std::fs::read(again.path().join(twin_uq::dataset::RECORDS_FILE)).unwrap(), bytes);
}

#[test]
fn identical_twins_generalize_exactly() {
    let data = generate(&GenConfig {
        twins: 2,
        segments: 2,
        samples_per_twin: 60,
        divergence: 0.0,
        seed: 8,
        ..GenConfig::default()
    })
    .unwrap();
    let ck = train_on_dataset(&data, &request(ModelKind::Plain, vec![1], 3)).unwrap();
    let split = condition_split(&data, [0.7, 0.1, 0.2]).unwrap();
    let acc = |id: u16| twin_uq::eval::evaluate_accuracy(&ck.network, &data.single_twin_set(&[id], &split.test).unwrap()).unwrap();
    assert_eq!(acc(1), acc(2));
}

#[test]
fn split_is_by_condition() {
    let data = small_data();
    let split = condition_split(&data, [0.7, 0.1, 0.2]).unwrap();
    assert_eq!(split.train.len() + split.val.len() + split.test.len(), data.manifest.windows_per_twin);
    assert!(split.train.iter().all(|i| !split.test.contains(i)));
}

#[test]
fn training_is_deterministic_and_learns() {
    let data = small_data();
    for (kind, twins) in [
        (ModelKind::Plain, vec![1]),
        (ModelKind::Het, vec![1]),
        (ModelKind::Adf, vec![1, 2]),
    ] {
        let req = request(kind, twins, 12);
        let a = train_on_dataset(&data, &req).unwrap();
        let b = train_on_dataset(&data, &req).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap(), "{kind}");
        let h = &a.header.history;
        assert_eq!(h.len(), 12);
        assert!(h.last().unwrap().train_loss < h[0].train_loss, "{kind}: {h:?}");
        assert!(a.header.best_val_accuracy > 1.0 / 3.0, "{kind}: {}", a.header.best_val_accuracy);
        let back = Checkpoint::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back, a);
    }
}

#[test]
fn evaluation_reports_are_consistent() {
    let data = small_data();
    let ck = train_on_dataset(&data, &request(ModelKind::Adf, vec![1, 2], 6)).unwrap();
    let req = EvalRequest {
        eval_twins: vec![1, 2],
        passes: 4,
        draws: 10,
        seed: 1,
        fixed_variance: None,
    };
    let out = evaluate_checkpoint(&ck, &data, &req).unwrap();
    assert_eq!(out, evaluate_checkpoint(&ck, &data, &req).unwrap());
    let r = &out.report;
    assert_eq!(r.samples.len(), r.samples_evaluated);
    assert!(r.samples.iter().all(|s| s.sigma2_total == s.sigma2_al + s.sigma2_ep));
    assert_eq!(out.reliability.bins.iter().map(|b| b.count).sum::<usize>(), r.samples_evaluated);

    let fixed = evaluate_checkpoint(&ck, &data, &EvalRequest { fixed_variance: Some(FixedVariance::Auto), ..req.clone() }).unwrap();
    assert!(fixed.report.fixed_variance.unwrap() > 0.0);

    let single = evaluate_checkpoint(&ck, &data, &EvalRequest { eval_twins: vec![3], ..req.clone() }).unwrap();
    assert_eq!(single.report.fixed_variance, None);
    assert_eq!(single.report.samples_evaluated, r.samples_evaluated);
}

#[test]
fn misuse_is_rejected() {
    let data = small_data();
    assert!(matches!(train_on_dataset(&data, &request(ModelKind::Adf, vec![1], 1)), Err(Error::Config(_))));
    assert!(matches!(train_on_dataset(&data, &request(ModelKind::Plain, vec![9], 1)), Err(Error::Config(_))));
    let plain = train_on_dataset(&data, &request(ModelKind::Plain, vec![1], 1)).unwrap();
    let req = EvalRequest {
        eval_twins: vec![1],
        passes: 2,
        draws: 4,
        seed: 0,
        fixed_variance: Some(FixedVariance::Value(0.1)),
    };
    assert!(matches!(evaluate_checkpoint(&plain, &data, &req), Err(Error::Config(_))));
}
