use dho2_core::collectives::{CommCounts, Tag};
use dho2_core::optimizer::{BaseConfig, BaseKind};
use dho2_core::oracle::{generate_synthetic_dataset, mlp_oracle, spiked_spectrum, Activation};
use dho2_core::{
    dho2_train, fosi_train, quadratic_oracle, sgd_train, train, Backend, DatasetKind, Error, Oracle, TrainConfig,
    TrainerKind, WorkerGroup,
};

fn sgd(lr: f64) -> BaseConfig {
    BaseConfig {
        kind: BaseKind::Sgd,
        lr,
        weight_decay: 0.0,
        ..BaseConfig::default()
    }
}

fn bits(w: &[f64]) -> Vec<u64> {
    w.iter().map(|x| x.to_bits()).collect()
}

fn metric_bits(r: &dho2_core::TrainResult) -> Vec<(u64, u64, Option<u64>)> {
    r.metrics
        .iter()
        .map(|m| (m.iterations, m.train_loss.to_bits(), m.train_acc.map(f64::to_bits)))
        .collect()
}

#[test]
fn fosi_full_spectrum_converges_after_first_refresh() {
    let q = quadratic_oracle(&[50.0, 20.0, 9.0, 4.0, 2.0, 1.0], 5).unwrap();
    let cfg = TrainConfig {
        base: BaseConfig {
            kind: BaseKind::Zero,
            ..BaseConfig::default()
        },
        k: 6,
        alpha: 1.0,
        epochs: 1,
        ..TrainConfig::default()
    };
    let w0 = [1.0, -1.0, 2.0, 0.5, -0.3, 0.7];
    let r = fosi_train(&cfg, &q, None, &w0, &WorkerGroup::new(2).unwrap()).unwrap();
    assert!(r.w.iter().all(|x| x.abs() <= 1e-8), "{:?}", r.w);
    assert!(r.metrics[0].ese_refresh);
}

#[test]
fn fosi_without_curvature_matches_base_trajectory() {
    let data = generate_synthetic_dataset(DatasetKind::TwoGaussians, 96, 4).unwrap();
    let o = mlp_oracle(&[2, 6, 2], Activation::Tanh, &data).unwrap();
    let w0 = o.init_params(1);
    for base in [sgd(0.3), BaseConfig::default()] {
        let cfg = TrainConfig {
            base,
            k: 0,
            l: 0,
            epochs: 5,
            batch_size: Some(20),
            seed: 9,
            ..TrainConfig::default()
        };
        let group = WorkerGroup::new(3).unwrap();
        let a = sgd_train(&cfg, &o, Some(&data), &w0, &group).unwrap();
        let b = fosi_train(&cfg, &o, Some(&data), &w0, &group).unwrap();
        assert_eq!(bits(&a.w), bits(&b.w));
        assert_eq!(metric_bits(&a), metric_bits(&b));
    }
}

#[test]
fn dho2_with_zero_sigma_is_fosi() {
    let data = generate_synthetic_dataset(DatasetKind::TwoGaussians, 64, 2).unwrap();
    let o = mlp_oracle(&[2, 5, 2], Activation::Tanh, &data).unwrap();
    let w0 = o.init_params(3);
    let cfg = TrainConfig {
        k: 3,
        l: 1,
        sigma: 0.0,
        outer_rounds: 3,
        inner_epochs: 2,
        epochs: 6,
        batch_size: Some(16),
        refresh_interval: Some(2 * 4),
        base: BaseConfig {
            lr: 0.01,
            ..BaseConfig::default()
        },
        ..TrainConfig::default()
    };
    let group = WorkerGroup::new(2).unwrap();
    let d = dho2_train(&cfg, &o, Some(&data), &w0, &group).unwrap();
    let f = fosi_train(&cfg, &o, Some(&data), &w0, &group).unwrap();
    assert_eq!(bits(&d.w), bits(&f.w));
    assert_eq!(metric_bits(&d), metric_bits(&f));
    assert_eq!(d.refreshes, f.refreshes);
    assert!(d.pi.unwrap().iter().all(|p| *p == 0.0));
}

#[test]
fn single_worker_matches_serial_reference() {
    // The same updates written out by hand, without any collectives.
    let q = quadratic_oracle(&[4.0, 2.0, 1.0], 0).unwrap();
    let cfg = TrainConfig {
        base: sgd(0.1),
        epochs: 3,
        ..TrainConfig::default()
    };
    let r = sgd_train(&cfg, &q, None, &[1.0, 1.0, 1.0], &WorkerGroup::new(1).unwrap()).unwrap();
    let mut w = [1.0f64, 1.0, 1.0];
    for _ in 0..3 {
        let g = q.grad(&w, &dho2_core::oracle::Batch::empty()).unwrap();
        for i in 0..3 {
            w[i] += -0.1 * g[i];
        }
    }
    assert_eq!(bits(&r.w), bits(&w));
}

#[test]
fn dho2_solves_ill_conditioned_quadratic() {
    let spectrum = spiked_spectrum(100, 8, (1e3, 1e4), (1.0, 10.0)).unwrap();
    let q = quadratic_oracle(&spectrum, 1).unwrap();
    let w0: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).cos()).collect();
    let cfg = TrainConfig {
        base: sgd(0.05),
        alpha: 1.0,
        sigma: 2.0,
        outer_rounds: 50,
        ..TrainConfig::default()
    };
    let r = dho2_train(&cfg, &q, None, &w0, &WorkerGroup::new(2).unwrap()).unwrap();
    let last = r.metrics.last().unwrap();
    assert!(last.train_loss <= 1e-6, "final loss {}", last.train_loss);
    let residuals: Vec<f64> = r
        .metrics
        .iter()
        .filter(|m| m.inner_l == Some(cfg.inner_epochs - 1))
        .map(|m| m.residual_norm.unwrap())
        .collect();
    assert_eq!(residuals.len(), 50);
    assert!(residuals.iter().any(|x| *x < 1e-4));
}

#[test]
fn refresh_cadence_and_ledger() {
    let q = quadratic_oracle(&(1..=24).map(|i| i as f64).collect::<Vec<_>>(), 3).unwrap();
    let w0 = vec![1.0; 24];
    let cfg = TrainConfig {
        k: 2,
        l: 1,
        lanczos_m: Some(6),
        outer_rounds: 3,
        inner_epochs: 2,
        ..TrainConfig::default()
    };
    let group = WorkerGroup::new(3).unwrap();
    let r = dho2_train(&cfg, &q, None, &w0, &group).unwrap();
    assert_eq!(r.refreshes, 3);
    let flags: Vec<bool> = r.metrics.iter().map(|m| m.ese_refresh).collect();
    assert_eq!(flags, [true, false, true, false, true, false]);
    let events = group.ledger();
    let counts = CommCounts::from_events(&events);
    let gathers = events
        .iter()
        .filter(|e| e.rank == 0 && e.tag == Tag::LanczosVector)
        .count();
    assert_eq!(gathers, 3 * 6);
    let grads = events.iter().filter(|e| e.rank == 0 && e.tag == Tag::Gradient).count();
    assert_eq!(grads, 6);
    let assemblies = events.iter().filter(|e| e.rank == 0 && e.tag == Tag::EseAssembly).count();
    assert_eq!(assemblies, 3);
    assert!(counts.all_gather >= gathers);
    assert_eq!(r.words_sent.len(), 3);
}

#[test]
fn fosi_refresh_interval() {
    let q = quadratic_oracle(&[3.0, 2.0, 1.0, 0.5], 1).unwrap();
    let cfg = TrainConfig {
        k: 1,
        epochs: 7,
        refresh_interval: Some(3),
        ..TrainConfig::default()
    };
    let r = fosi_train(&cfg, &q, None, &[1.0; 4], &WorkerGroup::new(1).unwrap()).unwrap();
    let flags: Vec<bool> = r.metrics.iter().map(|m| m.ese_refresh).collect();
    assert_eq!(flags, [true, false, false, true, false, false, true]);
}

#[test]
fn runs_are_reproducible_across_backends() {
    let data = generate_synthetic_dataset(DatasetKind::ConcentricRings, 80, 5).unwrap();
    let o = mlp_oracle(&[2, 6, 2], Activation::Tanh, &data).unwrap();
    let w0 = o.init_params(2);
    let cfg = TrainConfig {
        k: 2,
        outer_rounds: 2,
        inner_epochs: 2,
        batch_size: Some(24),
        base: BaseConfig {
            lr: 0.02,
            ..BaseConfig::default()
        },
        seed: 17,
        ..TrainConfig::default()
    };
    let reference = train(&cfg, &o, Some(&data), &w0, &WorkerGroup::new(3).unwrap()).unwrap();
    let backends = [
        Backend::Threaded,
        Backend::RoundRobin { schedule_seed: None },
        Backend::RoundRobin { schedule_seed: Some(1) },
        Backend::RoundRobin { schedule_seed: Some(99) },
    ];
    for backend in backends {
        let group = WorkerGroup::with_backend(3, backend).unwrap();
        let r = train(&cfg, &o, Some(&data), &w0, &group).unwrap();
        assert_eq!(bits(&r.w), bits(&reference.w), "{backend:?}");
        assert_eq!(metric_bits(&r), metric_bits(&reference));
    }
}

#[test]
fn non_finite_loss_aborts_with_record() {
    let q = quadratic_oracle(&[1e6, 1.0], 0).unwrap();
    let cfg = TrainConfig {
        trainer: TrainerKind::Sgd,
        base: sgd(10.0),
        epochs: 400,
        ..TrainConfig::default()
    };
    let r = train(&cfg, &q, None, &[1.0, 1.0], &WorkerGroup::new(2).unwrap()).unwrap();
    let (epoch, reason) = r.aborted.clone().expect("run should abort");
    assert!(epoch < 400);
    assert!(!reason.is_empty());
    assert!(r.metrics.len() <= epoch + 1);
    assert!(matches!(r.into_result(), Err(Error::Aborted { .. })));
}

#[test]
fn invalid_configs_are_rejected() {
    let q = quadratic_oracle(&[1.0, 2.0], 0).unwrap();
    let group = WorkerGroup::new(1).unwrap();
    let bad = [
        TrainConfig { k: 3, ..TrainConfig::default() },
        TrainConfig { sigma: -1.0, ..TrainConfig::default() },
        TrainConfig { alpha: 0.0, ..TrainConfig::default() },
        TrainConfig { inner_epochs: 0, ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(train(&cfg, &q, None, &[0.0, 0.0], &group), Err(Error::Argument(_))));
    }
    assert!(matches!(
        train(&TrainConfig { k: 1, ..TrainConfig::default() }, &q, None, &[0.0], &group),
        Err(Error::Dimension { .. })
    ));
}
