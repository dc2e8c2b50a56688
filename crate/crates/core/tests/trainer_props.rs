use psm::data::{ClusterSpec, Dataset};
use psm::network::BnFlags;
use psm::numerics::{EmbeddingMatrix, RngState};
use psm::pnsm::StreamKey;
use psm::trainer::{
    evaluate_views, pretrain, pretrain_baseline, run_ablation_suite, strategy_grid, TrainConfig,
    Trainer,
};

fn small_data(seed: u64) -> (Dataset, Dataset) {
    ClusterSpec {
        classes: 3,
        dim: 8,
        train_per_class: 20,
        test_per_class: 6,
        separation: 4.0,
        seed,
    }
    .generate()
    .unwrap()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        batch_size: 8,
        k: 3,
        bank_capacity: 40,
        epochs: 3,
        warmup_epochs: 1.0,
        knn_k: 5,
        encoder_widths: vec![16, 12],
        projector_widths: vec![16, 8],
        predictor_widths: vec![12, 8],
        batch_norm: BnFlags {
            encoder: true,
            projector: true,
            predictor: true,
        },
        ..TrainConfig::default()
    }
}

fn metrics_bytes(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Vec<u8> {
    let art = pretrain(cfg, train, Some(test)).unwrap();
    let mut out = Vec::new();
    art.write_metrics(&mut out).unwrap();
    out
}

#[test]
fn runs_are_deterministic() {
    let (train, test) = small_data(1);
    let cfg = small_config(5);
    let a = metrics_bytes(&cfg, &train, &test);
    assert_eq!(a, metrics_bytes(&cfg, &train, &test));
    assert_ne!(a, metrics_bytes(&small_config(6), &train, &test));
}

#[test]
fn thread_count_does_not_change_results() {
    let (train, test) = small_data(2);
    let cfg = small_config(3);
    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let four = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let a = one.install(|| metrics_bytes(&cfg, &train, &test));
    let b = four.install(|| metrics_bytes(&cfg, &train, &test));
    assert_eq!(a, b);
}

#[test]
fn losses_are_finite_and_bank_fills() {
    let (train, test) = small_data(3);
    let cfg = small_config(1);
    let art = pretrain(&cfg, &train, Some(&test)).unwrap();
    for m in &art.metrics {
        assert!(m.loss_total.is_finite());
        assert!(m.loss_soft.unwrap().is_finite());
        assert!(m.loss_hard.unwrap().is_finite());
    }
    let pushed = cfg.epochs * (train.len() / cfg.batch_size) * cfg.batch_size;
    assert_eq!(art.bank.len(), cfg.bank_capacity.min(pushed));

    let mut short = small_config(1);
    short.epochs = 1;
    short.bank_capacity = 1000;
    let art = pretrain(&short, &train, None).unwrap();
    assert_eq!(art.bank.len(), (train.len() / 8) * 8);
    assert!(art.metrics[0].knn_acc.is_none());
}

#[test]
fn hard_only_total_is_scaled_hard() {
    let (train, _) = small_data(4);
    let mut cfg = small_config(2);
    cfg.use_soft = false;
    cfg.lambda = 0.7;
    cfg.epochs = 1;
    let mut trainer = Trainer::new(cfg.clone(), train.dim()).unwrap();
    let (_, steps) = trainer.train_epoch(&train, 0).unwrap();
    for s in steps {
        assert!(s.loss_soft.is_none());
        let hard = s.loss_hard.unwrap();
        assert!((s.loss_total - 0.7 * hard).abs() <= 1e-12 * hard.abs().max(1.0));
    }
}

#[test]
fn soft_negative_counts_follow_neighbor_sets() {
    let (train, _) = small_data(5);
    let mut cfg = small_config(4);
    cfg.use_pnsm = false;
    cfg.epochs = 1;
    let mut trainer = Trainer::new(cfg.clone(), train.dim()).unwrap();
    let (_, steps) = trainer.train_epoch(&train, 0).unwrap();
    let n = cfg.batch_size;
    for (b, s) in steps.iter().enumerate() {
        assert_eq!(s.k_eff, cfg.k.min(b * n));
        assert!(s
            .soft_negatives
            .iter()
            .all(|&c| c == (n - 1) * (s.k_eff + 1)));
        assert!(s.hard_negatives.iter().all(|&c| c == 2 * (n - 1)));
    }
}

#[test]
fn mined_counts_never_exceed_candidates() {
    let (train, _) = small_data(6);
    let mut cfg = small_config(7);
    cfg.epochs = 1;
    cfg.a = 5.0;
    let mut trainer = Trainer::new(cfg.clone(), train.dim()).unwrap();
    let (_, steps) = trainer.train_epoch(&train, 0).unwrap();
    for s in &steps {
        assert!(s.hard_negatives.iter().all(|&c| (1..=2 * 7).contains(&c)));
        assert!(s.soft_negatives.iter().all(|&c| c <= 7 * (s.k_eff + 1)));
    }
}

#[test]
fn baseline_retains_at_most_both_views() {
    let (train, test) = small_data(7);
    let mut cfg = small_config(8);
    cfg.epochs = 1;
    cfg.a = 3.0;
    let mut trainer = Trainer::new(
        TrainConfig {
            baseline: true,
            ..cfg.clone()
        },
        train.dim(),
    )
    .unwrap();
    let (_, steps) = trainer.train_epoch(&train, 0).unwrap();
    let n = cfg.batch_size;
    for s in &steps {
        assert!(s.hard_negatives.iter().all(|&c| c >= 1 && c <= 2 * (n - 1)));
        assert!(s.neg_retained_mean <= (2 * (n - 1)) as f64);
        assert!(s.purity_top1.is_none());
    }
    let art = pretrain_baseline(&cfg, &train, Some(&test), false).unwrap();
    assert!(art.bank.is_empty());
    assert!(art.final_knn().is_some());
}

#[test]
fn symmetrized_step_is_swap_invariant() {
    let (train, _) = small_data(8);
    let mut cfg = small_config(9);
    cfg.use_pnsm = false;
    cfg.symmetrize = true;
    cfg.epochs = 1;
    let mut trainer = Trainer::new(cfg.clone(), train.dim()).unwrap();
    trainer.train_epoch(&train, 0).unwrap();
    let mut rng = RngState::new(11);
    let view = |rng: &mut RngState| {
        EmbeddingMatrix::new(8, 8, (0..64).map(|_| rng.normal()).collect()).unwrap()
    };
    let (x1, x2) = (view(&mut rng), view(&mut rng));
    let key = StreamKey {
        seed: 9,
        tag: 0,
        epoch: 0,
        step: 0,
    };
    let a = evaluate_views(&trainer.params, &trainer.bank, &cfg, &x1, &x2, key).unwrap();
    let b = evaluate_views(&trainer.params, &trainer.bank, &cfg, &x2, &x1, key).unwrap();
    assert_eq!(a.directions.len(), 2);
    assert!((a.loss_total - b.loss_total).abs() <= 1e-9);
}

#[test]
fn strategy_grid_yields_one_row_per_strategy() {
    let (train, test) = small_data(9);
    let mut cfg = small_config(10);
    cfg.epochs = 2;
    let rows = run_ablation_suite(&strategy_grid(&cfg), &train, &test).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["v0", "v1", "v2", "v3", "v4"]);
    assert!(rows
        .iter()
        .all(|r| r.loss_total.is_finite() && r.knn_acc.is_some()));
}

#[test]
fn config_rejects_bad_values() {
    let (train, _) = small_data(10);
    let mut cfg = small_config(0);
    cfg.batch_size = 1000;
    assert!(pretrain(&cfg, &train, None).is_err());
    let bad = TrainConfig {
        t: 0.0,
        ..small_config(0)
    };
    assert!(Trainer::new(bad, 8).is_err());
    let none = TrainConfig {
        use_soft: false,
        use_hard: false,
        ..small_config(0)
    };
    assert!(Trainer::new(none, 8).is_err());
    assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
    let text = small_config(3).to_json().unwrap();
    assert_eq!(TrainConfig::from_json(&text).unwrap(), small_config(3));
}
