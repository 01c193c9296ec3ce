use ickd::bank::{build_bank, retrieve_negative, NegativeCache, PositiveCount};
use ickd::data::{gen_blobs, gen_spirals, LabeledDataset};
use ickd::net::{checkpoint_bytes, forward, init_model, MlpArchitecture, MlpModel};
use ickd::numerics::{argmax, softmax};
use ickd::train::*;
use ickd::Error;

fn blobs(k: usize, per_class: usize, dim: usize, spread: f64) -> (LabeledDataset, LabeledDataset) {
    gen_blobs(k, per_class, dim, spread, 3)
        .unwrap()
        .split_stratified(per_class / 4)
        .unwrap()
}

fn small_cfg(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_size: 16,
        ..Default::default()
    };
    cfg.lr.initial = 0.02;
    cfg.lr.decay_epochs = vec![epochs / 2];
    cfg.retrieval.k_positive = PositiveCount::Top(5);
    cfg.retrieval.n_negative = 4;
    cfg
}

fn arch(w: &[usize]) -> MlpArchitecture {
    MlpArchitecture::new(w.to_vec()).unwrap()
}

/// Multinomial logistic regression by full-batch gradient descent.
fn softmax_regression_accuracy(train: &LabeledDataset, test: &LabeledDataset, iters: usize) -> (f64, f64) {
    let (d, k) = (train.dim(), train.class_count());
    let mut w = vec![0.0; k * (d + 1)];
    for _ in 0..iters {
        let mut g = vec![0.0; w.len()];
        for i in 0..train.len() {
            let x = train.row(i);
            let z: Vec<f64> = (0..k)
                .map(|c| w[c * (d + 1) + d] + (0..d).map(|j| w[c * (d + 1) + j] * x[j]).sum::<f64>())
                .collect();
            let p = softmax(&z).unwrap();
            for c in 0..k {
                let e = p[c] - if train.label(i) == c { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c * (d + 1) + j] += e * x[j];
                }
                g[c * (d + 1) + d] += e;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= 0.5 * gi / train.len() as f64;
        }
    }
    let acc = |ds: &LabeledDataset| {
        let hits = (0..ds.len())
            .filter(|&i| {
                let x = ds.row(i);
                let z: Vec<f64> = (0..k)
                    .map(|c| w[c * (d + 1) + d] + (0..d).map(|j| w[c * (d + 1) + j] * x[j]).sum::<f64>())
                    .collect();
                argmax(&z) == ds.label(i)
            })
            .count();
        hits as f64 / ds.len() as f64
    };
    (acc(train), acc(test))
}

#[test]
fn teacher_learns_separable_blobs() {
    let (train, test) = blobs(2, 80, 4, 0.15);
    let (_, oracle) = softmax_regression_accuracy(&train, &test, 300);
    assert!(oracle > 0.95, "logistic regression reaches {oracle}");
    let (model, metrics) = train_teacher(&arch(&[4, 16, 2]), &train, &test, &small_cfg(30)).unwrap();
    assert!(metrics.final_test_acc > 0.95, "{}", metrics.final_test_acc);
    assert_eq!(evaluate(&model, &test).unwrap(), metrics.final_test_acc);
    assert_eq!(metrics.epochs.len(), 30);
}

#[test]
fn spirals_need_a_nonlinear_model() {
    let train = gen_spirals(3, 150, 0.05, 1).unwrap();
    let test = gen_spirals(3, 50, 0.05, 2).unwrap();
    let (_, linear) = softmax_regression_accuracy(&train, &test, 500);
    assert!(linear < 0.6, "linear classifier reaches {linear}");
    let mut cfg = small_cfg(150);
    cfg.lr.initial = 0.05;
    cfg.lr.decay_epochs = vec![100];
    let (_, m) = train_teacher(&arch(&[2, 64, 64, 3]), &train, &test, &cfg).unwrap();
    assert!(m.final_test_acc > 0.9, "mlp reaches {}", m.final_test_acc);
}

#[test]
fn zero_epochs_rejected() {
    let (train, test) = blobs(2, 20, 3, 0.2);
    let err = train_teacher(&arch(&[3, 4, 2]), &train, &test, &small_cfg(0)).unwrap_err();
    assert!(matches!(err.source, Error::InvalidArgument(_)));
}

#[test]
fn divergence_reports_partial_metrics() {
    let (train, test) = blobs(2, 40, 3, 0.2);
    let mut cfg = small_cfg(5);
    cfg.lr.initial = 1e200;
    cfg.momentum = 0.0;
    let err = train_teacher(&arch(&[3, 8, 2]), &train, &test, &cfg).unwrap_err();
    assert!(matches!(err.source, Error::NumericInstability(_)), "{err}");
    assert!(err.partial.is_some());
}

#[test]
fn evaluate_breaks_ties_to_lowest_class() {
    // All-zero parameters give constant logits, so every prediction is class 0.
    let a = arch(&[3, 4, 10]);
    let model = MlpModel::new(a.clone(), vec![0.0; a.parameter_count()], 1).unwrap();
    let ds = gen_blobs(10, 5, 3, 0.5, 1).unwrap();
    assert_eq!(evaluate(&model, &ds).unwrap(), 0.1);

    let wrong = gen_blobs(4, 5, 3, 0.5, 1).unwrap();
    assert!(matches!(evaluate(&model, &wrong), Err(Error::InvalidArgument(_))));
}

#[test]
fn evaluate_matches_direct_loop() {
    let (train, _) = blobs(3, 20, 5, 0.4);
    let model = init_model(&arch(&[5, 7, 3]), 11);
    let hits = (0..train.len())
        .filter(|&i| argmax(&forward(&model, train.row(i)).unwrap().logits) == train.label(i))
        .count();
    assert_eq!(evaluate(&model, &train).unwrap(), hits as f64 / train.len() as f64);
}

fn teacher_for(train: &LabeledDataset, test: &LabeledDataset) -> MlpModel {
    let d = train.dim();
    train_teacher(&arch(&[d, 32, 16, train.class_count()]), train, test, &small_cfg(8))
        .unwrap()
        .0
}

#[test]
fn runs_are_deterministic() {
    let (train, test) = blobs(3, 24, 4, 0.4);
    let teacher = teacher_for(&train, &test);
    let sa = arch(&[4, 6, 3]);
    let cfg = small_cfg(4);
    let (m1, r1) = distill_offline(&teacher, &sa, &train, &test, &cfg).unwrap();
    let (m2, r2) = distill_offline(&teacher, &sa, &train, &test, &cfg).unwrap();
    assert_eq!(r1.to_csv(), r2.to_csv());
    assert_eq!(checkpoint_bytes(&m1), checkpoint_bytes(&m2));

    let other = TrainConfig { seed: 1, ..cfg };
    let (_, r3) = distill_offline(&teacher, &sa, &train, &test, &other).unwrap();
    assert_ne!(r1.to_csv(), r3.to_csv());
}

#[test]
fn kd_only_never_evaluates_context_terms() {
    let (train, test) = blobs(3, 24, 4, 0.4);
    let teacher = teacher_for(&train, &test);
    let cfg = TrainConfig {
        ablation: Ablation::KdOnly,
        ..small_cfg(3)
    };
    let (_, m) = distill_offline(&teacher, &arch(&[4, 6, 3]), &train, &test, &cfg).unwrap();
    assert_eq!(
        (m.picd_evaluations, m.nicd_evaluations, m.negative_retrievals),
        (0, 0, 0)
    );
    assert_eq!(m.bank_builds, 0);
    assert!(m
        .epochs
        .iter()
        .all(|e| e.picd == 0.0 && e.nicd == 0.0 && e.bank_checksum == 0));
}

#[test]
fn zero_gamma_matches_ablation() {
    let (train, test) = blobs(3, 24, 4, 0.4);
    let teacher = teacher_for(&train, &test);
    let sa = arch(&[4, 6, 3]);
    let mut by_gamma = small_cfg(3);
    by_gamma.loss.gamma_picd = 0.0;
    let by_ablation = TrainConfig {
        ablation: Ablation::KdNicd,
        ..small_cfg(3)
    };
    let (_, a) = distill_offline(&teacher, &sa, &train, &test, &by_gamma).unwrap();
    let (_, b) = distill_offline(&teacher, &sa, &train, &test, &by_ablation).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.picd_evaluations, 0);
    assert!(a.nicd_evaluations > 0);
}

#[test]
fn offline_bank_is_static_and_losses_decompose() {
    let (train, test) = blobs(3, 24, 4, 0.4);
    let teacher = teacher_for(&train, &test);
    let cfg = small_cfg(4);
    let (_, m) = distill_offline(&teacher, &arch(&[4, 6, 3]), &train, &test, &cfg).unwrap();
    let checksum = build_bank(&teacher, &train).unwrap().checksum();
    assert!(m.epochs.iter().all(|e| e.bank_checksum == checksum));
    assert_eq!(m.bank_builds, 1);
    assert_eq!(m.picd_evaluations, 4 * train.len());
    assert_eq!(m.nicd_evaluations, 4 * train.len());
    // Hardest negatives on a static bank are recomputed once per sample and epoch.
    assert_eq!(m.negative_retrievals, 4 * train.len());
    let (gp, gn) = (cfg.loss.gamma_picd, cfg.loss.gamma_nicd);
    for s in &m.steps {
        let sum = s.ce + s.kd + gp * s.picd + gn * s.nicd;
        assert!((s.total - sum).abs() < 1e-9, "{} vs {sum}", s.total);
    }
    assert_eq!(m.steps.len(), 4 * train.len().div_ceil(cfg.batch_size));
}

#[test]
fn negatives_are_stable_within_an_epoch() {
    let (train, test) = blobs(3, 24, 4, 0.4);
    let teacher = teacher_for(&train, &test);
    let bank = build_bank(&teacher, &train).unwrap();
    let mut cfg = small_cfg(1).retrieval;
    cfg.negative_strategy = ickd::bank::NegativeStrategy::Random;
    let seed = epoch_seed(0, 2);
    let mut cache = NegativeCache::new();
    let first = cache.get(&bank, bank.checksum(), 5, &cfg, seed).unwrap().clone();
    let again = cache.get(&bank, bank.checksum(), 5, &cfg, seed).unwrap().clone();
    assert_eq!(first, again);
    assert_eq!(cache.computations(), 1);
    assert_eq!(first, retrieve_negative(&bank, 5, &cfg, seed).unwrap());
    assert_ne!(epoch_seed(0, 2), epoch_seed(0, 3));
}

#[test]
fn missing_positive_fails_fast() {
    // Class 2 has a single training sample, so it has no same-class peer.
    let feats = vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0, 0.1, 0.9, -1.0, -1.0];
    let train = LabeledDataset::new(feats, 2, vec![0, 0, 1, 1, 2], 3).unwrap();
    let teacher = init_model(&arch(&[2, 4, 3]), 0);
    let err = distill_offline(&teacher, &arch(&[2, 3, 3]), &train, &train, &small_cfg(2)).unwrap_err();
    match err.source {
        Error::InsufficientCandidates(msg) => assert!(msg.contains('4'), "{msg}"),
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn online_bank_changes_every_epoch() {
    let (train, test) = blobs(3, 24, 4, 0.4);
    let a = arch(&[4, 8, 3]);
    let cfg = small_cfg(4);
    let o = distill_online(&a, &arch(&[4, 6, 3]), &train, &test, &cfg).unwrap();
    assert_eq!(o.metrics2.bank_builds, 4);
    let sums: Vec<u64> = o.metrics2.epochs.iter().map(|e| e.bank_checksum).collect();
    assert!(sums.windows(2).all(|w| w[0] != w[1]), "{sums:?}");
    assert_eq!(
        sums[0],
        build_bank(&init_model(&a, cfg.seed), &train).unwrap().checksum()
    );
    assert!(o.metrics2.picd_evaluations > 0);
    assert_eq!(o.metrics1.picd_evaluations, 0);
}

#[test]
fn symmetric_online_students_stay_identical() {
    let (train, test) = blobs(3, 24, 4, 0.4);
    let a = arch(&[4, 8, 3]);
    let mut cfg = small_cfg(3);
    cfg.online = OnlineConfig {
        mirror: true,
        peer_seed: cfg.seed,
    };
    let o = distill_online(&a, &a, &train, &test, &cfg).unwrap();
    assert_eq!(checkpoint_bytes(&o.student1), checkpoint_bytes(&o.student2));
    assert_eq!(o.metrics1.to_csv(), o.metrics2.to_csv());
}

#[test]
fn teacher_free_first_stage_is_plain_training() {
    let (train, test) = blobs(3, 24, 4, 0.4);
    let a = arch(&[4, 8, 3]);
    let cfg = TrainConfig {
        ablation: Ablation::IckdAll,
        ..small_cfg(3)
    };
    let o = distill_teacher_free(&a, &train, &test, &cfg).unwrap();
    let (m, r) = train_teacher(&a, &train, &test, &cfg).unwrap();
    assert_eq!(checkpoint_bytes(&o.baseline), checkpoint_bytes(&m));
    assert_eq!(o.baseline_metrics.to_csv(), r.to_csv());
    assert!((0.0..=1.0).contains(&o.student_metrics.final_test_acc));
}

#[test]
fn ablation_grid_shapes() {
    let (train, test) = blobs(3, 16, 4, 0.4);
    let ta = arch(&[4, 8, 3]);
    let sa = arch(&[4, 4, 3]);
    let setup = ExperimentSetup {
        teacher_arch: &ta,
        student_arch: &sa,
        train: &train,
        test: &test,
        base: small_cfg(2),
        seeds: vec![0, 1],
    };
    let teachers = train_teachers(&setup).unwrap();
    let cells = [AblationCell::new(Ablation::KdOnly), AblationCell::new(Ablation::Full)];
    let r = run_ablation_grid(&setup, &teachers, &cells).unwrap();
    assert_eq!(r.len(), 2);
    assert!(r.iter().all(|c| c.accuracies.len() == 2));
    assert_eq!(r, run_ablation_grid(&setup, &teachers, &cells).unwrap());

    assert_eq!(AblationCell::with_weight_variants(Ablation::Full).len(), 4);
    assert_eq!(AblationCell::with_weight_variants(Ablation::KdPicd).len(), 2);
    assert_eq!(AblationCell::with_weight_variants(Ablation::KdOnly).len(), 1);

    let points = run_sweep(&setup, &teachers, SweepAxis::K, &SweepAxis::K.grid()).unwrap();
    assert_eq!(points.len(), 4);
    assert!(argmax_point(&points).is_some());
}
