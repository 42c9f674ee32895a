use avprompt::config::{ModalitySet, RunConfig};
use avprompt::model::Model;
use avprompt::params::ParamStore;
use avprompt::synth::{gen_dataset, Dataset, SynthSpec};
use avprompt::train::{
    evaluate, load_checkpoint, lr_at, metrics_csv, recall_at_1, save_checkpoint, train, Adam, METRICS_HEADER,
};
use avprompt::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_store(x0: f64) -> (ParamStore, avprompt::ParamId) {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::scalar(x0));
    (store, id)
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut store = ParamStore::new();
    let a = store.add("a", Tensor::full(&[3], 0.7));
    let b = store.add("b", Tensor::full(&[2, 2], -1.5));
    let f = store.add("f", Tensor::full(&[2], 4.0));
    store.get_mut(f).set_requires_grad(false);
    let before: Vec<Tensor> = [a, b, f].iter().map(|&i| store.get(i).clone()).collect();
    let mut adam = Adam::new(&store);
    for _ in 0..3 {
        store.zero_grads();
        store.fill_missing_grads();
        adam.step(&mut store, 1e-3).unwrap();
    }
    for (i, t) in [a, b, f].iter().zip(&before) {
        assert_eq!(store.get(*i).data(), t.data());
    }
    assert!(adam.m[f.0].is_empty());
}

#[test]
fn first_step_moves_by_learning_rate() {
    let (mut store, id) = scalar_store(2.0);
    let mut adam = Adam::new(&store);
    store.get_mut(id).accumulate_grad(&[1.0]).unwrap();
    adam.step(&mut store, 1e-3).unwrap();
    let moved = 2.0 - store.get(id).item();
    assert!((moved - 1e-3).abs() < 1e-10);
}

#[test]
fn trajectory_on_square_matches_scalar_adam() {
    let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
    let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    let mut want = Vec::new();
    for t in 1..=5 {
        let g = 2.0 * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        x -= lr * mh / (vh.sqrt() + eps);
        want.push(x);
    }
    let (mut store, id) = scalar_store(1.5);
    let mut adam = Adam::new(&store);
    for w in want {
        store.zero_grads();
        let g = 2.0 * store.get(id).item();
        store.get_mut(id).accumulate_grad(&[g]).unwrap();
        adam.step(&mut store, lr).unwrap();
        assert!((store.get(id).item() - w).abs() < 1e-12);
    }
    assert_eq!(adam.step, 5);
}

#[test]
fn missing_gradient_is_a_contract_error() {
    let (mut store, id) = scalar_store(1.0);
    store.add("y", Tensor::scalar(3.0));
    store.get_mut(id).accumulate_grad(&[1.0]).unwrap();
    let mut adam = Adam::new(&store);
    assert!(matches!(adam.step(&mut store, 1e-3), Err(Error::Contract(_))));
    assert_eq!(store.get(id).item(), 1.0);
}

#[test]
fn step_decay_examples() {
    let cfg = RunConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-3);
    assert_eq!(lr_at(29, &cfg), 1e-3);
    assert!((lr_at(30, &cfg) - 1e-4).abs() < 1e-18);
    assert!((lr_at(90, &cfg) - 1e-6).abs() < 1e-20);
}

proptest! {
    #[test]
    fn schedule_is_non_increasing_and_periodic(e in 0usize..400) {
        let cfg = RunConfig::default();
        prop_assert!(lr_at(e + 1, &cfg) <= lr_at(e, &cfg));
        prop_assert_eq!(lr_at(e, &cfg), lr_at(e - e % 30, &cfg));
    }
}

#[test]
fn self_matching_embeddings_have_perfect_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v: Vec<Vec<f64>> = (0..20)
        .map(|_| (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    assert_eq!(recall_at_1(&v, &v).unwrap(), 1.0);
    let mut rev = v.clone();
    rev.reverse();
    assert_eq!(recall_at_1(&v, &rev).unwrap(), 0.0);
    assert!(recall_at_1(&v, &v[..3]).is_err());
}

fn small_cfg() -> RunConfig {
    RunConfig {
        train_size: 48,
        test_size: 40,
        epochs: 2,
        batch_size: 16,
        ..RunConfig::default()
    }
}

fn data(cfg: &RunConfig) -> Dataset {
    gen_dataset(&SynthSpec::from_config(cfg)).unwrap().1
}

// An untrained model maps each class cluster to one near-fixed prediction,
// so a single initialisation scores 0, 1/8, 2/8, ...; chance shows up in
// the mean over initialisations.
#[test]
fn untrained_model_is_at_chance() {
    let cfg = RunConfig {
        train_size: 0,
        test_size: 400,
        test_mismatch: 0.0,
        ..RunConfig::default()
    };
    let d = data(&cfg);
    let seeds = 32;
    let mut sum = 0.0;
    for seed in 0..seeds {
        let model = Model::new(&RunConfig { seed, ..cfg.clone() }).unwrap();
        let m = evaluate(&model, &d.test, ModalitySet::Both).unwrap();
        assert!((0.0..=1.0).contains(&m.fg_acc) && (0.0..=1.0).contains(&m.bg_acc));
        sum += m.fg_acc;
    }
    let mean = sum / seeds as f64;
    assert!((mean - 1.0 / 8.0).abs() <= 0.06, "mean fg {mean}");
}

#[test]
fn hard_coded_head_is_always_right() {
    let cfg = RunConfig {
        train_size: 0,
        test_size: 80,
        test_mismatch: 0.0,
        ..RunConfig::default()
    };
    let mut d = data(&cfg);
    d.test.retain(|s| s.label.y_f == Some(5));
    let mut model = Model::new(&cfg).unwrap();
    let fg = model.heads.unwrap().fg;
    model.store.get_mut(fg.w).data_mut().fill(0.0);
    let bias = model.store.get_mut(fg.b).data_mut();
    bias.fill(0.0);
    bias[5] = 1.0;
    let m = evaluate(&model, &d.test, ModalitySet::Both).unwrap();
    assert_eq!(m.fg_acc, 1.0);
    for modality in [ModalitySet::Audio, ModalitySet::Visual] {
        let m = evaluate(&model, &d.test, modality).unwrap();
        assert_eq!(m.fg_acc, 1.0);
        assert!(m.bg_acc.is_nan());
    }
}

#[test]
fn training_is_deterministic_and_keeps_the_backbone_frozen() {
    let cfg = small_cfg();
    let d = data(&cfg);
    let a = train(&cfg, &d, None, &mut |_| {}).unwrap();
    let b = train(&cfg, &d, None, &mut |_| {}).unwrap();
    let csv = metrics_csv(&a.metrics);
    assert_eq!(csv, metrics_csv(&b.metrics));
    assert!(csv.starts_with(METRICS_HEADER));
    assert_eq!(csv.lines().count(), cfg.epochs + 1);
    assert_eq!(a.last.frozen_checksum(), a.init_frozen_checksum);
    assert_eq!(a.best.frozen_checksum(), a.init_frozen_checksum);
    assert_ne!(
        a.last.store.get(a.last.bank.prompts[0].z_s.unwrap()).data(),
        Model::new(&cfg)
            .unwrap()
            .store
            .get(a.last.bank.prompts[0].z_s.unwrap())
            .data()
    );
    for r in &a.metrics {
        assert!((0.0..=1.0).contains(&r.fg_acc) && (0.0..=1.0).contains(&r.bg_acc));
    }
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let cfg = small_cfg();
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &d, Some(dir.path()), &mut |_| {}).unwrap();
    for name in ["metrics.csv", "best.mavt", "last.mavt"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let ck = load_checkpoint(&dir.path().join("last.mavt")).unwrap();
    assert_eq!(ck.model.cfg, cfg);
    assert_eq!(ck.frozen_checksum, out.init_frozen_checksum);
    assert_eq!(ck.optim.as_ref(), Some(&out.last_optim));
    let bits = |m: avprompt::train::EvalMetrics| [m.fg_acc.to_bits(), m.bg_acc.to_bits(), m.retrieval_r1.to_bits()];
    assert_eq!(
        bits(evaluate(&ck.model, &d.test, ModalitySet::Both).unwrap()),
        bits(evaluate(&out.last, &d.test, ModalitySet::Both).unwrap())
    );
    let p = dir.path().join("again.mavt");
    save_checkpoint(&p, &ck.model, ck.optim.as_ref()).unwrap();
    assert_eq!(
        std::fs::read(&p).unwrap(),
        std::fs::read(dir.path().join("last.mavt")).unwrap()
    );
}

#[test]
fn divergent_run_aborts_with_a_dump() {
    let cfg = RunConfig {
        lr: 1e300,
        ..small_cfg()
    };
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    match train(&cfg, &d, Some(dir.path()), &mut |_| {}) {
        Err(Error::NonFinite { dump, .. }) => {
            assert!(dump.contains("total"));
            assert!(dir.path().join("nonfinite.txt").exists());
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.best_epoch)),
    }
}

#[test]
fn training_rejects_unusable_configs() {
    let cfg = RunConfig {
        class_tokens: false,
        ..small_cfg()
    };
    let d = data(&small_cfg());
    assert!(matches!(train(&cfg, &d, None, &mut |_| {}), Err(Error::Config(_))));
    let mut bad = data(&small_cfg());
    bad.train
        .push(bad.test.iter().find(|s| s.label.is_background()).unwrap().clone());
    assert!(matches!(
        train(&small_cfg(), &bad, None, &mut |_| {}),
        Err(Error::Config(_))
    ));
}
