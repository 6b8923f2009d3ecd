mod common;

use common::tiny;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twinformer::optim::{Optimizer, OptimizerConfig, OptimizerKind, Schedule};
use twinformer::tracking::{synth_sequence, SynthSpec};
use twinformer::train::{
    evaluate, make_pairs, sample_pair, train, write_loss_csv, PairSampling, StepLog, TrainConfig, TrainData,
};
use twinformer::{Error, ModelConfig, ParamStore, Tensor, Twinformer};

fn config() -> ModelConfig {
    ModelConfig {
        offset_cells: 2.0,
        head_hidden: Some(16),
        ..tiny()
    }
}

fn short_run(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn centered_pair_targets_the_crop_center() {
    let seq = synth_sequence(&SynthSpec::easy(1), "s").unwrap();
    let sampling = PairSampling {
        max_gap: 0,
        center_jitter: 0.0,
        scale_jitter: 0.0,
        ..PairSampling::default()
    };
    let c = config();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        let p = sample_pair(&seq, &c, &sampling, &mut rng).unwrap();
        assert_eq!(p.template.shape(), &[c.template_size, c.template_size, 3]);
        assert_eq!(p.search.shape(), &[c.search_size, c.search_size, 3]);
        assert!((p.target.cx - 0.5).abs() < 1e-12 && (p.target.cy - 0.5).abs() < 1e-12);
        // sqrt(w h) * 3 is the crop side, so w / side * h / side = 1 / 9.
        assert!((p.target.w * p.target.h - 1.0 / 9.0).abs() < 1e-12);
    }
}

#[test]
fn same_seed_same_curve() {
    let seqs: Vec<_> = (0..3)
        .map(|i| synth_sequence(&SynthSpec::varied(i), "s").unwrap())
        .collect();
    let run = || {
        let mut m = Twinformer::new(config(), 1).unwrap();
        let logs = train(&mut m, TrainData::Sequences(&seqs), &short_run(6), |_| {}).unwrap();
        (
            logs,
            m.params()
                .iter()
                .map(|(_, p)| p.tensor.data().to_vec())
                .collect::<Vec<_>>(),
        )
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|l| l.total.is_finite() && l.total > 0.0));
}

#[test]
fn zero_steps_leave_the_initialization() {
    let seqs = vec![synth_sequence(&SynthSpec::easy(4), "s").unwrap()];
    let mut m = Twinformer::new(config(), 2).unwrap();
    let init = Twinformer::new(config(), 2).unwrap();
    let logs = train(&mut m, TrainData::Sequences(&seqs), &short_run(0), |_| {}).unwrap();
    assert!(logs.is_empty());
    for ((_, a), (_, b)) in m.params().iter().zip(init.params().iter()) {
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
}

#[test]
fn fixed_pairs_loss_goes_down() {
    let c = config();
    let seqs: Vec<_> = (0..4)
        .map(|i| synth_sequence(&SynthSpec::easy(i), "s").unwrap())
        .collect();
    let pairs = make_pairs(&seqs, 4, &c, &PairSampling::default(), 5).unwrap();
    let mut m = Twinformer::new(c, 0).unwrap();
    let weights = twinformer::LossWeights::default();
    let before = evaluate(&mut m, &pairs, &weights).unwrap().total;
    let cfg = TrainConfig {
        steps: 150,
        batch_size: 4,
        optimizer: OptimizerConfig::adamw(0.01),
        schedule: Schedule::Cosine,
        ..TrainConfig::default()
    };
    let mut seen = 0;
    train(&mut m, TrainData::Pairs(&pairs), &cfg, |_| seen += 1).unwrap();
    let after = evaluate(&mut m, &pairs, &weights).unwrap().total;
    assert_eq!(seen, 150);
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn nan_input_reports_divergence() {
    let c = config();
    let seqs = vec![synth_sequence(&SynthSpec::easy(2), "s").unwrap()];
    let mut pairs = make_pairs(&seqs, 1, &c, &PairSampling::default(), 0).unwrap();
    pairs[0].search.data_mut()[10] = f64::NAN;
    let mut m = Twinformer::new(c, 0).unwrap();
    let err = train(&mut m, TrainData::Pairs(&pairs), &short_run(3), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    assert!(err.to_string().contains("non-finite value from"), "{err}");
}

#[test]
fn invalid_settings_are_rejected() {
    let seqs = vec![synth_sequence(&SynthSpec::easy(2), "s").unwrap()];
    let mut m = Twinformer::new(config(), 0).unwrap();
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(train(&mut m, TrainData::Sequences(&seqs), &bad, |_| {}).is_err());
    let bad = TrainConfig {
        optimizer: OptimizerConfig {
            learning_rate: -1.0,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    };
    assert!(train(&mut m, TrainData::Sequences(&seqs), &bad, |_| {}).is_err());
    assert!(train(&mut m, TrainData::Sequences(&[]), &TrainConfig::default(), |_| {}).is_err());
}

fn quadratic_store(x: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("x", Tensor::new(vec![1], vec![x]).unwrap()).unwrap();
    s
}

fn set_grad(s: &mut ParamStore, g: f64) {
    let id = s.id("x").unwrap();
    s.get_mut(id).tensor.set_grad(Some(vec![g])).unwrap();
}

#[test]
fn sgd_momentum_matches_hand_iteration() {
    let cfg = OptimizerConfig {
        learning_rate: 0.1,
        momentum: 0.5,
        clip_norm: None,
        ..OptimizerConfig::default()
    };
    let mut s = quadratic_store(1.0);
    let mut opt = Optimizer::new(cfg, &s).unwrap();
    // f = x^2 / 2, so the gradient is x.
    let (mut x, mut m) = (1.0f64, 0.0f64);
    for _ in 0..5 {
        let cur = s.tensor(s.id("x").unwrap()).data()[0];
        set_grad(&mut s, cur);
        opt.step(&mut s, 1.0).unwrap();
        m = 0.5 * m + x;
        x -= 0.1 * m;
        assert_eq!(s.tensor(s.id("x").unwrap()).data()[0], x);
    }
}

#[test]
fn adamw_first_step_has_learning_rate_size() {
    let mut s = quadratic_store(2.0);
    let mut opt = Optimizer::new(OptimizerConfig::adamw(0.05), &s).unwrap();
    assert_eq!(opt.config().kind, OptimizerKind::AdamW);
    set_grad(&mut s, 123.0);
    opt.step(&mut s, 1.0).unwrap();
    let x = s.tensor(s.id("x").unwrap()).data()[0];
    assert!((x - (2.0 - 0.05)).abs() < 1e-9);
    assert!(s.get(s.id("x").unwrap()).tensor.grad().is_none());
}

#[test]
fn clipping_bounds_the_update() {
    let cfg = OptimizerConfig {
        learning_rate: 1.0,
        momentum: 0.0,
        clip_norm: Some(2.0),
        ..OptimizerConfig::default()
    };
    let mut s = quadratic_store(0.0);
    let mut opt = Optimizer::new(cfg, &s).unwrap();
    set_grad(&mut s, -50.0);
    opt.step(&mut s, 1.0).unwrap();
    assert_eq!(s.tensor(s.id("x").unwrap()).data()[0], 2.0);
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(Schedule::Cosine.rate(0.2, 0, 100), 0.2);
    assert!((Schedule::Cosine.rate(0.2, 50, 100) - 0.1).abs() < 1e-15);
    assert!(Schedule::Cosine.rate(0.2, 100, 100).abs() < 1e-15);
    assert_eq!(Schedule::Constant.rate(0.2, 70, 100), 0.2);
}

#[test]
fn loss_curve_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    let logs = [
        StepLog {
            step: 0,
            total: 1.5,
            cls: 0.5,
            giou: 0.25,
            l1: 0.1,
        },
        StepLog {
            step: 1,
            total: 1.0,
            cls: 0.25,
            giou: 0.125,
            l1: 0.05,
        },
    ];
    write_loss_csv(&path, &logs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(
        lines,
        ["step,total,cls,giou,l1", "0,1.5,0.5,0.25,0.1", "1,1.0,0.25,0.125,0.05"]
    );
}
