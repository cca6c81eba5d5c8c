use flood_core::corpus_io::{generate_tree_corpus, CorpusSpec};
use flood_core::denoiser::write_checkpoint;
use flood_core::gaussian_path::{conditional_velocity_with, convert};
use flood_core::schedule::{FrameCoeffs, ScheduleKind};
use flood_core::trainer::{
    draw_point, masked_mse, smooth, target_for, train_loop, train_step, LrDecay, Optimizer, OptimizerState,
    TrainConfig,
};
use flood_core::verify::single_atom_corpus;
use flood_core::{DenoiserParams, FloodError, Mat, PredictionKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick(n_s: f64, frames: usize, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::toy(n_s, frames);
    cfg.total_steps = steps;
    cfg.eval_every = 0;
    cfg.model.hidden = 32;
    cfg.model.ffn = 64;
    cfg
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let mut cfg = quick(2.0, corpus.frames(), 5);
    cfg.learning_rate = 0.0;
    let mut params = DenoiserParams::init(&cfg.denoiser_config(&corpus), cfg.seed).unwrap();
    let before = params.clone();
    let mut state = OptimizerState::new(&params);
    for step in 0..5 {
        let loss = train_step(&mut params, &mut state, &corpus, &cfg, step).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }
    assert_eq!(params, before);
}

#[test]
fn training_is_deterministic_per_seed() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let cfg = quick(2.0, corpus.frames(), 40);
    let bytes = |cfg: &TrainConfig| {
        let (p, log) = train_loop(cfg, &corpus).unwrap();
        let mut out = Vec::new();
        write_checkpoint(&p, &mut out).unwrap();
        (out, log.iter().map(|r| r.loss).collect::<Vec<_>>())
    };
    let (a, la) = bytes(&cfg);
    let (b, lb) = bytes(&cfg);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(bytes(&other).0, a);
}

#[test]
fn loss_ignores_rows_outside_the_active_set() {
    let pred = Mat::from_rows(&[vec![1.0, 2.0], vec![0.5, -0.5], vec![9.0, 9.0]]);
    let target = Mat::from_rows(&[vec![100.0, 100.0], vec![0.0, 0.0], vec![-9.0, 9.0]]);
    let (loss, grad) = masked_mse(&pred, &target, &[1]);
    assert_eq!(loss, (0.25 + 0.25) / 2.0);
    assert_eq!(grad.row(0), &[0.0, 0.0]);
    assert_eq!(grad.row(2), &[0.0, 0.0]);
    assert_eq!(grad.row(1), &[0.5, -0.5]);
    let (loss2, _) = masked_mse(&pred, &target, &[1, 2]);
    assert_eq!(loss2, (0.25 + 0.25 + 324.0) / 4.0);
}

#[test]
fn drawn_windows_always_have_active_frames() {
    let corpus = generate_tree_corpus(&CorpusSpec::branching_tree()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for kind in [ScheduleKind::Triangular, ScheduleKind::RandomAblation] {
        let mut cfg = quick(2.0, corpus.frames(), 1).schedule;
        cfg.kind = kind;
        for _ in 0..2000 {
            let p = draw_point(&corpus, &cfg, 6, &mut rng).unwrap();
            assert!(!p.active.is_empty());
            assert!(p.x.rows() <= 6);
            for &r in &p.active {
                assert!(p.alpha[r] > 0.0 && p.alpha[r] < 1.0);
            }
            for (r, &a) in p.alpha.iter().enumerate() {
                assert_eq!(p.active.contains(&r), a > 0.0 && a < 1.0);
            }
            if kind == ScheduleKind::Triangular {
                // The window ends at the newest activated frame.
                assert!(*p.alpha.last().unwrap() > 0.0);
            }
            assert_eq!(p.controls, corpus.atoms()[p.atom].controls[p.start..p.start + p.x.rows()].to_vec());
        }
    }
}

#[test]
fn all_targets_describe_the_same_velocity() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let cfg = quick(2.0, corpus.frames(), 1).schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let p = draw_point(&corpus, &cfg, 64, &mut rng).unwrap();
        let c = FrameCoeffs::from_alpha(&p.alpha);
        let u = conditional_velocity_with(&p.z, &p.x, &c).unwrap();
        assert_eq!(target_for(PredictionKind::Velocity, &p).unwrap(), u);
        for kind in [PredictionKind::Epsilon, PredictionKind::X0] {
            let target = target_for(kind, &p).unwrap();
            let sub = |m: &Mat| Mat::from_rows(&p.active.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>());
            let ca = FrameCoeffs::from_alpha(&p.active.iter().map(|&r| p.alpha[r]).collect::<Vec<_>>());
            let v = convert(kind, PredictionKind::Velocity, &sub(&target), &sub(&p.x), &ca).unwrap();
            let want = sub(&u);
            for (a, b) in v.as_slice().iter().zip(want.as_slice()) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{kind:?}");
            }
        }
    }
    assert!(target_for(PredictionKind::Score, &draw_point(&corpus, &cfg, 64, &mut rng).unwrap()).is_err());
}

#[test]
fn single_atom_overfits() {
    let corpus = single_atom_corpus().unwrap();
    let mut cfg = TrainConfig::toy(2.0, corpus.frames());
    cfg.total_steps = 2000;
    cfg.eval_every = 0;
    cfg.cond_dropout_prob = 0.0;
    cfg.prediction_kind = PredictionKind::X0;
    let (_, log) = train_loop(&cfg, &corpus).unwrap();
    let tail: Vec<f64> = log.iter().rev().take(100).map(|r| r.loss).collect();
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    eprintln!("single-atom x0 loss over the last 100 steps: {mean:.3e}");
    assert!(mean <= 1e-3, "loss {mean}");
}

#[test]
fn smoothed_loss_trends_down() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let mut cfg = TrainConfig::toy(2.0, corpus.frames());
    cfg.total_steps = 3000;
    cfg.eval_every = 1000;
    let (_, log) = train_loop(&cfg, &corpus).unwrap();
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    let s = smooth(&losses, 200);
    let marks: Vec<f64> = s.iter().step_by(500).copied().collect();
    eprintln!("smoothed loss every 500 steps: {marks:?}");
    let last = *marks.last().unwrap();
    assert!(last < 0.5 * marks[0], "{marks:?}");
    assert!(last < marks[1], "{marks:?}");
    let mses: Vec<f64> = log.iter().filter_map(|r| r.velocity_mse_vs_oracle).collect();
    assert_eq!(mses.len(), 3);
    assert!(mses[2] < mses[0]);
}

#[test]
fn divergence_is_reported() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let mut cfg = quick(2.0, corpus.frames(), 50);
    cfg.optimizer = Optimizer::Sgd;
    cfg.grad_clip = None;
    cfg.learning_rate = 1e200;
    match train_loop(&cfg, &corpus) {
        Err(FloodError::NonFiniteLoss { .. }) => {}
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let base = quick(2.0, corpus.frames(), 1);
    let mut c = base.clone();
    c.batch_size = 0;
    assert!(train_loop(&c, &corpus).is_err());
    let mut c = base.clone();
    c.prediction_kind = PredictionKind::Score;
    assert!(train_loop(&c, &corpus).is_err());
    let mut c = base.clone();
    c.schedule.frames = corpus.frames() + 1;
    assert!(train_loop(&c, &corpus).is_err());
    let mut c = base;
    c.cond_dropout_prob = 1.0;
    assert!(train_loop(&c, &corpus).is_err());
}

#[test]
fn cosine_decay_endpoints() {
    let cos = LrDecay::Cosine { final_fraction: 0.1 };
    assert_eq!(cos.factor(0, 101), 1.0);
    assert!((cos.factor(50, 101) - 0.55).abs() < 1e-12);
    assert!((cos.factor(100, 101) - 0.1).abs() < 1e-12);
    assert!((cos.factor(500, 101) - 0.1).abs() < 1e-12);
    assert_eq!(LrDecay::Constant.factor(77, 101), 1.0);
    for w in (0..101).collect::<Vec<_>>().windows(2) {
        assert!(cos.factor(w[1], 101) <= cos.factor(w[0], 101));
    }
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let mut cfg = quick(2.0, corpus.frames(), 1);
    cfg.lr_decay = LrDecay::Cosine { final_fraction: 1.5 };
    assert!(train_loop(&cfg, &corpus).is_err());
    // Decay to zero from a zero rate is a no-op, like the constant schedule.
    cfg.lr_decay = LrDecay::Cosine { final_fraction: 0.0 };
    cfg.learning_rate = 0.0;
    let (p, _) = train_loop(&cfg, &corpus).unwrap();
    assert_eq!(p, DenoiserParams::init(&cfg.denoiser_config(&corpus), cfg.seed).unwrap());
}
