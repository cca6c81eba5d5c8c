use flood_core::corpus_io::{generate_tree_corpus, CorpusSpec};
use flood_core::gaussian_path::{conditional_score_with, conditional_velocity_with, gaussian_mat};
use flood_core::metrics::component_histogram_tv;
use flood_core::oracle::{
    marginal_score, marginal_velocity, marginal_velocity_with, oracle_sample, posterior_mean, posterior_mean_with,
    verify_locality, window_sensitivity,
};
use flood_core::schedule::FrameCoeffs;
use flood_core::verify::single_atom_corpus;
use flood_core::{Atom, ConditionedCorpus, Mat, VectorizedSchedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn two_point() -> ConditionedCorpus {
    let atom = |v: f64| Atom {
        controls: vec![0],
        frames: Mat::from_rows(&[vec![v]]),
        weight: 0.5,
    };
    ConditionedCorpus::new(vec![atom(1.0), atom(-1.0)], 1).unwrap()
}

/// Closed-form posterior mean of a symmetric ±1 mixture under x = αz + βε.
fn two_point_mean(alpha: f64, x: f64) -> f64 {
    let beta = 1.0 - alpha;
    (alpha * x / (beta * beta)).tanh()
}

#[test]
fn two_point_posterior_velocity_and_score() {
    let corpus = two_point();
    let x = Mat::from_rows(&[vec![0.2]]);
    let g = posterior_mean_with(&x, &[0], &[0.5], 1e-4, &corpus).unwrap();
    let want = two_point_mean(0.5, 0.2);
    assert!((g.get(0, 0) - want).abs() < 1e-12);
    assert!((want - 0.379949).abs() < 1e-6);

    let u = marginal_velocity_with(&x, &[0], &[0.5], 1e-4, &corpus).unwrap();
    assert!((u.get(0, 0) - (want - 0.2) / 0.5).abs() < 1e-12);
    assert!((u.get(0, 0) - 0.359899).abs() < 2e-6);

    // n_s = 1 and K = 1 give α = t.
    let sched = VectorizedSchedule::triangular(1.0, 1).unwrap();
    let (s, rep) = marginal_score(&x, &[0], 0.5, &sched, &corpus).unwrap();
    assert!(rep.clamped_frames.is_empty());
    assert!((s.get(0, 0) - (2.0 * want - 4.0 * 0.2)).abs() < 1e-12);
    assert!((s.get(0, 0) - -0.040102).abs() < 2e-6);
}

#[test]
fn posterior_limits() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let sched = VectorizedSchedule::triangular(2.0, corpus.frames()).unwrap();
    let atom = &corpus.atoms()[1];
    let g = posterior_mean(&atom.frames, &atom.controls, sched.horizon(), &sched, &corpus).unwrap();
    assert!(g.sub(&atom.frames).max_abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = gaussian_mat(corpus.frames(), corpus.dim(), &mut rng);
    let g = posterior_mean(&x, &atom.controls, 0.0, &sched, &corpus).unwrap();
    let members: Vec<&Atom> = corpus.atoms().iter().filter(|a| a.controls == atom.controls).collect();
    for k in 0..corpus.frames() {
        for d in 0..corpus.dim() {
            let prior: f64 = members.iter().map(|a| a.weight * a.frames.get(k, d)).sum();
            assert!((g.get(k, d) - prior).abs() < 1e-12);
        }
    }
}

#[test]
fn single_atom_fields_equal_conditional_fields() {
    let corpus = single_atom_corpus().unwrap();
    let atom = &corpus.atoms()[0];
    let sched = VectorizedSchedule::triangular(3.0, corpus.frames()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &t in &[0.3, 1.1, 2.0, 3.2] {
        let x = gaussian_mat(corpus.frames(), corpus.dim(), &mut rng);
        let c = sched.coeffs_at(t).unwrap();
        let u = marginal_velocity(&x, &atom.controls, t, &sched, &corpus).unwrap();
        let want = conditional_velocity_with(&atom.frames, &x, &c).unwrap();
        assert!(u.sub(&want).max_abs() < 1e-12);
        if c.beta.iter().all(|&b| b > 0.0) {
            let (s, _) = marginal_score(&x, &atom.controls, t, &sched, &corpus).unwrap();
            let want = conditional_score_with(&atom.frames, &x, &c).unwrap();
            assert!(s.sub(&want).max_abs() <= 1e-9 * want.max_abs().max(1.0));
        }
    }
}

#[test]
fn future_frames_have_score_minus_x_and_saturated_frames_are_clamped() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let sched = VectorizedSchedule::triangular(2.0, corpus.frames()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = gaussian_mat(corpus.frames(), corpus.dim(), &mut rng);
    let t = 2.2;
    let w = sched.active_window(t).unwrap();
    let track = corpus.tracks()[0].clone();
    let (s, rep) = marginal_score(&x, &track, t, &sched, &corpus).unwrap();
    for k in w.n..corpus.frames() {
        for d in 0..corpus.dim() {
            assert_eq!(s.get(k, d), -x.get(k, d));
        }
    }
    assert_eq!(rep.clamped_frames, (0..w.m).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn field_vanishes_outside_window(seed in 0u64..10_000, n_s in 0.5f64..10.0, u in 0.0f64..=1.0, which in 0usize..2) {
        let spec = if which == 0 { CorpusSpec::standard_four_atom() } else { CorpusSpec::branching_tree() };
        let corpus = generate_tree_corpus(&spec).unwrap();
        let sched = VectorizedSchedule::triangular(n_s, corpus.frames()).unwrap();
        let t = u * sched.horizon();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_mat(corpus.frames(), corpus.dim(), &mut rng).scale(3.0);
        let track = corpus.tracks()[seed as usize % corpus.tracks().len()].clone();
        let rep = verify_locality(&x, &track, t, &sched, &corpus).unwrap();
        prop_assert!(rep.max_abs_drift_before_window <= 1e-9);
        prop_assert!(rep.max_abs_drift_after_window <= 1e-9);
    }

    #[test]
    fn posterior_mean_lies_in_atom_hull(seed in 0u64..10_000, u in 0.0f64..=1.0) {
        let corpus = generate_tree_corpus(&CorpusSpec::branching_tree()).unwrap();
        let sched = VectorizedSchedule::triangular(2.0, corpus.frames()).unwrap();
        let t = u * sched.horizon();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_mat(corpus.frames(), corpus.dim(), &mut rng);
        let track = corpus.tracks()[seed as usize % corpus.tracks().len()].clone();
        let g = posterior_mean(&x, &track, t, &sched, &corpus).unwrap();
        for k in 0..corpus.frames() {
            for d in 0..corpus.dim() {
                let vals = corpus.atoms().iter().filter(|a| a.controls == track).map(|a| a.frames.get(k, d));
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                prop_assert!(g.get(k, d) >= lo - 1e-12 && g.get(k, d) <= hi + 1e-12);
            }
        }
    }
}

#[test]
fn empty_window_has_zero_field() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let sched = VectorizedSchedule::triangular(2.0, corpus.frames()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian_mat(corpus.frames(), corpus.dim(), &mut rng);
    let u = marginal_velocity(&x, &corpus.tracks()[0], 0.0, &sched, &corpus).unwrap();
    assert_eq!(u.max_abs(), 0.0);
}

#[test]
fn locality_check_rejects_random_schedule() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let sched = VectorizedSchedule::random_ablation(2.0, corpus.frames(), 3).unwrap();
    let x = Mat::zeros(corpus.frames(), corpus.dim());
    assert!(verify_locality(&x, &corpus.tracks()[0], 1.0, &sched, &corpus).is_err());
}

/// Two variants of one track that differ at both frames, so the weights that
/// set frame 1's posterior mean are read off frame 0.
fn coupled_pair() -> ConditionedCorpus {
    let atom = |a: f64, b: f64| Atom {
        controls: vec![0, 0],
        frames: Mat::from_rows(&[vec![a], vec![b]]),
        weight: 0.5,
    };
    ConditionedCorpus::new(vec![atom(1.0, 1.0), atom(-1.0, -1.0)], 1).unwrap()
}

#[test]
fn window_sensitivity_examples() {
    let corpus = coupled_pair();
    let sched = VectorizedSchedule::triangular(2.0, 2).unwrap();
    let x = Mat::from_rows(&[vec![0.1], vec![-0.05]]);
    let s = window_sensitivity(&x, &[0, 0], 0.75, &sched, &corpus, 0, 1).unwrap();
    assert!(s > 0.1, "sensitivity {s}");

    let single = ConditionedCorpus::new(
        vec![Atom {
            controls: vec![0, 0],
            frames: Mat::from_rows(&[vec![1.0], vec![1.0]]),
            weight: 1.0,
        }],
        1,
    )
    .unwrap();
    let s = window_sensitivity(&x, &[0, 0], 0.75, &sched, &single, 0, 1).unwrap();
    assert!(s <= 1e-6, "sensitivity {s}");

    // At t = 0.25 frame 1 has not been activated.
    let s = window_sensitivity(&x, &[0, 0], 0.25, &sched, &corpus, 1, 0).unwrap();
    assert_eq!(s, 0.0);
}

#[test]
fn oracle_flow_collapses_single_atom() {
    let corpus = single_atom_corpus().unwrap();
    let atom = &corpus.atoms()[0];
    let sched = VectorizedSchedule::triangular(2.0, corpus.frames()).unwrap();
    for seed in 0..5 {
        let x = oracle_sample(&atom.controls, 64, seed, &sched, &corpus).unwrap();
        assert!(x.sub(&atom.frames).max_abs() <= 1e-3);
    }
}

#[test]
fn oracle_flow_matches_mixture_weights() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let sched = VectorizedSchedule::triangular(2.0, corpus.frames()).unwrap();
    let track = corpus.tracks()[0].clone();
    let samples: Vec<Mat> = (0..400)
        .map(|s| oracle_sample(&track, 32, s, &sched, &corpus).unwrap())
        .collect();
    // 400 draws over two equally likely atoms: 3 binomial standard deviations is 0.075.
    let tv = component_histogram_tv(&samples, &corpus, &track).unwrap();
    assert!(tv <= 0.075, "tv {tv}");
}

#[test]
fn euler_error_shrinks_with_step_count() {
    let corpus = generate_tree_corpus(&CorpusSpec::standard_four_atom()).unwrap();
    let sched = VectorizedSchedule::triangular(2.0, corpus.frames()).unwrap();
    let track = corpus.tracks()[1].clone();
    let mean_dist = |spu: usize| -> f64 {
        (0..100)
            .map(|s| {
                let x = oracle_sample(&track, spu, s, &sched, &corpus).unwrap();
                corpus
                    .atoms()
                    .iter()
                    .filter(|a| a.controls == track)
                    .map(|a| flood_core::corpus::distance(&x, &a.frames))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / 100.0
    };
    let (d4, d8, d16) = (mean_dist(4), mean_dist(8), mean_dist(16));
    eprintln!("mean distance to nearest atom: spu 4 {d4:.3e}, 8 {d8:.3e}, 16 {d16:.3e}");
    // At least first order: each doubling removes roughly half of the error or more.
    let (r1, r2) = (d8 / d4, d16 / d8);
    assert!(r1 < 0.7, "ratio {r1}");
    assert!(r2 < 0.7, "ratio {r2}");
}

#[test]
fn pure_noise_frames_do_not_move_the_posterior() {
    let corpus = coupled_pair();
    let a = Mat::from_rows(&[vec![0.3], vec![5.0]]);
    let b = Mat::from_rows(&[vec![0.3], vec![-5.0]]);
    let ga = posterior_mean_with(&a, &[0, 0], &[0.4, 0.0], 1e-4, &corpus).unwrap();
    let gb = posterior_mean_with(&b, &[0, 0], &[0.4, 0.0], 1e-4, &corpus).unwrap();
    assert_eq!(ga, gb);
    let c = FrameCoeffs::from_alpha(&[0.4, 0.0]);
    assert!(!c.is_moving(1));
}
