use flood_core::gaussian_path::{
    affine_coeffs, apply_affine, conditional_score_with, conditional_velocity_with, convert, corrupt,
    gaussian_mat, mix, velocity_from_score,
};
use flood_core::schedule::{triangular_window_unbounded, FrameCoeffs, ScheduleKind, VectorizedSchedule};
use flood_core::{Mat, PredictionKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Time-unit form of the clamp, written independently of the library.
fn alpha_ref(n_s: f64, t: f64, k: usize) -> f64 {
    (t - k as f64 / n_s).clamp(0.0, 1.0)
}

fn window_ref(n_s: f64, t: f64, frames: usize) -> (usize, usize) {
    let m = ((t - 1.0) * n_s).ceil().max(0.0) as usize;
    let n = (t * n_s).ceil().max(0.0) as usize;
    (m.min(frames), n.min(frames))
}

proptest! {
    #[test]
    fn alpha_matches_clamp_and_stays_in_unit_interval(n_s in 0.3f64..12.0, frames in 1usize..40, u in 0.0f64..=1.0) {
        let s = VectorizedSchedule::triangular(n_s, frames).unwrap();
        let t = u * s.horizon();
        let (alpha, beta) = s.alpha_beta_at(t).unwrap();
        for k in 0..frames {
            prop_assert!((0.0..=1.0).contains(&alpha[k]));
            prop_assert_eq!(beta[k], 1.0 - alpha[k]);
            prop_assert!((alpha[k] - alpha_ref(n_s, t, k)).abs() <= 1e-12);
        }
    }

    #[test]
    fn alpha_is_monotone_in_time(n_s in 0.3f64..12.0, frames in 1usize..30, a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let s = VectorizedSchedule::triangular(n_s, frames).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (x, _) = s.alpha_beta_at(lo * s.horizon()).unwrap();
        let (y, _) = s.alpha_beta_at(hi * s.horizon()).unwrap();
        for k in 0..frames {
            prop_assert!(x[k] <= y[k]);
        }
    }

    #[test]
    fn window_is_bounded_and_saturation_exact(n_s in 0.3f64..12.0, frames in 1usize..40, u in 0.0f64..=1.0) {
        let s = VectorizedSchedule::triangular(n_s, frames).unwrap();
        let t = u * s.horizon();
        let w = s.active_window(t).unwrap();
        prop_assert!(w.m <= w.n && w.n <= frames);
        prop_assert!(w.n - w.m <= n_s.ceil() as usize);
        let (alpha, _) = s.alpha_beta_at(t).unwrap();
        for k in 0..frames {
            if k < w.m {
                prop_assert_eq!(alpha[k], 1.0);
            } else if k >= w.n {
                prop_assert_eq!(alpha[k], 0.0);
            }
        }
        prop_assert!(s.check_saturation(t).unwrap().is_clean());
    }

    #[test]
    fn window_agrees_with_time_unit_ceilings_away_from_kinks(n_s in 1.0f64..10.0, frames in 1usize..30, u in 0.0f64..=1.0) {
        let s = VectorizedSchedule::triangular(n_s, frames).unwrap();
        let t = u * s.horizon();
        // Skip instants within rounding distance of an integer multiple of 1/n_s.
        let frac = (t * n_s).fract();
        prop_assume!(frac > 1e-9 && frac < 1.0 - 1e-9);
        let w = s.active_window(t).unwrap();
        prop_assert_eq!((w.m, w.n), window_ref(n_s, t, frames));
    }

    #[test]
    fn affine_forms_recover_their_targets(seed in 0u64..1000, frames in 1usize..8, dim in 1usize..4, u in 0.05f64..0.95) {
        let s = VectorizedSchedule::triangular(2.0, frames).unwrap();
        let t = u * s.horizon();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = gaussian_mat(frames, dim, &mut rng);
        let pp = corrupt(&z, t, &s, seed).unwrap();
        let c = s.coeffs_at(t).unwrap();
        let (a, b) = affine_coeffs(PredictionKind::X0, &c).unwrap();
        prop_assert_eq!(apply_affine(&a, &b, &pp.z, &pp.x), pp.z.clone());
        if c.beta.iter().all(|&b| b > 0.0) {
            let (a, b) = affine_coeffs(PredictionKind::Epsilon, &c).unwrap();
            let eps = apply_affine(&a, &b, &pp.z, &pp.x);
            for (e, r) in eps.as_slice().iter().zip(pp.eps.as_slice()) {
                prop_assert!((e - r).abs() <= 1e-9 * r.abs().max(1.0));
            }
        }
    }
}

#[test]
fn horizon_examples() {
    assert_eq!(VectorizedSchedule::triangular(5.0, 20).unwrap().horizon(), 5.0);
    assert_eq!(VectorizedSchedule::triangular(10.0, 10).unwrap().horizon(), 2.0);
}

#[test]
fn alpha_examples_at_fixed_times() {
    let s = VectorizedSchedule::triangular(5.0, 20).unwrap();
    let (a, b) = s.alpha_beta_at(0.0).unwrap();
    assert!(a.iter().all(|&v| v == 0.0) && b.iter().all(|&v| v == 1.0));
    let (a, _) = s.alpha_beta_at(s.horizon()).unwrap();
    assert!(a.iter().all(|&v| v == 1.0));
    let (a, _) = s.alpha_beta_at(1.2).unwrap();
    assert_eq!(a[0], 1.0);
    assert!((a[3] - 0.6).abs() < 1e-12);
    assert_eq!(a[6], 0.0);
    let (a, _) = s.alpha_beta_at(0.5).unwrap();
    for (k, want) in [0.5, 0.3, 0.1, 0.0, 0.0].into_iter().enumerate() {
        assert!((a[k] - want).abs() < 1e-12, "frame {k}: {} vs {want}", a[k]);
    }
}

#[test]
fn random_offsets_example() {
    let s = VectorizedSchedule::with_offsets(2.0, vec![0.0, 0.9]).unwrap();
    assert_eq!(s.kind(), ScheduleKind::RandomAblation);
    let (a, _) = s.alpha_beta_at(1.0).unwrap();
    assert_eq!(a[0], 1.0);
    assert!((a[1] - 0.1).abs() < 1e-12);
    assert!(s.active_window(1.0).is_err());
    assert!(s.check_saturation(1.0).is_err());
}

#[test]
fn derivative_pattern_examples() {
    let s = VectorizedSchedule::triangular(5.0, 20).unwrap();
    let c = s.coeffs_at(1.2).unwrap();
    // Frame 1 sits exactly on its upper kink (α = 1); saturated frames carry no drift.
    assert_eq!(c.alpha[1], 1.0);
    assert_eq!(&c.alpha_dot[..8], &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    let c = s.coeffs_at(1.19).unwrap();
    assert_eq!(&c.alpha_dot[..8], &[0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    let c0 = s.coeffs_at(0.0).unwrap();
    assert!(c0.alpha_dot.iter().all(|&d| d == 0.0));
    let c = s.coeffs_at(0.5).unwrap();
    assert_eq!((c.alpha_dot[2], c.beta_dot[2]), (1.0, -1.0));
}

#[test]
fn window_examples() {
    let s = VectorizedSchedule::triangular(5.0, 20).unwrap();
    let w = s.active_window(1.2).unwrap();
    assert_eq!((w.m, w.n), (1, 6));
    assert!(s.active_window(0.0).unwrap().is_empty());
    let w = s.active_window(5.0).unwrap();
    assert_eq!((w.m, w.n), (20, 20));
    assert_eq!(triangular_window_unbounded(5.0, 1.2), (1, 6));
}

#[test]
fn corrupt_boundaries_are_exact() {
    let s = VectorizedSchedule::triangular(3.0, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = gaussian_mat(6, 2, &mut rng);
    let p0 = corrupt(&z, 0.0, &s, 9).unwrap();
    assert_eq!(p0.x, p0.eps);
    let p1 = corrupt(&z, s.horizon(), &s, 9).unwrap();
    assert_eq!(p1.x, z);
}

#[test]
fn corrupted_mean_is_alpha_z() {
    let s = VectorizedSchedule::triangular(2.0, 3).unwrap();
    let z = Mat::from_rows(&[vec![1.0], vec![-2.0], vec![0.5]]);
    let t = 0.7;
    let (alpha, beta) = s.alpha_beta_at(t).unwrap();
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sum = [0.0; 3];
    for _ in 0..draws {
        let eps = gaussian_mat(3, 1, &mut rng);
        let x = mix(&z, &eps, &alpha, &beta);
        for k in 0..3 {
            sum[k] += x.get(k, 0);
        }
    }
    for k in 0..3 {
        let mean = sum[k] / draws as f64;
        let se = beta[k] / (draws as f64).sqrt();
        assert!((mean - alpha[k] * z.get(k, 0)).abs() <= 3.0 * se + 1e-15, "frame {k}");
    }
}

fn single(alpha: f64) -> FrameCoeffs {
    FrameCoeffs::from_alpha(&[alpha])
}

#[test]
fn conditional_field_examples() {
    let z = Mat::from_rows(&[vec![1.0]]);
    let x = Mat::from_rows(&[vec![0.2]]);
    let u = conditional_velocity_with(&z, &x, &single(0.5)).unwrap();
    assert!((u.get(0, 0) - 1.6).abs() < 1e-12);
    assert_eq!(conditional_velocity_with(&z, &x, &single(1.0)).unwrap().get(0, 0), 0.0);
    assert_eq!(conditional_velocity_with(&z, &x, &single(0.0)).unwrap().get(0, 0), 0.0);

    let s = conditional_score_with(&z, &x, &single(0.5)).unwrap();
    assert!((s.get(0, 0) - 1.2).abs() < 1e-12);
    let s = conditional_score_with(&z, &x, &single(0.0)).unwrap();
    assert_eq!(s.get(0, 0), -0.2);
    let exact = Mat::from_rows(&[vec![0.5]]);
    assert_eq!(conditional_score_with(&z, &exact, &single(0.5)).unwrap().get(0, 0), 0.0);
}

#[test]
fn affine_coefficient_examples() {
    let c = single(0.5);
    assert_eq!(affine_coeffs(PredictionKind::X0, &c).unwrap(), (vec![1.0], vec![0.0]));
    assert_eq!(affine_coeffs(PredictionKind::Epsilon, &c).unwrap(), (vec![-1.0], vec![2.0]));
    assert_eq!(affine_coeffs(PredictionKind::Score, &c).unwrap(), (vec![2.0], vec![-4.0]));
}

#[test]
fn velocity_from_score_examples() {
    let z = Mat::from_rows(&[vec![0.7]]);
    let x = z.scale(0.9);
    let s = conditional_score_with(&z, &x, &single(0.9)).unwrap();
    let u = velocity_from_score(&s, &x, &single(0.9)).unwrap();
    assert!((u.get(0, 0) - 0.7).abs() < 1e-12);
    let still = velocity_from_score(&Mat::from_rows(&[vec![5.0]]), &x, &single(1.0)).unwrap();
    assert_eq!(still.get(0, 0), 0.0);
}

#[test]
fn score_route_matches_velocity_on_random_interior_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..100 {
        let alpha: Vec<f64> = (0..4).map(|k| 0.05 + 0.9 * ((i * 7 + k * 13) % 97) as f64 / 96.0).collect();
        let c = FrameCoeffs::from_alpha(&alpha);
        let z = gaussian_mat(4, 3, &mut rng);
        let eps = gaussian_mat(4, 3, &mut rng);
        let x = mix(&z, &eps, &c.alpha, &c.beta);
        let direct = conditional_velocity_with(&z, &x, &c).unwrap();
        let via = velocity_from_score(&conditional_score_with(&z, &x, &c).unwrap(), &x, &c).unwrap();
        for (a, b) in via.as_slice().iter().zip(direct.as_slice()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn parameterization_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = FrameCoeffs::from_alpha(&[0.1, 0.35, 0.6, 0.85]);
    let z = gaussian_mat(4, 2, &mut rng);
    let eps = gaussian_mat(4, 2, &mut rng);
    let x = mix(&z, &eps, &c.alpha, &c.beta);
    let kinds = [PredictionKind::Velocity, PredictionKind::Epsilon, PredictionKind::X0, PredictionKind::Score];
    for from in kinds {
        let (a, b) = affine_coeffs(from, &c).unwrap();
        let pred = apply_affine(&a, &b, &z, &x);
        for to in kinds {
            let there = convert(from, to, &pred, &x, &c).unwrap();
            let back = convert(to, from, &there, &x, &c).unwrap();
            for (p, q) in back.as_slice().iter().zip(pred.as_slice()) {
                assert!((p - q).abs() <= 1e-9 * q.abs().max(1.0), "{from:?}->{to:?}");
            }
        }
    }
    // Known ε and clean data map to the conditional velocity.
    let v = convert(PredictionKind::Epsilon, PredictionKind::Velocity, &eps, &x, &c).unwrap();
    let u = conditional_velocity_with(&z, &x, &c).unwrap();
    for (p, q) in v.as_slice().iter().zip(u.as_slice()) {
        assert!((p - q).abs() <= 1e-9 * q.abs().max(1.0));
    }
    let v = convert(PredictionKind::X0, PredictionKind::Velocity, &z, &x, &c).unwrap();
    for k in 0..4 {
        for d in 0..2 {
            let want = (z.get(k, d) - x.get(k, d)) / c.beta[k];
            assert!((v.get(k, d) - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }
    let same = convert(PredictionKind::Velocity, PredictionKind::Velocity, &u, &x, &c).unwrap();
    assert_eq!(same, u);
}
