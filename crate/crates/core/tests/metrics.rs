use moreflow_core::geometry::{Rotation, Vec3};
use moreflow_core::metrics::*;
use moreflow_core::motion::{Frame, MotionClip, FPS};
use moreflow_core::rng;
use moreflow_core::skeleton::{joint, Skeleton, BIPED_A};
use moreflow_core::synth::forward_kinematics;
use proptest::prelude::*;
use rand::Rng;

fn normal(r: &mut impl Rng) -> f64 {
    let (u, v): (f64, f64) = (r.random::<f64>().max(1e-300), r.random());
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn gaussian_set(r: &mut impl Rng, n: usize, dim: usize, mean: f64) -> FeatureSet {
    FeatureSet::new(dim, (0..n * dim).map(|_| mean + normal(r)).collect()).unwrap()
}

#[test]
fn fid_vanishes_on_identical_sets() {
    let mut r = rng::stream(1, "test/fid0");
    let a = gaussian_set(&mut r, 200, 5, 0.3);
    assert!(fid(&a, &a).unwrap().abs() < 1e-8);
    // fewer samples than dim + 1 takes the diagonal route
    let small = gaussian_set(&mut r, 4, 5, 0.0);
    assert!(fid(&small, &small).unwrap().abs() < 1e-8);
}

#[test]
fn fid_of_shifted_unit_gaussians_approaches_the_squared_shift() {
    let mut r = rng::stream(2, "test/fid1d");
    for m in [1.0, 2.0, 3.0] {
        let a = gaussian_set(&mut r, 10_000, 1, 0.0);
        let b = gaussian_set(&mut r, 10_000, 1, m);
        let f = fid(&a, &b).unwrap();
        assert!((f - m * m).abs() < 0.05 * m * m, "m = {m}: {f}");
    }
}

#[test]
fn fid_matches_the_closed_form_for_diagonal_gaussians() {
    // with diagonal covariances the trace term is sum (s_a - s_b)^2 over
    // per-axis standard deviations
    let a = FeatureSet::new(2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 2.0, 0.0, -2.0]).unwrap();
    let b = FeatureSet::new(2, vec![3.0, 1.0, 1.0, 1.0, 2.0, 1.0, 2.0, 1.0]).unwrap();
    // a: mean 0, var (2/3, 8/3), cov 0; b: mean (2, 1), var (2/3, 0)
    let sa = [(2.0f64 / 3.0).sqrt(), (8.0f64 / 3.0).sqrt()];
    let sb = [(2.0f64 / 3.0).sqrt(), 0.0];
    let expect = 4.0 + 1.0 + (sa[0] - sb[0]).powi(2) + (sa[1] - sb[1]).powi(2);
    assert!((fid(&a, &b).unwrap() - expect).abs() < 1e-9);
    assert!(fid(&a, &FeatureSet::new(1, vec![0.0, 1.0]).unwrap()).is_err());
}

#[test]
fn diversity_examples() {
    let same = FeatureSet::new(3, [1.0, 2.0, 3.0].repeat(10)).unwrap();
    assert_eq!(diversity(&same).unwrap(), 0.0);
    let two = FeatureSet::new(2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
    assert_eq!(diversity(&two).unwrap(), 5.0);
}

fn all_pairs_mean(s: &FeatureSet) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += s.row(i).iter().zip(s.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

#[test]
fn diversity_matches_all_pairs_for_small_sets() {
    let mut r = rng::stream(3, "test/div");
    for n in [2, 3, 10, 30, 45, 46, 50] {
        let s = gaussian_set(&mut r, n, 4, 0.0);
        let got = diversity(&s).unwrap();
        let want = all_pairs_mean(&s);
        if n * (n - 1) / 2 <= DIVERSITY_PAIRS {
            assert!((got - want).abs() < 1e-12, "n = {n}");
        } else {
            // 1000 of 1035..1225 pairs without replacement
            assert!((got - want).abs() < 0.01 * want, "n = {n}: {got} vs {want}");
        }
    }
}

#[test]
fn alignment_examples() {
    let a = FeatureSet::new(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    let b = FeatureSet::new(2, vec![0.6, 0.8, 1.0, 0.0]).unwrap();
    assert_eq!(alignment_from_features(&a, &a).unwrap(), 1.0);
    assert_eq!(alignment_from_features(&a, &b).unwrap(), 0.5);
}

#[test]
fn alignment_does_not_rise_with_noise() {
    // symmetric noise pairs (e, -e) make the score exactly monotone per draw
    let mut r = rng::stream(4, "test/ali");
    let a = gaussian_set(&mut r, 40, 6, 0.0);
    let b = gaussian_set(&mut r, 40, 6, 0.1);
    let eps: Vec<f64> = (0..b.data.len()).map(|_| normal(&mut r)).collect();
    let score = |s: f64| {
        let plus: Vec<f64> = b.data.iter().zip(&eps).map(|(x, e)| x + s * e).collect();
        let minus: Vec<f64> = b.data.iter().zip(&eps).map(|(x, e)| x - s * e).collect();
        let p = alignment_from_features(&a, &FeatureSet::new(6, plus).unwrap()).unwrap();
        let m = alignment_from_features(&a, &FeatureSet::new(6, minus).unwrap()).unwrap();
        (p + m) / 2.0
    };
    let scores: Vec<f64> = (0..20).map(|i| score(i as f64 * 0.1)).collect();
    for w in scores.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{scores:?}");
    }
    assert!(scores.iter().all(|s| *s > 0.0 && *s <= 1.0));
}

/// Standing still at rest pose with the lowest foot `lift` above the floor.
fn standing(n: usize, lift: f64) -> (Skeleton, MotionClip) {
    let s = Skeleton::builtin(BIPED_A).unwrap();
    let rest = vec![Rotation::identity(); joint::COUNT];
    let (p, _) = forward_kinematics(&s, Vec3::zeros(), &rest);
    let lowest = s.feet().iter().map(|&j| p[j].z).fold(f64::INFINITY, f64::min);
    let root = Vec3::new(0.0, 0.0, s.floor + lift - lowest);
    let (positions, rotations) = forward_kinematics(&s, root, &rest);
    let f = Frame {
        positions,
        rotations,
        v_root: Vec3::zeros(),
    };
    let clip = MotionClip {
        skeleton: s.id.clone(),
        fps: FPS,
        frames: vec![f; n],
    };
    (s, clip)
}

#[test]
fn planted_feet_are_natural() {
    let (s, clip) = standing(64, 0.005);
    assert_eq!(naturalness(&clip, &s, &NaturalnessConfig::default()).unwrap(), 100.0);
}

fn sink_feet(clip: &mut MotionClip, s: &Skeleton, frames: impl Iterator<Item = usize>) {
    for t in frames {
        for j in s.feet() {
            clip.frames[t].positions[j].z = s.floor - 0.05;
        }
    }
}

#[test]
fn half_sunk_clip_scores_at_most_fifty() {
    let (s, mut clip) = standing(64, 0.005);
    sink_feet(&mut clip, &s, 0..32);
    let score = naturalness(&clip, &s, &NaturalnessConfig::default()).unwrap();
    assert!(score <= 50.0, "{score}");

    let (s, mut clip) = standing(64, 0.005);
    sink_feet(&mut clip, &s, (0..64).step_by(2));
    assert!(naturalness(&clip, &s, &NaturalnessConfig::default()).unwrap() <= 50.0);
}

#[test]
fn naturalness_falls_with_more_violations() {
    let cfg = NaturalnessConfig::default();
    let mut prev = 100.0;
    for v in 0..=40 {
        let (s, mut clip) = standing(40, 0.005);
        sink_feet(&mut clip, &s, 0..v);
        let score = naturalness(&clip, &s, &cfg).unwrap();
        assert!(score <= prev, "{v} violations: {score} > {prev}");
        prev = score;
    }
    assert_eq!(prev, 0.0);
}

#[test]
fn sliding_and_vibration_are_flagged() {
    let cfg = NaturalnessConfig::default();
    let (s, mut clip) = standing(32, 0.005);
    let foot = s.feet()[0];
    for (t, f) in clip.frames.iter_mut().enumerate() {
        f.positions[foot].x += 0.2 * t as f64 / FPS;
    }
    let flags = frame_flags(&clip, &s, &cfg).unwrap();
    assert!(flags.sliding.iter().all(|x| *x));
    assert!(!flags.penetrating.iter().any(|x| *x));

    let (s, mut clip) = standing(32, 0.005);
    let j = (1..s.num_joints()).find(|j| !s.feet().contains(j)).unwrap();
    for (t, f) in clip.frames.iter_mut().enumerate().skip(10).take(8) {
        f.positions[j].y += if t % 2 == 0 { 0.01 } else { -0.01 };
    }
    let flags = frame_flags(&clip, &s, &cfg).unwrap();
    assert!(flags.vibrating[12]);
    assert!(!flags.vibrating[0] && !flags.vibrating[31]);
    assert!(!flags.sliding.iter().any(|x| *x));
}

#[test]
fn report_lists_thresholds() {
    let mut rep = Report::new("0123456789abcdef", 123, &NaturalnessConfig::default());
    rep.push("FID", 1.5);
    let csv = rep.to_csv();
    assert!(csv.contains("# fingerprint=0123456789abcdef"));
    assert!(csv.contains("# metrics.slide_speed=0.05"));
    assert!(csv.ends_with("metric,value\nFID,1.5\n"));
    assert!(rep.to_text().contains("metrics.penetration"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fid_is_symmetric(seed in 0u64..10_000, n in 3usize..30) {
        let mut r = rng::stream(seed, "prop/fid");
        let a = gaussian_set(&mut r, n, 3, 0.0);
        let b = gaussian_set(&mut r, n + 2, 3, 0.5);
        let (x, y) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!((x - y).abs() < 1e-9);
        prop_assert!(x >= 0.0);
    }

    #[test]
    fn diversity_shift_and_scale(seed in 0u64..10_000, shift in -10.0f64..10.0, k in 0.1f64..10.0) {
        let mut r = rng::stream(seed, "prop/div");
        let s = gaussian_set(&mut r, 60, 3, 0.0);
        let d = diversity(&s).unwrap();
        let moved = FeatureSet::new(3, s.data.iter().map(|v| v + shift).collect()).unwrap();
        let scaled = FeatureSet::new(3, s.data.iter().map(|v| v * k).collect()).unwrap();
        prop_assert!((diversity(&moved).unwrap() - d).abs() < 1e-9 * (1.0 + shift.abs()));
        prop_assert!((diversity(&scaled).unwrap() - k * d).abs() < 1e-9 * k * d.max(1.0));
    }

    #[test]
    fn alignment_is_in_unit_interval(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        let x = alignment_from_features(&FeatureSet::new(2, a.clone()).unwrap(), &FeatureSet::new(2, b.clone()).unwrap()).unwrap();
        prop_assert!(x > 0.0 && x <= 1.0);
        prop_assert_eq!(x == 1.0, a == b);
    }
}
