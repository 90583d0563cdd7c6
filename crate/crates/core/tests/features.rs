use std::f64::consts::PI;

use moreflow_core::features::*;
use moreflow_core::geometry::{rot_y, rot_z, Rotation, Vec3};
use moreflow_core::motion::{scale_character, Frame, MotionClip, MotionWindow};
use moreflow_core::skeleton::{joint, Skeleton, BIPED_A};
use moreflow_core::synth::{forward_kinematics, random_clip, Profile};
use moreflow_core::{rng, Error};

fn skel() -> Skeleton {
    Skeleton::builtin(BIPED_A).unwrap()
}

/// Frames from a root trajectory and fixed local joint rotations.
fn frames(n: usize, root: impl Fn(f64) -> (Vec3, Rotation), locals: &[Rotation]) -> Vec<Frame> {
    let s = skel();
    (0..n)
        .map(|t| {
            let (p, r) = root(t as f64 / 32.0);
            let mut l = locals.to_vec();
            l[0] = r;
            let (positions, rotations) = forward_kinematics(&s, p, &l);
            Frame {
                positions,
                rotations,
                v_root: Vec3::zeros(),
            }
        })
        .collect()
}

fn rest() -> Vec<Rotation> {
    vec![Rotation::identity(); joint::COUNT]
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn root_velocity_examples() {
    let still = frames(32, |_| (Vec3::new(0.0, 0.0, 0.9), Rotation::identity()), &rest());
    assert_eq!(phi_root_velocity(&still).unwrap(), vec![0.0; 6]);

    let moving = frames(32, |t| (Vec3::new(t, 0.0, 0.9), Rotation::identity()), &rest());
    assert!(close(&phi_root_velocity(&moving).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1e-6));

    let spin = frames(32, |t| (Vec3::new(0.0, 0.0, 0.9), rot_z(0.5 * t)), &rest());
    assert!(close(&phi_root_velocity(&spin).unwrap(), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.5], 1e-6));
}

#[test]
fn root_velocity_is_in_the_root_frame() {
    // heading +y, moving along world +y: forward speed in the root frame
    let f = frames(32, |t| (Vec3::new(0.0, 2.0 * t, 0.9), rot_z(PI / 2.0)), &rest());
    assert!(close(&phi_root_velocity(&f).unwrap(), &[2.0, 0.0, 0.0, 0.0, 0.0, 0.0], 1e-9));
}

#[test]
fn root_2d_examples() {
    let still = frames(32, |_| (Vec3::new(0.3, 0.1, 0.9), Rotation::identity()), &rest());
    assert_eq!(phi_root_2d(&still).unwrap(), vec![0.0; 3]);
    let side = frames(32, |t| (Vec3::new(0.0, t, 0.9), Rotation::identity()), &rest());
    assert!(close(&phi_root_2d(&side).unwrap(), &[0.0, 1.0, 0.0], 1e-6));
    // yaw passes through ±π at 2 rad/s
    let turning = frames(32, |t| (Vec3::zeros(), rot_z(PI - 0.5 + 2.0 * t)), &rest());
    let f = phi_root_2d(&turning).unwrap();
    assert!((f[2] - 2.0).abs() < 1e-9, "{f:?}");
    assert!(f[2].abs() < 2.0 * PI * 32.0);
}

#[test]
fn local_ee_extended_arm_reads_one() {
    let mut l = rest();
    l[joint::L_SHOULDER] = rot_y(-PI / 2.0);
    let f = frames(4, |_| (Vec3::new(0.0, 0.0, 0.9), Rotation::identity()), &l);
    let v = phi_local_ee(&f, &skel(), &["left-arm".into()]).unwrap();
    let l_len = 0.55;
    assert!((v[0] - l_len / (l_len + LIMB_EPS)).abs() < 1e-12);
    assert!(v[1].abs() < 1e-12 && v[2].abs() < 1e-12);
    // rotating the whole body does not change the root-aligned feature
    let turned = frames(4, |_| (Vec3::new(0.0, 0.0, 0.9), rot_z(1.0)), &l);
    let w = phi_local_ee(&turned, &skel(), &["left-arm".into()]).unwrap();
    assert!(close(&v, &w, 1e-12));
}

#[test]
fn local_ee_mirrors_between_arms() {
    use moreflow_core::geometry::rot_x;
    let mut l = rest();
    l[joint::L_SHOULDER] = rot_y(-0.7) * rot_x(0.4);
    l[joint::R_SHOULDER] = rot_y(-0.7) * rot_x(-0.4);
    let f = frames(3, |_| (Vec3::new(0.0, 0.0, 0.9), Rotation::identity()), &l);
    let left = phi_local_ee(&f, &skel(), &["left-arm".into()]).unwrap();
    let right = phi_local_ee(&f, &skel(), &["right-arm".into()]).unwrap();
    assert!(close(&left, &[right[0], -right[1], right[2]], 1e-12));
}

#[test]
fn local_ee_is_scale_invariant() {
    let s = skel();
    let mut r = rng::stream(11, "scale");
    for _ in 0..8 {
        let clip = random_clip(&s, &Profile::for_skeleton(BIPED_A), 40, &mut r).unwrap();
        let base = phi_local_ee(&clip.frames, &s, &[]).unwrap();
        for factor in [0.5, 2.0] {
            let (s2, c2) = scale_character(&s, &clip, factor).unwrap();
            let scaled = phi_local_ee(&c2.frames, &s2, &[]).unwrap();
            assert!(close(&base, &scaled, 1e-10));
        }
    }
}

#[test]
fn world_features_are_scale_covariant() {
    let s = skel();
    let mut r = rng::stream(12, "cov");
    let clip = random_clip(&s, &Profile::for_skeleton(BIPED_A), 40, &mut r).unwrap();
    let (s2, c2) = scale_character(&s, &clip, 0.5).unwrap();
    for c in ["world-xyz-ee", "world-xy-root", "world-z"] {
        let c: Condition = c.parse().unwrap();
        let a = phi(&clip.frames, &s, &c).unwrap();
        let b = phi(&c2.frames, &s2, &c).unwrap();
        let half: Vec<f64> = a.iter().map(|x| 0.5 * x).collect();
        assert!(close(&b, &half, 1e-12), "{c}");
    }
}

#[test]
fn root_velocity_ignores_rigid_translation() {
    let s = skel();
    let clip = random_clip(&s, &Profile::for_skeleton(BIPED_A), 40, &mut rng::stream(13, "t")).unwrap();
    let moved = clip.translated(&Vec3::new(3.0, -7.0, 0.25));
    let a = phi_root_velocity(&clip.frames).unwrap();
    let b = phi_root_velocity(&moved.frames).unwrap();
    assert!(close(&a, &b, 1e-9));
}

#[test]
fn world_xyz_ee_examples() {
    let s = skel();
    let mut f = frames(6, |_| (Vec3::new(0.0, 0.0, 0.9), Rotation::identity()), &rest());
    for fr in &mut f {
        fr.positions[joint::L_HAND] = Vec3::new(0.3, 0.0, 1.1);
    }
    assert_eq!(phi_world_xyz_ee(&f, &s, &["left-arm".into()]).unwrap(), vec![0.3, 0.0, 1.1]);
    // a hand moving linearly averages to its midpoint
    for (t, fr) in f.iter_mut().enumerate() {
        fr.positions[joint::L_HAND] = Vec3::new(0.1 * t as f64, 0.2, 1.0 + 0.05 * t as f64);
    }
    let v = phi_world_xyz_ee(&f, &s, &["left-arm".into()]).unwrap();
    assert!(close(&v, &[0.25, 0.2, 1.125], 1e-9));
}

#[test]
fn world_xy_root_examples() {
    let still = frames(32, |_| (Vec3::new(5.0, 1.0, 0.9), Rotation::identity()), &rest());
    assert_eq!(phi_world_xy_root(&still).unwrap(), vec![0.0, 0.0]);
    // straight line: the mean displacement is half the total (arithmetic series)
    let line = frames(64, |t| (Vec3::new(0.8 * t, -0.4 * t, 0.9), Rotation::identity()), &rest());
    let clip = MotionClip {
        skeleton: BIPED_A.into(),
        fps: 32.0,
        frames: line,
    };
    let w0 = MotionWindow::from_clip(&clip, 0, 32);
    let total = clip.frames[31].root() - clip.frames[0].root();
    let f0 = phi_world_xy_root(&w0.frames).unwrap();
    assert!(close(&f0, &[0.5 * total.x, 0.5 * total.y], 1e-9));
    let f1 = phi_world_xy_root(&MotionWindow::from_clip(&clip, 17, 32).frames).unwrap();
    assert!(close(&f0, &f1, 1e-9));
}

#[test]
fn world_z_examples() {
    let flat = frames(8, |_| (Vec3::new(0.0, 0.0, 0.9), Rotation::identity()), &rest());
    assert!((phi_world_z(&flat).unwrap()[0] - 0.9).abs() < 1e-15);
    // one parabolic hop of apex 0.5 over the window
    let apex = 0.5;
    let hop = frames(33, |t| (Vec3::new(0.0, 0.0, 0.9 + 4.0 * apex * t * (1.0 - t)), Rotation::identity()), &rest());
    let z = phi_world_z(&hop).unwrap()[0];
    let oracle: f64 = (0..33).map(|i| { let t = i as f64 / 32.0; 0.9 + 4.0 * apex * t * (1.0 - t) }).sum::<f64>() / 33.0;
    assert!((z - oracle).abs() < 1e-12);
    assert!(z < 0.9 + apex);
}

#[test]
fn dimensions_match_the_table() {
    let s = skel();
    let f = random_clip(&s, &Profile::for_skeleton(BIPED_A), 32, &mut rng::stream(2, "d")).unwrap().frames;
    for (tag, dim) in [
        ("root-velocity", 6),
        ("root-2d", 3),
        ("local-ee", 12),
        ("local-ee:left-arm,right-arm", 6),
        ("world-xyz-ee", 12),
        ("world-xyz-ee:right-leg", 3),
        ("world-xy-root", 2),
        ("world-z", 1),
    ] {
        let c: Condition = tag.parse().unwrap();
        assert_eq!(c.dim(&s).unwrap(), dim);
        assert_eq!(phi(&f, &s, &c).unwrap().len(), dim, "{tag}");
        assert_eq!(c.to_string(), tag);
    }
    assert!(matches!(phi(&f, &s, &Condition::null()), Err(Error::NullCondition)));
    let unknown: Condition = "local-ee:tail".parse().unwrap();
    assert!(matches!(phi(&f, &s, &unknown), Err(Error::UnknownJoint(_))));
}

#[test]
fn condition_parsing() {
    for bad in ["", "world", "world-z:left-arm", "local-ee:", "local-ee:a,,b", "local-ee:a,a", "null:x"] {
        assert!(bad.parse::<Condition>().is_err(), "{bad}");
    }
    let c: Condition = "local-ee:left-arm,right-arm".parse().unwrap();
    assert_eq!(c.tag, Tag::LocalEe);
    assert_eq!(c.limbs, vec!["left-arm", "right-arm"]);
    assert!("null".parse::<Condition>().unwrap().is_null());
}

#[test]
fn one_hot_encoding() {
    let set = ConditionSet::all();
    for c in &set.conditions {
        let v = set.one_hot(c).unwrap();
        assert_eq!(v.iter().filter(|x| **x != 0.0).count(), 1);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
    }
    assert!(set.one_hot(&Condition::null()).unwrap().iter().all(|x| *x == 0.0));
    assert!(set.index(&"local-ee:left-arm".parse().unwrap()).is_err());
    assert!(ConditionSet::parse_list("world-z world-z").is_err());
    assert!(ConditionSet::parse_list("null").is_err());
    assert_eq!(ConditionSet::parse_list(&set.to_string()).unwrap(), set);
}

/// Flat channel perturbation helpers for the finite-difference oracle.
fn to_channels(f: &[Frame]) -> Vec<f64> {
    let mut out = Vec::new();
    for fr in f {
        fr.write_channels(&mut out);
    }
    out
}

fn from_channels(c: &[f64]) -> Vec<Frame> {
    c.chunks(135).map(|x| Frame::from_channels(x, 11, false).unwrap()).collect()
}

#[test]
fn feature_gradients_match_finite_differences() {
    let s = skel();
    let mut r = rng::stream(5, "vjp");
    let clip = random_clip(&s, &Profile::for_skeleton(BIPED_A), 12, &mut r).unwrap();
    // add a roll so the root rotation is not a pure yaw
    let mut f = clip.frames.clone();
    for (t, fr) in f.iter_mut().enumerate() {
        fr.rotations[0] = fr.rotations[0] * rot_y(0.1 + 0.02 * t as f64);
    }
    let base = to_channels(&f);
    for tag in ["root-velocity", "root-2d", "local-ee", "world-xyz-ee:left-leg", "world-xy-root", "world-z"] {
        let c: Condition = tag.parse().unwrap();
        let dim = c.dim(&s).unwrap();
        let g: Vec<f64> = (0..dim).map(|i| ((i as f64) * 1.3).sin() + 0.5).collect();
        let analytic = phi_vjp(&f, &s, &c, &g).unwrap();
        let h = 1e-5;
        let mut num = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fp = phi(&from_channels(&p), &s, &c).unwrap();
            let fm = phi(&from_channels(&m), &s, &c).unwrap();
            num[i] = g.iter().zip(fp.iter().zip(&fm)).map(|(g, (a, b))| g * (a - b) / (2.0 * h)).sum();
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = num.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / norm < 1e-5, "{tag}: rel err {}", diff / norm);
    }
}
