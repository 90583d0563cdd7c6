use moreflow_core::geometry::Vec3;
use moreflow_core::io::{format_clip, format_stats, format_tokens, parse_clip, parse_stats, parse_tokens};
use moreflow_core::motion::{extract_windows, scale_character, window_count, Dataset, MotionWindow, NormStats};
use moreflow_core::skeleton::{Skeleton, BIPED_A, BIPED_B};
use moreflow_core::tokenizer::TokenSequence;
use moreflow_core::synth::{generate, random_clip, MotionKind, Profile, Side, SynthParams};
use moreflow_core::{rng, Error};
use proptest::prelude::*;

fn biped() -> Skeleton {
    Skeleton::builtin(BIPED_A).unwrap()
}

fn walk(speed: f64, frames: usize) -> moreflow_core::motion::MotionClip {
    let p = SynthParams {
        speed,
        amplitude: 0.8,
        ..SynthParams::default()
    };
    generate(MotionKind::Walk, &biped(), &p, frames).unwrap()
}

#[test]
fn window_counts() {
    assert_eq!(extract_windows(&walk(1.0, 32), 32, 1).len(), 1);
    assert_eq!(extract_windows(&walk(1.0, 40), 32, 1).len(), 9);
    let clip = walk(1.0, 128);
    let windows = extract_windows(&clip, 32, 8);
    // enumerate admissible starts directly
    let starts: Vec<usize> = (0..128).filter(|s| s % 8 == 0 && s + 32 <= 128).collect();
    assert_eq!(starts.len(), 13);
    assert_eq!(windows.iter().map(|w| w.start).collect::<Vec<_>>(), starts);
    assert!(windows.iter().all(|w| w.len() == 32));
    assert!(extract_windows(&walk(1.0, 20), 32, 1).is_empty());
}

proptest! {
    #[test]
    fn window_count_formula(t in 0usize..300, h in 1usize..64, stride in 1usize..20) {
        let brute = (0..t).filter(|s| s % stride == 0 && s + h <= t).count();
        prop_assert_eq!(window_count(t, h, stride), brute);
        if t >= h {
            prop_assert_eq!(window_count(t, h, stride), (t - h) / stride + 1);
        }
    }
}

#[test]
fn normalization_examples() {
    let clip = walk(1.2, 64);
    let windows = extract_windows(&clip, 32, 4);
    let stats = NormStats::compute(135, &windows).unwrap();
    assert!(stats.std.iter().all(|s| *s > 0.0));
    let mean_frame = stats.normalize(&stats.mean).unwrap();
    assert!(mean_frame.iter().all(|v| *v == 0.0));
    let plus: Vec<f64> = stats.mean.iter().zip(&stats.std).map(|(m, s)| m + s).collect();
    for v in stats.normalize(&plus).unwrap() {
        assert!((v - 1.0).abs() < 1e-9);
    }
    let x = windows[3].channels();
    let back = stats.denormalize(&stats.normalize(&x).unwrap()).unwrap();
    for (a, b) in x.iter().zip(&back) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }
    assert!(matches!(stats.normalize(&x[..100]), Err(Error::Mismatch(_))));
}

#[test]
fn stationary_walk_has_zero_velocity() {
    let clip = walk(0.0, 64);
    let r0 = clip.frames[0].root();
    for f in &clip.frames {
        assert_eq!(f.v_root, Vec3::zeros());
        assert_eq!(f.root(), r0);
    }
}

#[test]
fn walk_mean_velocity_matches_speed() {
    let clip = walk(1.0, 128);
    let n = clip.len();
    // forward differences of the generated root positions
    let mut mean = Vec3::zeros();
    for t in 0..n - 1 {
        mean += (clip.frames[t + 1].root() - clip.frames[t].root()) * 32.0;
    }
    mean /= (n - 1) as f64;
    assert!((mean - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-6);
    let stored: Vec3 = clip.frames.iter().map(|f| f.v_root).sum::<Vec3>() / n as f64;
    assert!((stored - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-6);
}

#[test]
fn every_kind_is_kinematically_consistent() {
    for id in [BIPED_A, BIPED_B] {
        let skel = Skeleton::builtin(id).unwrap();
        let mut r = rng::stream(7, id);
        for _ in 0..24 {
            let clip = random_clip(&skel, &Profile::for_skeleton(id), 96, &mut r).unwrap();
            assert!(clip.fk_residual(&skel) < 1e-9);
            for t in 0..clip.len() - 1 {
                let fd = (clip.frames[t + 1].root() - clip.frames[t].root()) * 32.0;
                assert!((fd - clip.frames[t].v_root).abs().max() < 1e-9);
            }
            for f in &clip.frames {
                for &foot in &skel.feet() {
                    assert!(f.positions[foot].z >= skel.floor - 1e-9);
                }
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let skel = biped();
    let a = random_clip(&skel, &Profile::for_skeleton(BIPED_A), 64, &mut rng::stream(3, "clip")).unwrap();
    let b = random_clip(&skel, &Profile::for_skeleton(BIPED_A), 64, &mut rng::stream(3, "clip")).unwrap();
    assert_eq!(format_clip(&a, &[]), format_clip(&b, &[]));
    assert_eq!(a, b);
}

#[test]
fn invalid_params_are_range_errors() {
    let skel = biped();
    for p in [
        SynthParams { speed: 2.5, ..SynthParams::default() },
        SynthParams { amplitude: -0.1, ..SynthParams::default() },
        SynthParams { crouch: f64::NAN, ..SynthParams::default() },
        SynthParams { frequency: 0.0, ..SynthParams::default() },
    ] {
        assert!(matches!(generate(MotionKind::Wave, &skel, &p, 32), Err(Error::Range { .. })));
    }
}

#[test]
fn jump_leaves_the_floor() {
    let skel = biped();
    let p = SynthParams {
        jump_height: 0.4,
        frequency: 0.8,
        side: Side::Both,
        ..SynthParams::default()
    };
    let clip = generate(MotionKind::Jump, &skel, &p, 96).unwrap();
    let top = clip.frames.iter().map(|f| f.root().z).fold(0.0, f64::max);
    assert!(top > 0.9 + 0.3, "apex {top}");
}

#[test]
fn scaling_a_character() {
    let skel = biped();
    let clip = walk(1.0, 40);
    let (s1, c1) = scale_character(&skel, &clip, 1.0).unwrap();
    assert_eq!((&s1, &c1), (&skel, &clip));
    let (s, c) = scale_character(&skel, &clip, 0.5).unwrap();
    for (a, b) in skel.end_effectors.iter().zip(&s.end_effectors) {
        assert_eq!(b.length, 0.5 * a.length);
    }
    assert_eq!(c.frames[5].positions[3], clip.frames[5].positions[3] * 0.5);
    assert_eq!(c.frames[5].rotations, clip.frames[5].rotations);
    assert!(c.fk_residual(&s) < 1e-12);
    assert!(scale_character(&skel, &clip, 0.0).is_err());
}

#[test]
fn window_channels_roundtrip() {
    let clip = walk(1.3, 64);
    let w = MotionWindow::from_clip(&clip, 10, 32);
    assert_eq!(w.frames[0].root().x, 0.0);
    let back = MotionWindow::from_channels(&w.channels(), 11, w.start, w.origin).unwrap();
    for (a, b) in w.channels().iter().zip(back.channels()) {
        assert!((a - b).abs() < 1e-12);
    }
    let world = back.world_frames();
    assert!((world[0].root() - clip.frames[10].root()).norm() < 1e-12);
}

#[test]
fn dataset_split_and_index() {
    let skel = biped();
    let mut r = rng::stream(1, "ds");
    let clips: Vec<_> = (0..10)
        .map(|_| random_clip(&skel, &Profile::for_skeleton(BIPED_A), 48, &mut r).unwrap())
        .collect();
    let ds = Dataset::new(skel, clips, 32, 4).unwrap();
    assert_eq!(ds.len(), 10 * 5);
    let (train, val) = ds.split(0.1).unwrap();
    assert_eq!((train.clips.len(), val.clips.len()), (9, 1));
    assert_eq!(val.window(0), MotionWindow::from_clip(&val.clips[0], 0, 32));
    let wrong = Dataset::new(Skeleton::builtin(BIPED_B).unwrap(), train.clips.clone(), 32, 4);
    assert!(wrong.is_err());
}

#[test]
fn clip_text_roundtrip_is_byte_exact() {
    let clip = walk(0.7, 33);
    let meta = vec![("seed".to_string(), "123".to_string())];
    let text = format_clip(&clip, &meta);
    assert!(text.starts_with("MRFCLIP 1\nbiped-A 32 11 33\n# seed 123\n"));
    let (parsed, m) = parse_clip(&text).unwrap();
    assert_eq!(parsed, clip);
    assert_eq!(m, meta);
    assert_eq!(format_clip(&parsed, &m), text);
}

#[test]
fn clip_parser_rejects_malformed_input() {
    let text = format_clip(&walk(0.7, 4), &[]);
    let bad = [
        text.replacen("MRFCLIP 1", "MRFCLIP 2", 1),
        text.replacen("biped-A 32 11 4", "biped-A 32 11 5", 1),
        text.replacen("biped-A 32 11 4", "biped-A -1 11 4", 1),
        text.replacen("biped-A 32 11 4", "biped-A 32 0 4", 1),
        text.replacen("biped-A 32 11 4", "biped-A 32 99999999999999999999 4", 1),
        text.lines().take(4).collect::<Vec<_>>().join("\n"),
        format!("{text}1 2 3\n"),
        text.replacen(" 1 0 0 0 1", " 2 0 0 0 1", 1),
        text.replacen("0 ", "inf ", 1),
    ];
    for b in bad {
        assert!(parse_clip(&b).is_err(), "accepted:\n{}", &b[..b.len().min(200)]);
    }
}

#[test]
fn stats_text_roundtrip() {
    let stats = NormStats {
        mean: vec![0.1, -2.5, 3.0],
        std: vec![1.0, 1e-6, 0.3],
    };
    let meta = vec![("fingerprint".to_string(), "abc".to_string())];
    let text = format_stats(&stats, &meta);
    let (s, m) = parse_stats(&text).unwrap();
    assert_eq!((s, m), (stats, meta));
    assert!(parse_stats("MRFSTATS 1\nmean 1 2\nstd 1\n").is_err());
    assert!(parse_stats("MRFSTATS 1\nmean 1\nstd 0\n").is_err());
    assert!(parse_stats("MRFSTATS 1\nmean 1\n").is_err());
    assert!(parse_stats("MRFSTATS 1\nmean 1\nstd 1\nextra\n").is_err());
}

#[test]
fn token_sidecar_roundtrip() {
    let seqs: Vec<TokenSequence> = [0, 16, 64]
        .iter()
        .map(|&start| TokenSequence {
            character: BIPED_B.into(),
            tokens: vec![start % 7, 3, 63, 0],
            start,
        })
        .collect();
    let meta = vec![("seed".to_string(), "5".to_string())];
    let text = format_tokens(&seqs, &meta).unwrap();
    assert!(text.starts_with("MRFTOKENS 1\nbiped-B 3 4\n# seed 5\n0 0 3 63 0\n"));
    assert_eq!(parse_tokens(&text).unwrap(), (seqs.clone(), meta));
    assert!(format_tokens(&[], &[]).is_err());
    for bad in [
        text.replacen("biped-B 3 4", "biped-B 4 4", 1),
        text.replacen("0 0 3 63 0", "0 0 3 63", 1),
        text.replacen("0 0 3 63 0", "0 0 3 -63 0", 1),
        "MRFTOKENS 1\nbiped-B 0 4\n".to_string(),
    ] {
        assert!(parse_tokens(&bad).is_err(), "{bad}");
    }
}

proptest! {
    #[test]
    fn tokens_parser_never_panics(s in "\\PC{0,200}") {
        let _ = parse_tokens(&s);
    }

    #[test]
    fn clip_parser_never_panics(s in "\\PC{0,400}") {
        let _ = parse_clip(&s);
        let _ = parse_stats(&s);
    }
}
