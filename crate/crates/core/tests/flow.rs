use moreflow_core::features::{phi, Condition, ConditionSet, Tag};
use moreflow_core::flow::coupling::{couple, greedy_nearest, hungarian, round_plan, sinkhorn_plan};
use moreflow_core::flow::{
    expected_velocity, feature_loss_value, fm_loss, guided_velocity, interpolate, CostMatrix, CouplingKind,
    FlowConfig, FlowModel, FlowTrainer, LogitOracle, PairData, PairOracle, SinkhornParams, VelocityField,
};
use moreflow_core::motion::Dataset;
use moreflow_core::sampler::{integrate, transport_tokens, Direction, RetargetRequest};
use moreflow_core::skeleton::{Skeleton, BIPED_A, BIPED_B};
use moreflow_core::synth::corpus;
use moreflow_core::tokenizer::{Codebook, Tokenizer, TokenizerConfig, TokenizerTrainer};
use moreflow_core::{rng, Result};
use moreflow_diffcore::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn cond(tag: Tag) -> Condition {
    Condition::new(tag)
}

/// A field whose output depends on the condition in a known way.
struct Toy;

impl VelocityField for Toy {
    fn velocity(&self, z: &[f64], _q: &[f64], c: &Condition) -> Result<Vec<f64>> {
        Ok(if c.is_null() {
            z.iter().map(|v| 2.0 * v).collect()
        } else {
            z.iter().map(|v| 1.0 - v).collect()
        })
    }
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let a = [0.3, -1.7, 2.0];
    let b = [1.1, 0.4, -3.0];
    let (z0, dz) = interpolate(&a, &b, 0.0).unwrap();
    let (z1, _) = interpolate(&a, &b, 1.0).unwrap();
    let (zh, _) = interpolate(&a, &b, 0.5).unwrap();
    assert_eq!(z0, a);
    assert_eq!(z1, b);
    assert_eq!(dz, vec![1.1 - 0.3, 0.4 + 1.7, -5.0]);
    for i in 0..3 {
        assert!((zh[i] - (a[i] + b[i]) / 2.0).abs() < 1e-15);
    }
    assert!(interpolate(&a, &b, 1.5).is_err());
    assert!(interpolate(&a, &b[..2], 0.5).is_err());
}

#[test]
fn expected_velocity_cases() {
    let e = [1.0, 0.0, 0.0, 1.0, -1.0, -1.0];
    let z = [0.2, 0.3];
    // one-hot on token 1 at q = 0
    let v = expected_velocity(&[-1e4, 1e4, -1e4], &e, 2, &z, &[0.0], 0.01).unwrap();
    assert!((v[0] + 0.2).abs() < 1e-15 && (v[1] - 0.7).abs() < 1e-15);
    // uniform logits give the codebook mean (0, 0)
    let v = expected_velocity(&[0.5; 3], &e, 2, &z, &[0.0], 0.01).unwrap();
    assert!((v[0] + 0.2).abs() < 1e-15 && (v[1] + 0.3).abs() < 1e-15);
    // the floor bounds the divisor near q = 1
    let v = expected_velocity(&[0.0, 1e4, 0.0], &e, 2, &[0.0, 0.0], &[1.0], 0.01).unwrap();
    assert!((v[1] - 100.0).abs() < 1e-9);
}

#[test]
fn guidance_identities() {
    let z = [0.5, -1.0, 2.0];
    let c = cond(Tag::WorldZ);
    let vn = Toy.velocity(&z, &[0.3], &Condition::null()).unwrap();
    let vc = Toy.velocity(&z, &[0.3], &c).unwrap();
    assert_eq!(guided_velocity(&Toy, &z, &[0.3], &c, 0.0).unwrap(), vn);
    assert_eq!(guided_velocity(&Toy, &z, &[0.3], &c, 1.0).unwrap(), vc);
    let v2 = guided_velocity(&Toy, &z, &[0.3], &c, 2.0).unwrap();
    for i in 0..3 {
        assert!((v2[i] - (2.0 * vc[i] - vn[i])).abs() < 1e-12);
    }
    for gamma in [-0.5, 0.25, 0.7, 1.5, 3.0] {
        let v = guided_velocity(&Toy, &z, &[0.3], &c, gamma).unwrap();
        for i in 0..3 {
            assert!((v[i] - (vn[i] + gamma * (vc[i] - vn[i]))).abs() < 1e-12);
        }
    }
    assert_eq!(guided_velocity(&Toy, &z, &[0.3], &Condition::null(), 2.0).unwrap(), vn);
}

fn random_codebook(r: &mut impl Rng, k: usize, d: usize) -> Vec<f64> {
    (0..k * d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()
}

#[test]
fn oracle_euler_lands_on_the_target_for_any_step_count() {
    let mut r = rng::stream(2, "test/euler");
    let (k, d, l) = (16, 4, 8);
    let table = random_codebook(&mut r, k, d);
    let targets: Vec<usize> = (0..2 * l).map(|_| r.random_range(0..k)).collect();
    let z0: Vec<f64> = (0..2 * l * d).map(|_| r.random::<f64>() * 4.0 - 2.0).collect();
    let oracle = LogitOracle {
        codebook: table.clone(),
        dim: d,
        targets: targets.clone(),
        floor: 0.01,
    };
    for n in [1, 2, 8, 32] {
        let z = integrate(&oracle, &z0, 2, &Condition::null(), 1.0, n, Direction::Forward).unwrap();
        for (p, &t) in targets.iter().enumerate() {
            for j in 0..d {
                assert!((z[p * d + j] - table[t * d + j]).abs() < 1e-8, "N = {n}");
            }
        }
    }
}

#[test]
fn oracle_flow_matching_loss_is_zero() {
    let mut r = rng::stream(3, "test/fm0");
    let (k, d, l) = (8, 3, 4);
    let table = random_codebook(&mut r, k, d);
    let targets: Vec<usize> = (0..3 * l).map(|_| r.random_range(0..k)).collect();
    let z_src: Vec<f64> = (0..3 * l * d).map(|_| r.random::<f64>()).collect();
    let z_tgt: Vec<f64> = targets.iter().flat_map(|&t| table[t * d..(t + 1) * d].to_vec()).collect();
    let oracle = LogitOracle {
        codebook: table,
        dim: d,
        targets,
        floor: 0.01,
    };
    let loss = fm_loss(&oracle, &z_src, &z_tgt, &[0.0, 0.4, 0.9], &Condition::null()).unwrap();
    assert!(loss.abs() < 1e-10, "{loss}");
}

#[test]
fn flow_matching_loss_by_hand() {
    // K = 2, d = 2, e0 = (1, 0), e1 = (0, 1); logits (0, ln 3) give p = (1/4, 3/4)
    struct Fixed;
    impl VelocityField for Fixed {
        fn velocity(&self, z: &[f64], q: &[f64], _c: &Condition) -> Result<Vec<f64>> {
            expected_velocity(&[0.0, 3f64.ln()], &[1.0, 0.0, 0.0, 1.0], 2, z, q, 0.01)
        }
    }
    // z_src = 0, z_tgt = e1, q = 1/2: z_q = (0, 1/2), v = ((1/4, 3/4) - z_q) / (1/2) = (1/2, 1/2),
    // path velocity (0, 1), loss = (1/4 + 1/4) / 2
    let loss = fm_loss(&Fixed, &[0.0, 0.0], &[0.0, 1.0], &[0.5], &Condition::null()).unwrap();
    assert!((loss - 0.25).abs() < 1e-15);
}

#[test]
fn reverse_integration_recovers_source_tokens() {
    let mut r = rng::stream(4, "test/reverse");
    let (k, d, l, b) = (32, 4, 8, 5);
    let src = Codebook::from_entries(k, d, 0.99, random_codebook(&mut r, k, d)).unwrap();
    let tgt = Codebook::from_entries(k, d, 0.99, random_codebook(&mut r, k, d)).unwrap();
    let s_tok: Vec<usize> = (0..b * l).map(|_| r.random_range(0..k)).collect();
    let t_tok: Vec<usize> = (0..b * l).map(|_| r.random_range(0..k)).collect();
    let oracle = PairOracle {
        source: src.lookup(&s_tok).unwrap(),
        target: tgt.lookup(&t_tok).unwrap(),
    };
    for n in [1, 2, 8, 32] {
        let req = RetargetRequest::new(Condition::null(), 1.0, n);
        let there = transport_tokens(&oracle, &src, &tgt, l, &s_tok, &req).unwrap();
        assert_eq!(there, t_tok);
        let back = transport_tokens(&oracle, &tgt, &src, l, &there, &req.clone().reversed()).unwrap();
        assert_eq!(back, s_tok);
    }
}

#[test]
fn exact_coupling_matches_permutation_enumeration() {
    fn brute(c: &CostMatrix) -> f64 {
        fn go(c: &CostMatrix, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == c.k {
                *best = best.min(acc);
                return;
            }
            for j in 0..c.k {
                if !used[j] {
                    used[j] = true;
                    go(c, row + 1, used, acc + c.at(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(c, 0, &mut vec![false; c.k], 0.0, &mut best);
        best
    }
    let mut r = rng::stream(5, "test/hungarian");
    for inst in 0..50 {
        let k = 1 + inst % 6;
        let c = CostMatrix::new(k, (0..k * k).map(|_| r.random::<f64>() * 10.0).collect()).unwrap();
        let exact = c.total(&hungarian(&c));
        assert!((exact - brute(&c)).abs() < 1e-9, "instance {inst}");
        assert!(c.total(&greedy_nearest(&c)) >= exact - 1e-12);
    }
}

#[test]
fn coupling_cost_metrics() {
    let a = [0.0, 0.0, 1.0, 1.0];
    let b = [1.0, 1.0, 0.0, 0.0];
    let c = CostMatrix::pairwise(&a, &b, 2, moreflow_core::flow::coupling::euclidean).unwrap();
    assert_eq!(couple(&c, CouplingKind::Exact, SinkhornParams::default()).unwrap().perm, vec![1, 0]);
    assert_eq!(couple(&c, CouplingKind::Nearest, SinkhornParams::default()).unwrap().perm, vec![1, 0]);
    assert_eq!(couple(&c, CouplingKind::Sinkhorn, SinkhornParams::default()).unwrap().perm, vec![1, 0]);
    assert!(CostMatrix::pairwise(&a, &b[..2], 2, moreflow_core::flow::coupling::euclidean).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn couplings_are_bijections(k in 1usize..12, seed in 0u64..10_000) {
        let mut r = rng::stream(seed, "prop/coupling");
        let c = CostMatrix::new(k, (0..k * k).map(|_| r.random::<f64>()).collect()).unwrap();
        for kind in [CouplingKind::Nearest, CouplingKind::Exact, CouplingKind::Sinkhorn] {
            let mut p = couple(&c, kind, SinkhornParams::default()).unwrap().perm;
            p.sort_unstable();
            prop_assert_eq!(p, (0..k).collect::<Vec<_>>());
        }
        let plan = sinkhorn_plan(&c, SinkhornParams::default()).unwrap();
        prop_assert!(plan.iter().all(|v| v.is_finite() && *v >= 0.0));
        let mut p = round_plan(&plan, k);
        p.sort_unstable();
        prop_assert_eq!(p, (0..k).collect::<Vec<_>>());
    }

    #[test]
    fn guidance_is_affine(gamma in -4.0f64..4.0, z in prop::collection::vec(-5.0f64..5.0, 1..8)) {
        let c = cond(Tag::RootVelocity);
        let vn = Toy.velocity(&z, &[0.5], &Condition::null()).unwrap();
        let vc = Toy.velocity(&z, &[0.5], &c).unwrap();
        let v = guided_velocity(&Toy, &z, &[0.5], &c, gamma).unwrap();
        for i in 0..z.len() {
            prop_assert!((v[i] - (vn[i] + gamma * (vc[i] - vn[i]))).abs() < 1e-12);
        }
    }
}

fn tiny_flow_config() -> FlowConfig {
    FlowConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        d_ff: 32,
        iters: 12,
        warmup: 2,
        coupling_batch: 8,
        feat_batch: 2,
        log_every: 4,
        ..FlowConfig::default()
    }
}

fn tiny_tokenizer(id: &str, seed: u64) -> (Dataset, Tokenizer) {
    let s = Skeleton::builtin(id).unwrap();
    let ds = Dataset::new(s.clone(), corpus(&s, 3, 48, seed).unwrap(), 16, 8).unwrap();
    let cfg = TokenizerConfig {
        codes: 8,
        code_dim: 4,
        width: 8,
        batch: 4,
        iters: 5,
        ..TokenizerConfig::default()
    };
    let mut t = TokenizerTrainer::new(&ds, &ds, cfg, seed).unwrap();
    t.run(None).unwrap();
    (ds, t.finish().0)
}

#[test]
fn zeroed_condition_embedding_reproduces_the_null_pass() {
    let (_, tok) = tiny_tokenizer(BIPED_B, 1);
    let mut r = rng::stream(6, "test/zero-cond");
    let mut model = FlowModel::new(
        BIPED_A,
        BIPED_B,
        ConditionSet::all(),
        tok.codebook.entries.clone(),
        4,
        tiny_flow_config(),
        &mut r,
    )
    .unwrap();
    let z: Vec<f64> = (0..2 * 4 * 4).map(|_| r.random::<f64>()).collect();
    let q = [0.2, 0.7];
    let c = cond(Tag::LocalEe);
    assert_ne!(model.velocity(&z, &q, &c).unwrap(), model.velocity(&z, &q, &Condition::null()).unwrap());
    for id in model.condition_output_params().to_vec() {
        let p = model.store.get_mut(id);
        p.value = Tensor::zeros(p.value.shape());
    }
    let vc = model.velocity(&z, &q, &c).unwrap();
    let vn = model.velocity(&z, &q, &Condition::null()).unwrap();
    for (a, b) in vc.iter().zip(&vn) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn world_z_feature_loss_is_the_squared_height_gap() {
    let s = Skeleton::builtin(BIPED_A).unwrap();
    let clips = corpus(&s, 2, 32, 8).unwrap();
    let c = cond(Tag::WorldZ);
    let a = &clips[0].frames;
    let b = &clips[1].frames;
    let mean_z = |f: &[moreflow_core::motion::Frame]| f.iter().map(|x| x.root().z).sum::<f64>() / f.len() as f64;
    let gap = mean_z(a) - mean_z(b);
    let src = vec![phi(a, &s, &c).unwrap()];
    let loss = feature_loss_value(&src, &[b.clone()], &s, &c).unwrap();
    assert!((loss - gap * gap).abs() < 1e-12, "{loss} vs {}", gap * gap);
    assert_eq!(feature_loss_value(&src, &[a.clone()], &s, &c).unwrap(), 0.0);
}

#[test]
fn flow_training_runs_deterministically_and_freezes_tokenizers() {
    let (ds_a, tok_a) = tiny_tokenizer(BIPED_A, 1);
    let (ds_b, tok_b) = tiny_tokenizer(BIPED_B, 2);
    let before_a = tok_a.store.entries();
    let before_b = tok_b.store.entries();
    let conditions = ConditionSet::parse_list("local-ee world-z").unwrap();
    let run = |kind: CouplingKind, backprop: bool| {
        let data = PairData::new(ds_a.clone(), ds_b.clone(), &tok_a, &tok_b, conditions.clone()).unwrap();
        let cfg = FlowConfig {
            coupling: kind,
            feat_backprop: backprop,
            ce_weight: if backprop { 0.0 } else { 0.5 },
            ..tiny_flow_config()
        };
        let mut t = FlowTrainer::new(data, &tok_a, &tok_b, cfg, 11).unwrap();
        t.run(None).unwrap();
        assert!(t.rows().iter().all(|r| r.total.is_finite() && r.val_fm.is_finite()));
        (t.log_csv(), t.finish())
    };
    let (log1, m1) = run(CouplingKind::Nearest, true);
    let (log2, _) = run(CouplingKind::Nearest, true);
    assert_eq!(log1, log2);
    assert!(log1.starts_with("iter,lr,L_FM,L_feat,L_CE,L_total,val_FM\n"));
    assert_eq!(log1.lines().count(), 4);
    run(CouplingKind::Exact, false);
    run(CouplingKind::Sinkhorn, true);

    for (x, y) in before_a.iter().zip(tok_a.store.entries()) {
        assert_eq!(x.1.data(), y.1.data());
    }
    for (x, y) in before_b.iter().zip(tok_b.store.entries()) {
        assert_eq!(x.1.data(), y.1.data());
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.mrf");
    m1.save(&path, &[]).unwrap();
    let (m2, _) = FlowModel::load(&path).unwrap();
    let z: Vec<f64> = (0..4 * 4).map(|i| i as f64 * 0.1).collect();
    let c = cond(Tag::WorldZ);
    assert_eq!(m1.velocity(&z, &[0.3], &c).unwrap(), m2.velocity(&z, &[0.3], &c).unwrap());
    assert_eq!(m2.config, m1.config);
}
