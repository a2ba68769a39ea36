use progressive_lora::adapters::{LoraAdapter, LoraVars};
use progressive_lora::backbone::{forward, BackboneWeights, ModelConfig, Projection, Site, WeightVars};
use progressive_lora::numerics::{Tape, Tensor};
use progressive_lora::routing::{
    constraint_loss, ffn_sites, lora_aware_route, moe_ffn_delta, stage3_ffn_delta, user_aware_route, BetaSource,
    ExpertBank, GroupTerm, LoraAwareRouter, LoraShape, RouterTrace, Stage2Hooks, Stage3Hooks, UserEmbeddingTable,
    UserTerm,
};
use progressive_lora::store::TensorPack;
use progressive_lora::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const E2: f64 = std::f64::consts::E * std::f64::consts::E;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_adapter(d_in: usize, d_out: usize, r: usize, seed: u64) -> LoraAdapter {
    let mut a = LoraAdapter::init(d_in, d_out, r, 2.0 * r as f64, Site::new(0, Projection::Up), seed).unwrap();
    a.b = Tensor::randn(&[d_in, r], 0.5, &mut rng(seed + 77));
    a
}

fn assert_rows_on_simplex(t: &Tensor) {
    for i in 0..t.rows() {
        let s: f64 = t.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-9, "row {i} sums to {s}");
        assert!(t.row(i).iter().all(|v| *v > 0.0));
    }
}

#[test]
fn user_aware_route_examples() {
    let x = Tensor::randn(&[4, 6], 1.0, &mut rng(1));
    let u = Tensor::vector(&[0.3, -0.2, 0.9]);
    let w = user_aware_route(&x, &u, &Tensor::zeros(&[6, 5]), &Tensor::zeros(&[3, 5])).unwrap();
    for v in w.data() {
        assert!((v - 0.2).abs() < 1e-15);
    }

    let x = Tensor::from_rows(&[&[1.0]]);
    let u = Tensor::vector(&[1.0]);
    let m = Tensor::from_rows(&[&[1000.0, -1000.0]]);
    let w = user_aware_route(&x, &u, &m, &m).unwrap();
    let want = [E2 / (E2 + 1.0), 1.0 / (E2 + 1.0)];
    assert!((w.at(0, 0) - want[0]).abs() < 1e-15 && (w.at(0, 1) - want[1]).abs() < 1e-15);
    assert!((w.at(0, 0) - 0.8808).abs() < 1e-4);

    let bad = Tensor::vector(&[1.0, 2.0]);
    assert!(matches!(user_aware_route(&x, &bad, &m, &m), Err(Error::Shape { .. })));
}

fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    let k = t.cols();
    let mut out = t.clone();
    for r in 0..t.rows() {
        for (i, &p) in perm.iter().enumerate() {
            out.data_mut()[r * k + i] = t.at(r, p);
        }
    }
    out
}

#[test]
fn routing_is_permutation_equivariant() {
    let mut g = rng(2);
    let x = Tensor::randn(&[5, 6], 1.0, &mut g);
    let u = Tensor::randn(&[4], 1.0, &mut g);
    let m_g = Tensor::randn(&[6, 3], 1.0, &mut g);
    let m_u = Tensor::randn(&[4, 3], 1.0, &mut g);
    let perm = [2, 0, 1];
    let w = user_aware_route(&x, &u, &m_g, &m_u).unwrap();
    let wp = user_aware_route(&x, &u, &permute_cols(&m_g, &perm), &permute_cols(&m_u, &perm)).unwrap();
    assert!(wp.max_abs_diff(&permute_cols(&w, &perm)) < 1e-15);
}

#[test]
fn moe_examples() {
    let mut g = rng(3);
    let x = Tensor::randn(&[3, 4], 1.0, &mut g);
    let experts: Vec<LoraAdapter> = (0..3).map(|i| rand_adapter(4, 5, 2, i)).collect();
    let one_hot = Tensor::new(vec![3, 3], vec![0., 1., 0., 0., 1., 0., 0., 1., 0.]).unwrap();
    let d = moe_ffn_delta(&x, &experts, &one_hot).unwrap();
    assert!(d.max_abs_diff(&experts[1].delta(&x).unwrap()) < 1e-15);

    let same = vec![experts[0].clone(); 3];
    let w1 = user_aware_route(
        &x,
        &Tensor::vector(&[1.0]),
        &Tensor::randn(&[4, 3], 1.0, &mut g),
        &Tensor::zeros(&[1, 3]),
    )
    .unwrap();
    let w2 = Tensor::full(&[3, 3], 1.0 / 3.0);
    let a = moe_ffn_delta(&x, &same, &w1).unwrap();
    let b = moe_ffn_delta(&x, &same, &w2).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);

    // Two rank-1 experts against a dense accumulation.
    let mut p = LoraAdapter::init(2, 2, 1, 1.0, Site::new(0, Projection::Up), 0).unwrap();
    p.b = Tensor::from_rows(&[&[1.0], &[2.0]]);
    p.a = Tensor::from_rows(&[&[1.0, -1.0]]);
    let mut q = p.clone();
    q.b = Tensor::from_rows(&[&[-1.0], &[0.5]]);
    q.a = Tensor::from_rows(&[&[2.0, 3.0]]);
    let x = Tensor::from_rows(&[&[1.0, 1.0]]);
    let w = Tensor::from_rows(&[&[0.3, 0.7]]);
    let got = moe_ffn_delta(&x, &[p, q], &w).unwrap();
    // x·B_p = 3 → [3, -3]; x·B_q = -0.5 → [-1, -1.5]
    let want = [0.3 * 3.0 + 0.7 * -1.0, 0.3 * -3.0 + 0.7 * -1.5];
    assert!((got.at(0, 0) - want[0]).abs() < 1e-15 && (got.at(0, 1) - want[1]).abs() < 1e-15);

    assert!(matches!(
        moe_ffn_delta(&x, &experts[..2], &Tensor::full(&[1, 3], 1.0 / 3.0)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn constraint_loss_examples() {
    let mut trace = RouterTrace::new(0.9).unwrap();
    assert_eq!(constraint_loss(&trace, "a", 0, &[0.2; 5]).unwrap(), 0.0);

    trace.record(0, 0, "b", 0, &[0.0, 1.0]).unwrap();
    assert_eq!(constraint_loss(&trace, "a", 0, &[1.0, 0.0]).unwrap(), 0.0);
    // The user's own history and other layers do not count.
    assert_eq!(constraint_loss(&trace, "b", 0, &[0.0, 1.0]).unwrap(), 0.0);
    assert_eq!(constraint_loss(&trace, "a", 1, &[0.0, 1.0]).unwrap(), 0.0);

    let mut trace = RouterTrace::new(0.9).unwrap();
    for u in ["b", "c", "d", "e"] {
        trace.record(0, 0, u, 0, &[0.2; 5]).unwrap();
    }
    assert_eq!(constraint_loss(&trace, "a", 0, &[0.2; 5]).unwrap(), 0.8);

    assert!(trace.record(1, 0, "b", 0, &[0.5, 0.4, 0.0, 0.0, 0.0]).is_err());
}

#[test]
fn trace_average_and_csv() {
    let mut trace = RouterTrace::new(0.9).unwrap();
    trace.record(0, 0, "u", 1, &[1.0, 0.0]).unwrap();
    trace.record(1, 0, "u", 1, &[0.0, 1.0]).unwrap();
    let avg = trace.average("u", 1).unwrap();
    assert!((avg[0] - 0.9).abs() < 1e-15 && (avg[1] - 0.1).abs() < 1e-15);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    trace.write_csv(&path).unwrap();
    let back = RouterTrace::read_csv(&path, 0.9).unwrap();
    assert_eq!(back, trace);
    assert!(RouterTrace::new(1.0).is_err());
}

#[test]
fn lora_aware_route_examples() {
    let mut g = rng(4);
    let x = Tensor::randn(&[3, 4], 1.0, &mut g);
    let user = rand_adapter(4, 6, 2, 5);
    let w = lora_aware_route(&x, &user, &Tensor::zeros(&[6, 3])).unwrap();
    assert!(w.data().iter().all(|v| *v == 1.0 / 3.0));
    let fresh = LoraAdapter::init(4, 6, 2, 4.0, Site::new(0, Projection::Up), 1).unwrap();
    let w = lora_aware_route(&x, &fresh, &Tensor::randn(&[6, 3], 3.0, &mut g)).unwrap();
    assert!(w.data().iter().all(|v| *v == 1.0 / 3.0));

    let mut hand = LoraAdapter::init(2, 2, 1, 1.0, Site::new(0, Projection::Up), 0).unwrap();
    hand.b = Tensor::from_rows(&[&[1.0], &[0.0]]);
    hand.a = Tensor::from_rows(&[&[1.0, 0.0]]);
    let w_l = Tensor::from_rows(&[&[1.0, -1.0], &[0.0, 0.0]]);
    let w = lora_aware_route(&Tensor::from_rows(&[&[1.0, 0.0]]), &hand, &w_l).unwrap();
    assert!((w.at(0, 0) - E2 / (E2 + 1.0)).abs() < 1e-15);

    assert!(matches!(
        lora_aware_route(&x, &user, &Tensor::zeros(&[5, 3])),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn stage3_delta_reductions() {
    let mut g = rng(6);
    let x = Tensor::randn(&[3, 4], 1.0, &mut g);
    let experts: Vec<LoraAdapter> = (0..3).map(|i| rand_adapter(4, 5, 2, 10 + i)).collect();
    let fresh = LoraAdapter::init(4, 5, 2, 4.0, Site::new(0, Projection::Up), 1).unwrap();
    let w_l = Tensor::randn(&[5, 3], 1.0, &mut g);

    let mean = moe_ffn_delta(&x, &experts, &Tensor::full(&[3, 3], 1.0 / 3.0)).unwrap();
    let d = stage3_ffn_delta(&x, &experts, &fresh, &w_l, GroupTerm::AsWritten).unwrap();
    assert!(d.max_abs_diff(&mean) < 1e-12);
    let d = stage3_ffn_delta(&x, &experts, &fresh, &w_l, GroupTerm::Recentered).unwrap();
    assert!(d.data().iter().all(|v| v.abs() < 1e-12));

    let user = rand_adapter(4, 5, 2, 20);
    let zeros: Vec<LoraAdapter> = (0..3)
        .map(|i| LoraAdapter::init(4, 5, 2, 4.0, Site::new(0, Projection::Up), i).unwrap())
        .collect();
    for term in [GroupTerm::AsWritten, GroupTerm::Recentered] {
        let d = stage3_ffn_delta(&x, &zeros, &user, &w_l, term).unwrap();
        assert!(d.max_abs_diff(&user.delta(&x).unwrap()) < 1e-15);
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

#[test]
fn stage3_delta_matches_dense_materialization() {
    let mut g = rng(7);
    let (d_in, d_out, k) = (4, 6, 3);
    let w_g = Tensor::randn(&[d_in, d_out], 1.0, &mut g);
    let experts: Vec<LoraAdapter> = (0..k).map(|i| rand_adapter(d_in, d_out, 2, 30 + i as u64)).collect();
    let user = rand_adapter(d_in, d_out, 2, 40);
    let w_l = Tensor::randn(&[d_out, k], 1.0, &mut g);
    let x = Tensor::randn(&[5, d_in], 1.0, &mut g);
    for term in [GroupTerm::AsWritten, GroupTerm::Recentered] {
        let out = x
            .matmul(&w_g)
            .unwrap()
            .add(&stage3_ffn_delta(&x, &experts, &user, &w_l, term).unwrap())
            .unwrap();
        let du = user.delta_weight();
        let shift = if term == GroupTerm::Recentered {
            1.0 / k as f64
        } else {
            0.0
        };
        for t in 0..5 {
            let xt = Tensor::new(vec![1, d_in], x.row(t).to_vec()).unwrap();
            let h = xt.matmul(&du).unwrap();
            let beta = softmax(h.matmul(&w_l).unwrap().data());
            let mut w = w_g.add(&du).unwrap();
            for (m, e) in experts.iter().enumerate() {
                w = w.add(&e.delta_weight().scale(beta[m] - shift)).unwrap();
            }
            let want = xt.matmul(&w).unwrap();
            for j in 0..d_out {
                assert!((want.data()[j] - out.at(t, j)).abs() < 1e-10);
            }
        }
    }
}

fn toy() -> ModelConfig {
    ModelConfig::toy(3)
}

fn shape() -> LoraShape {
    LoraShape {
        rank: 4,
        alpha: 8.0,
        dropout: 0.05,
    }
}

fn randomized_bank(seed: u64) -> ExpertBank {
    let mut bank = ExpertBank::init(&toy(), 3, shape(), 16, seed).unwrap();
    let mut g = rng(seed + 1);
    for row in &mut bank.experts {
        for e in row {
            e.b = Tensor::randn(e.b.shape(), 0.3, &mut g);
        }
    }
    bank
}

#[test]
fn stage3_hooks_isolate_gradients() {
    let w = BackboneWeights::init(&toy()).unwrap();
    let bank = randomized_bank(1);
    let table = UserEmbeddingTable::init(&["a".into(), "b".into()], 2, 16, 0).unwrap();
    let sites = ffn_sites(2);
    let users: Vec<LoraAdapter> = sites
        .iter()
        .map(|s| {
            let (i, o) = if s.proj == Projection::Down { (32, 16) } else { (16, 32) };
            let mut a = LoraAdapter::init(i, o, 4, 8.0, *s, 9).unwrap();
            a.b = Tensor::randn(&[i, 4], 0.3, &mut rng(s.layer as u64));
            a
        })
        .collect();
    let router = LoraAwareRouter::init(&toy(), 3, 0);

    let mut tape = Tape::new();
    let vars = WeightVars::register(&mut tape, &w);
    let bank_vars = bank.register(&mut tape, false);
    let emb: Vec<_> = table.tables.iter().map(|t| tape.constant(t)).collect();
    let user_vars: Vec<LoraVars> = users.iter().map(|a| a.register(&mut tape, true)).collect();
    let w_l: Vec<_> = router.w_l.iter().map(|t| tape.param(t)).collect();
    let mut drop = rng(5);
    let hooks = Stage3Hooks::new(
        sites.clone(),
        bank_vars.experts.clone(),
        user_vars.clone(),
        BetaSource::LoraAware(w_l.clone()),
        GroupTerm::Recentered,
        Some(&mut drop),
    )
    .unwrap();
    let out = forward(&mut tape, &w, &vars, &[1, 2, 3, 4], hooks).unwrap();
    let loss = tape.cross_entropy(out, &[2, 3, 4, 5]).unwrap();
    tape.backward(loss).unwrap();
    for v in bank_vars.params().into_iter().chain(emb) {
        assert!(tape.grad(v).is_none());
    }
    for u in &user_vars {
        assert!(tape.grad(u.b).unwrap().iter().any(|g| *g != 0.0));
    }
    for v in &w_l {
        assert!(tape.grad(*v).unwrap().iter().any(|g| *g != 0.0));
    }
}

fn stage2_logits(w: &BackboneWeights, bank: &ExpertBank, table: &UserEmbeddingTable, user: &str) -> Tensor {
    let mut tape = Tape::new();
    let vars = WeightVars::register(&mut tape, w);
    let bv = bank.register(&mut tape, false);
    let idx = table.index(user).unwrap();
    let rows = table
        .tables
        .iter()
        .map(|t| {
            let tv = tape.constant(t);
            tape.gather(tv, &[idx]).unwrap()
        })
        .collect();
    let mut hooks = Stage2Hooks::new(bv, bank.sites.clone(), UserTerm::Embedding(rows), None);
    let out = forward(&mut tape, w, &vars, &[5, 6, 7], &mut hooks).unwrap();
    for om in hooks.omegas() {
        let om = tape.value(om.unwrap());
        assert_rows_on_simplex(om);
        assert!(om.data().iter().all(|v| *v >= 1.0 / (3.0 * E2) - 1e-9));
    }
    tape.value(out).clone()
}

#[test]
fn expert_permutation_leaves_model_unchanged() {
    let w = BackboneWeights::init(&toy()).unwrap();
    let bank = randomized_bank(2);
    let table = UserEmbeddingTable::init(&["a".into()], 2, 16, 1).unwrap();
    let a = stage2_logits(&w, &bank, &table, "a");
    let b = stage2_logits(&w, &bank.permuted(&[1, 2, 0]).unwrap(), &table, "a");
    assert!(a.max_abs_diff(&b) < 1e-12);
    assert!(bank.permuted(&[0, 0, 1]).is_err());

    // The user stage, with router columns permuted alongside the experts.
    let x = Tensor::randn(&[3, 16], 1.0, &mut rng(8));
    let user = rand_adapter(16, 32, 4, 3);
    let w_l = Tensor::randn(&[32, 3], 1.0, &mut rng(9));
    let experts = &bank.experts[1];
    let perm = [2, 0, 1];
    let permuted: Vec<LoraAdapter> = perm.iter().map(|&p| experts[p].clone()).collect();
    for term in [GroupTerm::AsWritten, GroupTerm::Recentered] {
        let a = stage3_ffn_delta(&x, experts, &user, &w_l, term).unwrap();
        let b = stage3_ffn_delta(&x, &permuted, &user, &permute_cols(&w_l, &perm), term).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn unknown_user_fails() {
    let table = UserEmbeddingTable::init(&["a".into()], 2, 4, 1).unwrap();
    assert!(matches!(table.index("zz"), Err(Error::Data(_))));
}

#[test]
fn bank_and_table_round_trip() {
    let bank = randomized_bank(3);
    let table = UserEmbeddingTable::init(&["u 1".into(), "u=2".into()], 2, 16, 1).unwrap();
    let router = LoraAwareRouter::init(&toy(), 3, 2);
    let mut pack = TensorPack::new();
    bank.to_pack(&mut pack);
    table.to_pack(&mut pack);
    router.to_pack(&mut pack, "u 1");
    let (m, b) = pack.encode();
    let back = TensorPack::decode(&m, &b).unwrap();
    assert_eq!(ExpertBank::from_pack(&back).unwrap(), bank);
    assert_eq!(UserEmbeddingTable::from_pack(&back).unwrap(), table);
    assert_eq!(LoraAwareRouter::from_pack(&back).unwrap(), router);
    assert!(ExpertBank::init(&toy(), 1, shape(), 16, 0).is_err());
}

proptest! {
    #[test]
    fn user_aware_rows_are_bounded(seed in 0u64..1000, k in 2usize..6, scale in 0.1f64..50.0) {
        let mut g = rng(seed);
        let x = Tensor::randn(&[4, 5], scale, &mut g);
        let u = Tensor::randn(&[3], scale, &mut g);
        let w = user_aware_route(&x, &u, &Tensor::randn(&[5, k], scale, &mut g), &Tensor::randn(&[3, k], scale, &mut g)).unwrap();
        assert_rows_on_simplex(&w);
        for v in w.data() {
            prop_assert!(*v >= 1.0 / (k as f64 * E2) - 1e-9);
        }
    }

    #[test]
    fn constraint_zero_iff_disjoint(cur in prop::collection::vec(0u8..3, 4), other in prop::collection::vec(0u8..3, 4)) {
        // Entries drawn from {0, 1, 2} so that zero patterns occur often.
        let norm = |v: &[u8]| -> Option<Vec<f64>> {
            let s: f64 = v.iter().map(|x| *x as f64).sum();
            (s > 0.0).then(|| v.iter().map(|x| *x as f64 / s).collect())
        };
        let (Some(c), Some(o)) = (norm(&cur), norm(&other)) else { return Ok(()); };
        let mut trace = RouterTrace::new(0.9).unwrap();
        trace.record(0, 0, "other", 0, &o).unwrap();
        let l = constraint_loss(&trace, "me", 0, &c).unwrap();
        let disjoint = c.iter().zip(&o).all(|(a, b)| *a == 0.0 || *b == 0.0);
        prop_assert_eq!(l == 0.0, disjoint);
        prop_assert!(l >= 0.0);
    }
}
