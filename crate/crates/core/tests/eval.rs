mod common;

use common::*;
use progressive_lora::backbone::ModelConfig;
use progressive_lora::data::{generate, Range, SyntheticSpec, TaskKind};
use progressive_lora::eval::{
    accuracy, adjusted_rand_index, evaluate_stages, kmeans, macro_f1, mae, rmse, rouge1, rouge_l, router_diagnostics,
    separation_score,
};
use progressive_lora::pipeline::{prepare, run_stage, DataSource, PipelineState, RunConfig};
use progressive_lora::routing::RouterTrace;
use progressive_lora::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ----- spec examples -----------------------------------------------------

#[test]
fn classification_examples() {
    let same = ["a", "b", "c"];
    assert_eq!(accuracy(&same, &same).unwrap(), 1.0);
    assert_eq!(macro_f1(&same, &same).unwrap(), 1.0);
    let (p, g) = (["A", "A", "B"], ["A", "B", "B"]);
    assert_eq!(accuracy(&p, &g).unwrap(), 2.0 / 3.0);
    assert!((macro_f1(&p, &g).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    let (p, g) = (["A", "A"], ["B", "B"]);
    assert_eq!(accuracy(&p, &g).unwrap(), 0.0);
    assert_eq!(macro_f1(&p, &g).unwrap(), 0.0);
    assert!(matches!(accuracy(&["a"], &["a", "b"]), Err(Error::Contract(_))));
    assert!(matches!(macro_f1(&["a"], &["a", "b"]), Err(Error::Contract(_))));
}

#[test]
fn regression_examples() {
    let v = [1.5, -2.0, 4.0];
    assert_eq!(mae(&v, &v).unwrap(), 0.0);
    assert_eq!(rmse(&v, &v).unwrap(), 0.0);
    assert_eq!(mae(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
    assert_eq!(rmse(&[1.0, 3.0], &[2.0, 2.0]).unwrap(), 1.0);
    let shifted: Vec<f64> = v.iter().map(|x| x + 0.75).collect();
    assert!((mae(&shifted, &v).unwrap() - 0.75).abs() < 1e-15);
    assert!((rmse(&shifted, &v).unwrap() - 0.75).abs() < 1e-15);
    assert!(matches!(mae(&[1.0], &[]), Err(Error::Contract(_))));
    assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::Contract(_))));
}

#[test]
fn rouge_examples() {
    assert_eq!(rouge1("the cat sat", "the cat sat"), 1.0);
    assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
    assert!((rouge1("the cat sat", "the cat") - 0.8).abs() < 1e-15);
    assert!((rouge_l("the cat sat", "the cat") - 0.8).abs() < 1e-15);
    assert_eq!(rouge1("red blue", "green"), 0.0);
    assert_eq!(rouge_l("red blue", "green"), 0.0);
    assert_eq!(rouge1("", ""), 0.0);
    assert_eq!(rouge_l("", ""), 0.0);
    assert_eq!(rouge1("The CAT", "the cat"), 1.0);
}

// ----- randomized oracle comparisons ---------------------------------------

#[test]
fn rouge_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (c, r) = (random_text(&mut rng), random_text(&mut rng));
        assert!((rouge1(&c, &r) - rouge1_oracle(&c, &r)).abs() < 1e-12, "{c:?} / {r:?}");
        assert!(
            (rouge_l(&c, &r) - rouge_l_oracle(&c, &r)).abs() < 1e-12,
            "{c:?} / {r:?}"
        );
    }
}

#[test]
fn macro_f1_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let n = rng.gen_range(1..12);
        let g: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        assert!((macro_f1(&p, &g).unwrap() - macro_f1_oracle(&p, &g)).abs() < 1e-12);
        let hits = p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64;
        assert!((accuracy(&p, &g).unwrap() - hits / n as f64).abs() < 1e-15);
    }
}

#[test]
fn mae_rmse_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let n = rng.gen_range(1..10);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        assert!((mae(&p, &g).unwrap() - mae_oracle(&p, &g)).abs() < 1e-12);
        assert!((rmse(&p, &g).unwrap() - rmse_oracle(&p, &g)).abs() < 1e-12);
    }
}

#[test]
fn ari_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let n = rng.gen_range(2..15);
        let x: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        assert!(
            (adjusted_rand_index(&x, &y).unwrap() - ari_oracle(&x, &y)).abs() < 1e-12,
            "{x:?} {y:?}"
        );
    }
    assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(), 1.0);
}

#[test]
fn kmeans_recovers_separated_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (c, ctr) in centers.iter().enumerate() {
        for _ in 0..6 {
            points.push(vec![
                ctr[0] + rng.gen_range(-0.5..0.5),
                ctr[1] + rng.gen_range(-0.5..0.5),
            ]);
            truth.push(c);
        }
    }
    let labels = kmeans(&points, 3, 10, 1).unwrap();
    assert_eq!(adjusted_rand_index(&labels, &truth).unwrap(), 1.0);
    assert_eq!(labels, kmeans(&points, 3, 10, 1).unwrap());
}

// ----- properties --------------------------------------------------------

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<usize>)> {
    (1usize..10).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0..10.0f64, n),
            prop::collection::vec(-10.0..10.0f64, n),
            Just((0..n).collect::<Vec<_>>()).prop_shuffle(),
        )
    })
}

proptest! {
    #[test]
    fn metrics_are_permutation_symmetric((p, g, perm) in pairs()) {
        let pp: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let gp: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
        prop_assert!((mae(&p, &g).unwrap() - mae(&pp, &gp).unwrap()).abs() < 1e-12);
        prop_assert!((rmse(&p, &g).unwrap() - rmse(&pp, &gp).unwrap()).abs() < 1e-12);
        let cp: Vec<i64> = p.iter().map(|v| (*v as i64).rem_euclid(3)).collect();
        let cg: Vec<i64> = g.iter().map(|v| (*v as i64).rem_euclid(3)).collect();
        let cpp: Vec<i64> = perm.iter().map(|&i| cp[i]).collect();
        let cgp: Vec<i64> = perm.iter().map(|&i| cg[i]).collect();
        prop_assert_eq!(accuracy(&cp, &cg).unwrap(), accuracy(&cpp, &cgp).unwrap());
        prop_assert!((macro_f1(&cp, &cg).unwrap() - macro_f1(&cpp, &cgp).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn rouge_l_bounded_by_rouge1_on_unique_tokens(
        c in prop::sample::subsequence(WORDS.to_vec(), 0..=6).prop_shuffle(),
        r in prop::sample::subsequence(WORDS.to_vec(), 0..=6).prop_shuffle(),
    ) {
        let (c, r) = (c.join(" "), r.join(" "));
        let (r1, rl) = (rouge1(&c, &r), rouge_l(&c, &r));
        prop_assert!((0.0..=1.0).contains(&r1) && (0.0..=1.0).contains(&rl));
        prop_assert!(rl <= r1 + 1e-12);
    }

    #[test]
    fn metric_domains(
        p in prop::collection::vec(0u8..4, 1..12),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g: Vec<u8> = p.iter().map(|_| rng.gen_range(0..4)).collect();
        let f = macro_f1(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        let a = accuracy(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

// ----- diagnostics -------------------------------------------------------

fn trace_of(rows: &[(&str, Vec<f64>)]) -> RouterTrace {
    let mut t = RouterTrace::new(0.9).unwrap();
    for (step, (u, w)) in rows.iter().enumerate() {
        t.record(step, 0, u, 0, w).unwrap();
    }
    t
}

#[test]
fn shared_omega_separation() {
    let w = vec![0.5, 0.3, 0.2];
    let t = trace_of(&[("a", w.clone()), ("b", w.clone()), ("c", w.clone()), ("d", w.clone())]);
    let d = router_diagnostics(&t, None, None, 0).unwrap();
    let sq: f64 = w.iter().map(|v| v * v).sum();
    assert!((d.separation_sum - sq * 6.0).abs() < 1e-12);
    assert!((d.separation_mean - sq).abs() < 1e-12);
    assert!(d.omega_ari.is_none());
}

#[test]
fn one_hot_users_separate_perfectly() {
    let t = trace_of(&[
        ("a", vec![1.0, 0.0, 0.0]),
        ("b", vec![0.0, 1.0, 0.0]),
        ("c", vec![0.0, 0.0, 1.0]),
    ]);
    let labels = vec![("a".to_string(), 7), ("b".to_string(), 3), ("c".to_string(), 0)];
    let d = router_diagnostics(&t, None, Some(&labels), 0).unwrap();
    assert_eq!(d.separation_sum, 0.0);
    assert_eq!(d.omega_ari, Some(1.0));
    let (sum, mean) = separation_score(&d.mean_omega);
    assert_eq!((sum, mean), (0.0, 0.0));
}

#[test]
fn diagnostics_errors() {
    let empty = RouterTrace::new(0.9).unwrap();
    assert!(matches!(router_diagnostics(&empty, None, None, 0), Err(Error::Data(_))));
    let t = trace_of(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
    let labels = vec![("a".to_string(), 0), ("zed".to_string(), 1)];
    match router_diagnostics(&t, None, Some(&labels), 0) {
        Err(Error::Data(msg)) => assert!(msg.contains('b') && msg.contains("zed"), "{msg}"),
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn diagnostics_use_last_epoch() {
    let mut t = RouterTrace::new(0.9).unwrap();
    t.record(0, 0, "a", 0, &[1.0, 0.0]).unwrap();
    t.record(1, 1, "a", 0, &[0.0, 1.0]).unwrap();
    t.record(2, 1, "b", 0, &[0.0, 1.0]).unwrap();
    let d = router_diagnostics(&t, None, None, 0).unwrap();
    assert_eq!(d.epoch, 1);
    assert_eq!(d.mean_omega, vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
}

// ----- stage evaluation --------------------------------------------------

fn tiny_config(seed: u64) -> RunConfig {
    let spec = SyntheticSpec {
        n_groups: 2,
        users_per_group: 2,
        records_per_user: Range { min: 3, max: 3 },
        query_words: Range { min: 1, max: 2 },
        task: TaskKind::Rating,
        seed,
        ..SyntheticSpec::default()
    };
    let mut cfg = RunConfig::new(seed, DataSource::Synthetic(spec));
    cfg.model = ModelConfig::toy(seed);
    cfg.max_len = 24;
    for s in [&mut cfg.stage1, &mut cfg.stage2, &mut cfg.stage3] {
        s.epochs = 1;
        s.r = 2;
        s.alpha = 4.0;
    }
    cfg.resolved()
}

fn tiny_state(cfg: &RunConfig, stages: u8) -> (PipelineState, progressive_lora::pipeline::Prepared) {
    let DataSource::Synthetic(spec) = &cfg.data else {
        unreachable!()
    };
    let data = prepare(cfg, generate(spec).unwrap()).unwrap();
    let base = progressive_lora::pipeline::base_weights(cfg).unwrap();
    let mut state = PipelineState::new(cfg.clone(), base);
    for s in 1..=stages {
        run_stage(&mut state, &data, s).unwrap();
    }
    (state, data)
}

#[test]
fn stage_one_only_report() {
    let cfg = tiny_config(3);
    let (state, data) = tiny_state(&cfg, 1);
    let report = evaluate_stages(&state, &data.held_out).unwrap();
    assert_eq!(report.stages.len(), 1);
    assert_eq!(report.stages[0].stage, 1);
    assert!(report.stages[0].metrics.contains_key("mae"));
    assert!(report.stages[0].metrics["rmse"] >= report.stages[0].metrics["mae"]);
}

#[test]
fn untrained_later_stages_repeat_metrics() {
    let mut cfg = tiny_config(4);
    cfg.stage2.epochs = 0;
    cfg.stage3.epochs = 0;
    let (state, data) = tiny_state(&cfg, 3);
    let report = evaluate_stages(&state, &data.held_out).unwrap();
    assert_eq!(report.stages.len(), 3);
    assert_eq!(report.stages[0].metrics, report.stages[1].metrics);
    assert_eq!(report.stages[1].metrics, report.stages[2].metrics);
}

#[test]
fn empty_held_out_is_a_contract_error() {
    let cfg = tiny_config(5);
    let (state, _) = tiny_state(&cfg, 1);
    assert!(matches!(evaluate_stages(&state, &[]), Err(Error::Contract(_))));
}

#[test]
fn reports_are_reproducible() {
    let cfg = tiny_config(6);
    let (a, da) = tiny_state(&cfg, 3);
    let (b, db) = tiny_state(&cfg, 3);
    let ra = evaluate_stages(&a, &da.held_out).unwrap();
    let rb = evaluate_stages(&b, &db.held_out).unwrap();
    assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
}
