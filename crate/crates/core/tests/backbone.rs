use progressive_lora::backbone::tokenizer::EOS;
use progressive_lora::backbone::{
    forward, greedy_decode, logits, swiglu_ffn, AdapterHooks, BackboneWeights, ModelConfig, NoHooks, Projection, Site,
    Stacked, WeightVars,
};
use progressive_lora::numerics::{Tape, Tensor, Var};
use progressive_lora::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 6,
        seed: 11,
    }
}

// Straight-line reimplementation over nested Vecs, sharing no code with the
// tape. Indices follow the same row-vector convention.
mod oracle {
    pub type M = Vec<Vec<f64>>;

    pub fn of(t: &progressive_lora::numerics::Tensor) -> M {
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }

    pub fn mm(a: &M, b: &M) -> M {
        let n = b[0].len();
        a.iter()
            .map(|row| {
                (0..n)
                    .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn rms(x: &M, g: &[f64]) -> M {
        x.iter()
            .map(|r| {
                let ms = r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64;
                let inv = 1.0 / (ms + 1e-6).sqrt();
                r.iter().zip(g).map(|(v, gi)| v * inv * gi).collect()
            })
            .collect()
    }

    pub fn add(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect())
            .collect()
    }

    pub fn forward(w: &progressive_lora::backbone::BackboneWeights, tokens: &[usize]) -> M {
        let cfg = &w.config;
        let d = cfg.d_model;
        let dh = d / cfg.n_heads;
        let t = tokens.len();
        let mut h: M = tokens
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                (0..d)
                    .map(|j| w.token_embedding.at(id, j) + w.position_embedding.at(i, j))
                    .collect()
            })
            .collect();
        for l in &w.layers {
            let a = rms(&h, l.attn_norm.data());
            let q = mm(&a, &of(&l.wq));
            let k = mm(&a, &of(&l.wk));
            let v = mm(&a, &of(&l.wv));
            let mut mixed = vec![vec![0.0; d]; t];
            for head in 0..cfg.n_heads {
                let off = head * dh;
                for i in 0..t {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| (0..dh).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in 0..dh {
                        mixed[i][off + c] = (0..=i).map(|j| e[j] / z * v[j][off + c]).sum();
                    }
                }
            }
            h = add(&h, &mm(&mixed, &of(&l.wo)));
            let f = rms(&h, l.ffn_norm.data());
            let g = mm(&f, &of(&l.w_gate));
            let u = mm(&f, &of(&l.w_up));
            let inner: M = g
                .iter()
                .zip(&u)
                .map(|(gr, ur)| gr.iter().zip(ur).map(|(x, y)| x / (1.0 + (-x).exp()) * y).collect())
                .collect();
            h = add(&h, &mm(&inner, &of(&l.w_down)));
        }
        mm(&rms(&h, w.final_norm.data()), &of(&w.lm_head))
    }
}

#[test]
fn forward_matches_straight_line_oracle() {
    let w = BackboneWeights::init(&tiny()).unwrap();
    let tokens = [3, 0, 7, 7, 2];
    let got = logits(&w, &tokens, NoHooks).unwrap();
    let want = oracle::forward(&w, &tokens);
    let mut worst: f64 = 0.0;
    for (i, row) in want.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((got.at(i, j) - v).abs());
        }
    }
    assert!(worst < 1e-12, "max abs diff {worst}");
}

struct ConstDelta {
    site: Site,
    delta: Tensor,
}

impl<'t> AdapterHooks<'t> for ConstDelta {
    fn delta(&mut self, tape: &mut Tape<'t>, site: Site, _input: Var) -> Result<Option<Var>> {
        if site != self.site {
            return Ok(None);
        }
        Ok(Some(tape.leaf(self.delta.clone(), false)))
    }
}

#[test]
fn empty_and_zero_hooks_are_bitwise_identity() {
    let w = BackboneWeights::init(&ModelConfig::toy(4)).unwrap();
    let tokens = [10, 20, 30, 40];
    let plain = logits(&w, &tokens, NoHooks).unwrap();
    for proj in Projection::ATTENTION.into_iter().chain(Projection::FFN) {
        let d_out = w.projection(Site::new(1, proj)).unwrap().cols();
        let zero = ConstDelta {
            site: Site::new(1, proj),
            delta: Tensor::zeros(&[tokens.len(), d_out]),
        };
        let out = logits(&w, &tokens, zero).unwrap();
        assert!(out
            .data()
            .iter()
            .zip(plain.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn stacked_hooks_sum_their_deltas() {
    let w = BackboneWeights::init(&ModelConfig::toy(5)).unwrap();
    let tokens = [1, 2, 3];
    let site = Site::new(0, Projection::Down);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d1 = Tensor::randn(&[3, 16], 0.3, &mut rng);
    let d2 = Tensor::randn(&[3, 16], 0.3, &mut rng);
    let stacked = Stacked(
        ConstDelta {
            site,
            delta: d1.clone(),
        },
        ConstDelta {
            site,
            delta: d2.clone(),
        },
    );
    let a = logits(&w, &tokens, stacked).unwrap();
    let b = logits(
        &w,
        &tokens,
        ConstDelta {
            site,
            delta: d1.add(&d2).unwrap(),
        },
    )
    .unwrap();
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&logits(&w, &tokens, NoHooks).unwrap()) > 1e-6);
}

#[test]
fn causality_is_bitwise() {
    let w = BackboneWeights::init(&ModelConfig::toy(6)).unwrap();
    let a = logits(&w, &[5, 6, 7, 8, 9], NoHooks).unwrap();
    let b = logits(&w, &[5, 6, 7, 200, 9], NoHooks).unwrap();
    for t in 0..3 {
        assert!(a.row(t).iter().zip(b.row(t)).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(a.row(3), b.row(3));
}

#[test]
fn forward_errors() {
    let w = BackboneWeights::init(&tiny()).unwrap();
    assert!(matches!(logits(&w, &[1; 7], NoHooks), Err(Error::Contract(_))));
    assert!(matches!(
        logits(&w, &[1, 8], NoHooks),
        Err(Error::Index { index: 8, .. })
    ));
    assert!(logits(&w, &[], NoHooks).is_err());
}

#[test]
fn swiglu_closed_forms() {
    let one = Tensor::from_rows(&[&[1.0]]);
    let mut tape = Tape::new();
    let x = tape.constant(&one);
    let (g, u, d) = (tape.constant(&one), tape.constant(&one), tape.constant(&one));
    let y = swiglu_ffn(&mut tape, x, g, u, d).unwrap();
    let want = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((tape.value(y).item() - want).abs() < 1e-15);
    assert!((want - 0.7311).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zeros = Tensor::zeros(&[3, 4]);
    let (wg, wu, wd) = (
        Tensor::randn(&[4, 6], 1.0, &mut rng),
        Tensor::randn(&[4, 6], 1.0, &mut rng),
        Tensor::randn(&[6, 4], 1.0, &mut rng),
    );
    let mut tape = Tape::new();
    let x = tape.constant(&zeros);
    let vars = (tape.constant(&wg), tape.constant(&wu), tape.constant(&wd));
    let y = swiglu_ffn(&mut tape, x, vars.0, vars.1, vars.2).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

    // With a large positive gate, silu(z) ≈ z.
    let xin = Tensor::from_rows(&[&[1.0, 0.5]]);
    let big = Tensor::full(&[2, 3], 40.0);
    let up = Tensor::from_rows(&[&[0.2, -0.1, 0.3], &[0.4, 0.1, -0.2]]);
    let down = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
    let mut tape = Tape::new();
    let ids = [&xin, &big, &up, &down].map(|t| tape.constant(t));
    let y = swiglu_ffn(&mut tape, ids[0], ids[1], ids[2], ids[3]).unwrap();
    let g = xin.matmul(&big).unwrap();
    let u = xin.matmul(&up).unwrap();
    let lin: Vec<f64> = g.data().iter().zip(u.data()).map(|(a, b)| a * b).collect();
    let lin = Tensor::new(vec![1, 3], lin).unwrap().matmul(&down).unwrap();
    assert!(tape.value(y).max_abs_diff(&lin) < 1e-12);

    let mut tape = Tape::new();
    let bad = Tensor::zeros(&[5, 6]);
    let ids = [&xin, &bad, &up, &down].map(|t| tape.constant(t));
    assert!(matches!(
        swiglu_ffn(&mut tape, ids[0], ids[1], ids[2], ids[3]),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn decode_examples() {
    let w = BackboneWeights::init(&ModelConfig::toy(7)).unwrap();
    let prompt = vec![104, 105, 1];
    assert_eq!(greedy_decode(&w, &prompt, 0, |_| Ok(NoHooks)).unwrap(), prompt);

    let a = greedy_decode(&w, &prompt, 10, |_| Ok(NoHooks)).unwrap();
    let b = greedy_decode(&w, &prompt, 10, |_| Ok(NoHooks)).unwrap();
    assert_eq!(a, b);
    assert!(a.len() > prompt.len() && a.len() <= prompt.len() + 10);

    // A zero head makes every logit equal; ties go to the lowest id, EOS.
    let mut eos = w.clone();
    eos.lm_head = Tensor::zeros(eos.lm_head.shape());
    let out = greedy_decode(&eos, &prompt, 10, |_| Ok(NoHooks)).unwrap();
    assert_eq!(out, [prompt.clone(), vec![EOS]].concat());
}

#[test]
fn decode_stops_at_context_limit() {
    let w = BackboneWeights::init(&tiny()).unwrap();
    let out = greedy_decode(&w, &[2, 3], 100, |_| Ok(NoHooks)).unwrap();
    assert!(out.len() <= 6);
}

#[test]
fn hooks_see_every_projection_once() {
    struct Count(Vec<Site>);
    impl<'t> AdapterHooks<'t> for Count {
        fn delta(&mut self, _: &mut Tape<'t>, site: Site, _: Var) -> Result<Option<Var>> {
            self.0.push(site);
            Ok(None)
        }
    }
    let w = BackboneWeights::init(&ModelConfig::toy(1)).unwrap();
    let mut count = Count(Vec::new());
    let mut tape = Tape::new();
    let vars = WeightVars::register(&mut tape, &w);
    forward(&mut tape, &w, &vars, &[1, 2], &mut count).unwrap();
    assert_eq!(count.0.len(), 2 * 7);
    assert_eq!(count.0[4], Site::new(0, Projection::Gate));
    assert_eq!(Site::parse("layers.1.w_up"), Some(Site::new(1, Projection::Up)));
    assert_eq!(Site::new(1, Projection::Up).to_string(), "layers.1.w_up");
}
