use std::fmt;

use serde::{Deserialize, Serialize};

use super::{BackboneWeights, TokenId};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-6;

/// One of the seven projection matrices in a decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ATTENTION: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];
    pub const FFN: [Projection; 3] = [Projection::Gate, Projection::Up, Projection::Down];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "wq",
            Projection::K => "wk",
            Projection::V => "wv",
            Projection::O => "wo",
            Projection::Gate => "w_gate",
            Projection::Up => "w_up",
            Projection::Down => "w_down",
        }
    }

    pub fn parse(s: &str) -> Option<Projection> {
        Projection::ATTENTION
            .into_iter()
            .chain(Projection::FFN)
            .find(|p| p.name() == s)
    }

    pub fn is_ffn(self) -> bool {
        matches!(self, Projection::Gate | Projection::Up | Projection::Down)
    }
}

/// Attachment point: a projection in a given layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site {
    pub layer: usize,
    pub proj: Projection,
}

impl Site {
    pub fn new(layer: usize, proj: Projection) -> Self {
        Site { layer, proj }
    }

    pub fn parse(s: &str) -> Option<Site> {
        let rest = s.strip_prefix("layers.")?;
        let (layer, proj) = rest.split_once('.')?;
        Some(Site {
            layer: layer.parse().ok()?,
            proj: Projection::parse(proj)?,
        })
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.proj.name())
    }
}

/// Extension points of the forward pass.
///
/// `delta` sees the input of a projection and may return a tensor of the
/// projection's output shape, which is added to `x · W`. `on_ffn_input` is
/// called once per layer with the normalized FFN input, before the gate and
/// up projections; routers use it to compute per-token expert weights.
pub trait AdapterHooks<'t> {
    fn on_ffn_input(&mut self, _tape: &mut Tape<'t>, _layer: usize, _x: Var) -> Result<()> {
        Ok(())
    }

    fn delta(&mut self, tape: &mut Tape<'t>, site: Site, input: Var) -> Result<Option<Var>>;
}

/// The plain backbone.
pub struct NoHooks;

impl<'t> AdapterHooks<'t> for NoHooks {
    fn delta(&mut self, _: &mut Tape<'t>, _: Site, _: Var) -> Result<Option<Var>> {
        Ok(None)
    }
}

/// Runs two hook sets and sums their deltas.
pub struct Stacked<A, B>(pub A, pub B);

impl<'t, A: AdapterHooks<'t>, B: AdapterHooks<'t>> AdapterHooks<'t> for Stacked<A, B> {
    fn on_ffn_input(&mut self, tape: &mut Tape<'t>, layer: usize, x: Var) -> Result<()> {
        self.0.on_ffn_input(tape, layer, x)?;
        self.1.on_ffn_input(tape, layer, x)
    }

    fn delta(&mut self, tape: &mut Tape<'t>, site: Site, input: Var) -> Result<Option<Var>> {
        let a = self.0.delta(tape, site, input)?;
        let b = self.1.delta(tape, site, input)?;
        Ok(match (a, b) {
            (Some(a), Some(b)) => Some(tape.add(a, b)?),
            (a, b) => a.or(b),
        })
    }
}

impl<'t, H: AdapterHooks<'t> + ?Sized> AdapterHooks<'t> for &mut H {
    fn on_ffn_input(&mut self, tape: &mut Tape<'t>, layer: usize, x: Var) -> Result<()> {
        (**self).on_ffn_input(tape, layer, x)
    }

    fn delta(&mut self, tape: &mut Tape<'t>, site: Site, input: Var) -> Result<Option<Var>> {
        (**self).delta(tape, site, input)
    }
}

impl<'t, H: AdapterHooks<'t> + ?Sized> AdapterHooks<'t> for Box<H> {
    fn on_ffn_input(&mut self, tape: &mut Tape<'t>, layer: usize, x: Var) -> Result<()> {
        (**self).on_ffn_input(tape, layer, x)
    }

    fn delta(&mut self, tape: &mut Tape<'t>, site: Site, input: Var) -> Result<Option<Var>> {
        (**self).delta(tape, site, input)
    }
}

struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_norm: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
}

/// Backbone weights registered (borrowed, frozen) on a tape.
pub struct WeightVars {
    token_embedding: Var,
    position_embedding: Var,
    layers: Vec<LayerVars>,
    final_norm: Var,
    lm_head: Var,
}

impl WeightVars {
    pub fn register<'t>(tape: &mut Tape<'t>, w: &'t BackboneWeights) -> Self {
        WeightVars {
            token_embedding: tape.constant(&w.token_embedding),
            position_embedding: tape.constant(&w.position_embedding),
            layers: w
                .layers
                .iter()
                .map(|l| LayerVars {
                    attn_norm: tape.constant(&l.attn_norm),
                    wq: tape.constant(&l.wq),
                    wk: tape.constant(&l.wk),
                    wv: tape.constant(&l.wv),
                    wo: tape.constant(&l.wo),
                    ffn_norm: tape.constant(&l.ffn_norm),
                    w_gate: tape.constant(&l.w_gate),
                    w_up: tape.constant(&l.w_up),
                    w_down: tape.constant(&l.w_down),
                })
                .collect(),
            final_norm: tape.constant(&w.final_norm),
            lm_head: tape.constant(&w.lm_head),
        }
    }
}

fn project<'t>(tape: &mut Tape<'t>, hooks: &mut impl AdapterHooks<'t>, site: Site, x: Var, w: Var) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    match hooks.delta(tape, site, x)? {
        Some(d) => tape.add(base, d),
        None => Ok(base),
    }
}

/// `down( silu(x·W_gate) ⊙ (x·W_up) )` on the tape, without hooks.
pub fn swiglu_ffn(tape: &mut Tape<'_>, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let g = tape.matmul(x, w_gate)?;
    let u = tape.matmul(x, w_up)?;
    let a = tape.silu(g);
    let h = tape.mul(a, u)?;
    tape.matmul(h, w_down)
}

/// Causal forward pass producing `[T × vocab]` logits.
///
/// Pre-norm residual blocks with RMS normalization, multi-head causal
/// attention, and a SwiGLU feed-forward block.
pub fn forward<'t>(
    tape: &mut Tape<'t>,
    weights: &'t BackboneWeights,
    vars: &WeightVars,
    tokens: &[TokenId],
    mut hooks: impl AdapterHooks<'t>,
) -> Result<Var> {
    let cfg = &weights.config;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Contract("forward needs at least one token".into()));
    }
    if t > cfg.max_seq_len {
        return Err(Error::Contract(format!(
            "sequence length {t} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Index {
            op: "forward",
            index: bad,
            size: cfg.vocab_size,
        });
    }
    let positions: Vec<usize> = (0..t).collect();
    let tok = tape.gather(vars.token_embedding, tokens)?;
    let pos = tape.gather(vars.position_embedding, &positions)?;
    let mut h = tape.add(tok, pos)?;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    for (layer, lv) in vars.layers.iter().enumerate() {
        let a = tape.rms_norm(h, lv.attn_norm, NORM_EPS)?;
        let q = project(tape, &mut hooks, Site::new(layer, Projection::Q), a, lv.wq)?;
        let k = project(tape, &mut hooks, Site::new(layer, Projection::K), a, lv.wk)?;
        let v = project(tape, &mut hooks, Site::new(layer, Projection::V), a, lv.wv)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt);
            let p = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(p, vh)?);
        }
        let mixed = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let attn = project(tape, &mut hooks, Site::new(layer, Projection::O), mixed, lv.wo)?;
        h = tape.add(h, attn)?;

        let f = tape.rms_norm(h, lv.ffn_norm, NORM_EPS)?;
        hooks.on_ffn_input(tape, layer, f)?;
        let g = project(tape, &mut hooks, Site::new(layer, Projection::Gate), f, lv.w_gate)?;
        let u = project(tape, &mut hooks, Site::new(layer, Projection::Up), f, lv.w_up)?;
        let act = tape.silu(g);
        let inner = tape.mul(act, u)?;
        let down = project(tape, &mut hooks, Site::new(layer, Projection::Down), inner, lv.w_down)?;
        h = tape.add(h, down)?;
    }
    let hf = tape.rms_norm(h, vars.final_norm, NORM_EPS)?;
    tape.matmul(hf, vars.lm_head)
}

/// Logits for `tokens` on a scratch tape.
pub fn logits<'t>(weights: &'t BackboneWeights, tokens: &[TokenId], hooks: impl AdapterHooks<'t>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = WeightVars::register(&mut tape, weights);
    let out = forward(&mut tape, weights, &vars, tokens, hooks)?;
    Ok(tape.value(out).clone())
}
