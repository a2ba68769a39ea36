//! Routing computations recorded on a tape, with plain-tensor wrappers.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RouterTrace;
use crate::adapters::{LoraAdapter, LoraVars};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// How group experts enter the user-stage delta.
///
/// The user-stage base already contains the group experts merged with their
/// mean router weights. `AsWritten` adds `Σ βₘ Δₘ` on top of that, counting
/// the group knowledge a second time. `Recentered` adds `Σ (βₘ − 1/k) Δₘ`,
/// which vanishes while the router is uniform, so a fresh user stage starts
/// exactly at the group-stage model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTerm {
    AsWritten,
    #[default]
    Recentered,
}

/// `softmax(softmax(x·M_g) + softmax(u·M_u))` per row of `x`. With `u` of
/// `None` the user term is dropped: `softmax(x·M_g)`.
pub fn route(tape: &mut Tape<'_>, x: Var, m_g: Var, user: Option<(Var, Var)>) -> Result<Var> {
    let logits = tape.matmul(x, m_g)?;
    let token = tape.softmax(logits, 1)?;
    match user {
        None => Ok(token),
        Some((u, m_u)) => {
            let ul = tape.matmul(u, m_u)?;
            let user = tape.softmax(ul, 1)?;
            let h = tape.add_row(token, user)?;
            tape.softmax(h, 1)
        }
    }
}

/// `Σᵢ ω[:, i] ⊙ expertᵢ(x)`, all experts evaluated.
pub fn mixture(
    tape: &mut Tape<'_>,
    x: Var,
    experts: &[LoraVars],
    weights: Var,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let k = tape.value(weights).cols();
    if k != experts.len() {
        return Err(Error::Contract(format!(
            "router gives {k} weights for {} experts",
            experts.len()
        )));
    }
    let mut terms = Vec::with_capacity(k);
    for (i, e) in experts.iter().enumerate() {
        let d = e.apply(tape, x, dropout_rng.as_deref_mut())?;
        let w = tape.slice_cols(weights, i, 1)?;
        terms.push(tape.mul_col(d, w)?);
    }
    tape.add_n(&terms)
}

/// `Σⱼ |ω · sⱼ|` over the stored vectors `sⱼ` of every other user at
/// `layer`; `ω` is a `[1 × k]` row. The stored vectors are constants. With
/// `cosine`, each term is divided by `‖ω‖ ‖sⱼ‖`.
pub fn constraint(
    tape: &mut Tape<'_>,
    trace: &RouterTrace,
    user: &str,
    layer: usize,
    omega: Var,
    cosine: bool,
) -> Result<Var> {
    let others = trace.others(user, layer);
    if others.is_empty() {
        return Ok(tape.leaf(Tensor::scalar(0.0), false));
    }
    let norm = if cosine {
        let sq = tape.dot(omega, omega)?;
        Some(tape.sqrt(sq)?)
    } else {
        None
    };
    let mut terms = Vec::with_capacity(others.len());
    for s in others {
        let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let sv = tape.leaf(Tensor::new(vec![1, s.len()], s.to_vec())?, false);
        let mut d = tape.dot(omega, sv)?;
        if let Some(n) = norm {
            d = tape.div_scalar(d, n)?;
            d = tape.scale(d, 1.0 / sn);
        }
        terms.push(tape.abs(d));
    }
    tape.add_n(&terms)
}

/// `softmax(h · W_l)` with `h` the user adapter's evaluation-mode output.
pub fn lora_aware(tape: &mut Tape<'_>, x: Var, user: &LoraVars, w_l: Var) -> Result<Var> {
    let h = user.apply(tape, x, None)?;
    let logits = tape.matmul(h, w_l)?;
    tape.softmax(logits, 1)
}

/// User delta plus router-weighted group experts.
#[allow(clippy::too_many_arguments)]
pub fn user_stage_delta(
    tape: &mut Tape<'_>,
    x: Var,
    experts: &[LoraVars],
    user: &LoraVars,
    beta: Var,
    term: GroupTerm,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let own = user.apply(tape, x, dropout_rng)?;
    let weights = match term {
        GroupTerm::AsWritten => beta,
        GroupTerm::Recentered => tape.add_scalar(beta, -1.0 / experts.len() as f64),
    };
    let group = mixture(tape, x, experts, weights, None)?;
    tape.add(own, group)
}

fn row(t: &Tensor) -> Result<Tensor> {
    Tensor::new(vec![1, t.numel()], t.data().to_vec())
}

fn run<'t>(f: impl FnOnce(&mut Tape<'t>) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = f(&mut tape)?;
    Ok(tape.value(out).clone())
}

/// Plain-tensor form of [`route`] with a user vector `u` of width `d_user`.
pub fn user_aware_route(x: &Tensor, u: &Tensor, m_g: &Tensor, m_u: &Tensor) -> Result<Tensor> {
    let u = row(u)?;
    run(|tape| {
        let (x, m_g, m_u) = (tape.constant(x), tape.constant(m_g), tape.constant(m_u));
        let u = tape.leaf(u, false);
        route(tape, x, m_g, Some((u, m_u)))
    })
}

/// Plain-tensor form of [`mixture`] in evaluation mode.
pub fn moe_ffn_delta(x: &Tensor, experts: &[LoraAdapter], omega: &Tensor) -> Result<Tensor> {
    run(|tape| {
        let xv = tape.constant(x);
        let vars: Vec<LoraVars> = experts.iter().map(|e| e.register(tape, false)).collect();
        let w = tape.constant(omega);
        mixture(tape, xv, &vars, w, None)
    })
}

/// Plain-tensor form of [`constraint`] using the dot-product similarity.
pub fn constraint_loss(trace: &RouterTrace, user: &str, layer: usize, omega: &[f64]) -> Result<f64> {
    let t = run(|tape| {
        let w = tape.leaf(Tensor::new(vec![1, omega.len()], omega.to_vec())?, false);
        constraint(tape, trace, user, layer, w, false)
    })?;
    Ok(t.item())
}

/// Plain-tensor form of [`lora_aware`].
pub fn lora_aware_route(x: &Tensor, user: &LoraAdapter, w_l: &Tensor) -> Result<Tensor> {
    run(|tape| {
        let xv = tape.constant(x);
        let u = user.register(tape, false);
        let w = tape.constant(w_l);
        lora_aware(tape, xv, &u, w)
    })
}

/// Plain-tensor form of [`user_stage_delta`] in evaluation mode, with the
/// router weights computed by [`lora_aware`].
pub fn stage3_ffn_delta(
    x: &Tensor,
    experts: &[LoraAdapter],
    user: &LoraAdapter,
    w_l: &Tensor,
    term: GroupTerm,
) -> Result<Tensor> {
    run(|tape| {
        let xv = tape.constant(x);
        let ev: Vec<LoraVars> = experts.iter().map(|e| e.register(tape, false)).collect();
        let u = user.register(tape, false);
        let w = tape.constant(w_l);
        let beta = lora_aware(tape, xv, &u, w)?;
        user_stage_delta(tape, xv, &ev, &u, beta, term, None)
    })
}
