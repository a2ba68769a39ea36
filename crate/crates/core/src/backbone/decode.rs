use super::model::{forward, AdapterHooks, WeightVars};
use super::tokenizer::EOS;
use super::{BackboneWeights, TokenId};
use crate::error::Result;
use crate::numerics::Tape;

/// Appends argmax tokens to `prompt` until `max_new` tokens were added, `EOS`
/// was emitted (and appended), or the context window is full.
///
/// `make_hooks` builds the adapter hooks on each step's fresh tape. Ties in
/// the argmax resolve to the lowest token id.
pub fn greedy_decode<'t, H, F>(
    weights: &'t BackboneWeights,
    prompt: &[TokenId],
    max_new: usize,
    mut make_hooks: F,
) -> Result<Vec<TokenId>>
where
    H: AdapterHooks<'t>,
    F: FnMut(&mut Tape<'t>) -> Result<H>,
{
    let mut tokens = prompt.to_vec();
    for _ in 0..max_new {
        if tokens.len() >= weights.config.max_seq_len {
            break;
        }
        let mut tape = Tape::new();
        let vars = WeightVars::register(&mut tape, weights);
        let hooks = make_hooks(&mut tape)?;
        let out = forward(&mut tape, weights, &vars, &tokens, hooks)?;
        let logits = tape.value(out);
        let last = logits.row(logits.rows() - 1);
        let next = argmax(last);
        tokens.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(tokens)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
