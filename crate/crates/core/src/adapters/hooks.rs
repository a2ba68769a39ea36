use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use super::{lora_delta_on_tape, LoraAdapter};
use crate::backbone::{AdapterHooks, Site};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// An adapter's factors as recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub b: Var,
    pub a: Var,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraVars {
    pub fn apply(&self, tape: &mut Tape<'_>, x: Var, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        lora_delta_on_tape(tape, x, self.b, self.a, self.scale, self.dropout, dropout_rng)
    }
}

/// Hooks that add one plain adapter per site.
pub struct LoraHooks<'r> {
    vars: BTreeMap<Site, LoraVars>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> LoraHooks<'r> {
    /// Registers every adapter on `tape`. Passing a generator enables
    /// training-mode dropout.
    pub fn register<'t>(
        tape: &mut Tape<'t>,
        adapters: &'t [LoraAdapter],
        trainable: bool,
        rng: Option<&'r mut ChaCha8Rng>,
    ) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for adapter in adapters {
            if vars.insert(adapter.target, adapter.register(tape, trainable)).is_some() {
                return Err(Error::Contract(format!("two adapters target {}", adapter.target)));
            }
        }
        Ok(LoraHooks { vars, rng })
    }

    pub fn get(&self, site: Site) -> Option<LoraVars> {
        self.vars.get(&site).copied()
    }
}

impl<'t> AdapterHooks<'t> for LoraHooks<'_> {
    fn delta(&mut self, tape: &mut Tape<'t>, site: Site, input: Var) -> Result<Option<Var>> {
        match self.vars.get(&site) {
            Some(v) => Ok(Some(v.apply(tape, input, self.rng.as_deref_mut())?)),
            None => Ok(None),
        }
    }
}
