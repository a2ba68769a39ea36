use rand_chacha::ChaCha8Rng;

use super::graph::{lora_aware, mixture, route, user_stage_delta, GroupTerm};
use super::BankVars;
use crate::adapters::LoraVars;
use crate::backbone::{AdapterHooks, Site};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Source of the user-side router term in the group stage.
pub enum UserTerm {
    /// One `[1 × d_user]` embedding row per layer.
    Embedding(Vec<Var>),
    /// Token-only routing, `softmax(x·M_g)`.
    Absent,
}

/// Group-stage hooks: per-token mixtures of the expert bank on every FFN
/// projection.
pub struct Stage2Hooks<'r> {
    bank: BankVars,
    sites: Vec<Site>,
    user: UserTerm,
    rng: Option<&'r mut ChaCha8Rng>,
    omegas: Vec<Option<Var>>,
}

impl<'r> Stage2Hooks<'r> {
    pub fn new(bank: BankVars, sites: Vec<Site>, user: UserTerm, rng: Option<&'r mut ChaCha8Rng>) -> Self {
        let n = bank.m_g.len();
        Stage2Hooks {
            bank,
            sites,
            user,
            rng,
            omegas: vec![None; n],
        }
    }

    pub fn bank(&self) -> &BankVars {
        &self.bank
    }

    /// `[T × k]` router weights per layer, filled in by the forward pass.
    pub fn omegas(&self) -> &[Option<Var>] {
        &self.omegas
    }
}

impl<'t> AdapterHooks<'t> for Stage2Hooks<'_> {
    fn on_ffn_input(&mut self, tape: &mut Tape<'t>, layer: usize, x: Var) -> Result<()> {
        let user = match &self.user {
            UserTerm::Embedding(rows) => Some((rows[layer], self.bank.m_u[layer])),
            UserTerm::Absent => None,
        };
        self.omegas[layer] = Some(route(tape, x, self.bank.m_g[layer], user)?);
        Ok(())
    }

    fn delta(&mut self, tape: &mut Tape<'t>, site: Site, input: Var) -> Result<Option<Var>> {
        let Some(s) = self.sites.iter().position(|x| *x == site) else {
            return Ok(None);
        };
        let omega = self.omegas[site.layer]
            .ok_or_else(|| Error::Contract(format!("no router weights for layer {}", site.layer)))?;
        let d = mixture(tape, input, &self.bank.experts[s], omega, self.rng.as_deref_mut())?;
        Ok(Some(d))
    }
}

/// Where the user stage gets its expert weights.
pub enum BetaSource {
    /// `softmax(h_u · W_l)`, one `W_l` per site.
    LoraAware(Vec<Var>),
    /// The group router with a uniform user term, one `M_g` per layer.
    GroupRouter(Vec<Var>),
}

/// User-stage hooks: the user's own adapter plus router-weighted frozen
/// experts on every FFN projection.
pub struct Stage3Hooks<'r> {
    sites: Vec<Site>,
    experts: Vec<Vec<LoraVars>>,
    user: Vec<LoraVars>,
    beta: BetaSource,
    term: GroupTerm,
    rng: Option<&'r mut ChaCha8Rng>,
    layer_beta: Vec<Option<Var>>,
}

impl<'r> Stage3Hooks<'r> {
    pub fn new(
        sites: Vec<Site>,
        experts: Vec<Vec<LoraVars>>,
        user: Vec<LoraVars>,
        beta: BetaSource,
        term: GroupTerm,
        rng: Option<&'r mut ChaCha8Rng>,
    ) -> Result<Self> {
        if experts.len() != sites.len() || user.len() != sites.len() {
            return Err(Error::Contract(format!(
                "{} sites, {} expert rows, {} user adapters",
                sites.len(),
                experts.len(),
                user.len()
            )));
        }
        let n_layers = sites.iter().map(|s| s.layer + 1).max().unwrap_or(0);
        Ok(Stage3Hooks {
            sites,
            experts,
            user,
            beta,
            term,
            rng,
            layer_beta: vec![None; n_layers],
        })
    }
}

impl<'t> AdapterHooks<'t> for Stage3Hooks<'_> {
    fn on_ffn_input(&mut self, tape: &mut Tape<'t>, layer: usize, x: Var) -> Result<()> {
        if let BetaSource::GroupRouter(m_g) = &self.beta {
            let k = self.experts[0].len() as f64;
            let token = route(tape, x, m_g[layer], None)?;
            let shifted = tape.add_scalar(token, 1.0 / k);
            self.layer_beta[layer] = Some(tape.softmax(shifted, 1)?);
        }
        Ok(())
    }

    fn delta(&mut self, tape: &mut Tape<'t>, site: Site, input: Var) -> Result<Option<Var>> {
        let Some(s) = self.sites.iter().position(|x| *x == site) else {
            return Ok(None);
        };
        let beta = match &self.beta {
            BetaSource::LoraAware(w_l) => lora_aware(tape, input, &self.user[s], w_l[s])?,
            BetaSource::GroupRouter(_) => self.layer_beta[site.layer]
                .ok_or_else(|| Error::Contract(format!("no router weights for layer {}", site.layer)))?,
        };
        let d = user_stage_delta(
            tape,
            input,
            &self.experts[s],
            &self.user[s],
            beta,
            self.term,
            self.rng.as_deref_mut(),
        )?;
        Ok(Some(d))
    }
}
