//! Training steps and loops for the three stages and the joint variant.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{merge_into, weighted_merge, LoraAdapter, LoraHooks, MergeReceipt};
use crate::backbone::tokenizer::{encode_pair, Encoded};
use crate::backbone::{forward, AdapterHooks, BackboneWeights, ModelConfig, Projection, Site, Stacked, WeightVars};
use crate::data::Entry;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, AdamW, Optimizer, Tape, Tensor, Var};
use crate::routing::{
    ffn_sites, graph::constraint, projection_dims, BetaSource, ExpertBank, GroupTerm, LoraAwareRouter, LoraShape,
    RouterTrace, Stage2Hooks, Stage3Hooks, UserEmbeddingTable, UserTerm,
};

use super::config::StageConfig;

const SEED_INIT: u64 = 1;
const SEED_ORDER: u64 = 2;
const SEED_DROPOUT: u64 = 3;
const SEED_EMBED: u64 = 4;
const SEED_ROUTER: u64 = 5;
const SEED_USER_DROPOUT: u64 = 6;

/// One optimizer step as logged to the loss CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub stage: u8,
    pub step: usize,
    /// Empty for population batches, which mix users.
    pub user_id: String,
    pub ce: f64,
    pub l_c: f64,
    pub total: f64,
}

fn log_epoch(what: &str, epoch: usize, rows: &[LossRow]) {
    if rows.is_empty() || !log::log_enabled!(log::Level::Info) {
        return;
    }
    let n = rows.len() as f64;
    let ce = rows.iter().map(|r| r.ce).sum::<f64>() / n;
    let total = rows.iter().map(|r| r.total).sum::<f64>() / n;
    log::info!("{what} epoch {}: mean ce {ce:.4}, mean total {total:.4}", epoch + 1);
}

pub fn write_loss_csv(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["stage", "step", "user_id", "ce", "l_c", "total"])?;
    for r in rows {
        w.write_record([
            r.stage.to_string(),
            r.step.to_string(),
            r.user_id.clone(),
            format!("{:?}", r.ce),
            format!("{:?}", r.l_c),
            format!("{:?}", r.total),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A tokenized history item and its owner.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub user: String,
    pub encoded: Encoded,
}

pub fn encode_entry(entry: &Entry, max_len: usize) -> Encoded {
    let (q, r) = entry.parts();
    encode_pair(q, r, max_len)
}

/// Mean next-token cross-entropy over the response positions of `enc`.
pub fn example_ce<'t>(
    tape: &mut Tape<'t>,
    weights: &'t BackboneWeights,
    vars: &WeightVars,
    enc: &Encoded,
    hooks: impl AdapterHooks<'t>,
) -> Result<Var> {
    let n = enc.tokens.len();
    let logits = forward(tape, weights, vars, &enc.tokens[..n - 1], hooks)?;
    let (start, count) = enc.input_rows();
    let rows = tape.slice_rows(logits, start, count)?;
    tape.cross_entropy(rows, enc.targets())
}

/// Loss values and gradients of one step, parameters in a fixed order.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub ce: f64,
    pub l_c: f64,
    pub total: f64,
    /// Token-mean router weights per layer; group steps only.
    pub omega: Vec<Vec<f64>>,
    pub grads: Vec<Option<Vec<f64>>>,
}

/// A recorded step before its backward pass.
pub struct StepGraph<'t> {
    pub tape: Tape<'t>,
    pub ce: Var,
    pub l_c: Option<Var>,
    pub total: Var,
    /// Trainable leaves, in optimizer order.
    pub params: Vec<Var>,
    /// Frozen tensors that appear on the tape.
    pub frozen: Vec<Var>,
    pub omega: Vec<Var>,
}

impl StepGraph<'_> {
    pub fn run(mut self) -> Result<StepOutput> {
        self.tape.backward(self.total)?;
        let value = |v: Var| self.tape.value(v).item();
        let (ce, total) = (value(self.ce), value(self.total));
        let l_c = self.l_c.map_or(0.0, value);
        let omega = self.omega.iter().map(|v| self.tape.value(*v).data().to_vec()).collect();
        let grads = self.params.iter().map(|v| self.tape.take_grad(*v)).collect();
        Ok(StepOutput {
            ce,
            l_c,
            total,
            omega,
            grads,
        })
    }
}

fn adapter_params(adapters: &[LoraAdapter]) -> Vec<&Tensor> {
    adapters.iter().flat_map(|a| [&a.b, &a.a]).collect()
}

fn adapter_params_mut(adapters: &mut [LoraAdapter]) -> Vec<&mut Tensor> {
    adapters.iter_mut().flat_map(|a| [&mut a.b, &mut a.a]).collect()
}

fn hooks_params(hooks: &LoraHooks<'_>, adapters: &[LoraAdapter]) -> Vec<Var> {
    adapters
        .iter()
        .filter_map(|a| hooks.get(a.target))
        .flat_map(|v| [v.b, v.a])
        .collect()
}

fn optimizer(sc: &StageConfig, params: &[&Tensor]) -> Optimizer {
    Optimizer::new(AdamW::new(sc.lr).with_weight_decay(sc.weight_decay), params)
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

// ----- population stage ------------------------------------------------------

/// Fresh adapters on every attention projection.
pub fn population_adapters(cfg: &ModelConfig, sc: &StageConfig, seed: u64) -> Result<Vec<LoraAdapter>> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    for layer in 0..cfg.n_layers {
        for (i, proj) in Projection::ATTENTION.into_iter().enumerate() {
            let s = derive_seed(seed, &[SEED_INIT, layer as u64, i as u64]);
            out.push(LoraAdapter::init(d, d, sc.r, sc.alpha, Site::new(layer, proj), s)?.with_dropout(sc.dropout)?);
        }
    }
    Ok(out)
}

/// Mean cross-entropy over `batch`, gradients for each adapter's `(B, A)`.
pub fn population_graph<'t>(
    weights: &'t BackboneWeights,
    adapters: &'t [LoraAdapter],
    batch: &[&Encoded],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StepGraph<'t>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut tape = Tape::new();
    let wv = WeightVars::register(&mut tape, weights);
    let mut hooks = LoraHooks::register(&mut tape, adapters, true, rng)?;
    let params = hooks_params(&hooks, adapters);
    let mut losses = Vec::with_capacity(batch.len());
    for enc in batch {
        losses.push(example_ce(&mut tape, weights, &wv, enc, &mut hooks)?);
    }
    let sum = tape.add_n(&losses)?;
    let ce = tape.scale(sum, 1.0 / batch.len() as f64);
    Ok(StepGraph {
        tape,
        ce,
        l_c: None,
        total: ce,
        params,
        frozen: Vec::new(),
        omega: Vec::new(),
    })
}

#[derive(Clone, Debug)]
pub struct PopulationOutput {
    pub adapters: Vec<LoraAdapter>,
    pub receipts: Vec<MergeReceipt>,
    pub merged: BackboneWeights,
    pub losses: Vec<LossRow>,
}

pub fn train_population(
    base: &BackboneWeights,
    examples: &[Example],
    sc: &StageConfig,
    seed: u64,
) -> Result<PopulationOutput> {
    if examples.is_empty() {
        return Err(Error::Config("population stage needs a nonempty corpus".into()));
    }
    let mut adapters = population_adapters(&base.config, sc, seed)?;
    let mut opt = optimizer(sc, &adapter_params(&adapters));
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_ORDER]));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_DROPOUT]));
    let mut losses = Vec::new();
    for epoch in 0..sc.epochs {
        let start = losses.len();
        for chunk in shuffled(examples.len(), &mut order_rng).chunks(sc.batch_size) {
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &examples[i].encoded).collect();
            let out = population_graph(base, &adapters, &batch, Some(&mut drop_rng))?.run()?;
            opt.step(adapter_params_mut(&mut adapters), &out.grads)?;
            losses.push(LossRow {
                stage: 1,
                step: losses.len(),
                user_id: String::new(),
                ce: out.ce,
                l_c: 0.0,
                total: out.total,
            });
        }
        log_epoch("population", epoch, &losses[start..]);
    }
    let mut merged = base.clone();
    let receipts = merge_into(&mut merged, &adapters)?;
    Ok(PopulationOutput {
        adapters,
        receipts,
        merged,
        losses,
    })
}

// ----- group stage -----------------------------------------------------------

/// Group-stage switches that change the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupOptions {
    pub lambda_c: f64,
    /// Include the user-embedding router term.
    pub user_aware: bool,
    pub cosine: bool,
}

/// `CE + λ_c · Σ_layers L_c` for one example of `user`.
///
/// Parameters: the bank (see [`ExpertBank::params`]), then the embedding
/// tables layer by layer, then `extra` adapters (the joint variant's user
/// adapters) as `(B, A)` pairs.
#[allow(clippy::too_many_arguments)]
pub fn group_graph<'t>(
    base: &'t BackboneWeights,
    bank: &'t ExpertBank,
    table: &'t UserEmbeddingTable,
    extra: Option<&'t [LoraAdapter]>,
    user: &str,
    enc: &Encoded,
    trace: &RouterTrace,
    opts: GroupOptions,
    rng: Option<&mut ChaCha8Rng>,
    extra_rng: Option<&mut ChaCha8Rng>,
) -> Result<StepGraph<'t>> {
    let mut tape = Tape::new();
    let wv = WeightVars::register(&mut tape, base);
    let bv = bank.register(&mut tape, true);
    let mut params = bv.params();
    let tables: Vec<Var> = table.tables.iter().map(|t| tape.param(t)).collect();
    params.extend(&tables);
    let row = table.index(user)?;
    let user_term = if opts.user_aware {
        UserTerm::Embedding(tables.iter().map(|&t| tape.gather(t, &[row])).collect::<Result<_>>()?)
    } else {
        UserTerm::Absent
    };
    let mut group = Stage2Hooks::new(bv, bank.sites.clone(), user_term, rng);
    let ce = match extra {
        None => example_ce(&mut tape, base, &wv, enc, &mut group)?,
        Some(adapters) => {
            let own = LoraHooks::register(&mut tape, adapters, true, extra_rng)?;
            params.extend(hooks_params(&own, adapters));
            example_ce(&mut tape, base, &wv, enc, Stacked(&mut group, own))?
        }
    };
    let mut omega = Vec::new();
    let mut terms = Vec::new();
    for (layer, w) in group.omegas().iter().enumerate() {
        let w = w.ok_or_else(|| Error::Contract(format!("layer {layer} produced no router weights")))?;
        let mean = tape.mean_rows(w);
        terms.push(constraint(&mut tape, trace, user, layer, mean, opts.cosine)?);
        omega.push(mean);
    }
    let l_c = tape.add_n(&terms)?;
    let weighted = tape.scale(l_c, opts.lambda_c);
    let total = tape.add(ce, weighted)?;
    Ok(StepGraph {
        tape,
        ce,
        l_c: Some(l_c),
        total,
        params,
        frozen: Vec::new(),
        omega,
    })
}

#[derive(Clone, Debug)]
pub struct GroupOutput {
    pub bank: ExpertBank,
    pub table: UserEmbeddingTable,
    pub trace: RouterTrace,
    /// Per-layer expert weights used for the static merge.
    pub merge_weights: Vec<Vec<f64>>,
    pub merged: BackboneWeights,
    pub losses: Vec<LossRow>,
}

/// Per-layer mean router weight over the log entries of the last epoch;
/// uniform when nothing was trained.
pub fn final_epoch_mean(trace: &RouterTrace, n_layers: usize, k: usize, epochs: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; k]; n_layers];
    let mut counts = vec![0usize; n_layers];
    if epochs > 0 {
        for e in trace.log.iter().filter(|e| e.epoch == epochs - 1) {
            sums[e.layer].iter_mut().zip(&e.omega).for_each(|(s, w)| *s += w);
            counts[e.layer] += 1;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| {
            if n == 0 {
                vec![1.0 / k as f64; k]
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

/// `W + Σ_j w[layer][j] · Δ_j` on every expert site.
pub fn merge_bank(base: &BackboneWeights, bank: &ExpertBank, weights: &[Vec<f64>]) -> Result<BackboneWeights> {
    let mut merged = base.clone();
    for (s, site) in bank.sites.iter().enumerate() {
        let list: Vec<(f64, &LoraAdapter)> = bank.experts[s]
            .iter()
            .enumerate()
            .map(|(j, e)| (weights[site.layer][j], e))
            .collect();
        *merged.projection_mut(*site)? = weighted_merge(base.projection(*site)?, &list)?;
    }
    Ok(merged)
}

pub fn init_bank(cfg: &ModelConfig, sc: &StageConfig, k: usize, seed: u64) -> Result<ExpertBank> {
    let shape = LoraShape {
        rank: sc.r,
        alpha: sc.alpha,
        dropout: sc.dropout,
    };
    ExpertBank::init(cfg, k, shape, cfg.d_model, derive_seed(seed, &[SEED_INIT]))
}

pub fn train_group(
    base: &BackboneWeights,
    examples: &[Example],
    sc: &StageConfig,
    opts: GroupOptions,
    trace_decay: f64,
    seed: u64,
) -> Result<GroupOutput> {
    if examples.is_empty() {
        return Err(Error::Config("group stage needs a nonempty corpus".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.user.is_empty()) {
        return Err(Error::Data(format!(
            "group stage example without user_id: {:?}",
            e.encoded.tokens
        )));
    }
    let cfg = &base.config;
    let k = sc.k.ok_or_else(|| Error::Config("stage2.k is required".into()))?;
    let mut bank = init_bank(cfg, sc, k, seed)?;
    let users: Vec<String> = examples.iter().map(|e| e.user.clone()).collect();
    let mut table = UserEmbeddingTable::init(&users, cfg.n_layers, cfg.d_model, derive_seed(seed, &[SEED_EMBED]))?;
    let mut trace = RouterTrace::new(trace_decay)?;
    let mut params = bank.params();
    params.extend(&table.tables);
    let mut opt = optimizer(sc, &params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_ORDER]));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_DROPOUT]));
    let mut losses = Vec::new();
    for epoch in 0..sc.epochs {
        let start = losses.len();
        for i in shuffled(examples.len(), &mut order_rng) {
            let ex = &examples[i];
            let out = group_graph(
                base,
                &bank,
                &table,
                None,
                &ex.user,
                &ex.encoded,
                &trace,
                opts,
                Some(&mut drop_rng),
                None,
            )?
            .run()?;
            let mut ps = bank.params_mut();
            ps.extend(table.tables.iter_mut());
            opt.step(ps, &out.grads)?;
            let step = losses.len();
            for (layer, w) in out.omega.iter().enumerate() {
                trace.record(step, epoch, &ex.user, layer, w)?;
            }
            losses.push(LossRow {
                stage: 2,
                step,
                user_id: ex.user.clone(),
                ce: out.ce,
                l_c: out.l_c,
                total: out.total,
            });
        }
        log_epoch("group", epoch, &losses[start..]);
    }
    let merge_weights = final_epoch_mean(&trace, cfg.n_layers, k, sc.epochs);
    let merged = merge_bank(base, &bank, &merge_weights)?;
    Ok(GroupOutput {
        bank,
        table,
        trace,
        merge_weights,
        merged,
        losses,
    })
}

// ----- user stage ------------------------------------------------------------

/// A test user's trained parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UserArtifact {
    pub user_id: String,
    /// One adapter per feed-forward projection.
    pub adapters: Vec<LoraAdapter>,
    /// Absent in the joint variant.
    pub router: Option<LoraAwareRouter>,
    pub steps: usize,
}

/// Where the user stage takes its expert weights from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UserOptions {
    pub term: GroupTerm,
    pub lora_aware: bool,
}

/// Fresh user adapters on every feed-forward projection. Initialization
/// depends only on `seed`, so users with equal histories end up equal.
pub fn user_adapters(cfg: &ModelConfig, sc: &StageConfig, seed: u64) -> Result<Vec<LoraAdapter>> {
    ffn_sites(cfg.n_layers)
        .into_iter()
        .enumerate()
        .map(|(i, site)| {
            let (d_in, d_out) = projection_dims(cfg, site.proj);
            LoraAdapter::init(
                d_in,
                d_out,
                sc.r,
                sc.alpha,
                site,
                derive_seed(seed, &[SEED_INIT, i as u64]),
            )?
            .with_dropout(sc.dropout)
        })
        .collect()
}

/// User-stage loss on the group-merged model. Parameters: the user's
/// adapters as `(B, A)` pairs, then `W_l` per site when the LoRA-aware
/// router is on. The bank is recorded as frozen constants.
pub fn user_graph<'t>(
    merged: &'t BackboneWeights,
    bank: &'t ExpertBank,
    adapters: &'t [LoraAdapter],
    router: &'t LoraAwareRouter,
    enc: &Encoded,
    opts: UserOptions,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StepGraph<'t>> {
    let mut tape = Tape::new();
    let wv = WeightVars::register(&mut tape, merged);
    let frozen_bank = bank.register(&mut tape, false);
    let frozen = frozen_bank.params();
    let user: Vec<_> = adapters.iter().map(|a| a.register(&mut tape, true)).collect();
    let mut params: Vec<Var> = user.iter().flat_map(|v| [v.b, v.a]).collect();
    let beta = if opts.lora_aware {
        let w_l: Vec<Var> = router.w_l.iter().map(|w| tape.param(w)).collect();
        params.extend(&w_l);
        BetaSource::LoraAware(w_l)
    } else {
        BetaSource::GroupRouter(frozen_bank.m_g.clone())
    };
    let hooks = Stage3Hooks::new(bank.sites.clone(), frozen_bank.experts, user, beta, opts.term, rng)?;
    let ce = example_ce(&mut tape, merged, &wv, enc, hooks)?;
    Ok(StepGraph {
        tape,
        ce,
        l_c: None,
        total: ce,
        params,
        frozen,
        omega: Vec::new(),
    })
}

fn train_user(
    merged: &BackboneWeights,
    bank: &ExpertBank,
    user: &str,
    history: &[Encoded],
    sc: &StageConfig,
    opts: UserOptions,
    seed: u64,
) -> Result<(UserArtifact, Vec<LossRow>)> {
    let cfg = &merged.config;
    let mut adapters = user_adapters(cfg, sc, seed)?;
    let mut router = LoraAwareRouter::init(cfg, bank.k, derive_seed(seed, &[SEED_ROUTER]));
    let mut params = adapter_params(&adapters);
    if opts.lora_aware {
        params.extend(&router.w_l);
    }
    let mut opt = optimizer(sc, &params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_ORDER]));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_DROPOUT]));
    let mut losses = Vec::new();
    for epoch in 0..sc.epochs {
        let start = losses.len();
        for i in shuffled(history.len(), &mut order_rng) {
            let out = user_graph(merged, bank, &adapters, &router, &history[i], opts, Some(&mut drop_rng))?.run()?;
            let mut ps = adapter_params_mut(&mut adapters);
            if opts.lora_aware {
                ps.extend(router.w_l.iter_mut());
            }
            opt.step(ps, &out.grads)?;
            losses.push(LossRow {
                stage: 3,
                step: losses.len(),
                user_id: user.to_string(),
                ce: out.ce,
                l_c: 0.0,
                total: out.total,
            });
        }
        log_epoch(&format!("user `{user}`"), epoch, &losses[start..]);
    }
    let artifact = UserArtifact {
        user_id: user.to_string(),
        adapters,
        router: opts.lora_aware.then_some(router),
        steps: losses.len(),
    };
    Ok((artifact, losses))
}

#[derive(Clone, Debug, Default)]
pub struct UserStageOutput {
    pub users: BTreeMap<String, UserArtifact>,
    /// Users with nothing to train on.
    pub skipped: Vec<String>,
    pub losses: Vec<LossRow>,
}

/// Trains every user independently on `jobs` threads. Results do not
/// depend on `jobs`.
pub fn train_users(
    merged: &BackboneWeights,
    bank: &ExpertBank,
    histories: &[(String, Vec<Encoded>)],
    sc: &StageConfig,
    opts: UserOptions,
    seed: u64,
    jobs: usize,
) -> Result<UserStageOutput> {
    use rayon::prelude::*;

    let (ready, empty): (Vec<_>, Vec<_>) = histories.iter().partition(|(_, h)| !h.is_empty());
    for (u, _) in &empty {
        log::warn!("user `{u}` has no training history; skipped");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("jobs: {e}")))?;
    let results: Vec<Result<(UserArtifact, Vec<LossRow>)>> = pool.install(|| {
        ready
            .par_iter()
            .map(|(u, h)| train_user(merged, bank, u, h, sc, opts, seed))
            .collect()
    });
    let mut out = UserStageOutput {
        skipped: empty.iter().map(|(u, _)| u.clone()).collect(),
        ..UserStageOutput::default()
    };
    for r in results {
        let (artifact, losses) = r?;
        out.losses.extend(losses);
        out.users.insert(artifact.user_id.clone(), artifact);
    }
    Ok(out)
}

// ----- joint variant ---------------------------------------------------------

/// Experts, routers, embeddings and test-user adapters trained together on
/// the population model. Test-user items are repeated
/// `ceil(user epochs / group epochs)` times per epoch so they get about as
/// many passes as in the staged pipeline.
#[allow(clippy::too_many_arguments)]
pub fn train_joint(
    base: &BackboneWeights,
    examples: &[Example],
    histories: &[(String, Vec<Encoded>)],
    group_sc: &StageConfig,
    user_sc: &StageConfig,
    opts: GroupOptions,
    trace_decay: f64,
    seed: u64,
) -> Result<(GroupOutput, UserStageOutput)> {
    let cfg = &base.config;
    let k = group_sc.k.ok_or_else(|| Error::Config("stage2.k is required".into()))?;
    let reps = if group_sc.epochs == 0 {
        0
    } else {
        user_sc.epochs.div_ceil(group_sc.epochs)
    };
    let mut records: Vec<Example> = examples.to_vec();
    for (u, h) in histories {
        for _ in 0..reps {
            records.extend(h.iter().map(|e| Example {
                user: u.clone(),
                encoded: e.clone(),
            }));
        }
    }
    if records.is_empty() {
        return Err(Error::Config("joint training needs a nonempty corpus".into()));
    }
    let mut bank = init_bank(cfg, group_sc, k, seed)?;
    let mut users: Vec<String> = examples.iter().map(|e| e.user.clone()).collect();
    users.extend(histories.iter().map(|(u, _)| u.clone()));
    let mut table = UserEmbeddingTable::init(&users, cfg.n_layers, cfg.d_model, derive_seed(seed, &[SEED_EMBED]))?;
    let mut own: BTreeMap<String, (Vec<LoraAdapter>, Optimizer)> = BTreeMap::new();
    for (u, _) in histories {
        let adapters = user_adapters(cfg, user_sc, derive_seed(seed, &[SEED_INIT, 1]))?;
        let opt = optimizer(user_sc, &adapter_params(&adapters));
        own.insert(u.clone(), (adapters, opt));
    }
    let mut trace = RouterTrace::new(trace_decay)?;
    let mut params = bank.params();
    params.extend(&table.tables);
    let mut opt = optimizer(group_sc, &params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_ORDER]));
    let mut drop_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_DROPOUT]));
    let mut user_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SEED_USER_DROPOUT]));
    let mut group_losses = Vec::new();
    let mut user_losses = Vec::new();
    let mut user_steps: BTreeMap<String, usize> = BTreeMap::new();
    let n_bank = params.len();
    for epoch in 0..group_sc.epochs {
        let start = group_losses.len();
        for i in shuffled(records.len(), &mut order_rng) {
            let ex = &records[i];
            let extra = own.get(&ex.user).map(|(a, _)| a.as_slice());
            let out = group_graph(
                base,
                &bank,
                &table,
                extra,
                &ex.user,
                &ex.encoded,
                &trace,
                opts,
                Some(&mut drop_rng),
                Some(&mut user_rng),
            )?
            .run()?;
            let mut ps = bank.params_mut();
            ps.extend(table.tables.iter_mut());
            opt.step(ps, &out.grads[..n_bank])?;
            if let Some((adapters, uopt)) = own.get_mut(&ex.user) {
                uopt.step(adapter_params_mut(adapters), &out.grads[n_bank..])?;
                *user_steps.entry(ex.user.clone()).or_default() += 1;
            }
            let step = group_losses.len();
            for (layer, w) in out.omega.iter().enumerate() {
                trace.record(step, epoch, &ex.user, layer, w)?;
            }
            let row = LossRow {
                stage: 2,
                step,
                user_id: ex.user.clone(),
                ce: out.ce,
                l_c: out.l_c,
                total: out.total,
            };
            if own.contains_key(&ex.user) {
                user_losses.push(LossRow {
                    stage: 3,
                    ..row.clone()
                });
            }
            group_losses.push(row);
        }
        log_epoch("joint", epoch, &group_losses[start..]);
    }
    let merge_weights = final_epoch_mean(&trace, cfg.n_layers, k, group_sc.epochs);
    let merged = merge_bank(base, &bank, &merge_weights)?;
    let users = own
        .into_iter()
        .map(|(u, (adapters, _))| {
            let steps = user_steps.get(&u).copied().unwrap_or(0);
            let a = UserArtifact {
                user_id: u.clone(),
                adapters,
                router: None,
                steps,
            };
            (u, a)
        })
        .collect();
    Ok((
        GroupOutput {
            bank,
            table,
            trace,
            merge_weights,
            merged,
            losses: group_losses,
        },
        UserStageOutput {
            users,
            skipped: Vec::new(),
            losses: user_losses,
        },
    ))
}
