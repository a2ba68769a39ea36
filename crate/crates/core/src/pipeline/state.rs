use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Ablation, RunConfig};
use super::train::{GroupOutput, LossRow, PopulationOutput, UserArtifact, UserStageOutput};
use crate::adapters::{adapters_from_pack, adapters_to_pack, AdapterRecord, LoraAdapter, LoraHooks, MergeReceipt};
use crate::backbone::{AdapterHooks, BackboneWeights, NoHooks, Stacked};
use crate::error::{Error, Result};
use crate::numerics::{checksum_all, Tape};
use crate::routing::{
    BetaSource, ExpertBank, LoraAwareRouter, RouterTrace, Stage2Hooks, Stage3Hooks, UserEmbeddingTable, UserTerm,
};
use crate::store::TensorPack;

/// Population-stage receipt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationReceipt {
    pub base_checksum: String,
    pub adapters_checksum: String,
    pub merged_checksum: String,
    pub steps: usize,
    pub merges: Vec<MergeReceipt>,
}

/// Group-stage receipt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReceipt {
    /// Checksum of the population model before and after the stage.
    pub frozen_before: String,
    pub frozen_after: String,
    pub bank_checksum: String,
    pub embeddings_checksum: String,
    pub merged_checksum: String,
    pub merge_rule: String,
    /// `[layer][expert]` weights used to fold the bank into the merged model.
    pub merge_weights: Vec<Vec<f64>>,
    pub lambda_c: f64,
    pub steps: usize,
    /// True when experts and user adapters were trained jointly.
    pub joint: bool,
}

/// User-stage receipt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserReceipt {
    /// Checksums of the merged group model, bank and embeddings, before and
    /// after the stage.
    pub frozen_before: BTreeMap<String, String>,
    pub frozen_after: BTreeMap<String, String>,
    pub users: BTreeMap<String, String>,
    pub skipped: Vec<String>,
    pub steps: usize,
}

pub const MERGE_RULE: &str = "per-layer mean router weight over the final group epoch";

#[derive(Clone, Debug)]
pub struct PopulationState {
    pub adapters: Vec<LoraAdapter>,
    pub merged: BackboneWeights,
    pub receipt: PopulationReceipt,
    pub losses: Vec<LossRow>,
}

#[derive(Clone, Debug)]
pub struct GroupState {
    pub bank: ExpertBank,
    pub table: UserEmbeddingTable,
    pub trace: RouterTrace,
    pub merged: BackboneWeights,
    pub receipt: GroupReceipt,
    pub losses: Vec<LossRow>,
}

#[derive(Clone, Debug)]
pub struct UserState {
    pub users: BTreeMap<String, UserArtifact>,
    pub receipt: UserReceipt,
    pub losses: Vec<LossRow>,
}

/// Everything a run has produced so far. Stage `n` is present only if
/// stage `n - 1` is.
#[derive(Clone, Debug)]
pub struct PipelineState {
    pub config: RunConfig,
    pub base: BackboneWeights,
    pub population: Option<PopulationState>,
    pub group: Option<GroupState>,
    pub user: Option<UserState>,
}

pub(crate) fn frozen_checksums(g: &GroupState) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("bank".to_string(), g.bank.checksum()),
        ("embeddings".to_string(), g.table.checksum()),
        ("merged".to_string(), g.merged.checksum()),
    ])
}

fn user_checksum(a: &UserArtifact) -> String {
    let mut tensors: Vec<&crate::numerics::Tensor> = a.adapters.iter().flat_map(|x| [&x.b, &x.a]).collect();
    if let Some(r) = &a.router {
        tensors.extend(&r.w_l);
    }
    checksum_all(tensors)
}

impl PopulationState {
    pub(crate) fn from_output(base: &BackboneWeights, out: PopulationOutput) -> Self {
        let receipt = PopulationReceipt {
            base_checksum: base.checksum(),
            adapters_checksum: checksum_all(out.adapters.iter().flat_map(|a| [&a.b, &a.a])),
            merged_checksum: out.merged.checksum(),
            steps: out.losses.len(),
            merges: out.receipts,
        };
        PopulationState {
            adapters: out.adapters,
            merged: out.merged,
            receipt,
            losses: out.losses,
        }
    }
}

impl GroupState {
    pub(crate) fn from_output(
        frozen_before: String,
        frozen_after: String,
        lambda_c: f64,
        joint: bool,
        out: GroupOutput,
    ) -> Self {
        let receipt = GroupReceipt {
            frozen_before,
            frozen_after,
            bank_checksum: out.bank.checksum(),
            embeddings_checksum: out.table.checksum(),
            merged_checksum: out.merged.checksum(),
            merge_rule: MERGE_RULE.to_string(),
            merge_weights: out.merge_weights,
            lambda_c,
            steps: out.losses.len(),
            joint,
        };
        GroupState {
            bank: out.bank,
            table: out.table,
            trace: out.trace,
            merged: out.merged,
            receipt,
            losses: out.losses,
        }
    }
}

impl UserState {
    pub(crate) fn from_output(
        frozen_before: BTreeMap<String, String>,
        frozen_after: BTreeMap<String, String>,
        out: UserStageOutput,
    ) -> Self {
        let receipt = UserReceipt {
            frozen_before,
            frozen_after,
            users: out.users.iter().map(|(u, a)| (u.clone(), user_checksum(a))).collect(),
            skipped: out.skipped,
            steps: out.losses.len(),
        };
        UserState {
            users: out.users,
            receipt,
            losses: out.losses,
        }
    }
}

/// Fixed artifact layout under a run directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("run_manifest.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("data/corpus.jsonl")
    }
    pub fn labels(&self) -> PathBuf {
        self.root.join("data/labels.csv")
    }
    pub fn split(&self) -> PathBuf {
        self.root.join("data/split.json")
    }
    pub fn stage_dir(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}"))
    }
    pub fn receipt(&self, stage: u8) -> PathBuf {
        self.stage_dir(stage).join("receipt.json")
    }
    pub fn losses(&self, stage: u8) -> PathBuf {
        self.stage_dir(stage).join("loss.csv")
    }
    pub fn merged(&self, stage: u8) -> PathBuf {
        self.stage_dir(stage).join("merged")
    }
    pub fn population_adapters(&self) -> PathBuf {
        self.stage_dir(1).join("adapters")
    }
    pub fn bank(&self) -> PathBuf {
        self.stage_dir(2).join("bank")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.stage_dir(2).join("embeddings")
    }
    pub fn trace(&self) -> PathBuf {
        self.stage_dir(2).join("trace.csv")
    }
    pub fn user_pack(&self, user: &str) -> PathBuf {
        self.stage_dir(3).join("users").join(user)
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics")
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path.display().to_string(), e.to_string()))
}

pub(crate) fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

fn user_pack(a: &UserArtifact) -> TensorPack {
    let mut pack = TensorPack::new();
    let records: Vec<AdapterRecord> = a
        .adapters
        .iter()
        .map(|ad| AdapterRecord {
            key: format!("user.{}", ad.target),
            stage: "user".into(),
            owner: Some(a.user_id.clone()),
            adapter: ad.clone(),
        })
        .collect();
    adapters_to_pack(&records, &mut pack);
    if let Some(r) = &a.router {
        r.to_pack(&mut pack, &a.user_id);
    }
    pack
}

fn user_from_pack(user: &str, steps: usize, pack: &TensorPack) -> Result<UserArtifact> {
    let adapters = adapters_from_pack(pack)?.into_iter().map(|r| r.adapter).collect();
    let router = if pack.entries.iter().any(|e| e.name.starts_with("w_l.")) {
        Some(LoraAwareRouter::from_pack(pack)?)
    } else {
        None
    };
    Ok(UserArtifact {
        user_id: user.to_string(),
        adapters,
        router,
        steps,
    })
}

impl PipelineState {
    /// A run with no stages completed.
    pub fn new(config: RunConfig, base: BackboneWeights) -> Self {
        PipelineState {
            config,
            base,
            population: None,
            group: None,
            user: None,
        }
    }

    /// The stage-`stage` model for `user` on `tape`: weights plus hooks.
    /// Stages 1 and 2 are static merged models; stage 3 adds the user's
    /// adapters and router, or falls back to stage 2 for users without an
    /// artifact.
    pub fn stage_weights(&self, stage: u8) -> Result<&BackboneWeights> {
        match stage {
            1 => Ok(&self.population()?.merged),
            2 => Ok(&self.group_state()?.merged),
            3 if self.group_state()?.receipt.joint => Ok(&self.population()?.merged),
            3 => Ok(&self.group_state()?.merged),
            _ => Err(Error::Contract(format!("no stage {stage}"))),
        }
    }

    pub fn stage_hooks<'t>(
        &'t self,
        tape: &mut Tape<'t>,
        stage: u8,
        user: &str,
    ) -> Result<Box<dyn AdapterHooks<'t> + 't>> {
        if stage < 3 {
            return Ok(Box::new(NoHooks));
        }
        let g = self.group_state()?;
        let Some(artifact) = self.user_state()?.users.get(user) else {
            return Ok(Box::new(NoHooks));
        };
        let bank = g.bank.register(tape, false);
        if g.receipt.joint {
            let rows = g
                .table
                .tables
                .iter()
                .map(|t| {
                    let v = tape.constant(t);
                    tape.gather(v, &[g.table.index(user)?])
                })
                .collect::<Result<Vec<_>>>()?;
            let mix = Stage2Hooks::new(bank, g.bank.sites.clone(), UserTerm::Embedding(rows), None);
            let own = LoraHooks::register(tape, &artifact.adapters, false, None)?;
            return Ok(Box::new(Stacked(mix, own)));
        }
        let user_vars: Vec<_> = artifact.adapters.iter().map(|a| a.register(tape, false)).collect();
        let beta = match (&artifact.router, self.config.has(Ablation::NoLoraAwareRouter)) {
            (Some(r), false) => BetaSource::LoraAware(r.w_l.iter().map(|w| tape.constant(w)).collect()),
            _ => BetaSource::GroupRouter(bank.m_g.clone()),
        };
        Ok(Box::new(Stage3Hooks::new(
            g.bank.sites.clone(),
            bank.experts,
            user_vars,
            beta,
            self.config.group_term(),
            None,
        )?))
    }

    pub fn completed_stages(&self) -> Vec<u8> {
        [
            (1, self.population.is_some()),
            (2, self.group.is_some()),
            (3, self.user.is_some()),
        ]
        .into_iter()
        .filter(|(_, done)| *done)
        .map(|(s, _)| s)
        .collect()
    }

    pub fn population(&self) -> Result<&PopulationState> {
        self.population
            .as_ref()
            .ok_or_else(|| Error::Missing("stage 1 receipt (run stage 1 first)".into()))
    }

    pub fn group_state(&self) -> Result<&GroupState> {
        self.group
            .as_ref()
            .ok_or_else(|| Error::Missing("stage 2 receipt (run stage 2 first)".into()))
    }

    pub fn user_state(&self) -> Result<&UserState> {
        self.user
            .as_ref()
            .ok_or_else(|| Error::Missing("stage 3 receipt (run stage 3 first)".into()))
    }

    /// Writes every completed stage under `layout`.
    pub fn save(&self, layout: &Layout) -> Result<()> {
        if let Some(p) = &self.population {
            let records: Vec<AdapterRecord> = p
                .adapters
                .iter()
                .map(|a| AdapterRecord {
                    key: format!("population.{}", a.target),
                    stage: "population".into(),
                    owner: None,
                    adapter: a.clone(),
                })
                .collect();
            let mut pack = TensorPack::new();
            adapters_to_pack(&records, &mut pack);
            pack.save(&layout.population_adapters())?;
            p.merged.save(&layout.merged(1), "population")?;
            super::train::write_loss_csv(&p.losses, &layout.losses(1))?;
            write_json(&layout.receipt(1), &p.receipt)?;
        }
        if let Some(g) = &self.group {
            let mut pack = TensorPack::new();
            g.bank.to_pack(&mut pack);
            pack.save(&layout.bank())?;
            let mut pack = TensorPack::new();
            g.table.to_pack(&mut pack);
            pack.save(&layout.embeddings())?;
            g.merged.save(&layout.merged(2), "group")?;
            g.trace.write_csv(&layout.trace())?;
            super::train::write_loss_csv(&g.losses, &layout.losses(2))?;
            write_json(&layout.receipt(2), &g.receipt)?;
        }
        if let Some(u) = &self.user {
            let dir = layout.stage_dir(3).join("users");
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for a in u.users.values() {
                user_pack(a).save(&layout.user_pack(&a.user_id))?;
            }
            super::train::write_loss_csv(&u.losses, &layout.losses(3))?;
            write_json(&layout.receipt(3), &u.receipt)?;
        }
        Ok(())
    }

    /// Reads whatever stages exist under `layout`, stopping at the first
    /// missing receipt.
    pub fn load(config: RunConfig, base: BackboneWeights, layout: &Layout) -> Result<Self> {
        let mut state = PipelineState {
            config,
            base,
            population: None,
            group: None,
            user: None,
        };
        if !layout.receipt(1).exists() {
            return Ok(state);
        }
        let receipt: PopulationReceipt = read_json(&layout.receipt(1))?;
        let adapters = adapters_from_pack(&TensorPack::load(&layout.population_adapters())?)?
            .into_iter()
            .map(|r| r.adapter)
            .collect();
        state.population = Some(PopulationState {
            adapters,
            merged: BackboneWeights::load(&layout.merged(1))?,
            receipt,
            losses: read_loss_csv(&layout.losses(1))?,
        });
        if !layout.receipt(2).exists() {
            return Ok(state);
        }
        let receipt: GroupReceipt = read_json(&layout.receipt(2))?;
        state.group = Some(GroupState {
            bank: ExpertBank::from_pack(&TensorPack::load(&layout.bank())?)?,
            table: UserEmbeddingTable::from_pack(&TensorPack::load(&layout.embeddings())?)?,
            trace: RouterTrace::read_csv(&layout.trace(), state.config.trace_decay)?,
            merged: BackboneWeights::load(&layout.merged(2))?,
            receipt,
            losses: read_loss_csv(&layout.losses(2))?,
        });
        if !layout.receipt(3).exists() {
            return Ok(state);
        }
        let receipt: UserReceipt = read_json(&layout.receipt(3))?;
        let losses = read_loss_csv(&layout.losses(3))?;
        let mut users = BTreeMap::new();
        for u in receipt.users.keys() {
            let steps = losses.iter().filter(|r| &r.user_id == u).count();
            users.insert(
                u.clone(),
                user_from_pack(u, steps, &TensorPack::load(&layout.user_pack(u))?)?,
            );
        }
        state.user = Some(UserState { users, receipt, losses });
        Ok(state)
    }
}
