//! Group experts and the routers that mix them.
//!
//! The group stage attaches `k` LoRA experts to every feed-forward projection
//! and mixes them per token with a router that sees both the token state and
//! a learned user embedding. The user stage adds one LoRA per user and a
//! router driven by that LoRA's own output.

pub mod graph;
mod hooks;
mod trace;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{adapters_from_pack, adapters_to_pack, AdapterRecord, LoraAdapter, LoraVars};
use crate::backbone::{ModelConfig, Projection, Site};
use crate::error::{Error, Result};
use crate::numerics::{checksum_all, derive_seed, Tape, Tensor, Var};
use crate::store::{PackEntry, TensorPack};

pub use graph::GroupTerm;
pub use hooks::{BetaSource, Stage2Hooks, Stage3Hooks, UserTerm};
pub use trace::{RouterTrace, TraceEntry};

/// Feed-forward attachment points of a model, layer-major.
pub fn ffn_sites(n_layers: usize) -> Vec<Site> {
    (0..n_layers)
        .flat_map(|l| Projection::FFN.into_iter().map(move |p| Site::new(l, p)))
        .collect()
}

pub(crate) fn projection_dims(cfg: &ModelConfig, proj: Projection) -> (usize, usize) {
    match proj {
        Projection::Gate | Projection::Up => (cfg.d_model, cfg.d_ff),
        Projection::Down => (cfg.d_ff, cfg.d_model),
        _ => (cfg.d_model, cfg.d_model),
    }
}

/// Hyperparameters shared by every adapter at one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraShape {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

/// `k` experts on each FFN projection plus the per-layer router matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub k: usize,
    pub sites: Vec<Site>,
    /// `experts[s][i]` is expert `i` at `sites[s]`.
    pub experts: Vec<Vec<LoraAdapter>>,
    /// Token-side router, `[d_model × k]` per layer.
    pub m_g: Vec<Tensor>,
    /// User-side router, `[d_user × k]` per layer.
    pub m_u: Vec<Tensor>,
}

/// Bank tensors recorded on a tape.
pub struct BankVars {
    pub experts: Vec<Vec<LoraVars>>,
    pub m_g: Vec<Var>,
    pub m_u: Vec<Var>,
}

impl BankVars {
    /// Same order as [`ExpertBank::params`].
    pub fn params(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self.experts.iter().flatten().flat_map(|v| [v.b, v.a]).collect();
        out.extend(&self.m_g);
        out.extend(&self.m_u);
        out
    }
}

impl ExpertBank {
    pub fn init(cfg: &ModelConfig, k: usize, shape: LoraShape, d_user: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("expert count k must be at least 2, got {k}")));
        }
        let sites = ffn_sites(cfg.n_layers);
        let mut experts = Vec::with_capacity(sites.len());
        for (s, site) in sites.iter().enumerate() {
            let (d_in, d_out) = projection_dims(cfg, site.proj);
            let row = (0..k)
                .map(|i| {
                    LoraAdapter::init(
                        d_in,
                        d_out,
                        shape.rank,
                        shape.alpha,
                        *site,
                        derive_seed(seed, &[1, s as u64, i as u64]),
                    )?
                    .with_dropout(shape.dropout)
                })
                .collect::<Result<Vec<_>>>()?;
            experts.push(row);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
        let m_g = (0..cfg.n_layers)
            .map(|_| Tensor::randn(&[cfg.d_model, k], 1.0 / (cfg.d_model as f64).sqrt(), &mut rng))
            .collect();
        let m_u = (0..cfg.n_layers)
            .map(|_| Tensor::randn(&[d_user, k], 1.0 / (d_user as f64).sqrt(), &mut rng))
            .collect();
        Ok(ExpertBank {
            k,
            sites,
            experts,
            m_g,
            m_u,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.m_g.len()
    }

    pub fn d_user(&self) -> usize {
        self.m_u[0].rows()
    }

    pub fn site_index(&self, site: Site) -> Option<usize> {
        self.sites.iter().position(|s| *s == site)
    }

    /// Expert factors (`B`, `A` per expert, site-major), then `m_g`, then `m_u`.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.experts.iter().flatten().flat_map(|a| [&a.b, &a.a]).collect();
        out.extend(&self.m_g);
        out.extend(&self.m_u);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self
            .experts
            .iter_mut()
            .flatten()
            .flat_map(|a| [&mut a.b, &mut a.a])
            .collect();
        out.extend(self.m_g.iter_mut());
        out.extend(self.m_u.iter_mut());
        out
    }

    pub fn register<'t>(&'t self, tape: &mut Tape<'t>, trainable: bool) -> BankVars {
        let reg = |tape: &mut Tape<'t>, t: &'t Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        BankVars {
            experts: self
                .experts
                .iter()
                .map(|row| row.iter().map(|a| a.register(tape, trainable)).collect())
                .collect(),
            m_g: self.m_g.iter().map(|t| reg(tape, t)).collect(),
            m_u: self.m_u.iter().map(|t| reg(tape, t)).collect(),
        }
    }

    pub fn checksum(&self) -> String {
        checksum_all(self.params())
    }

    /// Reorders experts and router columns by `perm` (new position `i` holds
    /// old expert `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.k).collect::<Vec<_>>() {
            return Err(Error::Contract(format!(
                "{perm:?} is not a permutation of 0..{}",
                self.k
            )));
        }
        let cols = |t: &Tensor| {
            let mut out = t.clone();
            for r in 0..t.rows() {
                for (i, &p) in perm.iter().enumerate() {
                    out.data_mut()[r * self.k + i] = t.at(r, p);
                }
            }
            out
        };
        Ok(ExpertBank {
            k: self.k,
            sites: self.sites.clone(),
            experts: self
                .experts
                .iter()
                .map(|row| perm.iter().map(|&p| row[p].clone()).collect())
                .collect(),
            m_g: self.m_g.iter().map(cols).collect(),
            m_u: self.m_u.iter().map(cols).collect(),
        })
    }

    pub fn to_pack(&self, pack: &mut TensorPack) {
        let records: Vec<AdapterRecord> = self
            .experts
            .iter()
            .flat_map(|row| {
                row.iter().enumerate().map(|(i, a)| AdapterRecord {
                    key: format!("expert.{i}.{}", a.target),
                    stage: "group".into(),
                    owner: Some(format!("expert{i}")),
                    adapter: a.clone(),
                })
            })
            .collect();
        adapters_to_pack(&records, pack);
        for (l, (g, u)) in self.m_g.iter().zip(&self.m_u).enumerate() {
            pack.push(
                PackEntry::new(format!("router.{l}.m_g"), g.clone())
                    .with("stage", "group")
                    .with("k", self.k),
            );
            pack.push(
                PackEntry::new(format!("router.{l}.m_u"), u.clone())
                    .with("stage", "group")
                    .with("k", self.k),
            );
        }
    }

    pub fn from_pack(pack: &TensorPack) -> Result<Self> {
        let mut by_site: BTreeMap<Site, BTreeMap<usize, LoraAdapter>> = BTreeMap::new();
        for r in adapters_from_pack(pack)? {
            let Some(rest) = r.key.strip_prefix("expert.") else {
                continue;
            };
            let idx: usize = rest
                .split('.')
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::format(&r.key, "expert key lacks an index"))?;
            by_site.entry(r.adapter.target).or_default().insert(idx, r.adapter);
        }
        let n_layers = pack.entries.iter().filter(|e| e.name.ends_with(".m_g")).count();
        let mut m_g = Vec::with_capacity(n_layers);
        let mut m_u = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            m_g.push(pack.tensor(&format!("router.{l}.m_g"))?);
            m_u.push(pack.tensor(&format!("router.{l}.m_u"))?);
        }
        let k = m_g
            .first()
            .map(Tensor::cols)
            .ok_or_else(|| Error::format("router.0.m_g", "entry not found"))?;
        let sites = ffn_sites(n_layers);
        let mut experts = Vec::with_capacity(sites.len());
        for site in &sites {
            let row = by_site
                .remove(site)
                .ok_or_else(|| Error::format(format!("expert.0.{site}.lora_b"), "entry not found"))?;
            if row.len() != k || row.keys().copied().ne(0..k) {
                return Err(Error::format(
                    format!("expert.0.{site}.lora_b"),
                    format!(
                        "expected {k} experts, found indices {:?}",
                        row.keys().collect::<Vec<_>>()
                    ),
                ));
            }
            experts.push(row.into_values().collect());
        }
        Ok(ExpertBank {
            k,
            sites,
            experts,
            m_g,
            m_u,
        })
    }
}

/// One learned vector per user per layer. Rows follow the sorted user list.
#[derive(Clone, Debug, PartialEq)]
pub struct UserEmbeddingTable {
    pub users: Vec<String>,
    /// `[n_users × d_user]` per layer.
    pub tables: Vec<Tensor>,
}

impl UserEmbeddingTable {
    pub fn init(users: &[String], n_layers: usize, d_user: usize, seed: u64) -> Result<Self> {
        let mut users = users.to_vec();
        users.sort();
        users.dedup();
        if users.is_empty() {
            return Err(Error::Data("user embedding table needs at least one user".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3]));
        let tables = (0..n_layers)
            .map(|_| Tensor::randn(&[users.len(), d_user], 1.0, &mut rng))
            .collect();
        Ok(UserEmbeddingTable { users, tables })
    }

    pub fn d_user(&self) -> usize {
        self.tables[0].cols()
    }

    pub fn index(&self, user: &str) -> Result<usize> {
        self.users
            .binary_search_by(|u| u.as_str().cmp(user))
            .map_err(|_| Error::Data(format!("user `{user}` has no embedding")))
    }

    pub fn embedding(&self, layer: usize, user: &str) -> Result<&[f64]> {
        Ok(self.tables[layer].row(self.index(user)?))
    }

    /// Mean of the user's vectors across layers.
    pub fn layer_average(&self, user: &str) -> Result<Vec<f64>> {
        let i = self.index(user)?;
        let mut out = vec![0.0; self.d_user()];
        for t in &self.tables {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v / self.tables.len() as f64;
            }
        }
        Ok(out)
    }

    pub fn checksum(&self) -> String {
        checksum_all(&self.tables)
    }

    pub fn to_pack(&self, pack: &mut TensorPack) {
        for (l, t) in self.tables.iter().enumerate() {
            let mut e = PackEntry::new(format!("user_embedding.{l}"), t.clone()).with("stage", "group");
            if l == 0 {
                for (i, u) in self.users.iter().enumerate() {
                    e = e.with(&format!("user.{i}"), u);
                }
            }
            pack.push(e);
        }
    }

    pub fn from_pack(pack: &TensorPack) -> Result<Self> {
        let first = pack.get("user_embedding.0")?;
        let n = first.tensor.rows();
        let users = (0..n)
            .map(|i| first.attr(&format!("user.{i}")).map(str::to_string))
            .collect::<Result<Vec<_>>>()?;
        if users.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format("user_embedding.0", "user ids are not sorted and unique"));
        }
        let n_layers = pack
            .entries
            .iter()
            .filter(|e| e.name.starts_with("user_embedding."))
            .count();
        let tables = (0..n_layers)
            .map(|l| pack.tensor(&format!("user_embedding.{l}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(UserEmbeddingTable { users, tables })
    }
}

/// Per-site matrices mapping a user adapter's output to expert logits.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAwareRouter {
    pub sites: Vec<Site>,
    /// `[d_out × k]` per site.
    pub w_l: Vec<Tensor>,
}

impl LoraAwareRouter {
    pub fn init(cfg: &ModelConfig, k: usize, seed: u64) -> Self {
        let sites = ffn_sites(cfg.n_layers);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
        let w_l = sites
            .iter()
            .map(|s| {
                let d_out = projection_dims(cfg, s.proj).1;
                Tensor::randn(&[d_out, k], 1.0 / (d_out as f64).sqrt(), &mut rng)
            })
            .collect();
        LoraAwareRouter { sites, w_l }
    }

    pub fn k(&self) -> usize {
        self.w_l[0].cols()
    }

    pub fn to_pack(&self, pack: &mut TensorPack, owner: &str) {
        for (s, t) in self.sites.iter().zip(&self.w_l) {
            pack.push(
                PackEntry::new(format!("w_l.{s}"), t.clone())
                    .with("stage", "user")
                    .with("owner", owner),
            );
        }
    }

    pub fn from_pack(pack: &TensorPack) -> Result<Self> {
        let mut sites = Vec::new();
        let mut w_l = Vec::new();
        for e in &pack.entries {
            if let Some(raw) = e.name.strip_prefix("w_l.") {
                sites.push(Site::parse(raw).ok_or_else(|| Error::format(&e.name, "bad site"))?);
                w_l.push(e.tensor.clone());
            }
        }
        if sites.is_empty() {
            return Err(Error::format("w_l", "no router entries"));
        }
        Ok(LoraAwareRouter { sites, w_l })
    }
}

pub use graph::{constraint_loss, lora_aware_route, moe_ffn_delta, stage3_ffn_delta, user_aware_route};
