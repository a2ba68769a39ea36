use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::ModelConfig;
use crate::data::{SyntheticSpec, TaskKind};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;
use crate::routing::GroupTerm;

/// Variants of the full method that switch one component off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Ablation {
    /// Group router without the user term: `ω = softmax(x·M_g)`.
    RegularRouter,
    /// `λ_c = 0`.
    NoConstraintLoss,
    /// User-stage expert weights from the group router instead of `W_l`.
    NoLoraAwareRouter,
    /// Experts, routers, embeddings and user adapters trained jointly on the
    /// population model, with no group merge.
    EndToEnd,
    /// Explicit name for the default recentred group term.
    NoGroupDoubleCount,
    /// Adds `Σ βₘ Δₘ` on top of the group-merged base.
    GroupDoubleCount,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::RegularRouter,
        Ablation::NoConstraintLoss,
        Ablation::NoLoraAwareRouter,
        Ablation::EndToEnd,
        Ablation::NoGroupDoubleCount,
        Ablation::GroupDoubleCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::RegularRouter => "regular_router",
            Ablation::NoConstraintLoss => "no_constraint_loss",
            Ablation::NoLoraAwareRouter => "no_lora_aware_router",
            Ablation::EndToEnd => "end_to_end",
            Ablation::NoGroupDoubleCount => "no_group_double_count",
            Ablation::GroupDoubleCount => "group_double_count",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
            Error::Config(format!("unknown ablation `{s}`; valid names: {}", valid.join(", ")))
        })
    }
}

impl TryFrom<String> for Ablation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.name().to_string()
    }
}

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub lr: f64,
    /// Zero is allowed and leaves the stage an exact no-op.
    pub epochs: usize,
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Number of experts; stage 2 only.
    pub k: Option<usize>,
    /// Constraint-loss weight; stage 2 only.
    pub lambda_c: Option<f64>,
    /// Filled from the run seed when absent.
    pub seed: Option<u64>,
}

impl StageConfig {
    pub fn population() -> Self {
        StageConfig {
            stage: 1,
            lr: 3e-3,
            epochs: 3,
            r: 8,
            alpha: 16.0,
            dropout: 0.0,
            batch_size: 2,
            weight_decay: 0.0,
            k: None,
            lambda_c: None,
            seed: None,
        }
    }

    pub fn group() -> Self {
        StageConfig {
            stage: 2,
            lr: 3e-3,
            epochs: 8,
            r: 4,
            alpha: 8.0,
            dropout: 0.05,
            batch_size: 1,
            k: Some(3),
            lambda_c: Some(0.1),
            ..StageConfig::population()
        }
    }

    pub fn user() -> Self {
        StageConfig {
            stage: 3,
            lr: 3e-3,
            epochs: 20,
            k: None,
            lambda_c: None,
            ..StageConfig::group()
        }
    }

    fn validate(&self, expected: u8) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("stage{expected}.{field}: {why}")));
        if self.stage != expected {
            return bad("stage", format!("is {} in the stage{expected} section", self.stage));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if self.r == 0 {
            return bad("r", "must be at least 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad("alpha", format!("must be positive, got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must lie in [0, 1), got {}", self.dropout));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(
                "weight_decay",
                format!("must be non-negative, got {}", self.weight_decay),
            );
        }
        match (expected, self.k, self.lambda_c) {
            (2, Some(k), Some(l)) => {
                if k < 2 {
                    return bad("k", format!("needs at least 2 experts, got {k}"));
                }
                if !(l.is_finite() && l >= 0.0) {
                    return bad("lambda_c", format!("must be non-negative, got {l}"));
                }
            }
            (2, None, _) => return bad("k", "is required".into()),
            (2, _, None) => return bad("lambda_c", "is required".into()),
            (_, Some(_), _) => return bad("k", "only applies to stage 2".into()),
            (_, _, Some(_)) => return bad("lambda_c", "only applies to stage 2".into()),
            _ => {}
        }
        Ok(())
    }
}

/// Where the corpus comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Jsonl {
        path: PathBuf,
        labels: Option<PathBuf>,
        task: TaskKind,
    },
}

impl DataSource {
    pub fn task(&self) -> TaskKind {
        match self {
            DataSource::Synthetic(s) => s.task,
            DataSource::Jsonl { task, .. } => *task,
        }
    }
}

/// A complete, resolved run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// Pack holding pretrained backbone weights; random init from
    /// `model` when absent.
    pub base_weights: Option<PathBuf>,
    pub data: DataSource,
    pub test_fraction: f64,
    /// Token cap per training sequence.
    pub max_len: usize,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub trace_decay: f64,
    /// Normalize constraint-loss terms to cosine similarities.
    pub cosine_constraint: bool,
    pub ablations: BTreeSet<Ablation>,
    /// Worker threads for the user stage.
    pub jobs: usize,
}

/// Stage seeds derived from the run seed.
const SEED_STAGE: u64 = 0x5747;

impl RunConfig {
    pub fn new(seed: u64, data: DataSource) -> Self {
        RunConfig {
            seed,
            model: ModelConfig::default(),
            base_weights: None,
            data,
            test_fraction: 0.25,
            max_len: 64,
            stage1: StageConfig::population(),
            stage2: StageConfig::group(),
            stage3: StageConfig::user(),
            trace_decay: 0.9,
            cosine_constraint: false,
            ablations: BTreeSet::new(),
            jobs: 1,
        }
    }

    /// Parses a config file. Omitted fields take their defaults, nested
    /// sections are merged field by field, and `seed` is mandatory.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let obj = user
            .as_object()
            .ok_or_else(|| Error::Config("config: top level must be an object".into()))?;
        let seed = obj
            .get("seed")
            .ok_or_else(|| Error::Config("config.seed is required".into()))?
            .as_u64()
            .ok_or_else(|| Error::Config("config.seed must be a non-negative integer".into()))?;
        let defaults = RunConfig::new(seed, DataSource::Synthetic(SyntheticSpec::default()));
        let mut merged = serde_json::to_value(&defaults)?;
        merge_json(&mut merged, &user);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test_fraction must lie in [0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.max_len < 4 || self.max_len > self.model.max_seq_len + 1 {
            return Err(Error::Config(format!(
                "max_len must lie in 4..={} (model.max_seq_len + 1), got {}",
                self.model.max_seq_len + 1,
                self.max_len
            )));
        }
        self.stage1.validate(1)?;
        self.stage2.validate(2)?;
        self.stage3.validate(3)?;
        for s in [&self.stage2, &self.stage3] {
            let limit = self.model.d_model.min(self.model.d_ff);
            if s.r > limit {
                return Err(Error::Config(format!("stage{}.r: {} exceeds {limit}", s.stage, s.r)));
            }
        }
        if self.stage1.r > self.model.d_model {
            return Err(Error::Config(format!(
                "stage1.r: {} exceeds d_model {}",
                self.stage1.r, self.model.d_model
            )));
        }
        if !(self.trace_decay > 0.0 && self.trace_decay < 1.0) {
            return Err(Error::Config(format!(
                "trace_decay must lie in (0, 1), got {}",
                self.trace_decay
            )));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        let has = |a| self.ablations.contains(&a);
        if has(Ablation::GroupDoubleCount) && has(Ablation::NoGroupDoubleCount) {
            return Err(Error::Config(
                "ablations group_double_count and no_group_double_count contradict each other".into(),
            ));
        }
        if has(Ablation::EndToEnd) && (has(Ablation::NoLoraAwareRouter) || has(Ablation::GroupDoubleCount)) {
            return Err(Error::Config(
                "end_to_end has no user-stage router; it cannot be combined with no_lora_aware_router or group_double_count"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Copy with every optional field filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        for (i, s) in [&mut c.stage1, &mut c.stage2, &mut c.stage3].into_iter().enumerate() {
            s.seed
                .get_or_insert(derive_seed(self.seed, &[SEED_STAGE, i as u64 + 1]));
        }
        c
    }

    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn k(&self) -> usize {
        self.stage2.k.unwrap_or(2)
    }

    /// Constraint weight after ablations.
    pub fn lambda_c(&self) -> f64 {
        if self.has(Ablation::NoConstraintLoss) {
            0.0
        } else {
            self.stage2.lambda_c.unwrap_or(0.0)
        }
    }

    pub fn group_term(&self) -> GroupTerm {
        if self.has(Ablation::GroupDoubleCount) {
            GroupTerm::AsWritten
        } else {
            GroupTerm::Recentered
        }
    }

    pub fn stage_seed(&self, stage: u8) -> u64 {
        let s = match stage {
            1 => &self.stage1,
            2 => &self.stage2,
            _ => &self.stage3,
        };
        s.seed
            .unwrap_or_else(|| derive_seed(self.seed, &[SEED_STAGE, stage as u64]))
    }

    pub fn with_ablations(&self, ablations: impl IntoIterator<Item = Ablation>) -> Self {
        RunConfig {
            ablations: ablations.into_iter().collect(),
            ..self.clone()
        }
    }
}

/// Recursively overlays `over` onto `base`. The externally tagged `data`
/// enum is replaced wholesale when the variant changes.
fn merge_json(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (key, v) in o {
                match b.get_mut(key) {
                    Some(slot) if slot.is_object() && v.is_object() && same_variant(key, slot, v) => {
                        merge_json(slot, v)
                    }
                    _ => {
                        b.insert(key.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn same_variant(key: &str, base: &Value, over: &Value) -> bool {
    if key != "data" {
        return true;
    }
    let first = |v: &Value| v.as_object().and_then(|m| m.keys().next().cloned());
    first(base) == first(over)
}
