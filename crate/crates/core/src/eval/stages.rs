use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, macro_f1, mae, rmse, rouge1, rouge_l};
use crate::backbone::tokenizer::{decode, encode_prompt};
use crate::backbone::{greedy_decode, WeightVars};
use crate::data::{Entry, TaskKind};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::pipeline::{config_checksum, encode_entry, example_ce, PipelineState};

pub const ROUGE_VARIANT: &str = "F-measure (beta = 1), lowercased whitespace tokens";
pub const F1_VARIANT: &str = "macro average over classes present in the references";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserScore {
    pub user_id: String,
    /// Mean next-token cross-entropy of the reference response.
    pub ce: f64,
    pub prediction: String,
    pub reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: u8,
    pub metrics: BTreeMap<String, f64>,
    pub users: Vec<UserScore>,
}

impl StageMetrics {
    pub fn ce(&self) -> f64 {
        self.metrics["ce"]
    }
}

/// Held-out scores for every completed stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: TaskKind,
    pub seed: u64,
    pub config_checksum: String,
    pub ablations: Vec<String>,
    pub rouge_variant: String,
    pub f1_variant: String,
    pub stages: Vec<StageMetrics>,
}

impl MetricReport {
    pub fn stage(&self, stage: u8) -> Option<&StageMetrics> {
        self.stages.iter().find(|s| s.stage == stage)
    }

    /// Writes `metrics.json`, `metrics.csv` (stage, metric, value) and
    /// `per_user.csv` (stage, user_id, ce, prediction, reference).
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("metrics.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&json, e))?;
        let path = dir.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["stage", "metric", "value"])?;
        for s in &self.stages {
            for (m, v) in &s.metrics {
                w.write_record([s.stage.to_string(), m.clone(), format!("{v:?}")])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("per_user.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["stage", "user_id", "ce", "prediction", "reference"])?;
        for s in &self.stages {
            for u in &s.users {
                w.write_record([
                    s.stage.to_string(),
                    u.user_id.clone(),
                    format!("{:?}", u.ce),
                    u.prediction.clone(),
                    u.reference.clone(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }
}

/// Leading rating digit of a response; `None` when there is none.
pub fn parse_rating(text: &str) -> Option<f64> {
    let c = text.trim_start().chars().next()?;
    c.to_digit(10).map(f64::from)
}

/// Predicted and reference labels or ratings; unparseable predicted
/// ratings score as the value farthest from the reference on the 1 to 5
/// scale.
fn task_metrics(task: TaskKind, users: &[UserScore]) -> Result<BTreeMap<String, f64>> {
    let mut m = BTreeMap::new();
    match task {
        TaskKind::Paraphrase => {
            let n = users.len() as f64;
            m.insert(
                "rouge1".into(),
                users.iter().map(|u| rouge1(&u.prediction, &u.reference)).sum::<f64>() / n,
            );
            m.insert(
                "rouge_l".into(),
                users.iter().map(|u| rouge_l(&u.prediction, &u.reference)).sum::<f64>() / n,
            );
        }
        TaskKind::Tagging => {
            let preds: Vec<&str> = users.iter().map(|u| u.prediction.trim()).collect();
            let golds: Vec<&str> = users.iter().map(|u| u.reference.trim()).collect();
            m.insert("accuracy".into(), accuracy(&preds, &golds)?);
            m.insert("macro_f1".into(), macro_f1(&preds, &golds)?);
        }
        TaskKind::Rating => {
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for u in users {
                let g = parse_rating(&u.reference).unwrap_or(3.0);
                let p = parse_rating(&u.prediction).unwrap_or(if g >= 3.0 { 1.0 } else { 5.0 });
                preds.push(p);
                golds.push(g);
            }
            m.insert("mae".into(), mae(&preds, &golds)?);
            m.insert("rmse".into(), rmse(&preds, &golds)?);
        }
    }
    Ok(m)
}

fn score_user(state: &PipelineState, stage: u8, user: &str, item: &Entry) -> Result<UserScore> {
    let cfg = &state.config;
    let weights = state.stage_weights(stage)?;
    let enc = encode_entry(item, cfg.max_len);
    let ce = {
        let mut tape = Tape::new();
        let vars = WeightVars::register(&mut tape, weights);
        let hooks = state.stage_hooks(&mut tape, stage, user)?;
        let loss = example_ce(&mut tape, weights, &vars, &enc, hooks)?;
        tape.value(loss).item()
    };
    let room = cfg.max_len / 2;
    let (query, reference) = item.parts();
    let prompt = encode_prompt(query.unwrap_or(""), cfg.max_len, room);
    let generated = greedy_decode(weights, &prompt, room, |tape| state.stage_hooks(tape, stage, user))?;
    Ok(UserScore {
        user_id: user.to_string(),
        ce,
        prediction: decode(&generated[prompt.len()..]),
        reference: reference.to_string(),
    })
}

/// Scores every completed stage on the held-out items.
///
/// Stages 1 and 2 are the static merged models; test users have no group
/// embedding, so the group stage is evaluated through its merged weights.
/// Stage 3 runs each user's adapters and router on the group model.
pub fn evaluate_stages(state: &PipelineState, held_out: &[(String, Entry)]) -> Result<MetricReport> {
    if held_out.is_empty() {
        return Err(Error::Contract("held-out set is empty".into()));
    }
    let stages = state.completed_stages();
    if stages.is_empty() {
        return Err(Error::Missing("stage 1 receipt (nothing to evaluate)".into()));
    }
    let task = state.config.data.task();
    let mut out = Vec::new();
    for stage in stages {
        let users = held_out
            .iter()
            .map(|(u, item)| score_user(state, stage, u, item))
            .collect::<Result<Vec<_>>>()?;
        let mut metrics = task_metrics(task, &users)?;
        metrics.insert(
            "ce".into(),
            users.iter().map(|u| u.ce).sum::<f64>() / users.len() as f64,
        );
        out.push(StageMetrics { stage, metrics, users });
    }
    Ok(MetricReport {
        task,
        seed: state.config.seed,
        config_checksum: config_checksum(&state.config)?,
        ablations: state.config.ablations.iter().map(|a| a.name().to_string()).collect(),
        rouge_variant: ROUGE_VARIANT.into(),
        f1_variant: F1_VARIANT.into(),
        stages: out,
    })
}
