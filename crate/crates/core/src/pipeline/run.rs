use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Ablation, DataSource, RunConfig};
use super::state::{
    frozen_checksums, read_json, write_json, GroupState, Layout, PipelineState, PopulationState, UserState, MERGE_RULE,
};
use super::train::{
    encode_entry, train_group, train_joint, train_population, train_users, Example, GroupOptions, UserOptions,
};
use crate::backbone::tokenizer::Encoded;
use crate::backbone::BackboneWeights;
use crate::data::{export_jsonl, generate, hold_out_last, load_jsonl, Corpus, Entry, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_stages, router_diagnostics, DiagnosticsReport, MetricReport};

/// Corpus, split, and the encoded views each stage trains on.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub corpus: Corpus,
    pub split: Split,
    /// Every history item of every training user.
    pub train: Vec<Example>,
    /// Each test user's history minus the held-out item.
    pub test_histories: Vec<(String, Vec<Encoded>)>,
    pub held_out: Vec<(String, Entry)>,
}

/// Builds or reads the corpus named by the config.
pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = match &cfg.data {
        DataSource::Synthetic(spec) => generate(spec)?,
        DataSource::Jsonl { path, labels, .. } => {
            let report = load_jsonl(path)?;
            if !report.errors.is_empty() {
                let lines: Vec<String> = report
                    .errors
                    .iter()
                    .take(5)
                    .map(|e| format!("line {}: {}", e.line, e.message))
                    .collect();
                return Err(Error::Data(format!(
                    "{}: {} malformed lines ({})",
                    path.display(),
                    report.errors.len(),
                    lines.join("; ")
                )));
            }
            let mut corpus = report.corpus;
            if let Some(l) = labels {
                corpus.attach_labels(&Corpus::read_labels_csv(l)?)?;
            }
            corpus
        }
    };
    if corpus.is_empty() {
        return Err(Error::Config("corpus is empty".into()));
    }
    corpus.validate()?;
    Ok(corpus)
}

pub fn prepare(cfg: &RunConfig, corpus: Corpus) -> Result<Prepared> {
    let split = Split::new(&corpus, cfg.test_fraction, cfg.seed)?;
    let mut train = Vec::new();
    for id in &split.train_users {
        let u = corpus.user(id).expect("split users come from the corpus");
        train.extend(u.history.iter().map(|e| Example {
            user: id.clone(),
            encoded: encode_entry(e, cfg.max_len),
        }));
    }
    let mut test_histories = Vec::new();
    let mut held_out = Vec::new();
    for id in &split.test_users {
        let u = corpus.user(id).expect("split users come from the corpus");
        let (rest, last) = hold_out_last(u)?;
        test_histories.push((id.clone(), rest.iter().map(|e| encode_entry(e, cfg.max_len)).collect()));
        held_out.push((id.clone(), last.clone()));
    }
    Ok(Prepared {
        corpus,
        split,
        train,
        test_histories,
        held_out,
    })
}

/// The frozen starting model.
pub fn base_weights(cfg: &RunConfig) -> Result<BackboneWeights> {
    match &cfg.base_weights {
        None => BackboneWeights::init(&cfg.model),
        Some(p) => {
            let w = BackboneWeights::load(p)?;
            if w.config != cfg.model {
                return Err(Error::Config(format!(
                    "base_weights {} were built for {:?}, config.model is {:?}",
                    p.display(),
                    w.config,
                    cfg.model
                )));
            }
            Ok(w)
        }
    }
}

fn group_options(cfg: &RunConfig) -> GroupOptions {
    GroupOptions {
        lambda_c: cfg.lambda_c(),
        user_aware: !cfg.has(Ablation::RegularRouter),
        cosine: cfg.cosine_constraint,
    }
}

/// Runs one stage on top of `state`, discarding any later stages.
pub fn run_stage(state: &mut PipelineState, data: &Prepared, stage: u8) -> Result<()> {
    let cfg = state.config.clone();
    match stage {
        1 => {
            let out = train_population(&state.base, &data.train, &cfg.stage1, cfg.stage_seed(1))?;
            state.population = Some(PopulationState::from_output(&state.base, out));
            state.group = None;
            state.user = None;
        }
        2 => {
            let pop = state.population()?;
            let before = pop.merged.checksum();
            let opts = group_options(&cfg);
            if cfg.has(Ablation::EndToEnd) {
                let (group, users) = train_joint(
                    &pop.merged,
                    &data.train,
                    &data.test_histories,
                    &cfg.stage2,
                    &cfg.stage3,
                    opts,
                    cfg.trace_decay,
                    cfg.stage_seed(2),
                )?;
                let after = pop.merged.checksum();
                let g = GroupState::from_output(before, after, opts.lambda_c, true, group);
                let frozen = frozen_checksums(&g);
                state.user = Some(UserState::from_output(frozen.clone(), frozen, users));
                state.group = Some(g);
            } else {
                let out = train_group(
                    &pop.merged,
                    &data.train,
                    &cfg.stage2,
                    opts,
                    cfg.trace_decay,
                    cfg.stage_seed(2),
                )?;
                let after = pop.merged.checksum();
                state.group = Some(GroupState::from_output(before, after, opts.lambda_c, false, out));
                state.user = None;
            }
        }
        3 => {
            let g = state.group_state()?;
            if g.receipt.joint {
                // The joint variant trains user adapters together with the group stage.
                return state.user_state().map(|_| ());
            }
            let before = frozen_checksums(g);
            let opts = UserOptions {
                term: cfg.group_term(),
                lora_aware: !cfg.has(Ablation::NoLoraAwareRouter),
            };
            let out = train_users(
                &g.merged,
                &g.bank,
                &data.test_histories,
                &cfg.stage3,
                opts,
                cfg.stage_seed(3),
                cfg.jobs,
            )?;
            let after = frozen_checksums(g);
            if before != after {
                return Err(Error::Contract(
                    "frozen group artifacts changed during the user stage".into(),
                ));
            }
            state.user = Some(UserState::from_output(before, after, out));
        }
        _ => return Err(Error::Config(format!("no stage {stage}; valid stages are 1, 2, 3"))),
    }
    Ok(())
}

/// Trains stages 1 to 3 in memory and evaluates them.
pub fn run_pipeline(cfg: &RunConfig, corpus: Corpus) -> Result<(PipelineState, Prepared, MetricReport)> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let data = prepare(&cfg, corpus)?;
    let base = base_weights(&cfg)?;
    let mut state = PipelineState::new(cfg, base);
    for stage in 1..=3 {
        run_stage(&mut state, &data, stage)?;
    }
    let report = evaluate_stages(&state, &data.held_out)?;
    Ok((state, data, report))
}

/// Router diagnostics of the group stage. Planted labels, when the corpus
/// has them, are restricted to the users the router was trained on.
pub fn diagnose(state: &PipelineState, corpus: &Corpus) -> Result<DiagnosticsReport> {
    let g = state.group_state()?;
    let seen: BTreeSet<&str> = g.trace.log.iter().map(|e| e.user_id.as_str()).collect();
    let labels = corpus.labels().map(|l| {
        l.into_iter()
            .filter(|(u, _)| seen.contains(u.as_str()))
            .collect::<Vec<_>>()
    });
    router_diagnostics(&g.trace, Some(&g.table), labels.as_deref(), state.config.seed)
}

/// One row of an ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub ablations: Vec<Ablation>,
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// `name, stage, metric, value` for every row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["name", "stage", "metric", "value"])?;
        for row in &self.rows {
            for s in &row.report.stages {
                for (m, v) in &s.metrics {
                    w.write_record([row.name.clone(), s.stage.to_string(), m.clone(), format!("{v:?}")])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// The full method next to each named ablation, same seeds and data.
pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus, ablations: &[Ablation]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let full = cfg.with_ablations([]);
    let (_, _, report) = run_pipeline(&full, corpus.clone())?;
    rows.push(AblationRow {
        name: "full".into(),
        ablations: Vec::new(),
        report,
    });
    for &a in ablations {
        let (_, _, report) = run_pipeline(&cfg.with_ablations([a]), corpus.clone())?;
        rows.push(AblationRow {
            name: a.name().into(),
            ablations: vec![a],
            report,
        });
    }
    Ok(AblationReport { rows })
}

/// Reproducibility record of a run directory. Wall-clock times live in
/// `timings.json` so that this file is identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_checksum: String,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub ablations: Vec<Ablation>,
    pub lambda_c: f64,
    pub merge_rule: String,
    pub completed_stages: Vec<u8>,
    /// SHA-256 of every artifact file, keyed by path relative to the run
    /// directory.
    pub artifacts: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walk stays under root");
            let rel = rel.to_string_lossy().replace('\\', "/");
            if rel == "run_manifest.json" || rel == "timings.json" {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(())
}

pub fn config_checksum(cfg: &RunConfig) -> Result<String> {
    Ok(sha256_hex(cfg.to_json()?.as_bytes()))
}

impl RunManifest {
    pub fn build(state: &PipelineState, layout: &Layout) -> Result<Self> {
        let cfg = &state.config;
        let mut artifacts = BTreeMap::new();
        collect_files(&layout.root, &layout.root, &mut artifacts)?;
        Ok(RunManifest {
            config: cfg.clone(),
            config_checksum: config_checksum(cfg)?,
            seed: cfg.seed,
            stage_seeds: (1..=3).map(|s| (format!("stage{s}"), cfg.stage_seed(s))).collect(),
            ablations: cfg.ablations.iter().copied().collect(),
            lambda_c: cfg.lambda_c(),
            merge_rule: MERGE_RULE.to_string(),
            completed_stages: state.completed_stages(),
            artifacts,
        })
    }
}

/// Which stages a directory run should execute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelect {
    One(u8),
    All,
}

/// Prepares data, runs the selected stages against the artifacts already in
/// `layout`, and writes artifacts, reports and the manifest.
pub fn run_in_dir(cfg: &RunConfig, layout: &Layout, select: StageSelect) -> Result<PipelineState> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let stages: Vec<u8> = match select {
        StageSelect::All => vec![1, 2, 3],
        StageSelect::One(s @ 1..=3) => vec![s],
        StageSelect::One(s) => return Err(Error::Config(format!("no stage {s}; valid stages are 1, 2, 3"))),
    };
    let first = stages[0];
    if first > 1 {
        let stored: RunConfig = read_json(&layout.config())
            .map_err(|_| Error::Missing(format!("{} (run stage 1 first)", layout.receipt(first - 1).display())))?;
        if stored != cfg {
            return Err(Error::Config(format!(
                "{} was written by a different config; rerun from stage 1",
                layout.root.display()
            )));
        }
        if !layout.receipt(first - 1).exists() {
            return Err(Error::Missing(format!(
                "{} (run stage {} first)",
                layout.receipt(first - 1).display(),
                first - 1
            )));
        }
    }
    let data = prepare(&cfg, load_corpus(&cfg)?)?;
    let base = base_weights(&cfg)?;
    let mut state = if first == 1 {
        PipelineState::new(cfg.clone(), base)
    } else {
        let mut s = PipelineState::load(cfg.clone(), base, layout)?;
        // Later stages are retrained from scratch.
        if first <= 2 {
            s.group = None;
        }
        s.user = None;
        s
    };
    for s in first..=3 {
        let dir = layout.stage_dir(s);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    for p in [layout.reports(), layout.diagnostics()] {
        if p.exists() {
            std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    std::fs::create_dir_all(&layout.root).map_err(|e| Error::io(&layout.root, e))?;
    std::fs::write(layout.config(), cfg.to_json()?).map_err(|e| Error::io(&layout.config(), e))?;
    write_data(&data, layout)?;

    let mut timings: BTreeMap<String, f64> = read_json(&layout.timings()).unwrap_or_default();
    for &s in &stages {
        let t0 = Instant::now();
        run_stage(&mut state, &data, s)?;
        timings.insert(format!("stage{s}"), t0.elapsed().as_secs_f64());
    }
    state.save(layout)?;
    write_json(&layout.timings(), &timings)?;
    write_json(&layout.manifest(), &RunManifest::build(&state, layout)?)?;
    Ok(state)
}

fn write_data(data: &Prepared, layout: &Layout) -> Result<()> {
    let dir = layout.root.join("data");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    export_jsonl(&data.corpus, &layout.corpus())?;
    if data.corpus.labels().is_some() {
        data.corpus.write_labels_csv(&layout.labels())?;
    }
    write_json(&layout.split(), &data.split)
}

/// Loads a run directory written by [`run_in_dir`].
pub fn open_run(layout: &Layout) -> Result<(PipelineState, Prepared)> {
    if !layout.config().exists() {
        return Err(Error::Missing(format!(
            "{} (no run in this directory)",
            layout.config().display()
        )));
    }
    let cfg: RunConfig = read_json(&layout.config())?;
    let base = base_weights(&cfg)?;
    let corpus = load_jsonl(&layout.corpus())?;
    let mut corpus = corpus.corpus;
    if layout.labels().exists() {
        corpus.attach_labels(&Corpus::read_labels_csv(&layout.labels())?)?;
    }
    let data = prepare(&cfg, corpus)?;
    let state = PipelineState::load(cfg, base, layout)?;
    Ok((state, data))
}

/// Rewrites the manifest after reports were added to a run directory.
pub fn refresh_manifest(state: &PipelineState, layout: &Layout) -> Result<()> {
    write_json(&layout.manifest(), &RunManifest::build(state, layout)?)
}
