//! `plora`: generate corpora, train stages, evaluate and diagnose runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use progressive_lora::data::{export_jsonl, generate, hold_out_last, load_jsonl, SyntheticSpec};
use progressive_lora::eval::{evaluate_stages, MetricReport};
use progressive_lora::pipeline::{
    diagnose, open_run, refresh_manifest, run_in_dir, Ablation, DataSource, Layout, RunConfig, StageSelect,
};
use progressive_lora::{Error, Result};

#[derive(Parser)]
#[command(
    name = "plora",
    version,
    about = "Progressive (population, group, user) LoRA personalization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (corpus.jsonl and labels.csv).
    Gen {
        /// Synthetic spec as JSON; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage or all three into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Ablation to apply; repeatable. Replaces the config's list.
        #[arg(long = "ablation", value_name = "NAME")]
        ablations: Vec<String>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every completed stage and write reports/.
    Eval {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Score the last record of every user in this JSONL file instead
        /// of the run's own held-out split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write router diagnostics to diagnostics/.
    Diag {
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

impl StageArg {
    fn select(self) -> StageSelect {
        match self {
            StageArg::One => StageSelect::One(1),
            StageArg::Two => StageSelect::One(2),
            StageArg::Three => StageSelect::One(3),
            StageArg::All => StageSelect::All,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Missing(_) => 3,
        Error::Data(_) | Error::Format { .. } | Error::Json(_) | Error::Csv(_) => 4,
        _ => 1,
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Config(format!("{}: no such file", path.display())),
        _ => Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })
}

fn gen(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: SyntheticSpec = match spec {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| Error::Config(format!("spec: {e}")))?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    export_jsonl(&corpus, &out.join("corpus.jsonl"))?;
    corpus.write_labels_csv(&out.join("labels.csv"))?;
    println!(
        "wrote {} users, {} records to {}",
        corpus.users.len(),
        corpus.record_count(),
        out.display()
    );
    Ok(())
}

/// Loads a config and resolves JSONL paths relative to the config file.
fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_json(&read(path)?)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    if let DataSource::Jsonl { path: data, labels, .. } = &mut cfg.data {
        for p in std::iter::once(data).chain(labels.as_mut()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
            if !p.exists() {
                return Err(Error::Config(format!("data path {} does not exist", p.display())));
            }
        }
    }
    Ok(cfg)
}

fn train(
    config: &Path,
    stage: StageArg,
    ablations: &[String],
    jobs: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if !ablations.is_empty() {
        let parsed = ablations.iter().map(|a| a.parse()).collect::<Result<Vec<Ablation>>>()?;
        cfg = cfg.with_ablations(parsed);
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let layout = Layout::new(out);
    let state = run_in_dir(&cfg, &layout, stage.select())?;
    info!("completed stages {:?}", state.completed_stages());
    println!(
        "stages {:?} complete in {}",
        state.completed_stages(),
        layout.root.display()
    );
    Ok(())
}

fn print_report(report: &MetricReport) {
    for s in &report.stages {
        let cols: Vec<String> = s.metrics.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
        println!("stage {}: {}", s.stage, cols.join(", "));
    }
}

fn eval(out: &Path, data: Option<&Path>) -> Result<()> {
    let layout = Layout::new(out);
    let (state, prepared) = open_run(&layout)?;
    let held_out = match data {
        None => prepared.held_out,
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("{}: no such file", p.display())));
            }
            let loaded = load_jsonl(p)?;
            if let Some(first) = loaded.errors.first() {
                return Err(Error::Data(format!(
                    "{}: {} bad line(s), first at line {}: {}",
                    p.display(),
                    loaded.errors.len(),
                    first.line,
                    first.message
                )));
            }
            let mut pairs = Vec::new();
            for u in &loaded.corpus.users {
                let (_, last) = hold_out_last(u)?;
                pairs.push((u.user_id.clone(), last.clone()));
            }
            pairs
        }
    };
    let report = evaluate_stages(&state, &held_out)?;
    report.write(&layout.reports())?;
    refresh_manifest(&state, &layout)?;
    print_report(&report);
    Ok(())
}

fn diag(out: &Path) -> Result<()> {
    let layout = Layout::new(out);
    let (state, prepared) = open_run(&layout)?;
    let report = diagnose(&state, &prepared.corpus)?;
    let table = &state.group_state()?.table;
    report.write(&layout.diagnostics(), Some(table))?;
    refresh_manifest(&state, &layout)?;
    println!(
        "{} users, mean pairwise separation {:.4}",
        report.users.len(),
        report.separation_mean
    );
    if let Some(ari) = report.omega_ari {
        println!("router-weight clustering ARI {ari:.4}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen { spec, seed, out } => gen(spec.as_deref(), *seed, out),
        Command::Train {
            config,
            stage,
            ablations,
            jobs,
            seed,
            out,
        } => train(config, *stage, ablations, *jobs, *seed, out),
        Command::Eval { out, data } => eval(out, data.as_deref()),
        Command::Diag { out } => diag(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("plora: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
