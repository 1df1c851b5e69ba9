use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use phenotyper_core::analysis::GraphFormat;
use phenotyper_core::pipeline::{report, run_pipeline, run_stage, PipelineConfig, Stage};
use phenotyper_core::tensor::TensorMode;

/// Temporal phenotyping from longitudinal coded-event records.
#[derive(Parser)]
#[command(name = "phenotyper", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort, or ingest one with --cohort.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Cohort file to ingest (.jsonl or .csv).
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Drop codes seen in at most this fraction of patients.
        #[arg(long)]
        min_prevalence: Option<f64>,
    },
    /// Propensity matching and the chi-square test.
    Match {
        #[command(flatten)]
        common: Common,
        /// Exposed pool (.jsonl or .csv); synthetic pools when omitted.
        #[arg(long, requires = "controls")]
        cases: Option<PathBuf>,
        #[arg(long, requires = "cases")]
        controls: Option<PathBuf>,
        /// Initial caliper in logit units.
        #[arg(long)]
        caliper: Option<f64>,
        /// Largest acceptable standardized bias, in percent.
        #[arg(long)]
        bias_budget: Option<f64>,
    },
    /// Train co-occurrence embeddings and the similarity matrix.
    Embed {
        #[command(flatten)]
        common: Common,
    },
    /// Build the patient transition tensor.
    Tensorize {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Drop transitions from an entity to itself.
        #[arg(long)]
        no_self_loops: bool,
    },
    /// Fit the factorization and project held-out patients.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Compute metrics, significance and stratification tables.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Write transition graphs for significant phenotypes.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Run every enabled stage into <out>/<config hash>.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a run directory.
    Report {
        dir: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Counts,
    Normalized,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FormatArg {
    Dot,
    Json,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        let h = &mut cfg.fit.hyper;
        if let Some(v) = self.rank {
            h.rank = v;
        }
        if let Some(v) = self.mu {
            h.mu = v;
        }
        if let Some(v) = self.lambda {
            h.lambda = v;
        }
        if let Some(v) = self.gamma {
            h.gamma = v;
        }
        if let Some(v) = self.max_iters {
            h.max_iters = v;
        }
        if let Some(v) = self.learning_rate {
            h.learning_rate = v;
        }
        if let Some(v) = self.restarts {
            h.restarts = v;
        }
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &PipelineConfig) -> PathBuf {
    cfg.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn single(cfg: &PipelineConfig, stage: Stage) -> Result<()> {
    let dir = out_dir(cfg);
    run_stage(cfg, stage, &dir).with_context(|| format!("stage {stage} in {}", dir.display()))?;
    println!("{stage}: artifacts in {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            cohort,
            min_prevalence,
        } => {
            let mut cfg = common.config()?;
            if cohort.is_some() {
                cfg.input.cohort = cohort;
            }
            if min_prevalence.is_some() {
                cfg.input.min_prevalence = min_prevalence;
            }
            single(&cfg, Stage::Synth)
        }
        Command::Match {
            common,
            cases,
            controls,
            caliper,
            bias_budget,
        } => {
            let mut cfg = common.config()?;
            if cases.is_some() {
                cfg.input.cases = cases;
                cfg.input.controls = controls;
            }
            if let Some(v) = caliper {
                cfg.matching.caliper = v;
            }
            if let Some(v) = bias_budget {
                cfg.matching.bias_budget = v;
            }
            single(&cfg, Stage::Match)
        }
        Command::Embed { common } => single(&common.config()?, Stage::Embed),
        Command::Tensorize {
            common,
            mode,
            no_self_loops,
        } => {
            let mut cfg = common.config()?;
            match mode {
                Some(ModeArg::Counts) => cfg.tensor.mode = TensorMode::Counts,
                Some(ModeArg::Normalized) => cfg.tensor.mode = TensorMode::PatientNormalized,
                None => {}
            }
            if no_self_loops {
                cfg.tensor.include_self_loops = false;
            }
            single(&cfg, Stage::Tensorize)
        }
        Command::Fit { common } => single(&common.config()?, Stage::Fit),
        Command::Evaluate { common } => single(&common.config()?, Stage::Evaluate),
        Command::Export { common, format, top_k } => {
            let mut cfg = common.config()?;
            match format {
                Some(FormatArg::Dot) => cfg.export.format = GraphFormat::Dot,
                Some(FormatArg::Json) => cfg.export.format = GraphFormat::Json,
                None => {}
            }
            if let Some(k) = top_k {
                cfg.export.edges.top_k = k;
            }
            single(&cfg, Stage::Export)
        }
        Command::Run { common } => {
            let cfg = common.config()?;
            let outcome = run_pipeline(&cfg, &out_dir(&cfg))?;
            println!("{}", outcome.dir.display());
            Ok(())
        }
        Command::Report { dir } => {
            print!("{}", report(Path::new(&dir))?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
