//! `ncv` — command-line front end for the nested cross-validation pipeline.
//!
//! Thin shell over `ncv-core`: every behavior here is reachable through the
//! library. Flags mirror config-file keys and override them. Exit codes:
//! 0 success, 2 configuration error, 3 data/state error, 4 leakage violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ncv_core::pipeline::{
    cmd_ablate, cmd_audit, cmd_report, cmd_run, cmd_synth, load_run_config, RunConfig,
};
use ncv_core::selection::AuditStatus;
use ncv_core::{AggRule, NcvError, Paradigm};

#[derive(Parser)]
#[command(
    name = "ncv",
    version,
    about = "Leakage-proof nested cross-validation for multichannel EEG classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write it as a loadable dataset.
    Synth {
        /// Synthesis spec (JSON); omit for the default cohort.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory for recordings, manifest, and ground truth.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the configured paradigm end to end and write results.
    Run(ConfigArgs),
    /// Re-aggregate a finished run under all six rules (no retraining).
    Ablate(ConfigArgs),
    /// Audit the configured paradigm's splits without training.
    Audit(ConfigArgs),
    /// Print a human-readable summary of an existing results file.
    Report(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (JSON). Flags below override its keys.
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest path(s); repeat or comma-separate for several.
    #[arg(long, value_delimiter = ',')]
    dataset: Option<Vec<PathBuf>>,
    /// Channel template file.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Split paradigm: stratified, no-stratification, or population-block.
    #[arg(long)]
    paradigm: Option<String>,
    /// Output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Outer fold count.
    #[arg(long)]
    outer_k: Option<usize>,
    /// Inner fold count.
    #[arg(long)]
    inner_k: Option<usize>,
    /// Channel budgets, comma-separated (e.g. --m 1,2,4).
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    /// Aggregation rules, comma-separated (e.g. --agg mean,median).
    #[arg(long, value_delimiter = ',')]
    agg: Option<Vec<String>>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Origin tag held out by population-block.
    #[arg(long)]
    block_origin: Option<String>,
    /// Spectrogram cache directory (overrides config and $NCV_CACHE_DIR).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Worker thread cap; results never depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, NcvError> {
        let mut cfg = load_run_config(&self.config)?;
        if let Some(dataset) = &self.dataset {
            cfg.dataset = dataset.clone();
        }
        if let Some(template) = &self.template {
            cfg.template = Some(template.clone());
        }
        if let Some(paradigm) = &self.paradigm {
            cfg.paradigm = paradigm.parse::<Paradigm>().map_err(NcvError::Config)?;
        }
        if let Some(out_dir) = &self.out_dir {
            cfg.out_dir = out_dir.clone();
        }
        if let Some(outer_k) = self.outer_k {
            cfg.outer_k = outer_k;
        }
        if let Some(inner_k) = self.inner_k {
            cfg.inner_k = inner_k;
        }
        if let Some(m) = &self.m {
            cfg.m_values = m.clone();
        }
        if let Some(agg) = &self.agg {
            cfg.rules = agg
                .iter()
                .map(|s| s.parse::<AggRule>().map_err(|e| NcvError::Config(e.to_string())))
                .collect::<Result<_, _>>()?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(origin) = &self.block_origin {
            cfg.block_origin = Some(origin.clone());
        }
        if let Some(cache_dir) = &self.cache_dir {
            cfg.cache_dir = Some(cache_dir.clone());
        }
        if let Some(workers) = self.workers {
            cfg.workers = Some(workers);
        }
        Ok(cfg)
    }
}

fn audit_line(status: &AuditStatus) -> String {
    match status {
        AuditStatus::Clean => "leakage: clean".to_string(),
        AuditStatus::IntentionalBaseline { findings } => {
            format!("leakage: intentional-baseline ({findings})")
        }
    }
}

fn run(cli: Cli) -> Result<i32, NcvError> {
    match cli.command {
        Command::Synth { spec, out } => {
            let artifacts = cmd_synth(spec.as_deref(), &out)?;
            println!(
                "wrote {} recordings; manifest {}",
                artifacts.n_recordings,
                artifacts.manifest_path.display()
            );
            println!("ground truth {}", artifacts.ground_truth_path.display());
            Ok(0)
        }
        Command::Run(args) => {
            let cfg = args.load()?;
            let artifacts = cmd_run(&cfg)?;
            println!("paradigm: {}, seed: {}", artifacts.run.paradigm, artifacts.run.seed);
            println!("{}", audit_line(&artifacts.run.audit));
            println!(
                "wrote {} and {}",
                artifacts.csv_path.display(),
                artifacts.json_path.display()
            );
            Ok(0)
        }
        Command::Ablate(args) => {
            let cfg = args.load()?;
            let artifacts = cmd_ablate(&cfg)?;
            println!(
                "wrote {} and {}",
                artifacts.csv_path.display(),
                artifacts.json_path.display()
            );
            Ok(0)
        }
        Command::Audit(args) => {
            let cfg = args.load()?;
            let summary = cmd_audit(&cfg)?;
            if summary.findings.is_clean() {
                println!(
                    "audit: clean ({} splits checked)",
                    summary.n_splits_checked
                );
            } else if summary.intentional {
                println!(
                    "audit: findings in an intentionally leaky baseline ({} splits checked)",
                    summary.n_splits_checked
                );
                println!("{}", summary.findings);
            } else {
                eprintln!("audit: LEAKAGE in a split that must be clean");
                eprintln!("{}", summary.findings);
            }
            Ok(summary.exit_code())
        }
        Command::Report(args) => {
            let cfg = args.load()?;
            print!("{}", cmd_report(&cfg)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(u8::try_from(code).unwrap_or(1)),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(u8::try_from(err.exit_code()).unwrap_or(1))
        }
    }
}
