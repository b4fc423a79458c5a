use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use iotflow_core::pipeline::{self, make_toy_corpus, PipelineConfig, Stage, ToySpec};
use iotflow_core::Error;
use tracing_subscriber::EnvFilter;

/// Learn per-device traffic models from captures and synthesize decoy traffic.
#[derive(Parser)]
#[command(name = "iotflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse captures and cut training windows.
    Ingest(RunArgs),
    /// Mine packet-level signatures and build the token table.
    MineSignatures(RunArgs),
    /// Fit durations, the autoencoder and the sequence generator.
    Train(RunArgs),
    /// Sample code sequences and reconstruct synthetic windows.
    Generate(RunArgs),
    /// Write synthetic windows as capture files.
    SynthPcap(RunArgs),
    /// Score real against synthetic windows with the adversary.
    Evaluate(RunArgs),
    /// Print the accuracy table of a finished run.
    Report {
        /// Output directory of a run.
        #[arg(long)]
        output: PathBuf,
    },
    /// Write the synthetic fixture corpus with planted signatures.
    MakeToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON toy spec; the built-in two-device spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Print the built-in spec as JSON and exit.
        #[arg(long)]
        print_spec: bool,
    },
    /// Run every stage.
    RunAll(RunArgs),
    /// Print the default configuration as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, env = "IOTFLOW_DATASET_ROOT")]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Restrict to these devices (repeatable).
    #[arg(long = "device")]
    devices: Vec<String>,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    synthetic_windows: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<PipelineConfig, Error> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(v) = &self.dataset_root {
            cfg.dataset_root = v.clone();
        }
        if let Some(v) = &self.output {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if !self.devices.is_empty() {
            cfg.devices = self.devices.clone();
        }
        if let Some(v) = self.windows {
            cfg.windows = v;
        }
        if let Some(v) = self.synthetic_windows {
            cfg.synthetic_windows = v;
        }
        Ok(cfg)
    }
}

/// 1 for anything wrong with the inputs, 2 for a failure inside a stage.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Stage { .. } => 2,
        _ => 1,
    }
}

fn run_stages(args: &RunArgs, last: Stage) -> Result<(), Error> {
    let cfg = args.config()?;
    let summary = pipeline::run_until(&cfg, last)?;
    for (device, stage) in &summary.executed {
        println!("ran      {}/{stage}", device.as_deref().unwrap_or("all"));
    }
    for (device, stage) in &summary.skipped {
        println!("skipped  {}/{stage}", device.as_deref().unwrap_or("all"));
    }
    if last == Stage::Evaluate {
        print!("{}", read_report(&cfg.output_dir)?);
    }
    Ok(())
}

fn read_report(output: &std::path::Path) -> Result<String, Error> {
    let path = output.join("report.txt");
    std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Ingest(a) => run_stages(&a, Stage::Ingest),
        Command::MineSignatures(a) => run_stages(&a, Stage::Signatures),
        Command::Train(a) => run_stages(&a, Stage::Seqgan),
        Command::Generate(a) => run_stages(&a, Stage::Reconstruct),
        Command::SynthPcap(a) => run_stages(&a, Stage::Synthesize),
        Command::Evaluate(a) | Command::RunAll(a) => run_stages(&a, Stage::Evaluate),
        Command::Report { output } => {
            print!("{}", read_report(&output)?);
            Ok(())
        }
        Command::MakeToyCorpus { out, seed, spec, print_spec } => {
            if print_spec {
                println!("{}", serde_json::to_string_pretty(&ToySpec::default())?);
                return Ok(());
            }
            let spec = match spec {
                Some(p) => iotflow_core::jsonl::read_json(&p)?,
                None => ToySpec::default(),
            };
            let truth = make_toy_corpus(&spec, seed, &out)?;
            println!(
                "wrote {} devices x {} captures to {} ({} planted signatures)",
                spec.devices.len(),
                spec.captures_per_device,
                out.display(),
                truth.signatures.len()
            );
            Ok(())
        }
        Command::DefaultConfig => {
            print!("{}", PipelineConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
