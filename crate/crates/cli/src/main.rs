use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hotlora_cli::commands;
use hotlora_cli::report::Report;
use hotlora_cli::settings::Settings;
use hotlora_cli::Result;
use hotlora_service::DEFAULT_ADDR;

#[derive(Parser)]
#[command(name = "hotlora", version, about = "Frozen backbone, per-task low-rank experts, hot-swap serving")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// key=value settings file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed (pretrain also uses it for backbone init)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for reports and artifacts
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Training regime: lora_expert, full_independent, full_joint, full_sequential
    #[arg(long)]
    mode: Option<String>,
    /// Routing miss policy: base_fallback or reject
    #[arg(long)]
    on_miss: Option<String>,
    /// Expert loader: disk or faulty
    #[arg(long)]
    loader: Option<String>,
}

impl Common {
    fn settings(&self) -> Result<Settings> {
        let mut pairs = Vec::new();
        if let Some(m) = &self.mode {
            pairs.push(("mode".to_string(), m.clone()));
        }
        if let Some(m) = &self.on_miss {
            pairs.push(("on_miss".to_string(), m.clone()));
        }
        if let Some(l) = &self.loader {
            pairs.push(("loader".to_string(), l.clone()));
        }
        Ok(Settings::from_file(self.config.as_deref())?.apply(&pairs)?.with_seed(self.seed))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a fresh backbone on the pretraining suite, freeze and save it
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Export a conflict suite as task files
    MakeSuite {
        #[command(flatten)]
        common: Common,
        /// Take the backbone shape from this checkpoint
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Train experts (or full baselines with --mode) for suite tasks
    TrainExpert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        /// Suite directory from make-suite; generated from settings if absent
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Task index, repeatable; all tasks if absent
        #[arg(long)]
        task: Vec<usize>,
    },
    /// Serve line-delimited JSON over TCP
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = DEFAULT_ADDR)]
        addr: String,
    },
    /// Experts vs independent and joint full fine-tuning on a conflict suite
    BenchInterference {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Regimes to compare, repeatable
        #[arg(long = "regime")]
        regimes: Vec<String>,
    },
    /// Sequential full fine-tuning vs sequential experts on one conflict pair
    BenchForgetting {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
    },
    /// Adapter byte accounting and projected library costs
    ReportStorage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Switch latency over a scripted instruction stream
    BenchLatency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn emit(r: Report, out: &std::path::Path) -> Result<()> {
    let (j, _) = r.write(out)?;
    print!("{}", r.to_text());
    eprintln!("report written to {}", j.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Pretrain { common } => emit(commands::pretrain(&common.settings()?, &common.out)?, &common.out),
        Cmd::MakeSuite { common, base } => {
            emit(commands::make_suite(&common.settings()?, base.as_deref(), &common.out)?, &common.out)
        }
        Cmd::TrainExpert { common, base, suite, task } => emit(
            commands::train_expert_cmd(&common.settings()?, &base, suite.as_deref(), &task, &common.out)?,
            &common.out,
        ),
        Cmd::Serve { common, base, manifest, addr } => commands::serve(&common.settings()?, &base, &manifest, &addr),
        Cmd::BenchInterference { common, base, suite, regimes } => emit(
            commands::bench_interference(&common.settings()?, &base, suite.as_deref(), &regimes)?,
            &common.out,
        ),
        Cmd::BenchForgetting { common, base } => {
            emit(commands::bench_forgetting(&common.settings()?, &base, &common.out)?, &common.out)
        }
        Cmd::ReportStorage { common, base, manifest } => {
            emit(commands::report_storage(&common.settings()?, &base, &manifest)?, &common.out)
        }
        Cmd::BenchLatency { common, base, manifest, iterations } => {
            let mut s = common.settings()?;
            if let Some(n) = iterations {
                s.iterations = n;
            }
            emit(commands::bench_latency(&s, &base, &manifest)?, &common.out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
