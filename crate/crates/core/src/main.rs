use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use relu_dynamics::cli::{self, ExperimentConfig, SweepSpec};
use relu_dynamics::Error;

#[derive(Parser)]
#[command(name = "reludyn", version, about = "Two-layer ReLU training dynamics with bound certificates")]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunOpts {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to runs/<config stem>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate or load a dataset and export it as CSV plus a JSON sidecar.
    GenData(RunOpts),
    /// Train and certify one experiment.
    Train(RunOpts),
    /// Re-run a stored run from its manifest and compare digests.
    Verify {
        /// Run directory or manifest.json.
        #[arg(long)]
        config: PathBuf,
        /// Where to write the re-run; nothing is written when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cross product of a sweep spec.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Teacher-student population-loss experiment.
    Prm(RunOpts),
    /// Print the certificate table of a run or the aggregate of a sweep.
    Report {
        /// Run or sweep directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(opts: &RunOpts) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&opts.config)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let out = opts.out.clone().unwrap_or_else(|| cli::default_out(&opts.config));
    Ok((cfg, out))
}

fn report_run(o: &cli::ExperimentOutcome, out: &Path) -> bool {
    let s = &o.summary;
    println!("{}", o.certificates.summary_table());
    for note in &s.notes {
        println!("note: {note}");
    }
    println!(
        "wrote {} ({} certificate failures{})",
        out.display(),
        s.certificates_failed,
        if s.aborted { ", run aborted" } else { "" }
    );
    !s.failed
}

fn run(args: Args) -> anyhow::Result<bool> {
    match args.cmd {
        Cmd::GenData(opts) => {
            let (cfg, out) = load(&opts)?;
            let side = cli::cmd_gen_data(&cfg, &out)?;
            println!("wrote {} (n={}, d={}, digest {})", out.display(), side.n, side.d, side.digest);
            Ok(true)
        }
        Cmd::Train(opts) => {
            let (cfg, out) = load(&opts)?;
            let o = cli::cmd_train(&cfg, &out)?;
            Ok(report_run(&o, &out))
        }
        Cmd::Prm(opts) => {
            let (cfg, out) = load(&opts)?;
            let o = cli::cmd_prm(&cfg, &out)?;
            Ok(report_run(&o, &out))
        }
        Cmd::Verify { config, out } => {
            let v = cli::cmd_verify(&config, out.as_deref())?;
            println!("steps digest {}", if v.steps_match { "matches" } else { "DIFFERS" });
            println!("certificates digest {}", if v.certificates_match { "matches" } else { "DIFFERS" });
            Ok(v.reproduced() && !v.outcome.failed())
        }
        Cmd::Sweep { config, out, jobs } => {
            let spec = SweepSpec::load(&config)?;
            let out = out.unwrap_or_else(|| cli::default_out(&config));
            let s = cli::cmd_sweep(&spec, &out, jobs).with_context(|| format!("sweep {}", config.display()))?;
            let failed = s.rows.iter().filter(|r| r.summary.failed).count();
            println!("{} runs, {failed} failed; aggregate in {}", s.rows.len(), out.join(cli::AGGREGATE_FILE).display());
            Ok(!s.failed)
        }
        Cmd::Report { out } => {
            print!("{}", cli::cmd_report(&out)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
