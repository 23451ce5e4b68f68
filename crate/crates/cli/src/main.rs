//! Command-line front end: particle-method data generation, training,
//! sampling, evaluation and warm-started runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deepparticle::io::{self, RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "deepparticle", version, about = "Learn invariant measures with transport-trained networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// Overrides of the form `--section.key value` or `--section.key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the particle method for each configured κ and write samples and λ traces.
    IpmGenerate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a network on sample files, one file per parameter value.
    Train {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate samples from a trained network (`sample.eta`, `sample.count`, `sample.seed`).
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare two sample files and write metrics and histograms.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the particle method from network samples and from the uniform start.
    Warmstart {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::IpmGenerate { common, .. }
            | Command::Train { common, .. }
            | Command::Sample { common, .. }
            | Command::Eval { common, .. }
            | Command::Warmstart { common, .. } => common,
        }
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let overrides = RunConfig::parse_overrides(&common.overrides)?;
    let cfg = RunConfig::resolve(env_seed.as_deref(), common.config.as_deref(), &overrides)?;
    Ok(cfg)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let cfg = resolve(common)?;
    if common.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    match &cli.command {
        Command::IpmGenerate { out, .. } => {
            for g in io::cmd_ipm_generate(&cfg, out)? {
                println!(
                    "kappa={} lambda={} samples={} trace={}",
                    g.kappa,
                    g.lambda,
                    g.samples.display(),
                    g.trace.display()
                );
            }
        }
        Command::Train { data, out, resume, .. } => {
            let s = io::cmd_train(&cfg, data, out, resume.as_deref())?;
            let loss = s.final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}"));
            println!(
                "steps={} finished={} final_loss={loss} capped_preopts={} checkpoint={}",
                s.steps,
                s.finished,
                s.capped_preopts,
                s.checkpoint.display()
            );
        }
        Command::Sample { checkpoint, out, .. } => {
            ensure_parent(out)?;
            let f = io::cmd_sample(checkpoint, &cfg.sample.eta, cfg.sample.count, cfg.sample.seed, out)?;
            println!("wrote {} points to {}", f.points.len(), out.display());
        }
        Command::Eval {
            generated,
            reference,
            out,
            ..
        } => {
            ensure_parent(out)?;
            let m = io::cmd_eval(&cfg, generated, reference, out)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Warmstart { checkpoint, out, .. } => {
            ensure_parent(out)?;
            let s = io::cmd_warmstart(&cfg, checkpoint, out)?;
            let last = |v: &[f64]| v.last().copied().unwrap_or(f64::NAN);
            println!(
                "warm: lambda={} entry={}  cold: lambda={} entry={}",
                last(&s.lambda_warm),
                s.warm_entry,
                last(&s.lambda_cold),
                s.cold_entry
            );
            if s.cold_entry == 0 {
                bail!("empty λ trace; check warmstart.generations");
            }
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    run(Cli::parse())
}
