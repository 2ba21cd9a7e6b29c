use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use partforge::commands::{cmd_curate, cmd_eval, cmd_sample, cmd_toygen, cmd_train};
use partforge::config::{CurateConfig, EvalConfig, RunConfig, SampleConfig, ToygenConfig, TrainConfig};
use partforge::{CliError, CliResult};

/// Compositional part-latent flow models at desk scale.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter a directory of GLTF/GLB assets into a JSONL manifest.
    Curate(Common),
    /// Generate a toy multi-part dataset archive.
    Toygen(Common),
    /// Train a denoiser on a toy archive.
    Train(Common),
    /// Sample part point sets from a checkpoint.
    Sample(Common),
    /// Score predicted parts against ground truth.
    Eval(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all cores when unset.
    #[arg(long)]
    threads: Option<usize>,
}

fn resolve<C: RunConfig>(c: &Common) -> CliResult<C> {
    let mut cfg = C::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: &Command) -> CliResult<()> {
    let common = match command {
        Command::Curate(c) | Command::Toygen(c) | Command::Train(c) | Command::Sample(c) | Command::Eval(c) => c,
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let out: &Path = &common.out;
    match command {
        Command::Curate(c) => {
            let s = cmd_curate(&resolve::<CurateConfig>(c)?, out)?;
            println!("{} assets: {} kept, rejected {:?}", s.total, s.kept, s.rejected);
        }
        Command::Toygen(c) => {
            let records = cmd_toygen(&resolve::<ToygenConfig>(c)?, out)?;
            let mut per_n = std::collections::BTreeMap::<usize, usize>::new();
            for r in &records {
                *per_n.entry(r.parts).or_default() += 1;
            }
            for (n, count) in per_n {
                println!("N={n}: {count} assets");
            }
            println!("total: {}", records.len());
        }
        Command::Train(c) => {
            let outcome = cmd_train(&resolve::<TrainConfig>(c)?, out)?;
            if let Some(last) = outcome.trace.last() {
                println!("step {} loss {}", last.step, last.loss);
            }
            println!("{}", outcome.checkpoint.display());
        }
        Command::Sample(c) => {
            let n = cmd_sample(&resolve::<SampleConfig>(c)?, out)?;
            println!("sampled {n} conditions");
        }
        Command::Eval(c) => {
            let r = cmd_eval(&resolve::<EvalConfig>(c)?, out)?;
            println!("CD {:.6}  F-Score {:.6}  IoU {:.6}  ({} assets)", r.mean.cd, r.mean.f_score, r.mean.iou, r.assets.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PARTFORGE_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
