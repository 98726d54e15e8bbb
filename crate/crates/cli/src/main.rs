//! `mckean`: batch front-end over the estimators.
//!
//! Exit codes: 0 ok, 1 I/O failure, 2 config error, 3 numeric failure,
//! 4 integration-by-parts order cap exceeded.

mod commands;
mod config;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::commands::Table;
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "mckean", version, about = "Monte-Carlo estimators for McKean-Vlasov SDEs")]
struct Cli {
  #[command(subcommand)]
  command: Command,
  /// TOML run configuration.
  #[arg(long, global = true)]
  config: Option<PathBuf>,
  /// Overrides the seed in the config.
  #[arg(long, global = true)]
  seed: Option<u64>,
  /// Worker threads; defaults to the number of cores.
  #[arg(long, global = true)]
  threads: Option<usize>,
  /// Output directory.
  #[arg(long, global = true, default_value = ".")]
  out: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
  /// Particle paths and per-step moments.
  Simulate,
  /// Expectations and their x / measure derivatives.
  Estimate,
  /// Transition density on a z grid.
  Density,
  /// Residual of the backward equation.
  PdeCheck,
  /// Weight estimators against finite differences.
  Compare,
}

#[derive(Debug)]
pub enum CliError {
  Config(String),
  Core(mckean::Error),
  Io(io::Error),
}

impl From<mckean::Error> for CliError {
  fn from(e: mckean::Error) -> Self {
    CliError::Core(e)
  }
}

impl CliError {
  fn code(&self) -> u8 {
    match self {
      CliError::Io(_) => 1,
      CliError::Config(_) => 2,
      CliError::Core(mckean::Error::OrderExceeded { .. }) => 4,
      CliError::Core(e) if e.is_numeric() => 3,
      CliError::Core(_) => 2,
    }
  }

  fn message(&self) -> String {
    match self {
      CliError::Config(m) => m.clone(),
      CliError::Core(e) => e.to_string(),
      CliError::Io(e) => e.to_string(),
    }
  }
}

/// sha256 over the config bytes and the effective seed.
fn config_hash(bytes: &[u8], seed: u64) -> String {
  let mut h = Sha256::new();
  h.update(bytes);
  h.update(format!("\nseed={seed}\n").as_bytes());
  hex::encode(h.finalize())
}

/// Writes every table to a temporary sibling first and renames only once all
/// of them are on disk.
fn publish(out: &Path, hash: &str, tables: &[Table]) -> io::Result<()> {
  fs::create_dir_all(out)?;
  let mut staged = Vec::with_capacity(tables.len());
  for t in tables {
    let tmp = out.join(format!(".{}.partial", t.name));
    let res = fs::write(&tmp, format!("# config_hash={hash}\n{}", t.body));
    staged.push(tmp);
    if let Err(e) = res {
      staged.iter().for_each(|p| drop(fs::remove_file(p)));
      return Err(e);
    }
  }
  for (tmp, t) in staged.iter().zip(tables) {
    fs::rename(tmp, out.join(t.name))?;
  }
  Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
  let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required".into()))?;
  let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
  let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Config("config is not utf-8".into()))?;
  let cfg = RunConfig::parse(text)?;
  let seed = cli.seed.unwrap_or(cfg.seed);
  let threads = match cli.threads {
    Some(0) => return Err(CliError::Config("--threads must be positive".into())),
    Some(k) => k,
    None => std::thread::available_parallelism().map_or(1, |n| n.get()),
  };
  let pool = rayon::ThreadPoolBuilder::new()
    .num_threads(threads)
    .build()
    .map_err(|e| CliError::Config(format!("cannot start {threads} threads: {e}")))?;
  let tables = pool.install(|| match cli.command {
    Command::Simulate => commands::simulate(&cfg, seed),
    Command::Estimate => commands::estimate(&cfg, seed),
    Command::Density => commands::density(&cfg, seed),
    Command::PdeCheck => commands::pde_check(&cfg, seed),
    Command::Compare => commands::compare(&cfg, seed),
  })?;
  publish(&cli.out, &config_hash(&bytes, seed), &tables).map_err(CliError::Io)
}

fn main() -> ExitCode {
  let cli = match Cli::try_parse() {
    Ok(cli) => cli,
    Err(e) if !e.use_stderr() => e.exit(),
    Err(e) => {
      let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
      eprintln!("error,2,{first}");
      return ExitCode::from(2);
    }
  };
  match run(&cli) {
    Ok(()) => ExitCode::SUCCESS,
    Err(e) => {
      eprintln!("error,{},{}", e.code(), e.message().replace('\n', " "));
      ExitCode::from(e.code())
    }
  }
}
