//! `batsel` command-line front end.
//!
//! Exit codes: 0 success, 1 malformed input, 2 numerical or training
//! failure, 3 configuration error. Errors go to stderr as `ERROR <code>: ...`.

mod commands;
mod config;

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use batsel::{Error, ErrorClass};
use clap::{Args, CommandFactory, Parser, Subcommand};

use commands::{CmdError, Sweep};

#[derive(Parser)]
#[command(name = "batsel", version, about = "Score-based selection of backbone data for adaptation training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (locked for the duration of the run).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    sample_ratio: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<usize>,
    /// JSON-lines dataset with adaptation and backbone rows.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Backbone quota, replacing the one derived from gamma.
    #[arg(long, global = true)]
    quota: Option<usize>,
    /// Seeds for multi-seed protocols: `1,2,5` or `1-20`.
    #[arg(long, global = true, value_parser = config::parse_seeds)]
    seeds: Option<SeedList>,
    /// Any config key, e.g. `--set hidden=[8]`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = config::parse_set)]
    set: Vec<(String, toml::Value)>,
}

type SeedList = Vec<u64>;

#[derive(Args)]
struct GridArg {
    /// Comma-separated grid for the sweep.
    #[arg(long, value_parser = config::parse_grid)]
    grid: Option<Grid>,
}

type Grid = Vec<f64>;

#[derive(Subcommand)]
enum Cmd {
    /// Score the backbone rows of a dataset and pick the quota.
    Select,
    /// Selection plus final training; on a dataset, evaluates on its test rows,
    /// otherwise runs the none/random/bat comparison on the synthetic task.
    Run,
    /// Repeat the comparison across gamma values.
    SweepGamma(GridArg),
    /// Repeat the comparison across sample ratios.
    SweepRatio(GridArg),
    /// Compare surrogate training-set fractions against the baseline.
    SweepSurrogate(GridArg),
    /// Exactness, rank agreement, decomposition and rho checks.
    OracleCheck,
    /// Write the synthetic task as a JSON-lines dataset.
    GenTask,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Select => "select",
            Cmd::Run => "run",
            Cmd::SweepGamma(_) => "sweep-gamma",
            Cmd::SweepRatio(_) => "sweep-ratio",
            Cmd::SweepSurrogate(_) => "sweep-surrogate",
            Cmd::OracleCheck => "oracle-check",
            Cmd::GenTask => "gen-task",
        }
    }
}

fn code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Input => 1,
        ErrorClass::Numerical => 2,
        ErrorClass::Config => 3,
    }
}

fn fail(e: &Error) -> ExitCode {
    let c = code(e.class());
    eprintln!("ERROR {c}: {e}");
    ExitCode::from(c)
}

/// Exclusive ownership of the output directory; released on drop.
struct OutLock {
    path: PathBuf,
    _file: File,
}

impl OutLock {
    fn acquire(dir: &Path) -> batsel::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".batsel.lock");
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::config(format!(
                    "{} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Error::Io(e)
            }
        })?;
        Ok(OutLock { path, _file: file })
    }
}

impl Drop for OutLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn set_threads() -> batsel::Result<()> {
    let Ok(v) = std::env::var("BATSEL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::config(format!("BATSEL_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn overrides(c: &Common, cmd: &Cmd) -> Vec<(String, toml::Value)> {
    let mut o = c.set.clone();
    let mut put = |k: &str, v: Option<toml::Value>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| toml::Value::String(p.display().to_string()));
    put("dataset", path(&c.dataset));
    put("out", path(&c.out));
    put("seed", c.seed.map(|s| toml::Value::Integer(s as i64)));
    put("gamma", c.gamma.map(toml::Value::Float));
    put("sample_ratio", c.sample_ratio.map(toml::Value::Float));
    put("delta", c.delta.map(|d| toml::Value::Integer(d as i64)));
    put("quota", c.quota.map(|q| toml::Value::Integer(q as i64)));
    put(
        "seeds",
        c.seeds
            .as_ref()
            .map(|s| toml::Value::Array(s.iter().map(|&v| toml::Value::Integer(v as i64)).collect())),
    );
    let grid = |g: &GridArg| {
        g.grid
            .as_ref()
            .map(|g| toml::Value::Array(g.iter().map(|&v| toml::Value::Float(v)).collect()))
    };
    match cmd {
        Cmd::SweepGamma(g) => put("gammas", grid(g)),
        Cmd::SweepRatio(g) => put("ratios", grid(g)),
        Cmd::SweepSurrogate(g) => put("fractions", grid(g)),
        _ => {}
    }
    o
}

fn usage(cmd: &str) -> String {
    let mut c = Cli::command();
    c.build();
    match c.find_subcommand_mut(cmd) {
        Some(sub) => sub.render_usage().to_string(),
        None => c.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("ERROR 3: {e}");
            return ExitCode::from(3);
        }
    };
    if let Err(e) = set_threads() {
        return fail(&e);
    }
    let resolved = match config::load(cli.common.config.as_deref(), &overrides(&cli.common, &cli.cmd)).and_then(|c| c.resolve()) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let lock = match OutLock::acquire(&resolved.out) {
        Ok(l) => l,
        Err(e) => return fail(&e),
    };
    let outcome = match &cli.cmd {
        Cmd::Select => commands::select(&resolved).map(|_| true),
        Cmd::Run => commands::run(&resolved).map(|_| true),
        Cmd::SweepGamma(_) => commands::sweep(&resolved, Sweep::Gamma).map(|_| true),
        Cmd::SweepRatio(_) => commands::sweep(&resolved, Sweep::Ratio).map(|_| true),
        Cmd::SweepSurrogate(_) => commands::sweep(&resolved, Sweep::Surrogate).map(|_| true),
        Cmd::OracleCheck => commands::oracle_check(&resolved),
        Cmd::GenTask => commands::gen_task(&resolved).map(|_| true),
    };
    drop(lock);
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("ERROR 2: oracle-check: a hard gate failed");
            ExitCode::from(2)
        }
        Err(CmdError::Run(e)) => fail(&e),
        Err(CmdError::Usage(commands::UsageError(e))) => {
            let code = fail(&e);
            eprintln!("{}", usage(cli.cmd.name()));
            code
        }
    }
}
