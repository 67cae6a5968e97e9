//! The `smore` command line: flexibility and cost tables, self-checks,
//! synthetic training and routing/trace dumps.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ArchitectureSpec;
use crate::costmodel::{cost_csv, cost_table, CostGrid, TableKind};
use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::flexibility::{flexibility_csv, flexibility_table};
use crate::numerics::RngState;
use crate::propagate::forward_routed;
use crate::router::Mode;
use crate::trainer::{gen_synthetic, run_csv, run_summary, train, TrainConfig};
use crate::verify::{self, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Environment variable that takes precedence over `--out`.
pub const OUT_ENV: &str = "SMORE_OUT";

#[derive(Debug, Parser)]
#[command(name = "smore", version, about = "Hierarchical mixture of low-rank residual experts")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 1 keeps every command single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    pub parallel: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Flexibility counts for uniform pools, depth 1..=lmax.
    Flex {
        #[arg(long)]
        s: usize,
        #[arg(long)]
        f: usize,
        #[arg(long)]
        lmax: usize,
    },
    /// Parameter and computation overhead tables.
    Cost {
        /// JSON cost grid `{d, s, f, rows: [[r, L], ...]}`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces the grid width.
        #[arg(long)]
        d: Option<usize>,
    },
    /// Run the self-check suites.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
    },
    /// Train on the synthetic clustered task.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Routing tree JSON for each token.
    RouteDump {
        #[arg(long)]
        config: PathBuf,
        /// JSON token or list of tokens.
        #[arg(long)]
        tokens: PathBuf,
        /// Bank saved by `train` (`<dir>/bank`); defaults to a fresh bank.
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Forward trace JSON for each token.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Keep every value instead of a short preview.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    All,
    Props,
    Theorems,
    Gradients,
    Fig5,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Suite {
        match s {
            SuiteArg::All => Suite::All,
            SuiteArg::Props => Suite::Props,
            SuiteArg::Theorems => Suite::Theorems,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Fig5 => Suite::Fig5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub n: usize,
    pub k: usize,
    pub noise: f64,
}

/// Config file for `train`, `route-dump` and `inspect`; the latter two only
/// read `spec`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spec: ArchitectureSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.spec.validate()?;
        Ok(cfg)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Tokens {
    One(Vec<f64>),
    Many(Vec<Vec<f64>>),
}

fn load_tokens(path: &Path) -> Result<Vec<Vec<f64>>> {
    Ok(match serde_json::from_str(&fs::read_to_string(path)?)? {
        Tokens::One(t) => vec![t],
        Tokens::Many(ts) => ts,
    })
}

/// Hex SHA-256 of the resolved config's JSON.
pub fn config_hash(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

fn with_hash_line(hash: &str, csv: &str) -> String {
    format!("# config_sha256={hash}\n{csv}")
}

/// `SMORE_OUT` if set and nonempty, else `--out`.
pub fn resolve_out(flag: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.to_path_buf(),
    }
}

struct Ctx<'a> {
    out: PathBuf,
    stdout: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, contents)?;
        writeln!(self.stdout, "wrote {}", path.display())?;
        Ok(path)
    }
}

/// Runs the command line `args` (program name first) and returns the exit
/// code. Messages go to `stdout` and `stderr`.
pub fn run_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    match dispatch(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            match e {
                Error::Diverged { .. } => EXIT_VERIFY_FAILED,
                _ => EXIT_CONFIG,
            }
        }
    }
}

pub fn run() -> i32 {
    run_with(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr())
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    if cli.parallel == 0 {
        return Err(Error::Unsupported("--parallel must be at least 1".into()));
    }
    let parallel = cli.parallel > 1;
    if parallel {
        // a pool may already exist when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.parallel).build_global();
    }
    let mut ctx = Ctx {
        out: resolve_out(&cli.out),
        stdout,
    };
    match &cli.command {
        Command::Flex { s, f, lmax } => {
            let rows = flexibility_table(*s, *f, *lmax)?;
            let resolved = serde_json::json!({"command": "flex", "s": s, "f": f, "lmax": lmax});
            let csv = with_hash_line(&config_hash(&resolved), &flexibility_csv(&rows));
            write!(ctx.stdout, "{csv}")?;
            ctx.write("flex.csv", &csv)?;
            Ok(EXIT_OK)
        }
        Command::Cost { config, d } => {
            let mut grid = match config {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => CostGrid::default(),
            };
            if let Some(d) = d {
                grid.d = *d;
            }
            check_grid(&grid)?;
            let hash = config_hash(&serde_json::to_value(&grid)?);
            for (kind, name) in [(TableKind::Params, "cost_params.csv"), (TableKind::Flops, "cost_flops.csv")] {
                let csv = with_hash_line(&hash, &cost_csv(&cost_table(&grid, kind)));
                ctx.write(name, &csv)?;
            }
            Ok(EXIT_OK)
        }
        Command::Verify { suite } => {
            let report = verify::run((*suite).into(), cli.seed, parallel)?;
            writeln!(ctx.stdout, "{report}")?;
            ctx.write("verify.json", &serde_json::to_string_pretty(&report)?)?;
            Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFY_FAILED })
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(config)?;
            let (task_cfg, train_cfg) = match (cfg.task, cfg.train) {
                (Some(t), Some(c)) => (t, c),
                _ => return Err(Error::InvalidTask("train needs both `task` and `train` sections".into())),
            };
            let task = gen_synthetic(cli.seed, task_cfg.n, task_cfg.k, cfg.spec.d, task_cfg.noise)?;
            let mut rng = RngState::new(cli.seed).substream(1);
            let run = train(&cfg.spec, &task, &train_cfg, &mut rng)?;
            let hash = config_hash(&serde_json::json!({"config": cfg, "seed": cli.seed}));
            ctx.write("train.csv", &with_hash_line(&hash, &run_csv(&run)))?;
            let summary = run_summary(&run);
            ctx.write("train_summary.json", &serde_json::to_string_pretty(&summary)?)?;
            if let Some(bank) = &run.bank {
                fs::create_dir_all(&ctx.out)?;
                bank.save(&ctx.out.join("bank"))?;
            }
            writeln!(
                ctx.stdout,
                "eval loss {:.6e} -> {:.6e} (ratio {:.4})",
                summary.initial_eval, summary.final_eval, summary.loss_ratio
            )?;
            Ok(EXIT_OK)
        }
        Command::RouteDump { config, tokens, bank } => {
            let (bank, tokens) = load_bank_and_tokens(config, tokens, bank.as_deref(), cli.seed)?;
            let mut trees = Vec::with_capacity(tokens.len());
            for (i, x) in tokens.iter().enumerate() {
                let (_, trace) = forward_routed(x, &bank, &mut RngState::new(cli.seed).substream(i as u64), Mode::Eval)?;
                trees.push(trace.tree().to_json());
            }
            ctx.write("routes.json", &serde_json::to_string_pretty(&trees)?)?;
            Ok(EXIT_OK)
        }
        Command::Inspect {
            config,
            tokens,
            bank,
            full,
        } => {
            let (bank, tokens) = load_bank_and_tokens(config, tokens, bank.as_deref(), cli.seed)?;
            let mut traces = Vec::with_capacity(tokens.len());
            for (i, x) in tokens.iter().enumerate() {
                let (_, trace) = forward_routed(x, &bank, &mut RngState::new(cli.seed).substream(i as u64), Mode::Eval)?;
                traces.push(trace.to_json(*full));
            }
            ctx.write("trace.json", &serde_json::to_string_pretty(&traces)?)?;
            Ok(EXIT_OK)
        }
    }
}

fn check_grid(grid: &CostGrid) -> Result<()> {
    for &(r, depth) in &grid.rows {
        ArchitectureSpec::uniform(depth, grid.s, r, grid.f, grid.d).validate()?;
    }
    Ok(())
}

fn load_bank_and_tokens(config: &Path, tokens: &Path, bank: Option<&Path>, seed: u64) -> Result<(ExpertBank, Vec<Vec<f64>>)> {
    let cfg = RunConfig::load(config)?;
    let bank = match bank {
        Some(p) => {
            let b = ExpertBank::load(p)?;
            if b.spec() != &cfg.spec {
                return Err(Error::Unsupported("saved bank was built for a different spec".into()));
            }
            b
        }
        None => ExpertBank::init(&cfg.spec, &mut RngState::new(seed))?,
    };
    let tokens = load_tokens(tokens)?;
    for x in &tokens {
        if x.len() != cfg.spec.d {
            return Err(Error::dim("token", cfg.spec.d, x.len()));
        }
    }
    Ok((bank, tokens))
}
