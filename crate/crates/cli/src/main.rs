use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metaweight::config::{parse_value, ExperimentConfig};
use metaweight::experiment::{
    prepare_data, run_gradcheck, run_sweep, run_training, write_datasets,
};
use metaweight::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_NUMERIC: u8 = 5;
const EXIT_GRADCHECK: u8 = 6;
const EXIT_SWEEP_CHILD: u8 = 7;

#[derive(Parser)]
#[command(
    name = "metaweight",
    version,
    about = "Meta-learned sample reweighting experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/meta/test CSVs and a provenance record.
    GenData(Common),
    /// Train a classifier with the configured weighting network.
    Train(Common),
    /// Check the analytic hypergradient against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Perturb one parameter block's analytic gradient (negative control).
        #[arg(long, value_name = "BLOCK")]
        corrupt_block: Option<String>,
    },
    /// Run every override combination for every seed and aggregate.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Axis of the sweep, e.g. `optim.lambda=0,0.1,1`. Repeatable.
        #[arg(long, value_name = "KEY=V1,V2,..")]
        vary: Vec<String>,
        /// Seeds for every point, e.g. `0,1,2`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Worker threads; 0 uses all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Sets every seed field.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Root that relative config output directories resolve against when
    /// `--out` is absent.
    #[arg(long, value_name = "DIR", env = "METAWEIGHT_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    /// Write a per-iteration trace.
    #[arg(long)]
    trace: bool,
    /// Override one config key, e.g. `optim.lambda=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for assignment in &self.overrides {
            cfg.apply_override_str(assignment)?;
        }
        if let Some(seed) = self.seed {
            cfg.set_all_seeds(seed);
            cfg.gradcheck.seed = seed;
        }
        if self.trace {
            cfg.output.trace = true;
        }
        cfg.output.dir = match (&self.out, &self.output_root) {
            (Some(out), _) => out.clone(),
            (None, Some(root)) => root.join(&cfg.output.dir),
            (None, None) => cfg.output.dir.clone(),
        };
        cfg.validate()?;
        for warning in cfg.warnings() {
            eprintln!("warning: {warning}");
        }
        Ok(cfg)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Parse { .. } | Error::Contract(_) => EXIT_DATA,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

fn parse_axis(spec: &str) -> Result<(String, Vec<toml::Value>), Error> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--vary expects KEY=V1,V2,.., got `{spec}`")))?;
    let values = match parse_value(raw.trim()) {
        toml::Value::Array(items) => items,
        _ => raw.split(',').map(|v| parse_value(v.trim())).collect(),
    };
    if values.is_empty() {
        return Err(Error::Config(format!("--vary {key} has no values")));
    }
    Ok((key.trim().to_string(), values))
}

fn gen_data(cfg: &ExperimentConfig) -> Result<u8, Error> {
    let data = prepare_data(cfg)?;
    write_datasets(&data, &cfg.output.dir)?;
    let p = &data.provenance;
    println!(
        "wrote {} train / {} meta / {} test samples to {} (realized noise rate {:.4})",
        p.train_size,
        p.meta_size,
        p.test_size,
        cfg.output.dir.display(),
        p.realized_noise_rate
    );
    Ok(0)
}

fn train(cfg: &ExperimentConfig) -> Result<u8, Error> {
    let result = run_training(cfg, &cfg.output.dir)?;
    match &result.metrics().summary {
        Some(s) => println!(
            "best {:.4} (epoch {}), last {:.4} over {} epochs; artifacts in {}",
            s.best_test_acc,
            s.best_epoch,
            s.last10_mean_acc,
            s.epochs,
            result.dir.display()
        ),
        None => println!("no epochs run; artifacts in {}", result.dir.display()),
    }
    Ok(0)
}

fn gradcheck(cfg: &ExperimentConfig) -> Result<u8, Error> {
    let report = run_gradcheck(cfg)?;
    println!(
        "{} λ={} step={:e} tolerance={:e}",
        report.variant, report.lambda, report.step, report.tolerance
    );
    for b in &report.blocks {
        println!(
            "  {:<4} {:<16} params {:>4}  max rel err {:.3e}",
            if b.passed { "ok" } else { "FAIL" },
            b.name,
            b.params,
            b.max_rel_err
        );
    }
    if report.passed {
        println!("PASS max rel err {:.3e}", report.max_rel_err);
        Ok(0)
    } else {
        println!("FAIL in blocks: {}", report.failing_blocks().join(", "));
        Ok(EXIT_GRADCHECK)
    }
}

fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<u8, Error> {
    let outcome = run_sweep(cfg, out)?;
    for row in outcome.aggregates() {
        let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.4} ± {s:.4}"),
            _ => "n/a".to_string(),
        };
        println!(
            "{}: best {}, last {} ({} runs, {} failed)",
            row.point,
            fmt(row.best_mean, row.best_std),
            fmt(row.last_mean, row.last_std),
            row.runs,
            row.failed
        );
    }
    println!("aggregate written to {}", out.join("sweep.csv").display());
    let failures = outcome.failures();
    if failures == 0 {
        Ok(0)
    } else {
        for run in outcome.runs.iter().filter(|r| r.result.is_err()) {
            if let Err(e) = &run.result {
                eprintln!("error: {} seed {}: {e}", run.point, run.seed);
            }
        }
        eprintln!("error: {failures} sweep run(s) failed");
        Ok(EXIT_SWEEP_CHILD)
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::GenData(common) => gen_data(&common.resolve()?),
        Command::Train(common) => train(&common.resolve()?),
        Command::Gradcheck {
            common,
            corrupt_block,
        } => {
            let mut cfg = common.resolve()?;
            if corrupt_block.is_some() {
                cfg.gradcheck.corrupt_block = corrupt_block;
            }
            gradcheck(&cfg)
        }
        Command::Sweep {
            common,
            vary,
            seeds,
            threads,
        } => {
            let mut cfg = common.resolve()?;
            for spec in &vary {
                let (key, values) = parse_axis(spec)?;
                cfg.sweep.axes.insert(key, values);
            }
            if let Some(seeds) = seeds {
                cfg.sweep.seeds = seeds;
            }
            if let Some(threads) = threads {
                cfg.sweep.threads = threads;
            }
            let out = cfg.output.dir.clone();
            sweep(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
