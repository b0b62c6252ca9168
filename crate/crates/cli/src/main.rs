#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flate2::read::GzDecoder;

use udpfl::data;
use udpfl::harness::{self, ExperimentConfig, SchedulerKind, SweepAxis};
use udpfl::par::Execution;

const DEFAULT_MNIST_URL: &str = "https://storage.googleapis.com/cvdf-datasets/mnist/";

#[derive(Parser)]
#[command(
    name = "udpfl",
    version,
    about = "Differentially private federated learning with adaptive round counts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment and write per-seed outputs.
    Run(RunArgs),
    /// Vary one parameter across values and seeds.
    Sweep(SweepArgs),
    /// Compare exact log-moments with the closed-form bound on the reference panels.
    VerifyAccountant {
        #[arg(long, default_value = "verify_accountant.csv")]
        out: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
    /// Noise calibration and log-moment tables.
    Accountant {
        #[command(subcommand)]
        table: AccountantTable,
    },
    /// Median per-sample gradient norm from a short noiseless pilot.
    PilotClip {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        rounds: Option<u32>,
        #[arg(long, default_value = "pilot_norms.txt")]
        out: PathBuf,
    },
    /// Download the MNIST IDX files.
    FetchMnist {
        #[arg(long, default_value = "data/mnist")]
        dest: PathBuf,
        #[arg(long, default_value = DEFAULT_MNIST_URL)]
        base_url: String,
        /// Confirms the network download.
        #[arg(long)]
        yes: bool,
    },
}

#[derive(Subcommand)]
enum AccountantTable {
    /// Noise multiplier for each combination of budget, rate, rounds and sensitivity.
    Calibrate {
        #[arg(long, value_delimiter = ',', required = true)]
        epsilon: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1e-5")]
        delta: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        q: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        rounds: Vec<u32>,
        #[arg(long, value_delimiter = ',', required = true)]
        sensitivity: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact and bounded log-moments over a grid.
    Moments {
        #[arg(long, value_delimiter = ',', required = true)]
        q: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        sigma: Vec<f64>,
        #[arg(long, default_value = "1:100")]
        lambda: String,
        #[arg(long)]
        sensitivity: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    scheduler: Option<SchedulerKind>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    t_init: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.scheduler {
            cfg.scheduler = s;
        }
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(z) = self.zeta {
            cfg.zeta = z;
        }
        if let Some(t) = self.t_init {
            cfg.t_init = t;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon_p = harness::Epsilon(e);
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.output {
            cfg.output_dir = Some(o.clone());
        }
        Ok(cfg.resolved())
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "T")]
    axis: SweepAxis,
    /// Values as `a,b,c` or `start:stop:step`.
    #[arg(long)]
    values: Option<String>,
    /// Round grid for the `T` axis, as `a,b,c` or `start:stop:step`.
    #[arg(long)]
    t_grid: Option<String>,
}

/// Parses `a,b,c` or an inclusive `start:stop[:step]` range.
fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 1 {
        return text
            .split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad grid value {v:?}")))
            .collect();
    }
    if parts.len() > 3 {
        bail!("grid {text:?} has too many ':' parts");
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad grid bound {v:?}")))
        .collect::<Result<_>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums.get(2).copied().unwrap_or(1.0));
    if !(step > 0.0) || stop < start {
        bail!("grid {text:?} is empty or has a non-positive step");
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => {
            harness::write_atomic(p, bytes)?;
            eprintln!("wrote {}", p.display());
        }
        None => print!("{}", String::from_utf8_lossy(bytes)),
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = args.overrides.load()?;
    let manifest = harness::run_experiment(cfg)?;
    for o in &manifest.outputs {
        match (&o.error, &o.summary_json) {
            (Some(e), _) => eprintln!("seed {}: error: {e}", o.seed),
            (None, Some(p)) => {
                let s: harness::RunSummary = serde_json::from_str(&fs::read_to_string(p)?)?;
                println!(
                    "seed {}: T = {}, triggers = {}, test loss = {}, test accuracy = {}",
                    o.seed,
                    s.realized_t,
                    s.triggers,
                    s.final_test_loss.map_or("n/a".into(), |v| format!("{v:.4}")),
                    s.final_test_accuracy.map_or("n/a".into(), |v| format!("{v:.4}")),
                );
            }
            _ => {}
        }
    }
    let dir = manifest.config.output_dir.clone().unwrap_or_default();
    println!("manifest: {}", dir.join("manifest.json").display());
    if manifest.outputs.iter().any(|o| o.error.is_some()) {
        bail!("one or more seeds failed");
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.overrides.load()?;
    let text = match (args.axis, &args.t_grid, &args.values) {
        (SweepAxis::T, Some(g), _) => g.clone(),
        (_, _, Some(v)) => v.clone(),
        (SweepAxis::T, None, None) => "25:200:25".into(),
        _ => bail!("--values is required for axis {}", args.axis),
    };
    let values = parse_grid(&text)?;
    let exp = harness::Experiment::prepare(cfg)?;
    let result = harness::sweep(&exp, args.axis, &values)?;
    let dir = exp.config.output_dir.clone().unwrap_or_default();
    let csv = harness::sweep_csv(&result, exp.config.seeds.len())?;
    harness::write_atomic(&dir.join(format!("sweep_{}.csv", args.axis)), &csv)?;
    harness::write_atomic(
        &dir.join(format!("sweep_{}.json", args.axis)),
        serde_json::to_string_pretty(&result)?.as_bytes(),
    )?;
    for p in &result.points {
        println!(
            "{} = {}: mean test loss {:.4} (sd {:.4}, {} seeds), mean rounds {:.1}",
            args.axis, p.value, p.mean_final_test_loss, p.std_final_test_loss, p.ok_seeds, p.mean_rounds
        );
    }
    match result.best_value {
        Some(b) => println!("best {} = {b}", args.axis),
        None => bail!("no sweep value completed"),
    }
    Ok(())
}

fn verify(out: &Path, sequential: bool) -> Result<()> {
    let exec = if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    let rows = harness::verify_accountant(exec);
    emit(Some(out), &harness::verify_csv(&rows)?)?;
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    let lemma = rows.iter().filter(|r| r.lemma_ok == Some(false)).count();
    let bound = rows.iter().filter(|r| r.bound_ok == Some(false)).count();
    let checked = rows.iter().filter(|r| r.bound_ok.is_some()).count();
    println!(
        "{} points: {errors} quadrature errors, {lemma} with D10 < D01, {bound} of {checked} in-regime points above the bound",
        rows.len()
    );
    if errors + lemma + bound > 0 {
        bail!("accountant verification failed");
    }
    Ok(())
}

fn accountant(table: AccountantTable) -> Result<()> {
    match table {
        AccountantTable::Calibrate {
            epsilon,
            delta,
            q,
            rounds,
            sensitivity,
            out,
        } => emit(
            out.as_deref(),
            &harness::calibration_table(&epsilon, &delta, &q, &rounds, &sensitivity)?,
        ),
        AccountantTable::Moments {
            q,
            sigma,
            lambda,
            sensitivity,
            out,
        } => {
            let lambdas = parse_grid(&lambda)?
                .into_iter()
                .map(|l| {
                    if l >= 1.0 && l.fract() == 0.0 {
                        Ok(l as u32)
                    } else {
                        bail!("lambda {l} is not a positive integer")
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            emit(
                out.as_deref(),
                &harness::lemma_table(&q, &sigma, &lambdas, sensitivity, Execution::Parallel)?,
            )
        }
    }
}

fn pilot(config: &Path, seed: u64, rounds: Option<u32>, out: &Path) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(r) = rounds {
        cfg.pilot_rounds = r;
    }
    let result = harness::pilot_clip(cfg, seed, out)?;
    println!("{} norms written to {}", result.norms.len(), out.display());
    println!("clip_C = {}", result.clip);
    Ok(())
}

fn fetch_mnist(dest: &Path, base_url: &str, yes: bool) -> Result<()> {
    let files = [
        data::MNIST_TRAIN_IMAGES,
        data::MNIST_TRAIN_LABELS,
        data::MNIST_TEST_IMAGES,
        data::MNIST_TEST_LABELS,
    ];
    if !yes {
        bail!("fetch-mnist downloads four files from {base_url}; pass --yes to proceed");
    }
    fs::create_dir_all(dest).with_context(|| format!("creating {}", dest.display()))?;
    let base = base_url.trim_end_matches('/');
    for f in files {
        let target = dest.join(f);
        if target.exists() {
            println!("{} exists, skipping", target.display());
            continue;
        }
        let url = format!("{base}/{f}.gz");
        println!("fetching {url}");
        let resp = ureq::get(&url).call().with_context(|| format!("GET {url}"))?;
        let mut raw = Vec::new();
        GzDecoder::new(resp.into_body().into_reader())
            .read_to_end(&mut raw)
            .with_context(|| format!("decompressing {url}"))?;
        harness::write_atomic(&target, &raw)?;
    }
    let (train, test) = data::load_mnist(dest)?;
    println!(
        "MNIST ready in {}: {} train, {} test",
        dest.display(),
        train.len(),
        test.len()
    );
    println!("export {}={}", data::MNIST_DIR_ENV, dest.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::VerifyAccountant { out, sequential } => verify(&out, sequential),
        Command::Accountant { table } => accountant(table),
        Command::PilotClip {
            config,
            seed,
            rounds,
            out,
        } => pilot(&config, seed, rounds, &out),
        Command::FetchMnist { dest, base_url, yes } => fetch_mnist(&dest, &base_url, yes),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("25:100:25").unwrap(), vec![25.0, 50.0, 75.0, 100.0]);
        assert_eq!(parse_grid("1,2.5,4").unwrap(), vec![1.0, 2.5, 4.0]);
        assert_eq!(parse_grid("3:5").unwrap(), vec![3.0, 4.0, 5.0]);
        assert!(parse_grid("5:3").is_err());
        assert!(parse_grid("a,b").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
