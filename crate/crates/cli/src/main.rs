use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use fimlab::core_space::{
    adversarial_label, efim_core_floor, envelope_errors, lambda_max_bracket, simplex_fim, spectrum, ProbVector,
};
use fimlab::estimators::FimEstimate;
use fimlab::harness::{self, Config, EstimatorChoice};

#[derive(Parser)]
#[command(name = "fimlab", version, about = "Fisher information estimators for small classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spectrum bracket, envelopes and eFIM-core floor for one probability vector.
    CoreProbe {
        /// Comma-separated probabilities summing to one.
        #[arg(long)]
        p: String,
    },
    /// Compute one estimator over the configured batches and save it.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        /// exact, pullback, efim, mc, full, dg, dg-bernoulli, lr<k>, sqrt
        #[arg(long)]
        estimator: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// RelMAE and timing table (CSV on stdout).
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Closed-form versus empirical probe variance (JSON on stdout).
    Variance {
        #[arg(long)]
        config: PathBuf,
    },
    /// Heavy-tail CV demonstration for the scalar logistic model.
    CvDemo {
        #[arg(long)]
        nu: f64,
        /// Samples per Monte-Carlo estimate.
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Log-scale histogram of a saved estimate's diagonal.
    Hist {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_probs(s: &str) -> Result<ProbVector> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("'{v}' is not a number")))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbVector::new(values)?)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::CoreProbe { p } => {
            let p = parse_probs(&p)?;
            let decomp = spectrum(&simplex_fim(&p))?;
            let (label, adversarial_error) = adversarial_label(&p)?;
            print_json(&json!({
                "p": p,
                "eigenvalues": decomp.eigenvalues.as_slice(),
                "spectral_gap": decomp.spectral_gap,
                "lambda_max_bracket": lambda_max_bracket(&p),
                "envelopes": envelope_errors(&p)?,
                "efim_core_floor": efim_core_floor(&p)?,
                "adversarial_label": label,
                "adversarial_error": adversarial_error,
            }))
        }
        Command::Estimate { config, estimator, out } => {
            let cfg = Config::load(&config)?;
            let choice: EstimatorChoice = estimator.parse()?;
            let prep = harness::prepare(&cfg)?;
            let est = harness::run_estimator(&prep, choice, &cfg, cfg.storage)?;
            est.save(&out).with_context(|| format!("writing {}", out.display()))?;
            eprintln!(
                "wrote {} ({:?}, dim {}, {} backward passes)",
                out.display(),
                est.storage,
                est.dim,
                est.meta.backward_passes
            );
            Ok(())
        }
        Command::Bench { config } => {
            let cfg = Config::load(&config)?;
            print!("{}", harness::bench_csv(&harness::bench(&cfg)?));
            Ok(())
        }
        Command::Variance { config } => {
            let cfg = Config::load(&config)?;
            print_json(&harness::variance_reports(&cfg)?)
        }
        Command::CvDemo { nu, m, trials, seed } => {
            let mut rng = harness::stream(seed, "cv-demo");
            print_json(&harness::cv_demo(nu, m, trials, &mut rng)?)
        }
        Command::Hist { input, out } => {
            let est = FimEstimate::load(&input).with_context(|| format!("reading {}", input.display()))?;
            let report = harness::histogram(&est.to_diagonal())?;
            fs::write(&out, report.to_csv())?;
            print_json(&json!({
                "zeta": report.zeta,
                "zero_atom": report.zero_atom,
                "total": report.total,
                "mean": report.mean,
                "median": report.median,
                "p95": report.p95,
            }))
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
