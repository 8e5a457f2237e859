//! File-based front end over the library: simulate datasets, run the
//! sampler, check against exhaustive enumeration, and benchmark the two
//! marginal-likelihood evaluators.
//!
//! Exit codes: 0 success, 2 usage error, 3 sampler failure, 4 enumeration
//! cap exceeded, 1 anything else (I/O, malformed files).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use bilevel_smc::datagen::{self, SimSpec};
use bilevel_smc::error::Error;
use bilevel_smc::marglik::MarglikEvaluator;
use bilevel_smc::model::{Dataset, PriorConfig};
use bilevel_smc::oracle;
use bilevel_smc::smc::{self, SmcConfig, SCHEMA_VERSION};
use bilevel_smc::{Link, MarglikMethod};

#[derive(Parser)]
#[command(name = "bilevel-smc", version, about = "Bayesian bi-level variable selection via waste-free SMC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic dataset and write it as CSV plus JSON sidecar.
    Simulate(SimulateArgs),
    /// Run the sampler on a dataset file and write the result JSON.
    Run(RunArgs),
    /// Enumerate the exact posterior on a small instance, optionally
    /// comparing a sampler run against it.
    Oracle(OracleArgs),
    /// Time full sampler runs over a grid of n or p, writing a CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 2500)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    p: usize,
    #[arg(long, default_value_t = 5)]
    q: usize,
    #[arg(long, default_value_t = 5)]
    r: usize,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    #[arg(long, default_value = "probit")]
    link: Link,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for dataset.csv and dataset.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long = "N", default_value_t = 25_000)]
    n_particles: usize,
    #[arg(long = "M", default_value_t = 125)]
    n_ancestors: usize,
    #[arg(long = "P", default_value_t = 200)]
    chain_len: usize,
    #[arg(long, default_value_t = 0.5)]
    ess_ratio: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    /// Group inclusion prior: a single value or a comma list of length q.
    #[arg(long, default_value = "0.5")]
    p_gamma: String,
    /// Conditional variable inclusion prior: a single value or a comma list
    /// of length p.
    #[arg(long, default_value = "0.5")]
    p_eta: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Chain-level parallelism (default: BILEVEL_SMC_WORKERS or all cores).
    #[arg(long)]
    workers: Option<usize>,
}

impl SamplerArgs {
    fn config(&self, method: MarglikMethod) -> SmcConfig {
        SmcConfig {
            n_particles: self.n_particles,
            n_ancestors: self.n_ancestors,
            chain_len: self.chain_len,
            ess_ratio: self.ess_ratio,
            bisection_tol: 1e-8,
            seed: self.seed,
            marglik_method: method,
            max_stages: 200,
            workers: resolve_workers(self.workers),
        }
    }

    fn prior(&self, data: &Dataset, link: Link) -> Result<PriorConfig, Error> {
        let p_gamma = parse_prob_list(&self.p_gamma, data.q(), "--p-gamma")?;
        let p_eta = parse_prob_list(&self.p_eta, data.p(), "--p-eta")?;
        PriorConfig::new(self.sigma2, p_gamma, p_eta, link)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Dataset CSV (sidecar JSON read from the same stem).
    #[arg(long)]
    data: PathBuf,
    /// Marginal-likelihood evaluator.
    #[arg(long, default_value = "ala")]
    method: MarglikMethod,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value = "probit")]
    link: Link,
    /// Output path for the result JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    data: PathBuf,
    /// Marginal-likelihood evaluator.
    #[arg(long, default_value = "ala")]
    method: MarglikMethod,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value = "probit")]
    link: Link,
    /// Also run the sampler and report inclusion gaps.
    #[arg(long)]
    smc: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Which dimension the grid varies.
    #[arg(long, value_parser = ["n", "p"])]
    vary: String,
    /// Comma-separated grid values.
    #[arg(long)]
    grid: String,
    /// la, ala, or both.
    #[arg(long, default_value = "both")]
    method: String,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Fixed n when varying p.
    #[arg(long, default_value_t = 1500)]
    n: usize,
    /// Fixed p when varying n.
    #[arg(long, default_value_t = 50)]
    p: usize,
    #[arg(long, default_value_t = 5)]
    q: usize,
    #[arg(long, default_value_t = 5)]
    r: usize,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: PathBuf,
}

fn resolve_workers(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("BILEVEL_SMC_WORKERS")
            .ok()
            .and_then(|s| s.parse().ok())
    })
}

fn parse_prob_list(text: &str, len: usize, flag: &str) -> Result<Vec<f64>, Error> {
    let values: Result<Vec<f64>, _> = text.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let values =
        values.map_err(|e| Error::InvalidInput(format!("{flag} '{text}': {e}")))?;
    match values.len() {
        1 => Ok(vec![values[0]; len]),
        n if n == len => Ok(values),
        n => Err(Error::InvalidInput(format!(
            "{flag} has {n} entries, expected 1 or {len}"
        ))),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    schema_version: u32,
    gamma: Vec<u8>,
    eta: Vec<u8>,
    beta_x: &'a [f64],
    beta_u: &'a [f64],
    beta_z: &'a [f64],
}

fn cmd_simulate(args: &SimulateArgs) -> Result<ExitCode, Error> {
    let spec = SimSpec {
        rho: args.rho,
        link: args.link,
        ..SimSpec::scaled(args.n, args.p, args.q, args.r, args.seed)
    };
    spec.validate()?;
    let (data, truth, beta) = datagen::simulate(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    let csv = args.out.join("dataset.csv");
    datagen::write_dataset(&data, &csv)?;
    let report = GroundTruth {
        schema_version: SCHEMA_VERSION,
        gamma: truth.gamma.iter().map(|&g| u8::from(g)).collect(),
        eta: truth.eta.iter().map(|&e| u8::from(e)).collect(),
        beta_x: &beta.beta_x,
        beta_u: &beta.beta_u,
        beta_z: &beta.beta_z,
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(args: &RunArgs) -> Result<ExitCode, Error> {
    let data = datagen::read_dataset(&args.data)?;
    let prior = args.sampler.prior(&data, args.link)?;
    let config = args.sampler.config(args.method);
    config.validate()?;
    match smc::run(&data, &prior, &config) {
        Ok(result) => {
            write_json(&result, &args.out)?;
            println!(
                "wrote {}: {} stages, final acceptance {:.3}, log-evidence {:.4}",
                args.out.display(),
                result.lambda_schedule.len() - 1,
                result.acceptance_rates.last().copied().unwrap_or(0.0),
                result.log_evidence
            );
            Ok(ExitCode::SUCCESS)
        }
        Err(Error::MaxStages { max_stages, lambda }) => {
            let diag = serde_json::json!({
                "schema_version": SCHEMA_VERSION,
                "error": "sampler did not reach lambda = 1",
                "max_stages": max_stages,
                "lambda": lambda,
            });
            println!("{diag}");
            Ok(ExitCode::from(3))
        }
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct OracleReport {
    schema_version: u32,
    method: MarglikMethod,
    configurations: usize,
    gamma_incl: Vec<f64>,
    eta_incl: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    smc: Option<OracleSmcSection>,
}

#[derive(Serialize)]
struct OracleSmcSection {
    gamma_incl: Vec<f64>,
    eta_incl: Vec<f64>,
    max_gamma_gap: f64,
    max_eta_gap: f64,
    max_abs_gap: f64,
}

fn cmd_oracle(args: &OracleArgs) -> Result<ExitCode, Error> {
    let data = datagen::read_dataset(&args.data)?;
    let prior = args.sampler.prior(&data, args.link)?;
    let enumerated = oracle::enumerate_posterior(&data, &prior, args.method)?;

    let smc_section = if args.smc {
        let config = args.sampler.config(args.method);
        config.validate()?;
        let result = smc::run(&data, &prior, &config)?;
        let report = oracle::compare(&enumerated, &result)?;
        Some(OracleSmcSection {
            gamma_incl: result.gamma_incl,
            eta_incl: result.eta_incl,
            max_gamma_gap: report.max_gamma_gap,
            max_eta_gap: report.max_eta_gap,
            max_abs_gap: report.max_abs_gap,
        })
    } else {
        None
    };

    let report = OracleReport {
        schema_version: SCHEMA_VERSION,
        method: args.method,
        configurations: enumerated.configs.len(),
        gamma_incl: enumerated.gamma_incl,
        eta_incl: enumerated.eta_incl,
        smc: smc_section,
    };
    write_json(&report, &args.out)?;
    match &report.smc {
        Some(section) => println!(
            "wrote {}: {} configurations, max inclusion gap {:.4}",
            args.out.display(),
            report.configurations,
            section.max_abs_gap
        ),
        None => println!(
            "wrote {}: {} configurations enumerated",
            args.out.display(),
            report.configurations
        ),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(args: &BenchArgs) -> Result<ExitCode, Error> {
    let grid: Result<Vec<usize>, _> =
        args.grid.split(',').map(|v| v.trim().parse::<usize>()).collect();
    let grid = grid.map_err(|e| Error::InvalidInput(format!("--grid '{}': {e}", args.grid)))?;
    if grid.is_empty() {
        return Err(Error::InvalidInput("--grid must be nonempty".into()));
    }
    let methods: Vec<MarglikMethod> = match args.method.as_str() {
        "la" => vec![MarglikMethod::La],
        "ala" => vec![MarglikMethod::Ala],
        "both" => vec![MarglikMethod::La, MarglikMethod::Ala],
        other => {
            return Err(Error::InvalidInput(format!(
                "--method '{other}' (expected la, ala, or both)"
            )))
        }
    };

    let file = File::create(&args.out)?;
    let mut out = BufWriter::new(file);
    writeln!(out, "n,p,method,rep,seed,stage_count,wall_s,marglik_evals")?;
    for &value in &grid {
        let (n, p) = match args.vary.as_str() {
            "n" => (value, args.p),
            _ => (args.n, value),
        };
        for rep in 0..args.reps {
            let seed = args.sampler.seed + 7919 * rep as u64 + value as u64;
            let spec = SimSpec::scaled(n, p, args.q, args.r, seed);
            let (data, _, _) = datagen::simulate(&spec)?;
            let prior = args.sampler.prior(&data, spec.link)?;
            for &method in &methods {
                let mut config = args.sampler.config(method);
                config.seed = seed;
                config.validate()?;
                let evaluator = MarglikEvaluator::new(method, &data, &prior)?;
                let start = Instant::now();
                let result = smc::run_with_evaluator(&data, &prior, &config, &evaluator)?;
                let wall = start.elapsed().as_secs_f64();
                writeln!(
                    out,
                    "{n},{p},{method},{rep},{seed},{},{wall:.6},{}",
                    result.lambda_schedule.len() - 1,
                    evaluator.eval_count()
                )?;
            }
        }
    }
    out.flush()?;
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::InvalidInput(_) | Error::Dim(_) => ExitCode::from(2),
        Error::MaxStages { .. } => ExitCode::from(3),
        Error::Unsupported(_) => ExitCode::from(4),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Run(args) => cmd_run(args),
        Command::Oracle(args) => cmd_oracle(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
