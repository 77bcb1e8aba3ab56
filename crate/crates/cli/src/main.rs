//! `mmrisk`: calibration queries, weight emission, experiment runs and table
//! reproduction.
//!
//! Exit codes: 0 success, 2 configuration, 3 infeasible calibration, 4 I/O.

mod config_file;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use mmrisk_core::calibration::{amrr_averaged, amrr_general, amrr_recursive_free, amrr_recursive_tied};
use mmrisk_core::error::Error;
use mmrisk_core::experiments::{
    emit_weight_distribution, format_sig, render_columns, reproduce_table, run_experiment, weight_distribution,
    EstimatorConfig, ExperimentConfig, ExperimentReport, Format, Mm1Setting, ModelSpec, TableOptions, TableOutput,
};
use mmrisk_core::oracles::{BiasOrder, SyntheticOracleSpec};
use mmrisk_core::queueing::{QueueParams, RateTarget};

#[derive(Parser, Debug)]
#[command(name = "mmrisk", version, about = "Minimax calibration of biased simulation estimators")]
struct Cli {
    /// Flat `key = value` file of flag defaults; command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-form asymptotic minimax risk ratio and its configuration.
    #[command(args_override_self = true)]
    Amrr(AmrrArgs),
    /// Optimal two-decay weights for a budget.
    #[command(args_override_self = true)]
    Weights(WeightsArgs),
    /// Monte Carlo comparison on the synthetic biased model.
    #[command(name = "run-synthetic", args_override_self = true)]
    RunSynthetic(SyntheticArgs),
    /// Monte Carlo comparison on the M/M/1 derivative problem.
    #[command(name = "run-mm1", args_override_self = true)]
    RunMm1(Mm1Args),
    /// Tables 1-4 from closed forms, 5-8 by simulation.
    #[command(name = "reproduce-table", args_override_self = true)]
    ReproduceTable(TableArgs),
}

#[derive(Args, Debug, Clone)]
struct OrderArgs {
    /// Bias order q1.
    #[arg(long, default_value_t = 2.0)]
    q1: f64,
    /// Variance order q2.
    #[arg(long, default_value_t = 1.0)]
    q2: f64,
}

impl OrderArgs {
    fn order(&self) -> Result<BiasOrder, Error> {
        positive("--q1", self.q1)?;
        positive("--q2", self.q2)?;
        BiasOrder::new(self.q1, self.q2)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scheme {
    General,
    RecursiveTied,
    RecursiveFree,
    Averaged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

impl From<OutFormat> for Format {
    fn from(f: OutFormat) -> Self {
        match f {
            OutFormat::Csv => Format::Csv,
            OutFormat::Json => Format::Json,
        }
    }
}

#[derive(Args, Debug)]
struct AmrrArgs {
    #[command(flatten)]
    order: OrderArgs,
    /// Inflation cap K on d~/d (general scheme).
    #[arg(long = "K", default_value_t = 1.0)]
    k: f64,
    #[arg(long, value_enum, default_value_t = Scheme::General)]
    scheme: Scheme,
    /// Step constant for the averaged scheme.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Step exponent for the averaged scheme.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    /// Print JSON instead of columns.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    #[command(flatten)]
    order: OrderArgs,
    #[arg(long = "K", default_value_t = 1.0)]
    k: f64,
    /// Budget(s); several give an `n,j,weight` table.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    n0: usize,
    /// Output file; weights go to standard output (metadata to standard error) when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutFormat::Csv)]
    format: OutFormat,
}

#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// Baseline scale d.
    #[arg(long, default_value_t = 1.0)]
    d: f64,
    /// Inflation cap(s) K; one weighted estimator per value.
    #[arg(long = "K", value_delimiter = ',')]
    k: Vec<f64>,
    /// Budget(s).
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Root seed; generated and printed when absent.
    #[arg(long)]
    seed: Option<u64>,
    /// Estimators: baseline, recursive, averaged, weighted.
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    /// Step constant c of the recursive and averaged estimators.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// Step exponent; defaults to 1 (recursive) and 0.5 (averaged).
    #[arg(long)]
    beta: Option<f64>,
    /// d~/d for the recursive and averaged estimators; defaults to the optimal value.
    #[arg(long = "d-scale")]
    d_scale: Option<f64>,
    /// Worker threads (0 = all cores); results do not depend on it.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Report file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
    /// Record the wall-clock time in the report provenance.
    #[arg(long)]
    timestamp: bool,
}

#[derive(Args, Debug)]
struct SyntheticArgs {
    #[command(flatten)]
    order: OrderArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    /// Bias coefficient B.
    #[arg(long, default_value_t = 1.0)]
    bias: f64,
    /// Noise scale sigma.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Full experiment config (JSON); replaces the model and estimator flags.
    #[arg(long)]
    experiment: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Cfd,
    Sp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Target {
    Arrival,
    Service,
}

#[derive(Args, Debug)]
struct Mm1Args {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum, default_value_t = Method::Cfd)]
    method: Method,
    /// Rate differentiated by central differences.
    #[arg(long, value_enum, default_value_t = Target::Arrival)]
    target: Target,
    /// Common random numbers across the two perturbed runs.
    #[arg(long)]
    crn: bool,
    #[arg(long, default_value_t = 4.0)]
    arrival_rate: f64,
    #[arg(long, default_value_t = 4.0)]
    service_rate: f64,
    #[arg(long, default_value_t = 10)]
    customers: usize,
}

#[derive(Args, Debug)]
struct TableArgs {
    /// Table number, 1-8.
    #[arg(long)]
    id: u8,
    /// Budget multiplier for the simulated tables.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    workers: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutFormat::Json)]
    format: OutFormat,
    #[arg(long)]
    timestamp: bool,
}

fn positive(flag: &str, v: f64) -> Result<(), Error> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        let name = flag.trim_start_matches('-');
        Err(Error::Config(format!("{flag}: {name} must be positive, got {v}")))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Domain(_) | Error::Config(_) => 2,
        Error::Infeasible { .. } => 3,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) => 4,
    }
}

fn sig(x: f64) -> String {
    format_sig(x, 4)
}

fn seed_or_generate(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0);
        let s = nanos ^ (u64::from(std::process::id()) << 32);
        eprintln!("seed: {s} (generated; pass --seed {s} to reproduce)");
        s
    })
}

fn cmd_amrr(a: &AmrrArgs) -> Result<(), Error> {
    let order = a.order.order()?;
    positive("--K", a.k)?;
    let dash = || "-".to_string();
    let (ratio, c, beta, d_scale, k) = match a.scheme {
        Scheme::General => (amrr_general(order, a.k)?, dash(), dash(), sig(a.k), sig(a.k)),
        Scheme::RecursiveTied => {
            let (r, cal) = amrr_recursive_tied(order);
            (r, sig(cal.c), sig(cal.beta), sig(cal.d_scale), dash())
        }
        Scheme::RecursiveFree => {
            let (r, cal) = amrr_recursive_free(order);
            (r, sig(cal.c), sig(cal.beta), sig(cal.d_scale), dash())
        }
        Scheme::Averaged => {
            positive("--c", a.c)?;
            let (r, cal) = amrr_averaged(order, a.c, a.beta)?;
            (r, sig(cal.c), sig(cal.beta), sig(cal.d_scale), dash())
        }
    };
    let scheme = a.scheme.to_possible_value().unwrap().get_name().to_string();
    if a.json {
        let v = serde_json::json!({
            "scheme": scheme, "q1": order.q1, "q2": order.q2, "ratio": ratio,
            "c": c, "beta": beta, "d_scale": d_scale, "K": k,
        });
        println!("{v}");
    } else {
        let cells = vec![
            ["scheme", "ratio", "c", "beta", "d_scale", "K"].map(String::from).to_vec(),
            vec![scheme, sig(ratio), c, beta, d_scale, k],
        ];
        print!("{}", render_columns(&cells));
    }
    Ok(())
}

fn cmd_weights(a: &WeightsArgs) -> Result<(), Error> {
    let order = a.order.order()?;
    positive("--K", a.k)?;
    let schemes = weight_distribution(&a.n, a.n0, order, a.k)?;
    let amrr = amrr_general(order, a.k)?;
    let mut cells = vec![["n", "n0", "K", "lambda1", "lambda2", "a_star", "eta_star", "s_star", "scaled_s_star", "amrr"]
        .map(String::from)
        .to_vec()];
    for s in &schemes {
        cells.push(vec![
            s.n.to_string(),
            s.n0.to_string(),
            sig(s.k),
            sig(s.lambda1),
            sig(s.lambda2),
            sig(s.a_star),
            sig(s.eta_star),
            sig(s.s_star),
            sig(s.scaled_s_star()),
            sig(amrr),
        ]);
    }
    let meta = render_columns(&cells);
    match &a.out {
        Some(path) => {
            let f = std::fs::File::create(path)?;
            write_weights(&schemes, a.format, std::io::BufWriter::new(f))?;
            print!("{meta}");
        }
        None => {
            eprint!("{meta}");
            write_weights(&schemes, a.format, std::io::stdout().lock())?;
        }
    }
    Ok(())
}

fn write_weights<W: Write>(schemes: &[mmrisk_core::calibration::WeightScheme], format: OutFormat, mut out: W) -> Result<(), Error> {
    match (schemes, format) {
        ([one], OutFormat::Csv) => one.write_csv(out),
        ([one], OutFormat::Json) => {
            writeln!(out, "{}", one.to_json()?)?;
            Ok(())
        }
        (many, f) => emit_weight_distribution(many, f.into(), out),
    }
}

fn estimator_lineup(run: &RunArgs, order: BiasOrder, defaults: &[&str]) -> Result<(Vec<EstimatorConfig>, f64), Error> {
    let ks = if run.k.is_empty() { vec![1.0] } else { run.k.clone() };
    for &k in &ks {
        positive("--K", k)?;
    }
    positive("--c", run.c)?;
    let (_, free) = amrr_recursive_free(order);
    let d_scale = run.d_scale.unwrap_or(free.d_scale);
    positive("--d-scale", d_scale)?;
    let names: Vec<String> = if run.estimators.is_empty() {
        defaults.iter().map(|s| s.to_string()).collect()
    } else {
        run.estimators.clone()
    };
    let mut list = Vec::new();
    for name in &names {
        match name.trim() {
            "baseline" => list.push(EstimatorConfig::baseline()),
            "recursive" => list.push(EstimatorConfig::recursive(run.c, run.beta.unwrap_or(1.0), d_scale)),
            "averaged" => list.push(EstimatorConfig::averaged(run.c, run.beta.unwrap_or(0.5), d_scale)),
            "weighted" => list.extend(ks.iter().map(|&k| EstimatorConfig::weighted(k))),
            other => {
                return Err(Error::Config(format!(
                    "--estimators: unknown estimator {other:?} (use baseline, recursive, averaged, weighted)"
                )))
            }
        }
    }
    Ok((list, ks[0]))
}

fn check_run(run: &RunArgs) -> Result<(), Error> {
    positive("--d", run.d)?;
    if run.reps < 2 {
        return Err(Error::Config(format!("--reps: need at least 2 replications, got {}", run.reps)));
    }
    if run.n.contains(&0) {
        return Err(Error::Config("--n: budgets must be positive".into()));
    }
    Ok(())
}

fn finish_run(cfg: &ExperimentConfig, run: &RunArgs) -> Result<(), Error> {
    let mut report = run_experiment(cfg, run.workers)?;
    if run.timestamp {
        report.provenance.timestamp = Some(chrono::Utc::now().to_rfc3339());
    }
    println!(
        "# seed {} | replications {} | n0 {} | d {} | config {}",
        cfg.seed,
        cfg.replications,
        cfg.n0,
        sig(cfg.baseline_d),
        &report.provenance.config_hash[..12]
    );
    print!("{}", report.summary());
    if let Some(path) = &run.out {
        write_report(&report, path, run.format)?;
    }
    Ok(())
}

fn write_report(report: &ExperimentReport, path: &Path, format: OutFormat) -> Result<(), Error> {
    match format {
        OutFormat::Json => report.write_json(path),
        OutFormat::Csv => report.write_csv_file(path),
    }
}

fn cmd_run_synthetic(a: &SyntheticArgs) -> Result<(), Error> {
    if let Some(path) = &a.experiment {
        let mut cfg = ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?;
        if let Some(seed) = a.run.seed {
            cfg.seed = seed;
        }
        return finish_run(&cfg, &a.run);
    }
    check_run(&a.run)?;
    let order = a.order.order()?;
    let spec = SyntheticOracleSpec::degenerate(vec![a.theta], vec![a.bias], vec![a.sigma], order, None)?;
    let (estimators, k) = estimator_lineup(&a.run, order, &["baseline", "weighted"])?;
    let cfg = ExperimentConfig {
        model: ModelSpec::Synthetic { spec },
        estimators,
        budgets: a.run.n.clone(),
        baseline_d: a.run.d,
        k,
        n0: a.run.n0.unwrap_or(0),
        replications: a.run.reps,
        seed: seed_or_generate(a.run.seed),
    };
    finish_run(&cfg, &a.run)
}

fn cmd_run_mm1(a: &Mm1Args) -> Result<(), Error> {
    check_run(&a.run)?;
    let queue = QueueParams::new(a.arrival_rate, a.service_rate, a.customers)?;
    let setting = match (a.method, a.target) {
        (Method::Sp, _) => Mm1Setting::Sp,
        (Method::Cfd, Target::Arrival) => Mm1Setting::Cfd { target: RateTarget::Arrival },
        (Method::Cfd, Target::Service) => Mm1Setting::Cfd { target: RateTarget::Service },
    };
    let (estimators, k) = estimator_lineup(&a.run, BiasOrder::CENTRAL, &["baseline", "recursive", "weighted"])?;
    let cfg = ExperimentConfig {
        model: ModelSpec::Mm1 { queue, setting, crn: a.crn, theta: None },
        estimators,
        budgets: a.run.n.clone(),
        baseline_d: a.run.d,
        k,
        n0: a.run.n0.unwrap_or(500),
        replications: a.run.reps,
        seed: seed_or_generate(a.run.seed),
    };
    finish_run(&cfg, &a.run)
}

fn cmd_table(a: &TableArgs) -> Result<(), Error> {
    let simulated = (5..=8).contains(&a.id);
    let seed = if simulated { seed_or_generate(a.seed) } else { a.seed.unwrap_or(0) };
    let opts = TableOptions { replications: a.reps, seed, workers: a.workers };
    let mut out = reproduce_table(a.id, a.scale, &opts)?;
    match &mut out {
        TableOutput::ClosedForm(t) => {
            print!("{}", t.render());
            if let Some(path) = &a.out {
                match a.format {
                    OutFormat::Json => std::fs::write(path, serde_json::to_string_pretty(&out)? + "\n")?,
                    OutFormat::Csv => {
                        let mut text = String::from("label,ratio,configuration\n");
                        for e in &t.entries {
                            text.push_str(&format!("{},{},\"{}\"\n", e.label, e.ratio, e.configuration));
                        }
                        std::fs::write(path, text)?;
                    }
                }
            }
        }
        TableOutput::Empirical(report) => {
            if a.timestamp {
                report.provenance.timestamp = Some(chrono::Utc::now().to_rfc3339());
            }
            println!("# table {} | seed {seed} | replications {} | scale {}", a.id, a.reps, a.scale);
            print!("{}", report.summary());
            if let Some(path) = &a.out {
                write_report(report, path, a.format)?;
            }
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Amrr(a) => cmd_amrr(a),
        Command::Weights(a) => cmd_weights(a),
        Command::RunSynthetic(a) => cmd_run_synthetic(a),
        Command::RunMm1(a) => cmd_run_mm1(a),
        Command::ReproduceTable(a) => cmd_table(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config_file::expand(&Cli::command(), argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = Cli::parse_from(argv);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
