//! `robust-sid`: simulate datasets, identify Markov-parameter matrices and
//! run the Monte Carlo benchmark.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use robust_sid::bayes::GfVariant;
use robust_sid::bench::{
    execute_run, gibbs_rng, realize_system, run_benchmark, run_rng, BenchConfig, Realization,
};
use robust_sid::io::{read_signals, write_matrix, write_signals, Signals};
use robust_sid::linalg::singular_values_desc;
use robust_sid::lti::{sample_system, true_decomposition, StateSpaceModel};
use robust_sid::pipeline::{identify, Method};
use robust_sid::sid::{assemble, WeightScheme};

const VERSION: &str = env!("CARGO_PKG_VERSION");

mod exit {
    pub const USAGE: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;
    pub const CONFIG_VALUE: u8 = 5;
    pub const CONFIG_MISSING: u8 = 6;
    pub const UNSUPPORTED: u8 = 7;
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<robust_sid::Error> for Failure {
    fn from(e: robust_sid::Error) -> Self {
        use robust_sid::Error as E;
        let code = match &e {
            E::Parse { .. } | E::Io(_) | E::ShapeMismatch(_) | E::InsufficientSamples { .. } => {
                exit::DATA
            }
            E::InvalidConfig(_) => exit::CONFIG_VALUE,
            E::Unsupported(_) => exit::UNSUPPORTED,
            _ => exit::NUMERICAL,
        };
        Failure::new(code, e.to_string())
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(exit::DATA, format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "robust-sid",
    version,
    about = "Regularized subspace identification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one random system and write its data and ground truth.
    Simulate(SimulateArgs),
    /// Estimate the Markov-parameter matrix of a dataset.
    Identify(IdentifyArgs),
    /// Compare the estimators over random systems.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML file with default settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight scheme: identity, cva or n4sid.
    #[arg(long)]
    scheme: Option<WeightScheme>,
    /// Posterior for the noise shaping: hankel or independent.
    #[arg(long = "gf-variant")]
    gf_variant: Option<GfVariant>,
    /// Gibbs chain length.
    #[arg(long)]
    nf: Option<usize>,
    /// Gibbs burn-in.
    #[arg(long = "no")]
    n_burn: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    show_config: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Fix the state dimension.
    #[arg(long)]
    nx: Option<usize>,
    /// Zero process and measurement noise; the horizon becomes `n_x`.
    #[arg(long)]
    noiseless: bool,
}

#[derive(Args, Debug)]
struct IdentifyArgs {
    #[command(flatten)]
    common: Common,
    /// Input/output data file.
    data: PathBuf,
    #[arg(long, default_value = "optimal")]
    method: Method,
    /// Past and future horizon; defaults to the value recorded in the data
    /// file or to `floor(N / 10)`.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    runs: Option<usize>,
    /// Methods to compare (comma separated); the reference is always added.
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
}

fn load_config(common: &Common) -> Result<BenchConfig, Failure> {
    let mut cfg = match &common.config {
        None => BenchConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::new(exit::CONFIG_MISSING, format!("{}: {e}", path.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| Failure::new(exit::CONFIG_VALUE, format!("{}: {e}", path.display())))?
        }
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(scheme) = common.scheme {
        cfg.scheme = scheme;
    }
    if let Some(v) = common.gf_variant {
        cfg.gibbs.gf_variant = v;
    }
    if let Some(n) = common.nf {
        cfg.gibbs.n_total = n;
    }
    if let Some(n) = common.n_burn {
        cfg.gibbs.n_burn = n;
    }
    if let Some(t) = common.threads {
        cfg.parallelism = t;
    }
    Ok(cfg)
}

/// Configuration as recorded in outputs; thread count is left out so the
/// files do not depend on it.
fn config_json(cfg: &BenchConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(map) = v.as_object_mut() {
        map.remove("parallelism");
    }
    v
}

fn out_dir(common: &Common) -> Result<PathBuf, Failure> {
    let dir = common
        .out
        .clone()
        .ok_or_else(|| Failure::new(exit::USAGE, "--out is required"))?;
    fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, Failure> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_failure(path, e))
}

fn header(command: &str, extra: &[(&str, String)]) -> Vec<(String, String)> {
    let mut meta = vec![
        ("version".to_string(), VERSION.to_string()),
        ("command".to_string(), command.to_string()),
    ];
    meta.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    meta
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| Failure::new(exit::DATA, e.to_string()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| io_failure(path, e))
}

fn write_matrix_file(
    path: &Path,
    m: &DMatrix<f64>,
    meta: &[(String, String)],
) -> Result<(), Failure> {
    let mut w = create(path)?;
    write_matrix(&mut w, m, meta)?;
    w.flush().map_err(|e| io_failure(path, e))
}

fn noiseless_realization(cfg: &BenchConfig) -> Result<Realization, Failure> {
    let mut rng = run_rng(cfg.seed, 0);
    let sampled = sample_system(&cfg.system, &mut rng)?;
    let m = &sampled.model;
    let model = StateSpaceModel::noiseless(m.a.clone(), m.b.clone(), m.c.clone(), m.d.clone());
    let horizon = model.n_x();
    let mut system = sampled.clone();
    system.model = model;
    system.horizon = horizon;
    Ok(realize_system(system, &mut rng))
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(nx) = args.nx {
        cfg.system.nx_range = (nx, nx);
    }
    cfg.system.validate()?;
    let mut recorded = config_json(&cfg);
    recorded["noiseless"] = json!(args.noiseless);
    if args.common.show_config {
        println!("{}", serde_json::to_string_pretty(&recorded).expect("json"));
        return Ok(());
    }
    let dir = out_dir(&args.common)?;
    let real = if args.noiseless {
        noiseless_realization(&cfg)?
    } else {
        execute_run(&cfg, 0)?.realization
    };
    let truth = true_decomposition(&real.system.model, real.f, real.p);
    let meta = header(
        "simulate",
        &[
            ("config", recorded.to_string()),
            ("seed", cfg.seed.to_string()),
            ("nx", real.system.model.n_x().to_string()),
            ("snr", format!("{:?}", real.system.snr)),
            ("n_samples", real.system.n_samples.to_string()),
            ("horizon", real.f.to_string()),
        ],
    );

    let data_path = dir.join("data.csv");
    let mut w = create(&data_path)?;
    for (k, v) in &meta {
        writeln!(w, "# {k}: {v}").map_err(|e| io_failure(&data_path, e))?;
    }
    write_signals(&mut w, &Signals::new(real.u.clone(), real.y.clone())?)?;
    w.flush().map_err(|e| io_failure(&data_path, e))?;

    write_matrix_file(&dir.join("h_fp_true.csv"), &truth.h_fp, &meta)?;
    write_json(
        &dir.join("model.json"),
        &json!({
            "version": VERSION,
            "command": "simulate",
            "config": recorded,
            "snr": real.system.snr,
            "n_samples": real.system.n_samples,
            "horizon": real.f,
            "model": real.system.model,
        }),
    )
}

/// Horizon `i` with `N + 2i - 1 = T` and `i = floor(N / 10)`.
fn default_horizon(samples: usize) -> Option<usize> {
    (1..=samples).rev().find_map(|n| {
        let i = n / 10;
        (i >= 1 && n + 2 * i - 1 == samples).then_some(i)
    })
}

fn recorded_horizon(path: &Path) -> Result<Option<usize>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
    Ok(text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l.trim_start_matches('#').split_once(':'))
        .find(|(k, _)| k.trim() == "horizon")
        .and_then(|(_, v)| v.trim().parse().ok()))
}

fn identify_cmd(args: IdentifyArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.common)?;
    cfg.gibbs.validate()?;
    let recorded = json!({
        "scheme": cfg.scheme,
        "method": args.method,
        "gibbs": cfg.gibbs,
        "seed": cfg.seed,
        "horizon": args.horizon,
    });
    if args.common.show_config {
        println!("{}", serde_json::to_string_pretty(&recorded).expect("json"));
        return Ok(());
    }
    let file = fs::File::open(&args.data).map_err(|e| io_failure(&args.data, e))?;
    let signals = read_signals(BufReader::new(file))?;
    let horizon = match args.horizon {
        Some(h) => h,
        None => recorded_horizon(&args.data)?
            .or_else(|| default_horizon(signals.len()))
            .ok_or_else(|| Failure::new(exit::DATA, "cannot infer the horizon; pass --horizon"))?,
    };
    let dir = out_dir(&args.common)?;
    let data = assemble(&signals.u, &signals.y, horizon, horizon)?;
    let mut rng = gibbs_rng(cfg.seed, 0);
    let id = identify(&data, cfg.scheme, &[args.method], &cfg.gibbs, &mut rng)?;
    let est = id.estimate(args.method).expect("requested method");

    let weighted = id.weights.apply(&est.h_fp);
    let top = id.singular_values.first().copied().unwrap_or(0.0);
    let rank = singular_values_desc(&weighted)
        .iter()
        .filter(|&&s| s > 1e-9 * top)
        .count();
    let meta = header(
        "identify",
        &[
            ("config", recorded.to_string()),
            ("method", args.method.name().to_string()),
            ("scheme", cfg.scheme.name().to_string()),
            ("f", horizon.to_string()),
            ("p", horizon.to_string()),
            ("N", data.n.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
    );
    write_matrix_file(&dir.join("h_fp_ls.csv"), &id.ls.h_fp_hat, &meta)?;
    write_matrix_file(&dir.join("h_fp_estimate.csv"), &est.h_fp, &meta)?;
    let sv = DMatrix::from_column_slice(id.singular_values.len(), 1, &id.singular_values);
    write_matrix_file(&dir.join("singular_values.csv"), &sv, &meta)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "version": VERSION,
            "command": "identify",
            "config": recorded,
            "method": args.method,
            "scheme": cfg.scheme,
            "f": horizon,
            "p": horizon,
            "n": data.n,
            "sigma": id.sigma,
            "r_star": id.rank.r_star,
            "order": est.order,
            "rank": rank,
        }),
    )
}

fn benchmark_cmd(args: BenchmarkArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.common)?;
    if let Some(runs) = args.runs {
        cfg.runs = runs;
    }
    if !args.method.is_empty() {
        cfg.methods = args.method.clone();
    }
    cfg.validate()?;
    let recorded = config_json(&cfg);
    if args.common.show_config {
        println!("{}", serde_json::to_string_pretty(&recorded).expect("json"));
        return Ok(());
    }
    let dir = out_dir(&args.common)?;
    let report = run_benchmark(&cfg)?;

    let csv_path = dir.join("per_run.csv");
    let mut w = create(&csv_path)?;
    for (k, v) in header("benchmark", &[("config", recorded.to_string())]) {
        writeln!(w, "# {k}: {v}").map_err(|e| io_failure(&csv_path, e))?;
    }
    report
        .write_per_run_csv(&mut w)
        .map_err(|e| io_failure(&csv_path, e))?;
    w.flush().map_err(|e| io_failure(&csv_path, e))?;

    let mut summary = report.summary_json();
    summary["version"] = json!(VERSION);
    summary["config"] = recorded;
    write_json(&dir.join("summary.json"), &summary)?;
    write_json(
        &dir.join("timing.json"),
        &json!({ "wall_time_s": report.wall_time_s }),
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary["methods"]).expect("json")
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                ErrorKind::InvalidValue | ErrorKind::ValueValidation => exit::CONFIG_VALUE,
                _ => exit::USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Identify(a) => identify_cmd(a),
        Command::Benchmark(a) => benchmark_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
