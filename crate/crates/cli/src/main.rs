//! Command-line front end for `dln-landscape`.
//!
//! Exit codes: 0 on success, 2 for invalid input, 3 for internal inconsistencies.
//! Machine-readable output goes to stdout, logs to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use dln_landscape::classifier::{classify, ClassifierConfig};
use dln_landscape::critical_points::{build_critical_point, build_example_family, enumerate_critical_values, ZFill};
use dln_landscape::curvature::{hessian_min_eig, second_order_coefficient, HessianMode};
use dln_landscape::data::{build_sigma_bundle, check_assumption_h, generate_gaussian_data, require_assumption_h, SigmaBundle, Tolerances};
use dln_landscape::experiments::{escape_histogram, run_experiment, ExperimentConfig, SaddleVariant};
use dln_landscape::io::{self, BundleJson, ClassificationJson, ProbeJson, SpecJson, WeightsJson};
use dln_landscape::linalg::RankTolerance;
use dln_landscape::network::{curvature_scale, gradient_scale, NetworkShape, Weights};
use dln_landscape::{Error, Result};

#[derive(Parser)]
#[command(name = "dln-landscape", version, about = "Critical points and saddles of deep linear networks")]
struct Cli {
    /// Print JSON on stdout instead of a human-readable summary.
    #[arg(long, global = true)]
    json: bool,
    /// Relative tolerance for numerical ranks.
    #[arg(long, global = true, default_value_t = 1e-8)]
    tol_rank: f64,
    /// Gradient norms up to this times the gradient scale count as zero.
    #[arg(long, global = true, default_value_t = 1e-6)]
    tol_crit: f64,
    /// Curvature below minus this times the curvature scale counts as negative.
    #[arg(long, global = true, default_value_t = 1e-8)]
    tol_eig: f64,
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate Gaussian data and check the data assumptions.
    GenData {
        #[arg(long)]
        dx: usize,
        #[arg(long)]
        dy: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Writes `<prefix>_X.csv`, `<prefix>_Y.csv` and `<prefix>_assumption.json`.
        #[arg(long)]
        out_prefix: PathBuf,
        /// Also export eigenvalues and eigenvectors of Σ.
        #[arg(long)]
        bundle_out: Option<PathBuf>,
    },
    /// Build a critical point from a spec file or from the example family.
    Construct {
        #[command(flatten)]
        data: DataArgs,
        /// Layer widths `d_x,d_1,...,d_y`.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        #[arg(long, conflicts_with = "example_rank", required_unless_present = "example_rank")]
        spec: Option<PathBuf>,
        /// Use the example family with `S = {1..r}`.
        #[arg(long)]
        example_rank: Option<usize>,
        /// Example family: zero interior blocks.
        #[arg(long, requires = "example_rank")]
        tightened: bool,
        #[arg(long, value_enum, default_value_t = Fill::TopLeft)]
        fill: Fill,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Classify a critical point.
    Classify {
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Smallest Hessian eigenvalue and sampled curvatures.
    Probe {
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = Mode::Dense)]
        mode: Mode,
        /// Number of random unit directions to sample `c2` along.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List all critical values.
    Enumerate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
    },
    /// Run the saddle-escape experiment.
    Experiment {
        /// JSON file with experiment settings; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Writes `<prefix>_runs.csv`, `<prefix>_histogram.csv` and `<prefix>_summary.json`.
        #[arg(long)]
        out_prefix: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, default_value_t = 25)]
        bin_width: usize,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV (`d_x` rows).
    #[arg(long)]
    x: PathBuf,
    /// Target CSV (`d_y` rows).
    #[arg(long)]
    y: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fill {
    TopLeft,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dense,
    Probe,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 3 } else { 2 })
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = ClassifierConfig {
        rank_tol: RankTolerance::relative(cli.tol_rank),
        tau_crit: cli.tol_crit,
        witness_tol: cli.tol_eig,
        ..ClassifierConfig::default()
    };
    match &cli.cmd {
        Command::GenData { dx, dy, m, seed, out_prefix, bundle_out } => {
            gen_data(cli, *dx, *dy, *m, *seed, out_prefix, bundle_out.as_deref())
        }
        Command::Construct { data, dims, spec, example_rank, tightened, fill, out, spec_out } => {
            let bundle = load_bundle(data)?;
            let shape = NetworkShape::new(dims.clone())?;
            shape.check_data(&bundle)?;
            let (spec, w) = match (spec, example_rank) {
                (Some(p), _) => {
                    let spec = io::read_json::<SpecJson>(p)?.to_spec(&shape)?;
                    let w = build_critical_point(&shape, &bundle, &spec)?;
                    (spec, w)
                }
                (None, Some(r)) => {
                    let fill = match fill {
                        Fill::TopLeft => ZFill::TopLeft,
                        Fill::Identity => ZFill::Identity,
                    };
                    build_example_family(&shape, &bundle, *r, *tightened, fill)?
                }
                (None, None) => return Err(Error::Parse("need --spec or --example-rank".into())),
            };
            io::write_weights(&w, out)?;
            if let Some(p) = spec_out {
                io::write_json(&SpecJson::from(&spec), p)?;
            }
            let loss = w.loss_from_moments(&bundle);
            let grad = w.gradient(&bundle).norm();
            info!("wrote {}", out.display());
            if cli.json {
                #[derive(Serialize)]
                struct Out<'a> {
                    weights: &'a Path,
                    support: &'a [usize],
                    loss: f64,
                    gradient_norm: f64,
                }
                print_json(&Out { weights: out, support: spec.support.indices(), loss, gradient_norm: grad })
            } else {
                println!("wrote {}  support {}  loss {loss:.6e}  |grad| {grad:.3e}", out.display(), spec.support);
                Ok(())
            }
        }
        Command::Classify { weights, data } => {
            let bundle = load_bundle(data)?;
            let w = io::read_weights(weights)?;
            let loss = w.loss_from_moments(&bundle);
            let out = match classify(&w, &bundle, &cfg) {
                Ok(c) => ClassificationJson::from_classification(&c, loss),
                Err(Error::NotCritical(msg)) => {
                    info!("{msg}");
                    ClassificationJson::not_critical(w.gradient(&bundle).norm(), gradient_scale(&w, &bundle), loss)
                }
                Err(e) => return Err(e),
            };
            if cli.json {
                print_json(&out)
            } else {
                print_classification(&out);
                Ok(())
            }
        }
        Command::Probe { weights, data, mode, samples, seed } => {
            let bundle = load_bundle(data)?;
            let w = io::read_weights(weights)?;
            probe(cli, &w, &bundle, *mode, *samples, *seed)
        }
        Command::Enumerate { data, dims } => {
            let bundle = load_bundle(data)?;
            let shape = NetworkShape::new(dims.clone())?;
            let entries = enumerate_critical_values(&shape, &bundle)?;
            if cli.json {
                print_json(&entries)
            } else {
                println!("{:<20} {:>16}  kind", "support", "value");
                for e in &entries {
                    println!("{:<20} {:>16.8e}  {:?}", e.support.to_string(), e.value, e.kind_hint);
                }
                Ok(())
            }
        }
        Command::Experiment { config, out_prefix, threads, bin_width } => {
            experiment(cli, config.as_deref(), out_prefix, *threads, *bin_width)
        }
    }
}

fn load_bundle(d: &DataArgs) -> Result<SigmaBundle> {
    let data = io::read_data(&d.x, &d.y)?;
    require_assumption_h(&data, &Tolerances::default())?;
    build_sigma_bundle(&data)
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    use std::io::Write;
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Parse(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{s}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_data(cli: &Cli, dx: usize, dy: usize, m: usize, seed: u64, prefix: &Path, bundle_out: Option<&Path>) -> Result<()> {
    let data = generate_gaussian_data(dx, dy, m, seed)?;
    let report = check_assumption_h(&data, &Tolerances::default());
    if !report.holds {
        let names: Vec<_> = report.failures().iter().map(|c| c.name.clone()).collect();
        if cli.json {
            print_json(&report)?;
        }
        return Err(Error::AssumptionViolated(names.join(", ")));
    }
    io::write_matrix_csv_file(data.x(), &with_suffix(prefix, "_X.csv"))?;
    io::write_matrix_csv_file(data.y(), &with_suffix(prefix, "_Y.csv"))?;
    io::write_json(&report, &with_suffix(prefix, "_assumption.json"))?;
    if let Some(p) = bundle_out {
        io::write_json(&BundleJson::new(&build_sigma_bundle(&data)?, true), p)?;
    }
    if cli.json {
        print_json(&report)
    } else {
        for c in &report.checks {
            println!("{:<30} {:<5} {:.6e} (threshold {:.3e})", c.name, c.passed, c.measured, c.threshold);
        }
        Ok(())
    }
}

fn print_classification(c: &ClassificationJson) {
    println!("verdict         {}", c.verdict);
    println!("loss            {:.8e}", c.loss);
    println!("gradient norm   {:.3e} (scale {:.3e})", c.gradient_norm, c.gradient_scale);
    if let (Some(s), Some(r), Some(v)) = (&c.support, c.r, c.critical_value) {
        println!("rank            {r}");
        println!("support         {s:?}");
        println!("critical value  {v:.8e}");
        if c.approximate {
            println!("note            gradient above the strict threshold");
        }
        if !c.pivots.is_empty() {
            println!("{:>4} {:>4} {:>6} {:>6}  tightened", "i", "j", "rank1", "rank2");
            for p in &c.pivots {
                println!("{:>4} {:>4} {:>6} {:>6}  {}", p.i, p.j, p.rank1, p.rank2, p.tightened);
            }
        }
    }
    if let Some(w) = &c.witness_info {
        println!("witness         {:?}  c2 {:.6e}", w.kind, w.c2);
    }
}

fn probe(cli: &Cli, w: &Weights, bundle: &SigmaBundle, mode: Mode, samples: usize, seed: u64) -> Result<()> {
    let mode = match mode {
        Mode::Dense => HessianMode::Dense,
        Mode::Probe => HessianMode::Probe,
    };
    let eig = hessian_min_eig(w, bundle, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c2_samples = Vec::with_capacity(samples);
    for _ in 0..samples {
        let d = Weights::gaussian(w.shape(), 1.0, &mut rng);
        let n = d.norm();
        let d = if n > 0.0 { d.scaled(1.0 / n) } else { d };
        c2_samples.push(second_order_coefficient(w, &d, bundle)?);
    }
    let scale = curvature_scale(w, bundle);
    let witness = (eig.lambda_min < -cli.tol_eig * scale).then(|| WeightsJson::from(&eig.vector));
    let out = ProbeJson { lambda_min: eig.lambda_min, c2_samples, witness, n_params: eig.n_params, curvature_scale: scale };
    if cli.json {
        print_json(&out)
    } else {
        println!("lambda_min   {:.8e}  ({} parameters, scale {:.3e})", out.lambda_min, out.n_params, scale);
        let lo = out.c2_samples.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = out.c2_samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !out.c2_samples.is_empty() {
            println!("c2 samples   {} in [{lo:.6e}, {hi:.6e}]", out.c2_samples.len());
        }
        println!("negative     {}", out.witness.is_some());
        Ok(())
    }
}

fn experiment(cli: &Cli, config: Option<&Path>, prefix: &Path, threads: Option<usize>, bin_width: usize) -> Result<()> {
    let cfg: ExperimentConfig = match config {
        Some(p) => io::read_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidShape(format!("thread pool: {e}")))?;
    }
    info!("running {} runs per variant", cfg.n_runs);
    let result = run_experiment(&cfg)?;
    let runs = std::fs::File::create(with_suffix(prefix, "_runs.csv"))?;
    io::write_runs_csv(&result, std::io::BufWriter::new(runs))?;
    let hist = std::fs::File::create(with_suffix(prefix, "_histogram.csv"))?;
    io::write_histogram_csv(&escape_histogram(&result, bin_width), std::io::BufWriter::new(hist))?;

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a ExperimentConfig,
        summaries: &'a [dln_landscape::experiments::VariantSummary],
        /// Tightened median over non-tightened median.
        median_ratio: Option<f64>,
    }
    let med = |v| result.summary(v).and_then(|s| s.median);
    let median_ratio = match (med(SaddleVariant::Tightened), med(SaddleVariant::NonTightened)) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    let summary = Summary { config: &result.config, summaries: &result.summaries, median_ratio };
    io::write_json(&summary, &with_suffix(prefix, "_summary.json"))?;
    if cli.json {
        print_json(&summary)
    } else {
        for s in &result.summaries {
            println!(
                "{:<14} median {:>8} q1 {:>8} q3 {:>8} never {:.2}  diverged {}",
                s.variant.to_string(),
                fmt_opt(s.median),
                fmt_opt(s.q1),
                fmt_opt(s.q3),
                s.fraction_never_escaped,
                s.diverged
            );
        }
        if let Some(r) = median_ratio {
            println!("median ratio   {r:.3}");
        }
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("inf".into(), |x| format!("{x:.1}"))
}
