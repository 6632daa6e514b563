//! `simkrig`: design, simulate, fit, align, predict, validate and benchmark.
//!
//! Exit codes: 0 success, 2 usage error, 3 inconsistent or malformed input,
//! 4 numerical failure.

mod config;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use simkrig::emulator::{CurvePredictor, Emulator, Family, FunctionalSurrogate, PER_STEP_METHOD, SIM_METHOD};
use simkrig::io;
use simkrig::synth::{generate_analytical_with, AnalyticalSpec, ShiftMode};
use simkrig::{
    align_curves, benchmark_against_per_step, estimate_params_blocked, extract_pattern, generate_functional_sim,
    maximin_lhd, scale_to_box, to_fourier, train_emulator, validate, CurveSet, DesignMatrix, SimSpec,
};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Input(m) => write!(f, "input: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<simkrig::Error> for CliError {
    fn from(e: simkrig::Error) -> Self {
        use simkrig::Error as E;
        let msg = e.to_string();
        match e.root() {
            E::IllConditioned { .. } | E::FitFailure { .. } | E::EstimationFailure { .. } => CliError::Numeric(msg),
            _ => CliError::Input(msg),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "simkrig", version, about = "Functional kriging surrogates for time-series simulators")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set block_size=20`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for output files.
    #[arg(long, global = true, env = "SIMKRIG_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Maximin Latin hypercube design in box coordinates (design.csv).
    Design {
        #[arg(long)]
        n: usize,
        /// `name,min,max` rows, one per input.
        #[arg(long = "box")]
        input_box: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        maximin_restarts: usize,
    },
    /// Synthetic curves and their true parameters (curves.csv, true_params.csv).
    Synth {
        #[arg(long, value_enum)]
        model: SynthModel,
        /// Number of curves (parabola model).
        #[arg(long, default_value_t = 30)]
        n: usize,
        /// Samples per curve.
        #[arg(long, default_value_t = 101)]
        j: usize,
        /// Variance of the additive Gaussian noise.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Design points (co2 model).
        #[arg(long)]
        design: Option<PathBuf>,
        /// Shift the pattern through its Fourier coefficients instead of
        /// evaluating it at shifted times (parabola model, odd J).
        #[arg(long)]
        spectral: bool,
    },
    /// Train a surrogate (surrogate.json, params.csv, pattern.csv, fit.log).
    Fit {
        #[command(flatten)]
        data: CurveArgs,
        #[arg(long)]
        design: Option<PathBuf>,
        /// Input box used to flag extrapolation; the design's bounding box by default.
        #[arg(long = "box")]
        input_box: Option<PathBuf>,
    },
    /// Register curves without fitting models (params.csv, pattern.csv, aligned.csv).
    Align {
        #[command(flatten)]
        data: CurveArgs,
    },
    /// Predict curves at new points (predictions.csv).
    Predict {
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long)]
        points: Option<PathBuf>,
    },
    /// Per-step accuracy on a test set (report.csv).
    Validate {
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[command(flatten)]
        test: TestArgs,
    },
    /// Retrain the surrogate and a per-step kriging baseline and compare them
    /// (report.csv, comparison.csv, timing.csv, crossplot.csv).
    Bench {
        #[command(flatten)]
        data: CurveArgs,
        #[arg(long)]
        design: Option<PathBuf>,
        #[command(flatten)]
        test: TestArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthModel {
    Parabola,
    Co2,
}

#[derive(Args)]
struct CurveArgs {
    /// Curves CSV: rows are curves, columns time steps.
    #[arg(long)]
    curves: Option<PathBuf>,
    /// Sample times, one per line (overrides the curves header).
    #[arg(long)]
    times: Option<PathBuf>,
    /// Curve period; samples are then placed at 0, period/J, ...
    #[arg(long)]
    period: Option<f64>,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    test_design: Option<PathBuf>,
    #[arg(long)]
    test_curves: Option<PathBuf>,
}

/// Output files are rendered in memory and only written once every one of
/// them is ready; each is written to a temporary file and renamed into place.
struct Outputs {
    dir: PathBuf,
    files: Vec<(&'static str, String)>,
}

impl Outputs {
    fn new(dir: PathBuf) -> Self {
        Self { dir, files: Vec::new() }
    }

    fn add(&mut self, name: &'static str, contents: String) {
        self.files.push((name, contents));
    }

    fn commit(self) -> Result<()> {
        let io_err = |e: std::io::Error| CliError::Input(format!("{}: {e}", self.dir.display()));
        std::fs::create_dir_all(&self.dir).map_err(io_err)?;
        for (name, contents) in &self.files {
            let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io_err)?;
            tmp.write_all(contents.as_bytes()).map_err(io_err)?;
            tmp.persist(self.dir.join(name)).map_err(|e| io_err(e.error))?;
            eprintln!("wrote {}", self.dir.join(name).display());
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn located(path: &Path) -> impl Fn(simkrig::Error) -> CliError + '_ {
    move |e| {
        let inner = CliError::from(e);
        match inner {
            CliError::Input(m) => CliError::Input(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

/// Flag, else config key, else a usage error.
fn required<'a>(flag: &'a Option<PathBuf>, cfg: &'a RunConfig, key: &str) -> Result<&'a Path> {
    flag.as_deref()
        .or_else(|| cfg.path(key))
        .ok_or_else(|| CliError::Usage(format!("--{} is required", key.replace('_', "-"))))
}

fn load_design(path: &Path) -> Result<(Vec<String>, DesignMatrix)> {
    io::read_design(&read(path)?).map_err(located(path))
}

fn load_curves(args: &CurveArgs, cfg: &RunConfig) -> Result<CurveSet> {
    let path = required(&args.curves, cfg, "curves")?;
    let times = match args.times.as_deref().or_else(|| cfg.path("times")) {
        Some(p) => Some(io::read_column(&read(p)?).map_err(located(p))?),
        None => None,
    };
    let period = args.period.or(cfg.period);
    io::read_curves(&read(path)?, times.as_deref(), period).map_err(located(path))
}

fn check_rows(design: &DesignMatrix, curves: &CurveSet, what: &str) -> Result<()> {
    if design.n() != curves.n() {
        return Err(CliError::Input(format!(
            "{what}: design has {} rows but there are {} curves",
            design.n(),
            curves.n()
        )));
    }
    Ok(())
}

fn load_emulator(path: &Path) -> Result<Emulator> {
    Emulator::from_json(&read(path)?).map_err(located(path))
}

fn load_test(args: &TestArgs, cfg: &RunConfig) -> Result<(DesignMatrix, CurveSet)> {
    let (_, design) = load_design(required(&args.test_design, cfg, "test_design")?)?;
    let path = required(&args.test_curves, cfg, "test_curves")?;
    let curves = io::read_curves(&read(path)?, None, cfg.period).map_err(located(path))?;
    check_rows(&design, &curves, "test set")?;
    Ok((design, curves))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let out_dir = cli
        .out_dir
        .clone()
        .or_else(|| cfg.path("out_dir").map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    let mut out = Outputs::new(out_dir);

    match cli.command {
        Command::Design {
            n,
            input_box,
            seed,
            maximin_restarts,
        } => {
            if n < 2 {
                return Err(CliError::Usage("--n must be at least 2".into()));
            }
            let box_path = required(&input_box, &cfg, "box")?;
            let b = io::read_box(&read(box_path)?).map_err(located(box_path))?;
            let unit = maximin_lhd(n, b.dims(), seed, maximin_restarts.max(1))?;
            println!("min pairwise distance (unit cube): {}", unit.min_pairwise_distance());
            out.add("design.csv", io::write_design(&scale_to_box(&unit, &b)?, &b.names));
        }
        Command::Synth {
            model,
            n,
            j,
            noise,
            seed,
            design,
            spectral,
        } => {
            let (curves, params) = match model {
                SynthModel::Parabola => {
                    let spec = AnalyticalSpec {
                        shift: if spectral { ShiftMode::Spectral } else { ShiftMode::Analytic },
                        ..AnalyticalSpec::new(n, j, noise, seed)
                    };
                    generate_analytical_with(&spec)?
                }
                SynthModel::Co2 => {
                    let (_, d) = load_design(required(&design, &cfg, "design")?)?;
                    let spec = SimSpec::co2_default(j, noise, seed);
                    (generate_functional_sim(&spec, &d)?, spec.true_params(&d)?)
                }
            };
            out.add("curves.csv", io::write_curves(&curves));
            out.add("true_params.csv", io::write_params(&params));
        }
        Command::Fit {
            data,
            design,
            input_box,
        } => {
            required(&data.curves, &cfg, "curves")?;
            let (_, d) = load_design(required(&design, &cfg, "design")?)?;
            let curves = load_curves(&data, &cfg)?;
            check_rows(&d, &curves, "training set")?;
            let mut sc = cfg.surrogate.clone();
            if let Some(p) = input_box.as_deref().or_else(|| cfg.path("box")) {
                sc.input_box = Some(io::read_box(&read(p)?).map_err(located(p))?);
            }
            let emu = train_emulator(&d, &curves, &sc)?;
            eprintln!("trained in {:.3?}", emu.train_time());
            let surrogates = emu.surrogates();
            let windowed = surrogates.len() > 1;
            let mut log = String::new();
            for (w, s) in surrogates.iter().enumerate() {
                let tag = if windowed { format!("window {}: ", w + 1) } else { String::new() };
                write_fit_log(&mut log, &tag, s);
                if windowed {
                    out.add(leak(format!("params_w{}.csv", w + 1)), io::write_params(&s.training.params));
                    out.add(leak(format!("pattern_w{}.csv", w + 1)), io::write_pattern(&s.t_grid, &s.pattern.values));
                }
            }
            if !windowed {
                let s = surrogates[0];
                out.add("params.csv", io::write_params(&s.training.params));
                out.add("pattern.csv", io::write_pattern(&s.t_grid, &s.pattern.values));
            }
            eprint!("{log}");
            out.add("surrogate.json", emu.to_json()?);
            out.add("fit.log", log);
        }
        Command::Align { data } => {
            let curves = load_curves(&data, &cfg)?;
            let (curves, dropped) = if curves.len() % 2 == 0 { curves.make_odd() } else { (curves, false) };
            if dropped {
                eprintln!("warning: even number of samples; the last sample was dropped");
            }
            let sc = &cfg.surrogate;
            let (params, diags) = estimate_params_blocked(&curves, sc.block_size, &sc.estimation)?;
            let pattern = extract_pattern(&to_fourier(&curves)?, &params)?;
            for (b, diag) in diags.iter().enumerate() {
                eprintln!("block {}: contrast {:e}", b + 1, diag.contrast);
            }
            out.add("params.csv", io::write_params(&params));
            out.add("pattern.csv", io::write_pattern(&curves.t_grid(), &pattern.values));
            out.add("aligned.csv", io::write_curves(&align_curves(&curves, &params)?));
        }
        Command::Predict { surrogate, points } => {
            let emu = load_emulator(required(&surrogate, &cfg, "surrogate")?)?;
            let (_, pts) = load_design(required(&points, &cfg, "points")?)?;
            if pts.n() > 0 && pts.dims() != emu.dims() {
                return Err(CliError::Input(format!(
                    "points have {} columns but the surrogate has {} inputs",
                    pts.dims(),
                    emu.dims()
                )));
            }
            let preds = pts.rows().iter().map(|x| emu.predict_curve(x)).collect::<simkrig::Result<Vec<_>>>()?;
            let outside = preds.iter().filter(|p| p.out_of_box).count();
            if outside > 0 {
                eprintln!("warning: {outside} point(s) outside the training box");
            }
            out.add("predictions.csv", io::write_predictions(emu.t_grid(), &preds));
        }
        Command::Validate { surrogate, test } => {
            let emu = load_emulator(required(&surrogate, &cfg, "surrogate")?)?;
            let (td, tc) = load_test(&test, &cfg)?;
            let report = validate(&emu, &td, &tc)?;
            println!(
                "mean Q2 {:.6}, overall RMSE {:e}, {} flagged step(s)",
                report.mean_q2(),
                report.overall_rmse,
                report.flags.iter().filter(|f| **f).count()
            );
            out.add("report.csv", io::write_report(&report));
        }
        Command::Bench { data, design, test } => {
            required(&data.curves, &cfg, "curves")?;
            required(&test.test_design, &cfg, "test_design")?;
            required(&test.test_curves, &cfg, "test_curves")?;
            let (_, d) = load_design(required(&design, &cfg, "design")?)?;
            let curves = load_curves(&data, &cfg)?;
            check_rows(&d, &curves, "training set")?;
            let (td, tc) = load_test(&test, &cfg)?;
            let b = benchmark_against_per_step(&d, &curves, &td, &tc, &cfg.surrogate)?;
            let mut timing = String::from("method,train_seconds,predict_seconds,mean_q2,overall_rmse\n");
            for (m, r, t) in [
                (SIM_METHOD, &b.sim, b.sim_train_time),
                (PER_STEP_METHOD, &b.per_step, b.per_step_train_time),
            ] {
                println!("{m}: train {t:.3?}, mean Q2 {:.6}", r.mean_q2());
                writeln!(
                    timing,
                    "{m},{},{},{},{}",
                    io::fmt_num(t.as_secs_f64()),
                    io::fmt_num(r.runtime_predict.as_secs_f64()),
                    io::fmt_num(r.mean_q2()),
                    io::fmt_num(r.overall_rmse)
                )
                .unwrap();
            }
            let mut cmp = String::from("step,t,sim_rmse,sim_q2,per_step_rmse,per_step_q2,flag\n");
            for m in 0..b.sim.t.len() {
                writeln!(
                    cmp,
                    "{},{},{},{},{},{},{}",
                    m + 1,
                    io::fmt_num(b.sim.t[m]),
                    io::fmt_num(b.sim.per_step_rmse[m]),
                    io::fmt_num(b.sim.per_step_q2[m]),
                    io::fmt_num(b.per_step.per_step_rmse[m]),
                    io::fmt_num(b.per_step.per_step_q2[m]),
                    u8::from(b.sim.flags[m])
                )
                .unwrap();
            }
            out.add("report.csv", io::write_report(&b.sim));
            out.add("comparison.csv", cmp);
            out.add("timing.csv", timing);
            out.add("crossplot.csv", io::write_crossplot(&b.crossplot));
        }
    }
    out.commit()
}

fn write_fit_log(log: &mut String, tag: &str, s: &FunctionalSurrogate) {
    if s.training.dropped_last_sample {
        writeln!(log, "{tag}warning: even number of samples; the last sample was dropped").unwrap();
    }
    writeln!(log, "{tag}contrast {:e}", s.contrast()).unwrap();
    for f in [Family::Alpha, Family::Theta, Family::V] {
        match s.model(f).loo_q2() {
            Some(q2) => writeln!(log, "{tag}{} LOO Q2 {q2:.6}", f.name()).unwrap(),
            None => writeln!(log, "{tag}{} fixed at {}", f.name(), s.model(f).predict(&[]).unwrap_or(f64::NAN)).unwrap(),
        }
    }
}

/// Window file names are built once per run; leaking them keeps `Outputs`
/// free of lifetimes.
fn leak(s: String) -> &'static str {
    Box::leak(s.into_boxed_str())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SIMKRIG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("SIMKRIG_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let keys: String = config::KEYS.iter().map(|(k, d)| format!("  {k}: {d}\n")).collect();
    let matches = Cli::command()
        .after_long_help(format!("Configuration keys (--config file or --set):\n{keys}"))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("simkrig: {e}");
            ExitCode::from(e.code())
        }
    }
}
