use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing::{info, warn};

use obbtrh::error::{Error, Result};
use obbtrh::fixture::{generate, render_vnnlib, FixtureParams};
use obbtrh::graph::NetworkGraph;
use obbtrh::interval::BoundStore;
use obbtrh::obbt::ObbtConfig;
use obbtrh::parse::{emit_network_json, parse_network_json, parse_vnnlib, read_text, PropertySpec};
use obbtrh::verify::{
    compute_bounds, compute_metrics, lp_bound_of_final_mip, verify, Method, Outcome, Report, Verdict, VerifyControls,
};

const EXIT_HOLDS: u8 = 0;
const EXIT_VIOLATED: u8 = 1;
const EXIT_UNKNOWN: u8 = 2;
const EXIT_ERROR: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "obbtrh", version, about = "Bound tightening and complete verification for ReLU networks")]
struct Cli {
    /// Increase log detail on stderr (-v info, -vv debug, -vvv per-node trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tighten bounds, solve the verification MILP, and write a report.
    Verify(VerifyArgs),
    /// Only tighten bounds and write them as JSON.
    Tighten(TightenArgs),
    /// Bound-quality metrics for a stored or freshly computed bound set.
    Report(ReportArgs),
    /// Write a seeded random network and property.
    Fixture(FixtureArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Ibp,
    Lp,
    ObbtRh,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ibp => Method::Ibp,
            MethodArg::Lp => Method::Lp,
            MethodArg::ObbtRh => Method::ObbtRh,
        }
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Network in the JSON format.
    #[arg(long)]
    model: PathBuf,
    /// Property in the VNN-LIB subset; its input bounds define the region.
    #[arg(long)]
    property: PathBuf,
}

#[derive(Args, Debug)]
struct BoundArgs {
    #[arg(long, value_enum, default_value = "obbt-rh")]
    method: MethodArg,
    /// Gemm layers per tightening window (obbt-rh only; default 2).
    #[arg(long)]
    horizon: Option<usize>,
    /// Seconds per tightening subproblem.
    #[arg(long, env = "OBBTRH_TIME_LIMIT", default_value_t = 30.0)]
    time_limit: f64,
    /// Seconds for the whole run.
    #[arg(long, env = "OBBTRH_TOTAL_TIME_LIMIT")]
    total_time_limit: Option<f64>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Also tighten the output layer.
    #[arg(long)]
    tighten_output: bool,
    /// Solve every tightening subproblem to optimality instead of stopping once the sign is known.
    #[arg(long)]
    no_early_stop: bool,
    /// Load bounds from this file instead of computing them.
    #[arg(long)]
    bounds_in: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    bounds: BoundArgs,
    /// Prune search nodes that cannot reach a certified counterexample.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    cutoff_zero: bool,
    #[arg(long)]
    bounds_out: Option<PathBuf>,
    /// Report JSON path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TightenArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    bounds: BoundArgs,
    /// Bound JSON path (stdout when omitted).
    #[arg(long, visible_alias = "bounds-out")]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    bounds: BoundArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    gemms: usize,
    #[arg(long, default_value_t = 2)]
    input_dim: usize,
    #[arg(long, default_value_t = 1)]
    output_dim: usize,
    #[arg(long, default_value_t = 6)]
    max_width: usize,
    /// Resample until at most this many ReLUs are unstable under interval propagation.
    #[arg(long)]
    max_unstable: Option<usize>,
    /// Let the output layer also read the first hidden layer.
    #[arg(long)]
    skip_connection: bool,
    /// Directory for model.json and property.vnnlib.
    #[arg(long)]
    out_dir: PathBuf,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn seconds(v: f64, flag: &str) -> Result<Duration> {
    if v.is_finite() && v > 0.0 {
        Ok(Duration::from_secs_f64(v))
    } else {
        Err(usage(format!("--{flag} must be a positive number of seconds")))
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

struct Loaded {
    net: NetworkGraph,
    prop: PropertySpec,
}

fn load(m: &ModelArgs) -> Result<Loaded> {
    let with_path = |path: &Path, e: Error| match e {
        Error::Io { .. } => e,
        other => Error::Io {
            path: path.display().to_string(),
            message: other.to_string(),
        },
    };
    let net = parse_network_json(&read_text(&m.model)?).map_err(|e| with_path(&m.model, e))?;
    let prop = parse_vnnlib(&read_text(&m.property)?).map_err(|e| with_path(&m.property, e))?;
    Ok(Loaded { net, prop })
}

struct Plan {
    method: Method,
    config: ObbtConfig,
    bounds_in: Option<PathBuf>,
}

fn plan(b: &BoundArgs) -> Result<Plan> {
    let method = Method::from(b.method);
    if b.horizon.is_some() && method != Method::ObbtRh {
        return Err(usage("--horizon only applies to --method obbt-rh"));
    }
    if b.tighten_output && method == Method::Ibp {
        return Err(usage("--tighten-output does not apply to --method ibp"));
    }
    if b.bounds_in.is_some() && (b.horizon.is_some() || b.tighten_output) {
        return Err(usage("--bounds-in skips tightening; tightening flags cannot be combined with it"));
    }
    let config = ObbtConfig {
        horizon: b.horizon.unwrap_or(2),
        per_instance_time_limit: seconds(b.time_limit, "time-limit")?,
        early_stop: !b.no_early_stop,
        workers: b.workers,
        tighten_output: b.tighten_output,
        total_time_limit: b.total_time_limit.map(|t| seconds(t, "total-time-limit")).transpose()?,
        ..ObbtConfig::default()
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    Ok(Plan {
        method,
        config,
        bounds_in: b.bounds_in.clone(),
    })
}

fn config_json(p: &Plan, extra: serde_json::Value) -> serde_json::Value {
    let mut v = json!({
        "method": p.method.label(),
        "horizon": (p.method == Method::ObbtRh).then_some(p.config.horizon),
        "per_instance_time_limit_s": p.config.per_instance_time_limit.as_secs_f64(),
        "total_time_limit_s": p.config.total_time_limit.map(|d| d.as_secs_f64()),
        "workers": p.config.workers,
        "early_stop": p.config.early_stop,
        "tighten_output": p.config.tighten_output,
        "bounds_in": p.bounds_in.as_ref().map(|b| b.display().to_string()),
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    v
}

/// Bounds from a file or from the chosen method. `Ok(None)` means the region is empty.
fn obtain_bounds(l: &Loaded, p: &Plan, report: &mut Report) -> Result<Option<(BoundStore, Duration)>> {
    if let Some(path) = &p.bounds_in {
        let text = read_text(path)?;
        return match BoundStore::from_json(&l.net, l.prop.input_box.clone(), &text) {
            Ok(s) => Ok(Some((s, Duration::ZERO))),
            Err(Error::InfeasibleBounds { .. }) => Ok(None),
            Err(e) => Err(Error::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            }),
        };
    }
    match compute_bounds(&l.net, &l.prop.input_box, p.method, &p.config) {
        Ok(t) => {
            info!(method = p.method.label(), time_s = t.elapsed.as_secs_f64(), "bounds ready");
            report.tightening = t.summary;
            Ok(Some((t.store, t.elapsed)))
        }
        Err(Error::InfeasibleBounds { layer, neuron, .. }) => {
            warn!(layer, neuron, "bounds are infeasible; the input region is empty");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn run_verify(a: &VerifyArgs) -> Result<u8> {
    let start = Instant::now();
    let p = plan(&a.bounds)?;
    let l = load(&a.model)?;
    let mut report = Report::new(config_json(&p, json!({ "cutoff_zero": a.cutoff_zero })));
    let verdict = match obtain_bounds(&l, &p, &mut report)? {
        None => Verdict::vacuous(),
        Some((store, elapsed)) => {
            if let Some(path) = &a.bounds_out {
                write_file(path, &(store.to_json()? + "\n"))?;
            }
            let mut metrics = compute_metrics(&l.net, &store, p.method.label(), elapsed);
            metrics.lp_bounds = lp_bound_of_final_mip(&l.net, &l.prop, &store)?;
            report.metrics = Some(metrics);
            let controls = VerifyControls {
                cutoff_zero: a.cutoff_zero,
                time_limit: p.config.total_time_limit.map(|t| t.saturating_sub(start.elapsed())),
                ..VerifyControls::default()
            };
            verify(&l.net, &l.prop, &store, &controls)?
        }
    };
    report.set_verdict(&verdict);
    report.total_time_s = start.elapsed().as_secs_f64();
    emit(a.report.as_deref(), &report.to_json())?;
    Ok(match verdict.outcome {
        Outcome::Holds => EXIT_HOLDS,
        Outcome::Violated => EXIT_VIOLATED,
        Outcome::Unknown => EXIT_UNKNOWN,
    })
}

fn run_tighten(a: &TightenArgs) -> Result<u8> {
    let start = Instant::now();
    let p = plan(&a.bounds)?;
    if p.bounds_in.is_some() {
        return Err(usage("tighten computes bounds; --bounds-in belongs to verify and report"));
    }
    let l = load(&a.model)?;
    let mut report = Report::new(config_json(&p, json!({})));
    let Some((store, elapsed)) = obtain_bounds(&l, &p, &mut report)? else {
        return Err(usage("the input region is empty; there are no bounds to write"));
    };
    emit(a.out.as_deref(), &(store.to_json()? + "\n"))?;
    if let Some(path) = &a.report {
        report.metrics = Some(compute_metrics(&l.net, &store, p.method.label(), elapsed));
        report.total_time_s = start.elapsed().as_secs_f64();
        write_file(path, &report.to_json())?;
    }
    Ok(0)
}

fn run_report(a: &ReportArgs) -> Result<u8> {
    let start = Instant::now();
    let p = plan(&a.bounds)?;
    let l = load(&a.model)?;
    let mut report = Report::new(config_json(&p, json!({})));
    match obtain_bounds(&l, &p, &mut report)? {
        Some((store, elapsed)) => {
            let label = if p.bounds_in.is_some() { "imported" } else { p.method.label() };
            let mut metrics = compute_metrics(&l.net, &store, label, elapsed);
            metrics.lp_bounds = lp_bound_of_final_mip(&l.net, &l.prop, &store)?;
            report.metrics = Some(metrics);
        }
        None => report.vacuous = true,
    }
    report.total_time_s = start.elapsed().as_secs_f64();
    emit(a.out.as_deref(), &report.to_json())?;
    Ok(0)
}

fn run_fixture(a: &FixtureArgs) -> Result<u8> {
    if a.gemms == 0 || a.input_dim == 0 || a.output_dim == 0 || a.max_width == 0 {
        return Err(usage("fixture dimensions must be positive"));
    }
    let params = FixtureParams {
        gemms: a.gemms,
        input_dim: a.input_dim,
        output_dim: a.output_dim,
        max_width: a.max_width,
        max_unstable: a.max_unstable,
        skip_connection: a.skip_connection,
    };
    let f = generate(a.seed, &params);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(&a.out_dir.join("model.json"), &emit_network_json(&f.net))?;
    write_file(&a.out_dir.join("property.vnnlib"), &render_vnnlib(&f.property))?;
    Ok(0)
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Verify(a) => run_verify(a),
        Command::Tighten(a) => run_tighten(a),
        Command::Report(a) => run_report(a),
        Command::Fixture(a) => run_fixture(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
