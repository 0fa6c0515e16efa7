//! Command-line front end. [`run`] parses arguments, dispatches a command and
//! returns the process exit code.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attack::AttackBudget;
use crate::bab::{self, RobustnessQuery, Status, VerifyOptions};
use crate::bounds::BoundMethod;
use crate::error::{Error, Result};
use crate::explain::{
    binary_search_explain, favex, order_by_scores, sequential_explain, traversal_scores, BabOracle, ExplainConfig,
    Explanation, Mode, TraversalStrategy,
};
use crate::model::{load_input, load_model, Network};

pub const EXIT_OK: i32 = 0;
pub const EXIT_COUNTEREXAMPLE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MODEL: i32 = 3;
pub const EXIT_UNKNOWN: i32 = 4;

/// Heatmap gray levels.
pub const SHADE_INVARIANT: u8 = 0;
pub const SHADE_UNKNOWN: u8 = 128;
pub const SHADE_COUNTERFACTUAL: u8 = 255;

#[derive(Debug, Parser)]
#[command(name = "favex", version, about = "Verified robust explanations for ReLU classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute an explanation and write it as JSON.
    Explain(ExplainArgs),
    /// Run a single robustness query.
    Verify(VerifyArgs),
    /// Print the feature traversal order and scores.
    Traverse(TraverseArgs),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    epsilon: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Standard,
    VOptimal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Favex,
    Sequential,
    BinarySearch,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "v-optimal")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "favex")]
    strategy: StrategyArg,
    #[arg(long, default_value = "favex-ibp")]
    traversal: String,
    /// Seconds per single-feature query.
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    #[arg(long, default_value_t = 500)]
    leaf_limit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Image shape as HxW, required for --heatmap.
    #[arg(long)]
    shape: Option<String>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated feature indices; all features when absent.
    #[arg(long)]
    active: Option<String>,
    #[arg(long, default_value_t = 60.0)]
    timeout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TraverseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "favex-ibp")]
    traversal: String,
}

/// Failure classes that map to distinct exit codes.
enum Failure {
    Config(String),
    Model(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Config(m),
            Error::Io { .. } => Failure::Config(e.to_string()),
            other => Failure::Model(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Runs the CLI on `args` (including the program name), writing normal output
/// to `out` and diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Explain(a) => cmd_explain(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
        Command::Traverse(a) => cmd_traverse(&a, out),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Model(e)) => {
            eprintln!("error: {e}");
            EXIT_MODEL
        }
    }
}

fn positive(flag: &str, value: f64) -> CliResult<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Failure::Config(format!("--{flag} must be a positive number, got {value}")))
    }
}

fn load(common: &Common) -> CliResult<(Network, Vec<f64>)> {
    positive("epsilon", common.epsilon)?;
    let net = load_model(&common.model).map_err(Failure::Model)?;
    let x = load_input(&common.input).map_err(|e| Failure::Config(e.to_string()))?;
    if x.len() != net.input_dim() {
        return Err(Failure::Config(format!(
            "--input has {} features but the model expects {}",
            x.len(),
            net.input_dim()
        )));
    }
    if (0..x.len()).any(|i| x[i] < net.input_lower()[i] || x[i] > net.input_upper()[i]) {
        return Err(Failure::Config("--input lies outside the model's input domain".into()));
    }
    Ok((net, x))
}

fn traversal(name: &str) -> CliResult<TraversalStrategy> {
    TraversalStrategy::parse(name).map_err(|e| Failure::Config(format!("--traversal: {e}")))
}

/// Parses `HxW`.
pub fn parse_shape(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--shape expects HxW, got `{text}`"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Gray level per feature: counterfactuals brightest, unknowns mid-gray.
pub fn heatmap_pixels(e: &Explanation) -> Vec<u8> {
    let mut px = vec![SHADE_INVARIANT; e.input.len()];
    for &i in &e.unknowns {
        px[i] = SHADE_UNKNOWN;
    }
    for &i in &e.counterfactuals {
        px[i] = SHADE_COUNTERFACTUAL;
    }
    px
}

pub fn write_heatmap(path: &Path, e: &Explanation, height: usize, width: usize) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Parse(format!("png encoding failed: {e}"));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&heatmap_pixels(e)).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn cmd_explain(a: &ExplainArgs, out: &mut dyn Write) -> CliResult<i32> {
    positive("timeout", a.timeout)?;
    let strategy = traversal(&a.traversal)?;
    let (net, x) = load(&a.common)?;
    let shape = match (&a.heatmap, &a.shape) {
        (Some(_), None) => return Err(Failure::Config("--heatmap requires --shape".into())),
        (_, Some(s)) => {
            let (h, w) = parse_shape(s)?;
            if h * w != net.input_dim() {
                return Err(Failure::Config(format!(
                    "--shape {h}x{w} does not match {} features",
                    net.input_dim()
                )));
            }
            Some((h, w))
        }
        (None, None) => None,
    };
    let options = VerifyOptions {
        timeout: Duration::from_secs_f64(a.timeout),
        method: BoundMethod::LinearRelaxation,
        leaf_limit: Some(a.leaf_limit),
        budget: AttackBudget {
            seed: a.seed,
            ..AttackBudget::default()
        },
    };
    let mut oracle = BabOracle::new(&net, &x, a.common.epsilon, options)?;
    let config = ExplainConfig {
        mode: match a.mode {
            ModeArg::Standard => Mode::Standard,
            ModeArg::VOptimal => Mode::VOptimal,
        },
        order: order_by_scores(&traversal_scores(&net, &x, a.common.epsilon, strategy)?),
        timeout: Duration::from_secs_f64(a.timeout),
        leaf_limit: Some(a.leaf_limit),
    };
    let e = match a.strategy {
        StrategyArg::Favex => favex(&mut oracle, &config)?,
        StrategyArg::Sequential => sequential_explain(&mut oracle, &config)?,
        StrategyArg::BinarySearch => binary_search_explain(&mut oracle, &config)?,
    };
    let json = e.to_json();
    match &a.out {
        Some(path) => std::fs::write(path, json + "\n").map_err(|source| {
            Failure::Config(
                Error::Io {
                    path: path.clone(),
                    source,
                }
                .to_string(),
            )
        })?,
        None => writeln!(out, "{json}").map_err(|e| Failure::Config(e.to_string()))?,
    }
    if let (Some(path), Some((h, w))) = (&a.heatmap, shape) {
        write_heatmap(path, &e, h, w).map_err(|e| Failure::Config(e.to_string()))?;
    }
    writeln!(
        out,
        "|C|={} |U|={} |R|={} time={:.3}s queries={}",
        e.counterfactuals.len(),
        e.unknowns.len(),
        e.invariants.len(),
        e.stats.total_time.as_secs_f64(),
        e.stats.queries
    )
    .map_err(|e| Failure::Config(e.to_string()))?;
    Ok(EXIT_OK)
}

fn parse_active(text: &str, d: usize) -> CliResult<Vec<usize>> {
    let mut active = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let i: usize = part
            .parse()
            .map_err(|_| Failure::Config(format!("--active: `{part}` is not a feature index")))?;
        if i >= d {
            return Err(Failure::Config(format!("--active: feature {i} out of range 0..{d}")));
        }
        active.push(i);
    }
    Ok(active)
}

fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult<i32> {
    positive("timeout", a.timeout)?;
    let (net, x) = load(&a.common)?;
    let active = match &a.active {
        Some(text) => parse_active(text, net.input_dim())?,
        None => (0..net.input_dim()).collect(),
    };
    let q = RobustnessQuery::new(&net, &x, &active, a.common.epsilon)?;
    let opts = VerifyOptions {
        timeout: Duration::from_secs_f64(a.timeout),
        budget: AttackBudget {
            seed: a.seed,
            ..AttackBudget::default()
        },
        ..VerifyOptions::default()
    };
    let v = bab::verify(&net, &q, &opts, None, None)?;
    let w = |e: std::io::Error| Failure::Config(e.to_string());
    let code = match v.status {
        Status::Verified => {
            writeln!(out, "verified").map_err(w)?;
            EXIT_OK
        }
        Status::Counterexample => {
            let witness = v.witness.unwrap_or_default();
            writeln!(out, "counterexample").map_err(w)?;
            writeln!(out, "{}", serde_json::to_string(&witness).expect("vector serialises")).map_err(w)?;
            EXIT_COUNTEREXAMPLE
        }
        Status::Unknown => {
            writeln!(out, "unknown").map_err(w)?;
            EXIT_UNKNOWN
        }
    };
    Ok(code)
}

#[derive(Serialize)]
struct TraverseReport {
    traversal: TraversalStrategy,
    order: Vec<usize>,
    scores: Vec<f64>,
}

fn cmd_traverse(a: &TraverseArgs, out: &mut dyn Write) -> CliResult<i32> {
    let strategy = traversal(&a.traversal)?;
    let (net, x) = load(&a.common)?;
    let scores = traversal_scores(&net, &x, a.common.epsilon, strategy)?;
    let report = TraverseReport {
        traversal: strategy,
        order: order_by_scores(&scores),
        scores,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serialises");
    writeln!(out, "{json}").map_err(|e| Failure::Config(e.to_string()))?;
    Ok(EXIT_OK)
}
