//! Command-line front end: trace generation, decode runs, policy
//! comparison, and bound verification. Emits JSON (canonical) or CSV (a
//! fixed-column projection) for external plotting.
//!
//! Exit codes: 0 success, 1 runtime failure or verification violation,
//! 2 usage error. All randomness flows from `--seed` through per-task
//! derived seeds, so outputs are byte-identical across runs and invariant
//! to the worker count (`KVFLOW_THREADS`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use kvflow::{
    compare_policies, generate_trace_scaled, load_trace, run_decode, run_verification, save_trace,
    BlockConfig, PolicyConfig, PolicyKind, RunMetrics, RunOptions, VerifyParams,
};

const FORMAT_HELP: &str = "\
OUTPUT COLUMNS

run / compare CSV columns, in order:
  policy, steps, evictions, agreement_rate, agreement_mean_rank,
  mean_output_perturbation, mean_adjacent_query_cosine, overflow_fallbacks,
  attention_flops, policy_flops

verify-bounds CSV columns, in order:
  index, token, remainder_norm, remainder_bound, denom_error, drift_error,
  total_error, drift_bound, identity_gap, remainder_slack, triangle_slack,
  colsum_gap, lipschitz_slack, score_drift_slack, renorm_gap, passed

JSON is the canonical format; CSV is a scalar projection of it. Optional
values serialize as null (JSON) or an empty field (CSV).

CONFIG FILES

--config points at a TOML file whose keys mirror the long flags
(seed, budget, block_size, protect_recent, interval, policy, drift, steps,
dim, prefill, key_scale, value_scale, trace, out, format, instances,
max_tokens, oracle, scalar). Command-line flags override file values.

ENVIRONMENT

KVFLOW_THREADS caps the worker-thread count. Results never depend on it.";

#[derive(Parser)]
#[command(
    name = "kvflow",
    version,
    about = "Budgeted KV-cache attention with per-step token eviction",
    after_long_help = FORMAT_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic decode trace and write it in the binary format.
    GenTrace(GenTraceArgs),
    /// Replay a trace under one eviction policy and report run metrics.
    Run(RunArgs),
    /// Run several policies on the identical trace and report one row each.
    Compare(CompareArgs),
    /// Check the approximation identities and error bounds on seeded
    /// random instances.
    VerifyBounds(VerifyArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// TOML file supplying defaults for the other flags.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; every derived RNG stream comes from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file path.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Output format: json or csv.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct GenTraceArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Head dimension of queries, keys, and values.
    #[arg(long)]
    dim: Option<usize>,
    /// Prompt length.
    #[arg(long)]
    prefill: Option<usize>,
    /// Decode steps to generate.
    #[arg(long)]
    steps: Option<usize>,
    /// Query random-walk step size in [0, 1]; 0 freezes the query.
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    key_scale: Option<f64>,
    #[arg(long)]
    value_scale: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trace file to replay.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Eviction policy (longflow|h2o|vatp|recency|random).
    #[arg(long)]
    policy: Option<String>,
    /// Cache budget in tokens.
    #[arg(long)]
    budget: Option<usize>,
    /// Block size of the fused pass.
    #[arg(long)]
    block_size: Option<usize>,
    /// Most-recently-written slots excluded from eviction.
    #[arg(long)]
    protect_recent: Option<usize>,
    /// Compaction interval (1 = evict every step).
    #[arg(long)]
    interval: Option<usize>,
    /// Compare every eviction against the brute-force objective argmin
    /// (quadratic in the budget per step).
    #[arg(long)]
    oracle: bool,
    /// Storage precision: f64 (default) or f32.
    #[arg(long)]
    scalar: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Comma-separated policy list, e.g. longflow,h2o,random.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    block_size: Option<usize>,
    #[arg(long)]
    protect_recent: Option<usize>,
    #[arg(long)]
    interval: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Random instances to check.
    #[arg(long)]
    instances: Option<usize>,
    /// Largest cache size drawn per instance.
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Re-check one serialized instance (a failure file or a bare
    /// instance) instead of sweeping.
    #[arg(long, value_name = "PATH")]
    replay: Option<PathBuf>,
}

/// TOML mirror of the flags; any subset may be present.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    budget: Option<usize>,
    block_size: Option<usize>,
    protect_recent: Option<usize>,
    interval: Option<usize>,
    policy: Option<PolicyField>,
    drift: Option<f64>,
    steps: Option<usize>,
    dim: Option<usize>,
    prefill: Option<usize>,
    key_scale: Option<f64>,
    value_scale: Option<f64>,
    trace: Option<PathBuf>,
    out: Option<PathBuf>,
    format: Option<String>,
    instances: Option<usize>,
    max_tokens: Option<usize>,
    oracle: Option<bool>,
    scalar: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PolicyField {
    One(String),
    Many(Vec<String>),
}

impl PolicyField {
    fn joined(&self) -> String {
        match self {
            PolicyField::One(s) => s.clone(),
            PolicyField::Many(v) => v.join(","),
        }
    }
}

/// Failures split by exit code.
enum CliError {
    /// Bad arguments or config: exit 2.
    Usage(String),
    /// Runtime failure or verification violation: exit 1.
    Run(String),
}

impl From<kvflow::Error> for CliError {
    fn from(e: kvflow::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_config(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
}

fn pick<T>(cli: Option<T>, file: Option<T>) -> Option<T> {
    cli.or(file)
}

fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| usage(format!("missing required value: {flag}")))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum OutputFormat {
    Json,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(OutputFormat::Json),
            "csv" => Ok(OutputFormat::Csv),
            other => Err(usage(format!("unknown format '{other}' (expected json|csv)"))),
        }
    }
}

fn parse_format(value: Option<String>) -> CliResult<OutputFormat> {
    value.as_deref().map_or(Ok(OutputFormat::Json), OutputFormat::from_str)
}

fn parse_policies(spec: &str) -> CliResult<Vec<PolicyKind>> {
    let names: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if names.is_empty() {
        return Err(usage("at least one policy is required"));
    }
    names
        .into_iter()
        .map(|name| name.parse::<PolicyKind>().map_err(|e| usage(e.to_string())))
        .collect()
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match path {
        Some(p) => {
            fs::write(p, bytes).map_err(|e| CliError::Run(format!("writing {}: {e}", p.display())))
        }
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(bytes)
                .map_err(|e| CliError::Run(format!("writing stdout: {e}")))
        }
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

const METRIC_COLUMNS: &str = "policy,steps,evictions,agreement_rate,agreement_mean_rank,\
mean_output_perturbation,mean_adjacent_query_cosine,overflow_fallbacks,attention_flops,policy_flops";

fn metrics_csv(rows: &[RunMetrics]) -> String {
    let mut out = String::new();
    out.push_str(METRIC_COLUMNS);
    out.push('\n');
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            m.policy,
            m.steps,
            m.evictions,
            fmt_opt(m.agreement_rate),
            fmt_opt(m.agreement_mean_rank),
            fmt_opt(m.mean_output_perturbation),
            fmt_opt(m.mean_adjacent_query_cosine),
            m.overflow_fallbacks,
            m.attention_flops,
            m.policy_flops,
        );
    }
    out
}

fn metrics_json(rows: &[RunMetrics], single: bool) -> CliResult<Vec<u8>> {
    let mut bytes = if single {
        serde_json::to_vec_pretty(&rows[0])
    } else {
        serde_json::to_vec_pretty(&rows)
    }
    .map_err(|e| CliError::Run(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn cmd_gen_trace(args: GenTraceArgs) -> CliResult<()> {
    let file = load_config(args.common.config.as_deref())?;
    let dim = require(pick(args.dim, file.dim), "--dim")?;
    let prefill = pick(args.prefill, file.prefill).unwrap_or(64);
    let steps = require(pick(args.steps, file.steps), "--steps")?;
    let drift = pick(args.drift, file.drift).unwrap_or(0.1);
    let seed = pick(args.common.seed, file.seed).unwrap_or(0);
    let key_scale = pick(args.key_scale, file.key_scale).unwrap_or(1.0);
    let value_scale = pick(args.value_scale, file.value_scale).unwrap_or(1.0);
    let out = require(pick(args.common.out, file.out), "--out")?;

    let trace = generate_trace_scaled(dim, prefill, steps, drift, seed, key_scale, value_scale)?;
    save_trace(&trace, &out)?;
    println!(
        "wrote {} (dim={dim} prefill={prefill} steps={steps} drift={drift} seed={seed})",
        out.display()
    );
    Ok(())
}

struct RunSpec {
    trace: PathBuf,
    policy: PolicyConfig,
    budget: usize,
    opts: RunOptions,
    scalar: String,
    out: Option<PathBuf>,
    format: OutputFormat,
}

fn resolve_run(args: RunArgs) -> CliResult<RunSpec> {
    let file = load_config(args.common.config.as_deref())?;
    let trace = require(pick(args.trace, file.trace), "--trace")?;
    let spec = pick(args.policy, file.policy.as_ref().map(PolicyField::joined))
        .unwrap_or_else(|| "longflow".to_string());
    let kinds = parse_policies(&spec)?;
    if kinds.len() != 1 {
        return Err(usage("run takes exactly one --policy; use compare for several"));
    }
    let seed = pick(args.common.seed, file.seed).unwrap_or(0);
    let mut policy = PolicyConfig::new(kinds[0]).with_seed(seed);
    if let Some(w) = pick(args.protect_recent, file.protect_recent) {
        policy = policy.with_protect_recent(w);
    }
    if let Some(i) = pick(args.interval, file.interval) {
        policy = policy.with_interval(i);
    }
    let budget = require(pick(args.budget, file.budget), "--budget")?;
    let block = BlockConfig::new(pick(args.block_size, file.block_size).unwrap_or(128))
        .map_err(|e| usage(e.to_string()))?;
    let opts = RunOptions {
        block,
        oracle_agreement: args.oracle || file.oracle.unwrap_or(false),
        ..RunOptions::default()
    };
    let scalar = pick(args.scalar, file.scalar).unwrap_or_else(|| "f64".to_string());
    if !matches!(scalar.as_str(), "f32" | "f64") {
        return Err(usage(format!("unknown scalar '{scalar}' (expected f32|f64)")));
    }
    let format = parse_format(pick(args.common.format, file.format))?;
    Ok(RunSpec { trace, policy, budget, opts, scalar, out: pick(args.common.out, file.out), format })
}

fn cmd_run(args: RunArgs) -> CliResult<()> {
    let spec = resolve_run(args)?;
    let trace = load_trace(&spec.trace)?;
    let metrics = match spec.scalar.as_str() {
        "f32" => run_decode::<f32>(&trace, &spec.policy, spec.budget, spec.opts)?,
        _ => run_decode::<f64>(&trace, &spec.policy, spec.budget, spec.opts)?,
    };
    let bytes = match spec.format {
        OutputFormat::Json => metrics_json(&[metrics], true)?,
        OutputFormat::Csv => metrics_csv(std::slice::from_ref(&metrics)).into_bytes(),
    };
    write_output(spec.out.as_deref(), &bytes)
}

fn cmd_compare(args: CompareArgs) -> CliResult<()> {
    let file = load_config(args.common.config.as_deref())?;
    let trace_path = require(pick(args.trace, file.trace), "--trace")?;
    let spec = require(
        pick(args.policy, file.policy.as_ref().map(PolicyField::joined)),
        "--policy",
    )?;
    let kinds = parse_policies(&spec)?;
    let seed = pick(args.common.seed, file.seed).unwrap_or(0);
    let budget = require(pick(args.budget, file.budget), "--budget")?;
    let block = BlockConfig::new(pick(args.block_size, file.block_size).unwrap_or(128))
        .map_err(|e| usage(e.to_string()))?;
    let format = parse_format(pick(args.common.format, file.format))?;
    let out = pick(args.common.out, file.out);

    let policies: Vec<PolicyConfig> = kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            // Per-policy derived seed keeps streams independent.
            let mut cfg = PolicyConfig::new(kind).with_seed(seed.wrapping_add(i as u64));
            if let Some(w) = pick(args.protect_recent, file.protect_recent) {
                cfg = cfg.with_protect_recent(w);
            }
            if let Some(iv) = pick(args.interval, file.interval) {
                cfg = cfg.with_interval(iv);
            }
            cfg
        })
        .collect();

    let trace = load_trace(&trace_path)?;
    let rows = compare_policies::<f64>(&trace, &policies, budget, &RunOptions { block, ..RunOptions::default() })?;
    let bytes = match format {
        OutputFormat::Json => metrics_json(&rows, false)?,
        OutputFormat::Csv => metrics_csv(&rows).into_bytes(),
    };
    write_output(out.as_deref(), &bytes)
}

const VERIFY_COLUMNS: &str = "index,token,remainder_norm,remainder_bound,denom_error,drift_error,\
total_error,drift_bound,identity_gap,remainder_slack,triangle_slack,colsum_gap,lipschitz_slack,\
score_drift_slack,renorm_gap,passed";

fn replay_instance(path: &Path) -> CliResult<ExitCode> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let instance = serde_json::from_str::<kvflow::VerifyFailure>(&text)
        .map(|f| f.instance)
        .or_else(|_| serde_json::from_str::<kvflow::VerifyInstance>(&text))
        .map_err(|e| usage(format!("{} is not a serialized instance: {e}", path.display())))?;
    let checks = kvflow::check_instance(&instance)?;
    match &checks.failure {
        None => {
            println!("replay: instance passes all checks");
            Ok(ExitCode::SUCCESS)
        }
        Some(reason) => {
            eprintln!("replay: FAIL ({reason})");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_verify(args: VerifyArgs) -> CliResult<ExitCode> {
    if let Some(path) = args.replay.as_deref() {
        return replay_instance(path);
    }
    let file = load_config(args.common.config.as_deref())?;
    let params = VerifyParams {
        instances: pick(args.instances, file.instances).unwrap_or(10_000),
        seed: pick(args.common.seed, file.seed).unwrap_or(0),
        max_tokens: pick(args.max_tokens, file.max_tokens).unwrap_or(128),
        ..VerifyParams::default()
    };
    let format = parse_format(pick(args.common.format, file.format))?;
    let out = pick(args.common.out, file.out);

    let outcome = run_verification(&params)?;

    if let Some(path) = out.as_deref() {
        let mut body = String::new();
        match format {
            OutputFormat::Json => {
                for (idx, check) in outcome.checks.iter().enumerate() {
                    let line = serde_json::json!({
                        "record": "instance",
                        "index": idx,
                        "checks": check,
                    });
                    let _ = writeln!(body, "{line}");
                }
                let summary = serde_json::json!({
                    "record": "summary",
                    "summary": outcome.summary,
                });
                let _ = writeln!(body, "{summary}");
            }
            OutputFormat::Csv => {
                body.push_str(VERIFY_COLUMNS);
                body.push('\n');
                for (idx, c) in outcome.checks.iter().enumerate() {
                    let r = &c.report;
                    let _ = writeln!(
                        body,
                        "{idx},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                        r.token,
                        r.remainder_norm,
                        r.remainder_bound,
                        r.denom_error,
                        r.drift_error,
                        r.total_error,
                        r.drift_bound,
                        c.identity_gap,
                        c.remainder_slack,
                        c.triangle_slack,
                        c.colsum_gap,
                        c.lipschitz_slack,
                        c.score_drift_slack,
                        c.renorm_gap,
                        c.passed(),
                    );
                }
            }
        }
        write_output(Some(path), body.as_bytes())?;
    }

    let s = &outcome.summary;
    println!(
        "verify-bounds: {} instances, {} violations",
        s.instances, s.violations
    );
    println!(
        "  max identity gap {:.3e} | remainder slack {:.3e} | triangle slack {:.3e}",
        s.max_identity_gap, s.max_remainder_slack, s.max_triangle_slack
    );
    println!(
        "  max colsum gap {:.3e} | lipschitz slack {:.3e} | drift slack {:.3e} | renorm gap {:.3e}",
        s.max_colsum_gap, s.max_lipschitz_slack, s.max_score_drift_slack, s.max_renorm_gap
    );

    if let Some(failure) = &outcome.first_failure {
        let failure_path = out
            .as_deref()
            .map(|p| p.with_extension("failure.json"))
            .unwrap_or_else(|| PathBuf::from("verify-failure.json"));
        let body =
            serde_json::to_vec_pretty(failure).map_err(|e| CliError::Run(e.to_string()))?;
        write_output(Some(&failure_path), &body)?;
        eprintln!(
            "FAIL: instance {} ({}); serialized to {}",
            failure.index,
            failure.reason,
            failure_path.display()
        );
        return Ok(ExitCode::from(1));
    }
    println!("PASS: all bounds hold");
    Ok(ExitCode::SUCCESS)
}

fn configure_threads() {
    if let Ok(raw) = std::env::var("KVFLOW_THREADS") {
        match raw.parse::<usize>() {
            Ok(n) if n >= 1 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("ignoring invalid KVFLOW_THREADS={raw}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    configure_threads();
    let cli = Cli::parse();
    let result: CliResult<ExitCode> = match cli.command {
        Command::GenTrace(args) => cmd_gen_trace(args).map(|()| ExitCode::SUCCESS),
        Command::Run(args) => cmd_run(args).map(|()| ExitCode::SUCCESS),
        Command::Compare(args) => cmd_compare(args).map(|()| ExitCode::SUCCESS),
        Command::VerifyBounds(args) => cmd_verify(args),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
