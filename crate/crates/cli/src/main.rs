use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::BoolishValueParser;
use clap::{ArgAction, Args, Parser, Subcommand};

use depprune_core::validate::ValidateError;

mod commands;
mod config;

use config::Overrides;

#[derive(Parser)]
#[command(name = "depprune", version, about = "Find and remove npm dependencies that are never loaded at run time")]
struct Cli {
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload under the file-access tracer and keep the raw log
    Trace(TraceArgs),
    /// Classify dependencies as accessed or bloated from a trace
    Detect(DetectArgs),
    /// Write debloated package.json / package-lock.json for a detection result
    Debloat(DebloatArgs),
    /// Remove, reinstall and re-run the workload until it passes
    Validate(ValidateArgs),
    /// Full pipeline in a scratch copy: trace, detect, debloat, validate
    Run(RunArgs),
    /// Detection over many packages with a summary table
    Corpus(CorpusArgs),
    #[command(name = "__trace-exec", hide = true)]
    TraceExec(TraceExecArgs),
}

#[derive(Args, Clone, Default)]
pub struct IngestArgs {
    #[arg(long = "ext", env = "DEPPRUNE_EXT", value_name = "LIST", help = config::extension_help())]
    pub extensions: Option<String>,
    /// Count stat/access calls on module files as accesses too
    #[arg(long, env = "DEPPRUNE_INCLUDE_STAT", num_args = 0..=1, default_missing_value = "true",
          value_parser = BoolishValueParser::new())]
    pub include_stat: Option<bool>,
    /// Package directory as it appears in the trace (defaults to PACKAGE_DIR)
    #[arg(long, env = "DEPPRUNE_TRACE_ROOT", value_name = "DIR")]
    pub trace_root: Option<String>,
}

#[derive(Args, Clone, Default)]
pub struct TracerArgs {
    /// Tracer to use: auto, strace or builtin
    #[arg(long, env = "DEPPRUNE_TRACER")]
    pub tracer: Option<String>,
    /// Wall-clock limit per workload or install run, in seconds [default: 1800]
    #[arg(long, env = "DEPPRUNE_TIMEOUT", value_name = "SECS")]
    pub timeout: Option<u64>,
}

#[derive(Args, Clone, Default)]
pub struct TransformArgs {
    /// Removal strategy: direct or full [default: full]
    #[arg(long, env = "DEPPRUNE_STRATEGY")]
    pub strategy: Option<String>,
    /// Allow removals that make a survivor resolve an ancestor copy instead
    #[arg(long, env = "DEPPRUNE_ALLOW_SHADOW_FALLBACK", num_args = 0..=1, default_missing_value = "true",
          value_parser = BoolishValueParser::new())]
    pub allow_shadow_fallback: Option<bool>,
    /// Overwrite package.json and package-lock.json (originals kept as .orig)
    #[arg(long)]
    pub in_place: bool,
}

#[derive(Args, Clone, Default)]
pub struct OutputArgs {
    /// Output format: text or json
    #[arg(long, env = "DEPPRUNE_FORMAT")]
    pub format: Option<String>,
    /// Write the report to a file instead of stdout
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
pub struct InstallArgs {
    /// Clean-install command [default: "npm ci --no-audit --no-fund"]
    #[arg(long, env = "DEPPRUNE_INSTALL_CMD", value_name = "CMD")]
    pub install_cmd: Option<String>,
    /// Restore strategy after a failing run: targeted or bisect
    #[arg(long, env = "DEPPRUNE_RESTORE")]
    pub restore: Option<String>,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(default_value = ".")]
    package_dir: PathBuf,
    /// Where to write the log [default: PACKAGE_DIR/depprune-trace.log]
    #[arg(long, value_name = "FILE")]
    log: Option<PathBuf>,
    #[command(flatten)]
    tracer: TracerArgs,
    #[arg(last = true, required = true, value_name = "WORKLOAD")]
    workload: Vec<String>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(default_value = ".")]
    package_dir: PathBuf,
    /// Recorded trace log (`-` for stdin); otherwise the workload after `--` is traced
    #[arg(long, value_name = "FILE", conflicts_with = "workload")]
    trace: Option<PathBuf>,
    #[command(flatten)]
    ingest: IngestArgs,
    #[command(flatten)]
    tracer: TracerArgs,
    #[command(flatten)]
    out: OutputArgs,
    #[arg(last = true, value_name = "WORKLOAD")]
    workload: Vec<String>,
}

#[derive(Args)]
struct DebloatArgs {
    #[arg(default_value = ".")]
    package_dir: PathBuf,
    /// JSON report from `detect`
    #[arg(long, value_name = "FILE", conflicts_with = "trace")]
    report: Option<PathBuf>,
    /// Recorded trace log to detect from
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    #[command(flatten)]
    ingest: IngestArgs,
    #[command(flatten)]
    transform: TransformArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(default_value = ".")]
    package_dir: PathBuf,
    #[arg(long, value_name = "FILE", conflicts_with = "trace")]
    report: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    #[command(flatten)]
    ingest: IngestArgs,
    #[command(flatten)]
    transform: TransformArgs,
    #[command(flatten)]
    install: InstallArgs,
    #[command(flatten)]
    tracer: TracerArgs,
    #[command(flatten)]
    out: OutputArgs,
    #[arg(last = true, value_name = "WORKLOAD")]
    workload: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(default_value = ".")]
    package_dir: PathBuf,
    #[command(flatten)]
    ingest: IngestArgs,
    #[command(flatten)]
    transform: TransformArgs,
    #[command(flatten)]
    install: InstallArgs,
    #[command(flatten)]
    tracer: TracerArgs,
    #[command(flatten)]
    out: OutputArgs,
    #[arg(last = true, value_name = "WORKLOAD")]
    workload: Vec<String>,
}

#[derive(Args)]
struct CorpusArgs {
    /// Package directories
    dirs: Vec<PathBuf>,
    /// File listing one package directory per line
    #[arg(long, value_name = "FILE")]
    list: Option<PathBuf>,
    /// Trace log inside each package directory
    #[arg(long, default_value = "depprune-trace.log", value_name = "NAME")]
    trace_name: String,
    /// Parallel package analyses
    #[arg(short, long, env = "DEPPRUNE_JOBS")]
    jobs: Option<usize>,
    /// Which removal count feeds Prune_d: direct or full [default: direct]
    #[arg(long, env = "DEPPRUNE_STRATEGY")]
    strategy: Option<String>,
    #[arg(long = "ext", env = "DEPPRUNE_EXT", value_name = "LIST")]
    extensions: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_parser = BoolishValueParser::new())]
    include_stat: Option<bool>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct TraceExecArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(last = true, required = true)]
    argv: Vec<String>,
}

fn overrides(
    ingest: &IngestArgs,
    tracer: &TracerArgs,
    transform: &TransformArgs,
    install: &InstallArgs,
    out: &OutputArgs,
) -> Overrides {
    Overrides {
        strategy: transform.strategy.clone(),
        extensions: ingest.extensions.clone(),
        include_stat: ingest.include_stat,
        allow_shadow_fallback: transform.allow_shadow_fallback,
        timeout: tracer.timeout,
        format: out.format.clone(),
        tracer: tracer.tracer.clone(),
        restore: install.restore.clone(),
        trace_root: ingest.trace_root.clone(),
        install_cmd: install.install_cmd.clone(),
        jobs: None,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    let none = (
        IngestArgs::default(),
        TracerArgs::default(),
        TransformArgs::default(),
        InstallArgs::default(),
        OutputArgs::default(),
    );
    match cli.cmd {
        Cmd::Trace(a) => {
            let o = overrides(&none.0, &a.tracer, &none.2, &none.3, &none.4);
            commands::trace(&a.package_dir, a.log, o, a.workload)
        }
        Cmd::Detect(a) => {
            let o = overrides(&a.ingest, &a.tracer, &none.2, &none.3, &a.out);
            commands::detect(&a.package_dir, a.trace, o, a.workload, a.out.output)
        }
        Cmd::Debloat(a) => {
            let o = overrides(&a.ingest, &none.1, &a.transform, &none.3, &none.4);
            commands::debloat(&a.package_dir, a.report, a.trace, o, a.transform.in_place)
        }
        Cmd::Validate(a) => {
            let o = overrides(&a.ingest, &a.tracer, &a.transform, &a.install, &a.out);
            let src = commands::ReportSource { report: a.report, trace: a.trace };
            commands::validate(&a.package_dir, src, o, a.workload, a.transform.in_place, a.out.output)
        }
        Cmd::Run(a) => {
            let o = overrides(&a.ingest, &a.tracer, &a.transform, &a.install, &a.out);
            commands::run(&a.package_dir, o, a.workload, a.transform.in_place, a.out.output)
        }
        Cmd::Corpus(a) => {
            let o = Overrides {
                strategy: a.strategy,
                extensions: a.extensions,
                include_stat: a.include_stat,
                format: a.out.format,
                jobs: a.jobs,
                ..Default::default()
            };
            commands::corpus(a.dirs, a.list, &a.trace_name, o, a.out.output)
        }
        Cmd::TraceExec(a) => commands::trace_exec(&a.argv, &a.log),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<ValidateError>() {
                Some(ValidateError::WorkloadBrokenIndependently { .. }) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
