use std::collections::{BTreeSet, VecDeque};
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::thread;

use anyhow::{bail, Context, Result};
use serde_json::json;

use depprune_core::detect::{detect_from_trace, BloatReport};
use depprune_core::model::{InstallPath, Lockfile, Manifest};
use depprune_core::report::{self, CorpusRow, CorpusSummary, Format};
use depprune_core::tracer::{self, TracerError};
use depprune_core::transform::{self, Strategy, TransformOptions};
use depprune_core::validate::{
    self, validate_until_stable, FinalResult, SandboxConfig, ScratchSandbox, TraceSetup, ValidateError,
    ValidateOptions,
};

use crate::config::{parse_extensions, Overrides, Settings};

const MANIFEST: &str = "package.json";
const LOCKFILE: &str = "package-lock.json";
const DEFAULT_LOG: &str = "depprune-trace.log";

fn load_package(dir: &Path) -> Result<(Lockfile, Manifest)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    let manifest = Manifest::parse(&read(MANIFEST)?).with_context(|| format!("parsing {MANIFEST}"))?;
    let lock = Lockfile::parse(&read(LOCKFILE)?).with_context(|| format!("parsing {LOCKFILE}"))?;
    Ok((lock, manifest))
}

fn canonical(dir: &Path) -> Result<String> {
    let p = dir
        .canonicalize()
        .with_context(|| format!("package directory {}", dir.display()))?;
    Ok(p.to_string_lossy().into_owned())
}

fn self_exe() -> Result<PathBuf> {
    std::env::current_exe().context("locating the depprune binary")
}

fn emit(text: &str, output: Option<&Path>) -> Result<()> {
    match output {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        log::warn!("{w}");
    }
}

fn report_from_trace(lock: &Lockfile, trace: &Path, root: &str, s: &Settings) -> Result<BloatReport> {
    let report = if trace == Path::new("-") {
        detect_from_trace(std::io::stdin().lock(), lock, root, &s.trace_opts)
    } else {
        let file = File::open(trace).with_context(|| format!("opening trace {}", trace.display()))?;
        detect_from_trace(BufReader::new(file), lock, root, &s.trace_opts)
    }
    .with_context(|| format!("analyzing {}", trace.display()))?;
    warn_all(&report.diagnostics.warnings);
    Ok(report)
}

/// Trace the workload in `dir` as it is installed now.
fn trace_in_place(dir: &Path, s: &Settings, log: &Path) -> Result<validate::WorkloadResult> {
    let setup = TraceSetup {
        kind: s.tracer,
        log: log.to_path_buf(),
        self_exe: self_exe()?,
    };
    Ok(validate::run_workload(dir, &s.workload, Some(&setup), s.timeout, &[])?)
}

pub fn trace(dir: &Path, log: Option<PathBuf>, o: Overrides, workload: Vec<String>) -> Result<u8> {
    let s = Settings::resolve(dir, o, workload)?;
    let log = match log {
        Some(l) => l,
        None => dir.join(DEFAULT_LOG),
    };
    let log = std::path::absolute(&log)?;
    let r = trace_in_place(dir, &s, &log)?;
    emit(&r.output, None)?;
    eprintln!("trace written to {}", log.display());
    Ok(match r.exit_code {
        Some(c) => (c & 0xff) as u8,
        None => 1,
    })
}

pub fn detect(
    dir: &Path,
    trace: Option<PathBuf>,
    o: Overrides,
    workload: Vec<String>,
    output: Option<PathBuf>,
) -> Result<u8> {
    let s = Settings::resolve(dir, o, workload)?;
    let (lock, _) = load_package(dir)?;
    let report = match trace {
        Some(t) => {
            let root = s.trace_root.clone().map_or_else(|| canonical(dir), Ok)?;
            report_from_trace(&lock, &t, &root, &s)?
        }
        None => {
            if s.workload.is_empty() {
                bail!("give either --trace FILE or a workload after `--`");
            }
            let log = tempfile::NamedTempFile::new()?;
            let r = trace_in_place(dir, &s, log.path())?;
            if !r.succeeded() {
                log::warn!("workload exited with {:?}; detection may be incomplete", r.exit_code);
            }
            report_from_trace(&lock, log.path(), &canonical(dir)?, &s)?
        }
    };
    emit(&report::render(&report, s.format), output.as_deref())?;
    Ok(0)
}

pub struct ReportSource {
    pub report: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

fn load_report(dir: &Path, src: &ReportSource, lock: &Lockfile, s: &Settings) -> Result<BloatReport> {
    match (&src.report, &src.trace) {
        (Some(r), _) => {
            let text = fs::read_to_string(r).with_context(|| format!("reading {}", r.display()))?;
            Ok(report::parse_report(&text).with_context(|| format!("parsing {}", r.display()))?)
        }
        (None, Some(t)) => {
            let root = s.trace_root.clone().map_or_else(|| canonical(dir), Ok)?;
            report_from_trace(lock, t, &root, s)
        }
        (None, None) => bail!("give --report FILE or --trace FILE"),
    }
}

/// `.debloated` siblings, or the originals (after `.orig` backups).
fn write_outputs(dir: &Path, lock: &Lockfile, manifest: &Manifest, in_place: bool) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (name, text) in [(MANIFEST, manifest.serialize()), (LOCKFILE, lock.serialize())] {
        let original = dir.join(name);
        let target = if in_place {
            let backup = dir.join(format!("{name}.orig"));
            if backup.exists() {
                log::warn!("{} exists; keeping it as the backup", backup.display());
            } else {
                fs::copy(&original, &backup).with_context(|| format!("backing up {}", original.display()))?;
            }
            original
        } else {
            dir.join(format!("{name}.debloated"))
        };
        fs::write(&target, text).with_context(|| format!("writing {}", target.display()))?;
        written.push(target);
    }
    Ok(written)
}

pub fn debloat(
    dir: &Path,
    report_file: Option<PathBuf>,
    trace: Option<PathBuf>,
    o: Overrides,
    in_place: bool,
) -> Result<u8> {
    let s = Settings::resolve(dir, o, vec![])?;
    let (lock, manifest) = load_package(dir)?;
    let report = load_report(dir, &ReportSource { report: report_file, trace }, &lock, &s)?;
    let mut plan = transform::plan(&report, s.strategy);
    for name in plan.restrict_to_manifest(&manifest) {
        log::warn!("`{name}` is only declared in devDependencies; not removing it");
    }
    let out = match s.strategy {
        Strategy::DirectOnly => transform::realize_direct(&lock, &manifest, &plan)?,
        Strategy::FullScale => transform::apply_full(
            &lock,
            &manifest,
            &plan,
            TransformOptions { allow_shadow_fallback: s.allow_shadow_fallback },
        )?,
    };
    warn_all(&out.warnings);
    let written = write_outputs(dir, &out.lockfile, &out.manifest, in_place)?;
    let mut text = format!(
        "strategy {}: removed {} instance(s), {} direct declaration(s)\n",
        s.strategy,
        out.removed.len(),
        manifest.runtime_deps.len() - out.manifest.runtime_deps.len()
    );
    for p in &written {
        text.push_str(&format!("wrote {}\n", p.display()));
    }
    emit(&text, None)?;
    Ok(0)
}

fn sandbox_config(s: &Settings) -> SandboxConfig {
    SandboxConfig {
        workload: s.workload.clone(),
        install_cmd: s.install_cmd.clone(),
        timeout: s.timeout,
        env: Vec::new(),
    }
}

fn validate_options(s: &Settings, baseline_passed: bool) -> ValidateOptions {
    ValidateOptions {
        strategy: s.strategy,
        restore: s.restore,
        transform: TransformOptions { allow_shadow_fallback: s.allow_shadow_fallback },
        baseline_passed,
    }
}

fn render_outcome(
    report: Option<&BloatReport>,
    result: &FinalResult,
    written: &[PathBuf],
    format: Format,
) -> String {
    let paths = |set: &BTreeSet<InstallPath>| set.iter().map(|p| p.to_string()).collect::<Vec<_>>();
    match format {
        Format::Json => report::to_json(&json!({
            "report": report,
            "validation": {
                "strategy": result.strategy,
                "iterations": result.iterations,
                "bloated": paths(&result.bloated),
                "restored": paths(&result.restored),
                "removed_instances": paths(&result.removed_instances),
                "log": result.log,
                "warnings": result.warnings,
            },
            "outputs": written.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        })),
        Format::Text => {
            let mut t = String::new();
            if let Some(r) = report {
                t.push_str(&report::render(r, Format::Text));
                t.push('\n');
            }
            t.push_str(&format!(
                "validation passed after {} iteration(s), strategy {}\n",
                result.iterations, result.strategy
            ));
            t.push_str(&format!("instances removed: {}\n", result.removed_instances.len()));
            let mut list = |title: &str, items: &BTreeSet<InstallPath>| {
                t.push_str(&format!("{title} ({}):\n", items.len()));
                for i in items {
                    t.push_str(&format!("  {i}\n"));
                }
            };
            list("confirmed bloated", &result.bloated);
            list("restored", &result.restored);
            for p in written {
                t.push_str(&format!("wrote {}\n", p.display()));
            }
            t
        }
    }
}

pub fn validate(
    dir: &Path,
    src: ReportSource,
    o: Overrides,
    workload: Vec<String>,
    in_place: bool,
    output: Option<PathBuf>,
) -> Result<u8> {
    let s = Settings::resolve(dir, o, workload)?;
    if s.workload.is_empty() {
        bail!("validation needs a workload after `--`");
    }
    let (lock, manifest) = load_package(dir)?;
    let report = load_report(dir, &src, &lock, &s)?;
    let mut sandbox = ScratchSandbox::new(dir, sandbox_config(&s))?;
    let result = validate_until_stable(&mut sandbox, &lock, &manifest, &report, &validate_options(&s, false))?;
    warn_all(&result.warnings);
    let written = write_outputs(dir, &result.lockfile, &result.manifest, in_place)?;
    emit(&render_outcome(Some(&report), &result, &written, s.format), output.as_deref())?;
    Ok(0)
}

pub fn run(dir: &Path, o: Overrides, workload: Vec<String>, in_place: bool, output: Option<PathBuf>) -> Result<u8> {
    let s = Settings::resolve(dir, o, workload)?;
    if s.workload.is_empty() {
        bail!("`run` needs a workload after `--`");
    }
    let (lock, manifest) = load_package(dir)?;
    let mut sandbox = ScratchSandbox::new(dir, sandbox_config(&s))?;
    log::info!("scratch copy at {}", sandbox.path().display());
    validate::Sandbox::rebuild(&mut sandbox, &lock, &manifest)?;

    let log_file = tempfile::NamedTempFile::new()?;
    let setup = TraceSetup {
        kind: s.tracer,
        log: log_file.path().to_path_buf(),
        self_exe: self_exe()?,
    };
    let baseline = sandbox.run_traced(&setup)?;
    if !baseline.succeeded() {
        return Err(ValidateError::WorkloadBrokenIndependently {
            exit_code: baseline.exit_code,
            output: baseline.output,
        }
        .into());
    }
    let root = canonical(sandbox.path())?;
    let report = report_from_trace(&lock, log_file.path(), &root, &s)?;

    let result = validate_until_stable(&mut sandbox, &lock, &manifest, &report, &validate_options(&s, true))?;
    warn_all(&result.warnings);
    let written = write_outputs(dir, &result.lockfile, &result.manifest, in_place)?;
    emit(&render_outcome(Some(&report), &result, &written, s.format), output.as_deref())?;
    Ok(0)
}

pub fn corpus(
    mut dirs: Vec<PathBuf>,
    list: Option<PathBuf>,
    trace_name: &str,
    o: Overrides,
    output: Option<PathBuf>,
) -> Result<u8> {
    if let Some(l) = list {
        let text = fs::read_to_string(&l).with_context(|| format!("reading {}", l.display()))?;
        let base = l.parent().unwrap_or(Path::new("."));
        dirs.extend(
            text.lines()
                .map(str::trim)
                .filter(|s| !s.is_empty() && !s.starts_with('#'))
                .map(|s| base.join(s)),
        );
    }
    if dirs.is_empty() {
        bail!("no package directories given");
    }
    let strategy: Strategy = o
        .strategy
        .as_deref()
        .map(str::parse)
        .transpose()
        .map_err(anyhow::Error::msg)?
        .unwrap_or(Strategy::DirectOnly);
    let format: Format = o
        .format
        .as_deref()
        .map(str::parse)
        .transpose()
        .map_err(anyhow::Error::msg)?
        .unwrap_or(Format::Text);
    let jobs = o.jobs.unwrap_or(1).max(1);
    let exe = self_exe()?;
    let mut extra: Vec<String> = Vec::new();
    if let Some(e) = &o.extensions {
        extra.push("--ext".into());
        extra.push(parse_extensions(e).into_iter().collect::<Vec<_>>().join(","));
    }
    if o.include_stat == Some(true) {
        extra.push("--include-stat".into());
    }

    let queue = Mutex::new(dirs.into_iter().collect::<VecDeque<_>>());
    let rows = Mutex::new(Vec::new());
    thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let Some(dir) = queue.lock().expect("queue").pop_front() else {
                    break;
                };
                let row = analyze_one(&exe, &dir, trace_name, &extra, strategy);
                rows.lock().expect("rows").push(row);
            });
        }
    });
    let summary = CorpusSummary::build(rows.into_inner().expect("rows"), strategy);
    if summary.aggregate.errors > 0 {
        log::warn!("{} package(s) failed; see the error rows", summary.aggregate.errors);
    }
    emit(&summary.render(format), output.as_deref())?;
    Ok(0)
}

fn analyze_one(exe: &Path, dir: &Path, trace_name: &str, extra: &[String], strategy: Strategy) -> CorpusRow {
    let label = dir.display().to_string();
    let out = Command::new(exe)
        .arg("detect")
        .arg(dir)
        .arg("--trace")
        .arg(dir.join(trace_name))
        .args(["--format", "json"])
        .args(extra)
        .env_remove("DEPPRUNE_FORMAT")
        .output();
    let out = match out {
        Ok(o) => o,
        Err(e) => return CorpusRow::failed(&label, e.to_string()),
    };
    if !out.status.success() {
        let err = String::from_utf8_lossy(&out.stderr);
        let msg = err.lines().find(|l| l.starts_with("error:")).unwrap_or(err.trim());
        return CorpusRow::failed(&label, msg.trim_start_matches("error: ").to_string());
    }
    match report::parse_report(&String::from_utf8_lossy(&out.stdout)) {
        Ok(r) => CorpusRow::from_report(&label, &r, strategy),
        Err(e) => CorpusRow::failed(&label, e.to_string()),
    }
}

/// Hidden entry point used as the built-in tracer's process.
pub fn trace_exec(argv: &[String], log: &Path) -> Result<u8> {
    match tracer::trace_exec(argv, log) {
        Ok(code) => Ok((code & 0xff) as u8),
        Err(e @ TracerError::SpawnFailed { .. }) => {
            eprintln!("error: {e}");
            Ok(127)
        }
        Err(e) => Err(e.into()),
    }
}
