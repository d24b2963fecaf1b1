//! Rebuild-and-rerun validation: install the debloated documents in a
//! scratch copy of the package, run the workload, and restore removed
//! dependencies until the workload passes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::BloatReport;
use crate::model::{InstallPath, Lockfile, Manifest, ModelError};
use crate::tracer::{self, TracerError, TracerKind};
use crate::transform::{self, DebloatPlan, Strategy, TransformError, TransformOptions};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30 * 60);
const OUTPUT_TAIL: usize = 8 * 1024;

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("clean install failed:\n{output}")]
    InstallFailed { output: String },
    #[error("cannot start `{program}`: {reason}")]
    SpawnFailed { program: String, reason: String },
    #[error("`{program}` did not finish within {secs}s")]
    Timeout { program: String, secs: u64 },
    #[error("workload still fails with no removal candidates left")]
    NoProgress,
    #[error("the workload fails without any removal (exit {exit_code:?}):\n{output}")]
    WorkloadBrokenIndependently { exit_code: Option<i32>, output: String },
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tracer(#[from] TracerError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Exit status and captured output of one workload run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadResult {
    /// `None` when killed by a signal.
    pub exit_code: Option<i32>,
    /// Interleaved stdout and stderr.
    pub output: String,
    pub trace_log: Option<PathBuf>,
}

impl WorkloadResult {
    pub fn succeeded(&self) -> bool {
        self.exit_code == Some(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub exit_code: Option<i32>,
    /// Last few kilobytes of output.
    pub output: String,
    pub missing_modules: BTreeSet<String>,
}

impl Failure {
    pub fn from_result(r: &WorkloadResult) -> Self {
        Failure {
            exit_code: r.exit_code,
            output: tail(&r.output, OUTPUT_TAIL).to_string(),
            missing_modules: missing_modules(&r.output),
        }
    }
}

fn tail(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut start = s.len() - max;
    while !s.is_char_boundary(start) {
        start += 1;
    }
    &s[start..]
}

/// Package names from the loader's "cannot find" messages.
pub fn missing_modules(output: &str) -> BTreeSet<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r#"Cannot find (?:module|package) '([^']+)'"#).expect("valid regex")
    });
    re.captures_iter(output)
        .filter_map(|c| specifier_to_package(&c[1]))
        .collect()
}

/// `lodash/fp` → `lodash`, `@s/n/x` → `@s/n`,
/// `/p/node_modules/a/node_modules/b/i.js` → `b`; relative paths → none.
pub fn specifier_to_package(spec: &str) -> Option<String> {
    let rest = match spec.rfind("node_modules/") {
        Some(i) => &spec[i + "node_modules/".len()..],
        None if spec.starts_with('.') || spec.starts_with('/') || spec.starts_with("node:") => {
            return None
        }
        None => spec,
    };
    let mut parts = rest.split('/');
    let first = parts.next().filter(|s| !s.is_empty())?;
    if first.starts_with('@') {
        let second = parts.next().filter(|s| !s.is_empty())?;
        Some(format!("{first}/{second}"))
    } else {
        Some(first.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestoreMode {
    /// Restore the candidates named in the failure, bisect when none match.
    #[default]
    Targeted,
    /// Always bisect.
    Bisect,
}

impl std::str::FromStr for RestoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "targeted" => Ok(RestoreMode::Targeted),
            "bisect" => Ok(RestoreMode::Bisect),
            other => Err(format!("unknown restore mode `{other}` (expected targeted or bisect)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationState {
    pub candidate_bloated: BTreeSet<InstallPath>,
    pub confirmed_restored: BTreeSet<InstallPath>,
    pub iteration: usize,
    pub last_failure: Option<Failure>,
}

impl ValidationState {
    pub fn new(candidates: BTreeSet<InstallPath>) -> Self {
        ValidationState {
            candidate_bloated: candidates,
            ..Default::default()
        }
    }

    fn restore(&mut self, lock: &Lockfile, seeds: impl IntoIterator<Item = InstallPath>) {
        let mut stack: Vec<InstallPath> = seeds.into_iter().collect();
        while let Some(p) = stack.pop() {
            if !self.candidate_bloated.remove(&p) {
                continue;
            }
            // Whatever the restored instance resolves to must come back too.
            if let Some(inst) = lock.get(p.as_str()) {
                for name in inst.declared_deps.keys() {
                    if let Some(t) = lock.resolve(Some(&p), name) {
                        if self.candidate_bloated.contains(&t.install_path) {
                            stack.push(t.install_path.clone());
                        }
                    }
                }
            }
            self.confirmed_restored.insert(p);
        }
    }
}

/// Shrink the candidate set after a failed run. `lock` is the original
/// lockfile, used to map names to instances and to close restorations.
pub fn repair(
    mut state: ValidationState,
    failure: Failure,
    lock: &Lockfile,
    mode: RestoreMode,
) -> Result<ValidationState, ValidateError> {
    if state.candidate_bloated.is_empty() {
        return Err(ValidateError::NoProgress);
    }
    let targeted = match mode {
        RestoreMode::Targeted => targeted_restore(&state.candidate_bloated, &failure.missing_modules, lock),
        RestoreMode::Bisect => BTreeSet::new(),
    };
    let seeds: Vec<InstallPath> = if targeted.is_empty() {
        let half = state.candidate_bloated.len().div_ceil(2);
        state.candidate_bloated.iter().take(half).cloned().collect()
    } else {
        targeted.into_iter().collect()
    };
    log::info!("restoring {} candidate(s)", seeds.len());
    state.restore(lock, seeds);
    state.last_failure = Some(failure);
    Ok(state)
}

fn targeted_restore(
    candidates: &BTreeSet<InstallPath>,
    missing: &BTreeSet<String>,
    lock: &Lockfile,
) -> BTreeSet<InstallPath> {
    let direct: BTreeSet<InstallPath> = candidates
        .iter()
        .filter(|c| missing.contains(c.name()))
        .cloned()
        .collect();
    if !direct.is_empty() || missing.is_empty() {
        return direct;
    }
    // The missing package was not itself a candidate: restore the candidates
    // whose subtree installs it.
    candidates
        .iter()
        .filter(|c| {
            subtree(lock, c)
                .iter()
                .any(|p| missing.contains(p.name()))
        })
        .cloned()
        .collect()
}

fn subtree(lock: &Lockfile, from: &InstallPath) -> BTreeSet<InstallPath> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![from.clone()];
    while let Some(p) = stack.pop() {
        if !seen.insert(p.clone()) {
            continue;
        }
        if let Some(inst) = lock.get(p.as_str()) {
            for name in inst.declared_deps.keys() {
                if let Some(t) = lock.resolve(Some(&p), name) {
                    stack.push(t.install_path.clone());
                }
            }
        }
    }
    seen
}

/// Where the workload runs: something that can install a pair of documents
/// from scratch and execute the workload against them.
pub trait Sandbox {
    fn rebuild(&mut self, lock: &Lockfile, manifest: &Manifest) -> Result<(), ValidateError>;
    fn run_workload(&mut self) -> Result<WorkloadResult, ValidateError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidateOptions {
    pub strategy: Strategy,
    pub restore: RestoreMode,
    pub transform: TransformOptions,
    /// The caller already ran the workload successfully on the original
    /// documents in this sandbox.
    pub baseline_passed: bool,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        ValidateOptions {
            strategy: Strategy::FullScale,
            restore: RestoreMode::Targeted,
            transform: TransformOptions::default(),
            baseline_passed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub removed: usize,
    pub passed: bool,
    pub restored: BTreeSet<InstallPath>,
    pub missing_modules: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalResult {
    pub strategy: Strategy,
    /// Confirmed bloated candidates (instance paths; direct-only uses the
    /// root-level paths of the removed direct dependencies).
    pub bloated: BTreeSet<InstallPath>,
    pub restored: BTreeSet<InstallPath>,
    /// Every instance absent from the final lockfile.
    pub removed_instances: BTreeSet<InstallPath>,
    pub lockfile: Lockfile,
    pub manifest: Manifest,
    /// Validation runs after the baseline; the last one passed.
    pub iterations: usize,
    pub log: Vec<IterationRecord>,
    pub warnings: Vec<String>,
}

fn initial_candidates(report: &BloatReport, manifest: &Manifest, strategy: Strategy) -> BTreeSet<InstallPath> {
    match strategy {
        Strategy::DirectOnly => report
            .direct_bloated_paths()
            .into_iter()
            .filter(|p| manifest.runtime_deps.contains_key(p.name()))
            .collect(),
        Strategy::FullScale => report.unaccessed.clone(),
    }
}

fn materialize(
    lock: &Lockfile,
    manifest: &Manifest,
    candidates: &BTreeSet<InstallPath>,
    opts: &ValidateOptions,
) -> Result<transform::Debloated, TransformError> {
    let names: BTreeSet<String> = candidates
        .iter()
        .filter(|p| p.depth() == 1 && lock.get(p.as_str()).is_some_and(|i| i.is_direct))
        .map(|p| p.name().to_string())
        .filter(|n| manifest.runtime_deps.contains_key(n))
        .collect();
    match opts.strategy {
        Strategy::DirectOnly => {
            let plan = DebloatPlan {
                strategy: Strategy::DirectOnly,
                remove_direct: names,
                remove_instances: BTreeSet::new(),
            };
            transform::realize_direct(lock, manifest, &plan)
        }
        Strategy::FullScale => {
            let plan = DebloatPlan {
                strategy: Strategy::FullScale,
                remove_direct: names,
                remove_instances: candidates.clone(),
            };
            transform::apply_full(lock, manifest, &plan, opts.transform)
        }
    }
}

/// Baseline first, then remove, rebuild, run and repair until the workload
/// passes. The returned documents are the ones the final passing run used.
pub fn validate_until_stable(
    sandbox: &mut dyn Sandbox,
    lock: &Lockfile,
    manifest: &Manifest,
    report: &BloatReport,
    opts: &ValidateOptions,
) -> Result<FinalResult, ValidateError> {
    if !opts.baseline_passed {
        sandbox.rebuild(lock, manifest)?;
        let baseline = sandbox.run_workload()?;
        if !baseline.succeeded() {
            return Err(ValidateError::WorkloadBrokenIndependently {
                exit_code: baseline.exit_code,
                output: tail(&baseline.output, OUTPUT_TAIL).to_string(),
            });
        }
    }

    let mut state = ValidationState::new(initial_candidates(report, manifest, opts.strategy));
    let mut warnings = Vec::new();
    let mut log = Vec::new();
    loop {
        let debloated = match materialize(lock, manifest, &state.candidate_bloated, opts) {
            Ok(d) => d,
            Err(TransformError::RemovalBreaksSurvivor { removed, survivor, .. }) => {
                // Keeping the plan consistent is not a workload iteration.
                warnings.push(format!("kept `{removed}`: `{survivor}` would resolve a different copy"));
                let p = InstallPath::parse(&removed)?;
                state.restore(lock, [p]);
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        state.iteration += 1;
        log::info!(
            "iteration {}: {} candidate(s), {} instance(s) removed",
            state.iteration,
            state.candidate_bloated.len(),
            debloated.removed.len()
        );
        sandbox.rebuild(&debloated.lockfile, &debloated.manifest)?;
        let result = sandbox.run_workload()?;
        if result.succeeded() {
            log.push(IterationRecord {
                iteration: state.iteration,
                removed: debloated.removed.len(),
                passed: true,
                restored: BTreeSet::new(),
                missing_modules: BTreeSet::new(),
            });
            warnings.extend(debloated.warnings);
            return Ok(FinalResult {
                strategy: opts.strategy,
                bloated: state.candidate_bloated,
                restored: state.confirmed_restored,
                removed_instances: debloated.removed,
                lockfile: debloated.lockfile,
                manifest: debloated.manifest,
                iterations: state.iteration,
                log,
                warnings,
            });
        }
        let failure = Failure::from_result(&result);
        let before = state.confirmed_restored.clone();
        let missing = failure.missing_modules.clone();
        state = match repair(state, failure, lock, opts.restore) {
            Err(ValidateError::NoProgress) => {
                return Err(ValidateError::WorkloadBrokenIndependently {
                    exit_code: result.exit_code,
                    output: tail(&result.output, OUTPUT_TAIL).to_string(),
                })
            }
            other => other?,
        };
        log.push(IterationRecord {
            iteration: state.iteration,
            removed: debloated.removed.len(),
            passed: false,
            restored: state.confirmed_restored.difference(&before).cloned().collect(),
            missing_modules: missing,
        });
    }
}

/// Every required edge of every instance (and of the root) resolves.
pub fn check_references(lock: &Lockfile) -> Result<(), String> {
    let mut broken = Vec::new();
    for (name, dep) in lock.root_declared() {
        if dep.kind.is_required() && lock.resolve(None, &name).is_none() {
            broken.push(format!("<root> -> {name}"));
        }
    }
    for (path, inst) in &lock.instances {
        for (name, dep) in &inst.declared_deps {
            if dep.kind.is_required() && lock.resolve(Some(path), name).is_none() {
                broken.push(format!("{path} -> {name}"));
            }
        }
    }
    if broken.is_empty() {
        Ok(())
    } else {
        Err(format!("dangling lockfile references:\n  {}", broken.join("\n  ")))
    }
}

/// Run `argv` in `cwd`, in its own process group, killing the whole group on
/// timeout. Output of both streams is captured in arrival order.
pub fn run_command(
    argv: &[String],
    cwd: &Path,
    timeout: Duration,
    env: &[(String, String)],
) -> Result<WorkloadResult, ValidateError> {
    let program = argv.first().ok_or_else(|| ValidateError::SpawnFailed {
        program: String::new(),
        reason: "empty command".into(),
    })?;
    let mut cmd = Command::new(program);
    cmd.args(&argv[1..])
        .current_dir(cwd)
        .envs(env.iter().map(|(k, v)| (k, v)))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let mut child = cmd.spawn().map_err(|e| ValidateError::SpawnFailed {
        program: program.clone(),
        reason: e.to_string(),
    })?;

    let buf = Arc::new(Mutex::new(Vec::new()));
    let pumps: Vec<_> = [
        child.stdout.take().map(|s| Box::new(s) as Box<dyn Read + Send>),
        child.stderr.take().map(|s| Box::new(s) as Box<dyn Read + Send>),
    ]
    .into_iter()
    .flatten()
    .map(|mut r| {
        let buf = Arc::clone(&buf);
        thread::spawn(move || {
            let mut chunk = [0u8; 8192];
            while let Ok(n) = r.read(&mut chunk) {
                if n == 0 {
                    break;
                }
                buf.lock().expect("output buffer").extend_from_slice(&chunk[..n]);
            }
        })
    })
    .collect();

    let start = Instant::now();
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if start.elapsed() >= timeout {
            kill_group(&mut child);
            for p in pumps {
                let _ = p.join();
            }
            return Err(ValidateError::Timeout {
                program: program.clone(),
                secs: timeout.as_secs(),
            });
        }
        thread::sleep(Duration::from_millis(20));
    };
    for p in pumps {
        let _ = p.join();
    }
    let output = String::from_utf8_lossy(&buf.lock().expect("output buffer")).into_owned();
    Ok(WorkloadResult {
        exit_code: status.code(),
        output,
        trace_log: None,
    })
}

fn kill_group(child: &mut std::process::Child) {
    #[cfg(target_os = "linux")]
    {
        use nix::sys::signal::{killpg, Signal};
        use nix::unistd::Pid;
        let _ = killpg(Pid::from_raw(child.id() as i32), Signal::SIGKILL);
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// Optional tracing of workload runs.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSetup {
    pub kind: TracerKind,
    pub log: PathBuf,
    /// Binary that understands the hidden `__trace-exec` subcommand.
    pub self_exe: PathBuf,
}

/// Run the workload in `package_dir`, optionally under the tracer.
pub fn run_workload(
    package_dir: &Path,
    workload: &[String],
    trace: Option<&TraceSetup>,
    timeout: Duration,
    env: &[(String, String)],
) -> Result<WorkloadResult, ValidateError> {
    match trace {
        None => run_command(workload, package_dir, timeout, env),
        Some(t) => {
            if let Some(program) = workload.first() {
                if tracer::find_in_path(program).is_none() {
                    return Err(ValidateError::SpawnFailed {
                        program: program.clone(),
                        reason: "not found in PATH".into(),
                    });
                }
            }
            let argv: Vec<String> = tracer::traced_argv(t.kind, &t.log, workload, &t.self_exe)?
                .into_iter()
                .map(|a| a.to_string_lossy().into_owned())
                .collect();
            let mut r = run_command(&argv, package_dir, timeout, env)?;
            r.trace_log = Some(t.log.clone());
            Ok(r)
        }
    }
}

/// Remove `node_modules` and run the clean-install command in `package_dir`.
pub fn rebuild(
    package_dir: &Path,
    install_cmd: &[String],
    timeout: Duration,
    env: &[(String, String)],
) -> Result<WorkloadResult, ValidateError> {
    let nm = package_dir.join("node_modules");
    if nm.exists() {
        fs::remove_dir_all(&nm)?;
    }
    let r = run_command(install_cmd, package_dir, timeout, env)?;
    if !r.succeeded() {
        return Err(ValidateError::InstallFailed { output: r.output });
    }
    Ok(r)
}

pub fn default_install_cmd() -> Vec<String> {
    ["npm", "ci", "--no-audit", "--no-fund"].map(String::from).to_vec()
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    pub workload: Vec<String>,
    pub install_cmd: Vec<String>,
    pub timeout: Duration,
    pub env: Vec<(String, String)>,
}

/// A throwaway copy of the package (without `node_modules`). The source
/// directory is never written to.
pub struct ScratchSandbox {
    dir: tempfile::TempDir,
    cfg: SandboxConfig,
    pub runs: usize,
}

impl ScratchSandbox {
    pub fn new(source: &Path, cfg: SandboxConfig) -> Result<Self, ValidateError> {
        let dir = tempfile::Builder::new().prefix("depprune-").tempdir()?;
        copy_package(source, dir.path())?;
        Ok(ScratchSandbox { dir, cfg, runs: 0 })
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Run the workload under the tracer in the current install.
    pub fn run_traced(&mut self, trace: &TraceSetup) -> Result<WorkloadResult, ValidateError> {
        self.runs += 1;
        run_workload(self.dir.path(), &self.cfg.workload, Some(trace), self.cfg.timeout, &self.cfg.env)
    }
}

fn copy_package(src: &Path, dst: &Path) -> io::Result<()> {
    let walker = walkdir::WalkDir::new(src)
        .min_depth(1)
        .into_iter()
        .filter_entry(|e| !(e.depth() == 1 && matches!(e.file_name().to_str(), Some("node_modules" | ".git"))));
    for entry in walker {
        let entry = entry.map_err(io::Error::other)?;
        let rel = entry.path().strip_prefix(src).expect("walk stays under src");
        let target = dst.join(rel);
        let ft = entry.file_type();
        if ft.is_dir() {
            fs::create_dir_all(&target)?;
        } else if ft.is_symlink() {
            #[cfg(unix)]
            std::os::unix::fs::symlink(fs::read_link(entry.path())?, &target)?;
        } else {
            fs::copy(entry.path(), &target)?;
        }
    }
    Ok(())
}

impl Sandbox for ScratchSandbox {
    fn rebuild(&mut self, lock: &Lockfile, manifest: &Manifest) -> Result<(), ValidateError> {
        check_references(lock).map_err(|output| ValidateError::InstallFailed { output })?;
        fs::write(self.path().join("package.json"), manifest.serialize())?;
        fs::write(self.path().join("package-lock.json"), lock.serialize())?;
        rebuild(self.dir.path(), &self.cfg.install_cmd, self.cfg.timeout, &self.cfg.env)?;
        Ok(())
    }

    fn run_workload(&mut self) -> Result<WorkloadResult, ValidateError> {
        self.runs += 1;
        run_workload(self.dir.path(), &self.cfg.workload, None, self.cfg.timeout, &self.cfg.env)
    }
}

/// Names of the directories a clean install produced, as install paths.
pub fn installed_paths(package_dir: &Path) -> io::Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let mut stack: Vec<(PathBuf, String)> = vec![(package_dir.join("node_modules"), "node_modules".into())];
    while let Some((dir, prefix)) = stack.pop() {
        let Ok(rd) = fs::read_dir(&dir) else { continue };
        let mut names: BTreeMap<String, PathBuf> = BTreeMap::new();
        for e in rd {
            let e = e?;
            if e.file_type()?.is_dir() {
                names.insert(e.file_name().to_string_lossy().into_owned(), e.path());
            }
        }
        for (name, path) in names {
            if name.starts_with('.') {
                continue;
            }
            if name.starts_with('@') {
                for s in fs::read_dir(&path)? {
                    let s = s?;
                    if s.file_type()?.is_dir() {
                        let full = format!("{prefix}/{name}/{}", s.file_name().to_string_lossy());
                        stack.push((s.path().join("node_modules"), format!("{full}/node_modules")));
                        out.insert(full);
                    }
                }
            } else {
                let full = format!("{prefix}/{name}");
                stack.push((path.join("node_modules"), format!("{full}/node_modules")));
                out.insert(full);
            }
        }
    }
    Ok(out)
}
