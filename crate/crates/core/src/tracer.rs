//! Running a workload under a file-access tracer.
//!
//! `strace` is used when installed. Otherwise a built-in ptrace tracer
//! (x86_64 Linux) follows forks and records the same syscalls in strace's
//! `-f` output format, so both logs go through the same parser.

use std::env;
use std::ffi::OsString;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TracerError {
    #[error("tracer `{tracer}` is not available; {hint}")]
    TracerUnavailable { tracer: String, hint: String },
    #[error("cannot start `{program}`: {reason}")]
    SpawnFailed { program: String, reason: String },
    #[error("ptrace failed: {0}")]
    Ptrace(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

const STRACE_HINT: &str = "install strace (e.g. `apt-get install strace`) or use `--tracer builtin`";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TracerKind {
    #[default]
    Auto,
    Strace,
    Builtin,
}

impl fmt::Display for TracerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TracerKind::Auto => "auto",
            TracerKind::Strace => "strace",
            TracerKind::Builtin => "builtin",
        })
    }
}

impl FromStr for TracerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(TracerKind::Auto),
            "strace" => Ok(TracerKind::Strace),
            "builtin" => Ok(TracerKind::Builtin),
            other => Err(format!("unknown tracer `{other}` (expected auto, strace or builtin)")),
        }
    }
}

pub fn find_in_path(program: &str) -> Option<PathBuf> {
    if program.contains('/') {
        let p = PathBuf::from(program);
        return p.is_file().then_some(p);
    }
    env::split_paths(&env::var_os("PATH")?)
        .map(|dir| dir.join(program))
        .find(|p| is_executable(p))
}

fn is_executable(p: &Path) -> bool {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        p.metadata().is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
    }
    #[cfg(not(unix))]
    {
        p.is_file()
    }
}

pub fn builtin_supported() -> bool {
    cfg!(all(target_os = "linux", target_arch = "x86_64"))
}

/// Pick the concrete tracer for `kind` on this host.
pub fn resolve_kind(kind: TracerKind) -> Result<TracerKind, TracerError> {
    let strace = find_in_path("strace").is_some();
    match kind {
        TracerKind::Strace if strace => Ok(TracerKind::Strace),
        TracerKind::Strace => Err(TracerError::TracerUnavailable {
            tracer: "strace".into(),
            hint: STRACE_HINT.into(),
        }),
        TracerKind::Builtin if builtin_supported() => Ok(TracerKind::Builtin),
        TracerKind::Auto if strace => Ok(TracerKind::Strace),
        TracerKind::Auto if builtin_supported() => Ok(TracerKind::Builtin),
        _ => Err(TracerError::TracerUnavailable {
            tracer: kind.to_string(),
            hint: "the built-in tracer needs x86_64 Linux; install strace".into(),
        }),
    }
}

/// The argv that runs `workload` under the tracer, writing the log to `log`.
/// `self_exe` must accept the hidden `__trace-exec` subcommand.
pub fn traced_argv(
    kind: TracerKind,
    log: &Path,
    workload: &[String],
    self_exe: &Path,
) -> Result<Vec<OsString>, TracerError> {
    let mut argv: Vec<OsString> = match resolve_kind(kind)? {
        TracerKind::Strace => ["strace", "-f", "-qq", "-e", "trace=%file", "-o"]
            .into_iter()
            .map(OsString::from)
            .chain([log.as_os_str().to_owned(), "--".into()])
            .collect(),
        _ => vec![
            self_exe.as_os_str().to_owned(),
            "__trace-exec".into(),
            "--log".into(),
            log.as_os_str().to_owned(),
            "--".into(),
        ],
    };
    argv.extend(workload.iter().map(OsString::from));
    Ok(argv)
}

/// Escape a path the way strace prints string arguments.
pub fn strace_escape(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len());
    for &b in bytes {
        match b {
            b'"' => s.push_str("\\\""),
            b'\\' => s.push_str("\\\\"),
            b'\n' => s.push_str("\\n"),
            b'\t' => s.push_str("\\t"),
            b'\r' => s.push_str("\\r"),
            0x20..=0x7e => s.push(b as char),
            _ => s.push_str(&format!("\\{b:03o}")),
        }
    }
    s
}

/// Run `argv` under the built-in tracer and return its exit code
/// (128 + signal when killed). Must be called from a single-threaded
/// process: it reaps every child of the caller.
pub fn trace_exec(argv: &[String], log: &Path) -> Result<i32, TracerError> {
    let program = argv.first().ok_or_else(|| TracerError::SpawnFailed {
        program: String::new(),
        reason: "empty command".into(),
    })?;
    if find_in_path(program).is_none() {
        return Err(TracerError::SpawnFailed {
            program: program.clone(),
            reason: "not found in PATH".into(),
        });
    }
    imp::trace_exec(argv, log)
}

#[cfg(all(target_os = "linux", target_arch = "x86_64"))]
mod imp {
    use std::collections::{HashMap, HashSet};
    use std::ffi::CString;
    use std::fs::{self, File};
    use std::io::{BufWriter, Write};
    use std::os::unix::ffi::OsStrExt;
    use std::path::{Path, PathBuf};

    use nix::errno::Errno;
    use nix::sys::ptrace::{self, Event, Options};
    use nix::sys::signal::{raise, Signal};
    use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
    use nix::unistd::{execvp, fork, ForkResult, Pid};

    use super::{strace_escape, TracerError};

    const MAX_PATH: usize = 4096;

    struct Spec {
        name: &'static str,
        /// Index of the dirfd argument, if the call has one.
        dirfd: Option<usize>,
        path: usize,
    }

    fn spec(nr: i64) -> Option<Spec> {
        let s = |name, dirfd, path| Some(Spec { name, dirfd, path });
        match nr {
            libc::SYS_open => s("open", None, 0),
            libc::SYS_openat => s("openat", Some(0), 1),
            libc::SYS_openat2 => s("openat2", Some(0), 1),
            libc::SYS_stat => s("stat", None, 0),
            libc::SYS_lstat => s("lstat", None, 0),
            libc::SYS_newfstatat => s("newfstatat", Some(0), 1),
            libc::SYS_statx => s("statx", Some(0), 1),
            libc::SYS_access => s("access", None, 0),
            libc::SYS_faccessat => s("faccessat", Some(0), 1),
            libc::SYS_faccessat2 => s("faccessat2", Some(0), 1),
            _ => None,
        }
    }

    struct Pending {
        spec: Spec,
        path: Vec<u8>,
    }

    fn arg(regs: &libc::user_regs_struct, i: usize) -> u64 {
        [regs.rdi, regs.rsi, regs.rdx, regs.r10, regs.r8, regs.r9][i]
    }

    fn read_cstring(pid: Pid, mut addr: u64) -> Vec<u8> {
        let mut out = Vec::new();
        while out.len() < MAX_PATH {
            let Ok(word) = ptrace::read(pid, addr as ptrace::AddressType) else {
                break;
            };
            for b in word.to_ne_bytes() {
                if b == 0 {
                    return out;
                }
                out.push(b);
            }
            addr += 8;
        }
        out
    }

    /// Make a relative path absolute using the tracee's cwd or dirfd target.
    fn absolutize(pid: Pid, path: Vec<u8>, dirfd: Option<i32>) -> Vec<u8> {
        if path.first() == Some(&b'/') {
            return path;
        }
        let base = match dirfd {
            Some(fd) if fd != libc::AT_FDCWD => format!("/proc/{pid}/fd/{fd}"),
            _ => format!("/proc/{pid}/cwd"),
        };
        match fs::read_link(base) {
            Ok(dir) if path.is_empty() => dir.as_os_str().as_bytes().to_vec(),
            Ok(dir) => {
                let joined: PathBuf = dir.join(std::ffi::OsStr::from_bytes(&path));
                joined.as_os_str().as_bytes().to_vec()
            }
            Err(_) => path,
        }
    }

    fn write_line(out: &mut impl Write, pid: Pid, p: &Pending, result: i64) -> std::io::Result<()> {
        let fdarg = if p.spec.dirfd.is_some() { "AT_FDCWD, " } else { "" };
        let path = strace_escape(&p.path);
        if result < 0 {
            let errno = Errno::from_raw(-result as i32);
            writeln!(
                out,
                "{pid}  {}({fdarg}\"{path}\", ...) = -1 {errno:?} ({})",
                p.spec.name,
                errno.desc()
            )
        } else {
            writeln!(out, "{pid}  {}({fdarg}\"{path}\", ...) = {result}", p.spec.name)
        }
    }

    pub fn trace_exec(argv: &[String], log: &Path) -> Result<i32, TracerError> {
        let cargs: Vec<CString> = argv
            .iter()
            .map(|a| CString::new(a.as_bytes()))
            .collect::<Result<_, _>>()
            .map_err(|_| TracerError::SpawnFailed {
                program: argv[0].clone(),
                reason: "argument contains a NUL byte".into(),
            })?;
        let mut out = BufWriter::new(File::create(log)?);
        let perr = |what: &str, e: Errno| TracerError::Ptrace(format!("{what}: {e}"));

        let child = match unsafe { fork() }.map_err(|e| perr("fork", e))? {
            ForkResult::Child => {
                let _ = ptrace::traceme();
                let _ = raise(Signal::SIGSTOP);
                let _ = execvp(&cargs[0], &cargs);
                unsafe { libc::_exit(127) }
            }
            ForkResult::Parent { child } => child,
        };

        match waitpid(child, None).map_err(|e| perr("waitpid", e))? {
            WaitStatus::Stopped(_, Signal::SIGSTOP) => {}
            other => return Err(TracerError::Ptrace(format!("unexpected first stop {other:?}"))),
        }
        ptrace::setoptions(
            child,
            Options::PTRACE_O_TRACESYSGOOD
                | Options::PTRACE_O_TRACEFORK
                | Options::PTRACE_O_TRACEVFORK
                | Options::PTRACE_O_TRACECLONE
                | Options::PTRACE_O_TRACEEXEC
                | Options::PTRACE_O_EXITKILL,
        )
        .map_err(|e| perr("setoptions", e))?;
        ptrace::syscall(child, None).map_err(|e| perr("syscall", e))?;

        let mut pending: HashMap<Pid, Pending> = HashMap::new();
        let mut started: HashSet<Pid> = HashSet::from([child]);
        let mut exit_code = 0;

        loop {
            let status = match waitpid(None, Some(WaitPidFlag::__WALL)) {
                Ok(s) => s,
                Err(Errno::ECHILD) => break,
                Err(Errno::EINTR) => continue,
                Err(e) => return Err(perr("waitpid", e)),
            };
            match status {
                WaitStatus::PtraceSyscall(pid) => {
                    if let Ok(regs) = ptrace::getregs(pid) {
                        let entering = regs.rax as i64 == -(libc::ENOSYS as i64);
                        if entering {
                            pending.remove(&pid);
                            if let Some(spec) = spec(regs.orig_rax as i64) {
                                let raw = read_cstring(pid, arg(&regs, spec.path));
                                let dirfd = spec.dirfd.map(|i| arg(&regs, i) as i32);
                                let path = absolutize(pid, raw, dirfd);
                                pending.insert(pid, Pending { spec, path });
                            }
                        } else if let Some(p) = pending.remove(&pid) {
                            write_line(&mut out, pid, &p, regs.rax as i64)?;
                        }
                    }
                    let _ = ptrace::syscall(pid, None);
                }
                WaitStatus::PtraceEvent(pid, _, ev) => {
                    if ev == Event::PTRACE_EVENT_EXEC as i32 {
                        pending.remove(&pid);
                    }
                    let _ = ptrace::syscall(pid, None);
                }
                WaitStatus::Stopped(pid, sig) => {
                    // Auto-attached children announce themselves with SIGSTOP.
                    if sig == Signal::SIGSTOP && started.insert(pid) {
                        let _ = ptrace::syscall(pid, None);
                    } else {
                        let _ = ptrace::syscall(pid, Some(sig));
                    }
                }
                WaitStatus::Exited(pid, code) => {
                    pending.remove(&pid);
                    if pid == child {
                        exit_code = code;
                    }
                }
                WaitStatus::Signaled(pid, sig, _) => {
                    pending.remove(&pid);
                    if pid == child {
                        exit_code = 128 + sig as i32;
                    }
                }
                _ => {}
            }
        }
        out.flush()?;
        Ok(exit_code)
    }
}

#[cfg(not(all(target_os = "linux", target_arch = "x86_64")))]
mod imp {
    use std::path::Path;

    use super::TracerError;

    pub fn trace_exec(_argv: &[String], _log: &Path) -> Result<i32, TracerError> {
        Err(TracerError::TracerUnavailable {
            tracer: "builtin".into(),
            hint: "the built-in tracer needs x86_64 Linux; install strace".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace_line;

    #[test]
    fn escaped_paths_parse_back() {
        let raw = b"/tmp/we\"ird\\dir/\xe2\x80\x94x.js";
        let line = format!("12  openat(AT_FDCWD, \"{}\", ...) = 3", strace_escape(raw));
        let ev = parse_trace_line(&line).unwrap();
        assert_eq!(ev.path.as_bytes(), raw);
        assert_eq!((ev.pid, ev.result), (12, 3));
    }

    #[test]
    fn error_line_shape_parses() {
        let ev = parse_trace_line("7  stat(\"/x/node_modules/a/index.js\", ...) = -1 ENOENT (No such file or directory)");
        assert!(ev.is_none(), "stat is not in the default syscall set");
        let ev = parse_trace_line("7  open(\"/x/a.js\", ...) = -1 ENOENT (No such file or directory)").unwrap();
        assert_eq!(ev.errno.as_deref(), Some("ENOENT"));
        assert!(!ev.succeeded());
    }

    #[test]
    fn builtin_argv_shape() {
        if find_in_path("strace").is_some() || !builtin_supported() {
            return;
        }
        let argv = traced_argv(
            TracerKind::Auto,
            Path::new("/tmp/t.log"),
            &["node".into(), "x.js".into()],
            Path::new("/bin/depprune"),
        )
        .unwrap();
        assert_eq!(argv[1], "__trace-exec");
        assert_eq!(argv[5..], [OsString::from("node"), OsString::from("x.js")]);
        assert!(matches!(
            resolve_kind(TracerKind::Strace),
            Err(TracerError::TracerUnavailable { .. })
        ));
    }
}
