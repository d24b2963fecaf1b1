//! Reduce strace-style file-access logs to the dependency instances touched
//! by a workload.
//!
//! Accepted line shapes (pid prefix optional, `-f` style):
//!
//! ```text
//! 644728 openat(AT_FDCWD, "/lib/x86_64-linux-gnu/libc.so.6", O_RDONLY|O_CLOEXEC) = 3
//! 1090 openat(AT_FDCWD, "/p/node_modules/x/package.json", O_RDONLY|O_CLOEXEC) = -1 ENOENT (No such file or directory)
//! [pid  1091] openat(AT_FDCWD, "/p/a.js", O_RDONLY <unfinished ...>
//! [pid  1091] <... openat resumed>) = 22
//! 644728 +++ exited with 0 +++
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InstallPath, Lockfile};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed module path `{0}`: no dependency directory after a node_modules segment")]
    MalformedModulePath(String),
    #[error("reading trace: {0}")]
    Io(#[from] io::Error),
}

/// One parsed syscall record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub pid: u32,
    pub syscall: String,
    pub path: String,
    pub result: i64,
    pub errno: Option<String>,
}

impl TraceEvent {
    pub fn succeeded(&self) -> bool {
        self.result >= 0
    }
}

pub const OPEN_SYSCALLS: &[&str] = &["open", "openat", "openat2"];
pub const STAT_SYSCALLS: &[&str] = &[
    "stat",
    "lstat",
    "newfstatat",
    "fstatat64",
    "statx",
    "access",
    "faccessat",
    "faccessat2",
];
pub const DEFAULT_EXTENSIONS: &[&str] = &[".js", ".json"];
pub const EXTRA_EXTENSIONS: &[&str] = &[".cjs", ".mjs", ".node"];

/// Which syscalls count as accesses and which file extensions count as
/// module files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceOptions {
    pub syscalls: BTreeSet<String>,
    pub extensions: BTreeSet<String>,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            syscalls: OPEN_SYSCALLS.iter().map(|s| s.to_string()).collect(),
            extensions: DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TraceOptions {
    pub fn with_stat_calls(mut self) -> Self {
        self.syscalls
            .extend(STAT_SYSCALLS.iter().map(|s| s.to_string()));
        self
    }

    /// Replace the accepted extensions; entries may omit the leading dot.
    pub fn with_extensions<I, S>(mut self, exts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        self.extensions = exts
            .into_iter()
            .map(|e| {
                let e = e.as_ref().trim();
                if e.starts_with('.') {
                    e.to_string()
                } else {
                    format!(".{e}")
                }
            })
            .filter(|e| e.len() > 1)
            .collect();
        self
    }

    pub fn accepts_extension(&self, path: &str) -> bool {
        let file = path.rsplit('/').next().unwrap_or(path);
        self.extensions.iter().any(|ext| file.ends_with(ext.as_str()) && file.len() > ext.len())
    }
}

/// Line-level classification before unfinished/resumed joining.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceLine {
    Complete(TraceEvent),
    Unfinished {
        pid: u32,
        syscall: String,
        path: String,
    },
    Resumed {
        pid: u32,
        syscall: String,
        result: i64,
        errno: Option<String>,
    },
    Skip,
}

/// Parse one complete tracer line for the default file-open syscalls.
/// Split (unfinished/resumed), signal, exit and unrelated lines yield `None`.
pub fn parse_trace_line(line: &str) -> Option<TraceEvent> {
    match classify_line(line, &TraceOptions::default()) {
        TraceLine::Complete(ev) => Some(ev),
        _ => None,
    }
}

pub fn classify_line(line: &str, opts: &TraceOptions) -> TraceLine {
    classify(line, opts).unwrap_or(TraceLine::Skip)
}

fn classify(line: &str, opts: &TraceOptions) -> Option<TraceLine> {
    let (pid, rest) = split_pid(line.trim_end());
    let rest = skip_timestamp(rest.trim_start());
    if rest.starts_with("---") || rest.starts_with("+++") {
        return None;
    }
    if let Some(r) = rest.strip_prefix("<... ") {
        let (syscall, after) = r.split_once(" resumed>")?;
        if !opts.syscalls.contains(syscall) {
            return None;
        }
        let close = closing_paren(after, 0)?;
        let (result, errno) = parse_result(&after[close + 1..])?;
        return Some(TraceLine::Resumed {
            pid,
            syscall: syscall.to_string(),
            result,
            errno,
        });
    }

    let open = rest.find('(')?;
    let syscall = &rest[..open];
    if syscall.is_empty() || !syscall.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
        return None;
    }
    if !opts.syscalls.contains(syscall) {
        return None;
    }
    let args = &rest[open + 1..];
    let path = first_quoted(args)?;
    if args.trim_end().ends_with("<unfinished ...>") {
        return Some(TraceLine::Unfinished {
            pid,
            syscall: syscall.to_string(),
            path,
        });
    }
    let close = closing_paren(args, 0)?;
    let (result, errno) = parse_result(&args[close + 1..])?;
    Some(TraceLine::Complete(TraceEvent {
        pid,
        syscall: syscall.to_string(),
        path,
        result,
        errno,
    }))
}

fn split_pid(line: &str) -> (u32, &str) {
    if let Some(r) = line.strip_prefix("[pid") {
        if let Some((num, rest)) = r.split_once(']') {
            if let Ok(pid) = num.trim().parse() {
                return (pid, rest);
            }
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 && line[digits..].starts_with([' ', '\t']) {
        if let Ok(pid) = line[..digits].parse() {
            return (pid, &line[digits..]);
        }
    }
    (0, line)
}

/// Drop a leading `-t`/`-tt`/`-ttt`/`-r` timestamp column.
fn skip_timestamp(s: &str) -> &str {
    let end = s.find(' ').unwrap_or(0);
    let tok = &s[..end];
    if !tok.is_empty()
        && tok.bytes().next().is_some_and(|b| b.is_ascii_digit())
        && tok.bytes().all(|b| b.is_ascii_digit() || b == b':' || b == b'.')
    {
        s[end..].trim_start()
    } else {
        s
    }
}

/// Index of the `)` closing the argument list, honoring quoted strings and
/// nested brackets.
fn closing_paren(s: &str, start_depth: i32) -> Option<usize> {
    let bytes = s.as_bytes();
    let mut depth = start_depth;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'"' => {
                i += 1;
                while i < bytes.len() && bytes[i] != b'"' {
                    if bytes[i] == b'\\' {
                        i += 1;
                    }
                    i += 1;
                }
            }
            b'(' | b'{' | b'[' => depth += 1,
            b'}' | b']' => depth -= 1,
            b')' => {
                if depth == 0 {
                    return Some(i);
                }
                depth -= 1;
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// `= 3`, `= -1 ENOENT (No such file or directory)`, `= 3</path>`; `= ?` is
/// rejected.
fn parse_result(s: &str) -> Option<(i64, Option<String>)> {
    let s = s.trim_start().strip_prefix('=')?.trim_start();
    let num_len = s
        .char_indices()
        .take_while(|(i, c)| c.is_ascii_hexdigit() || *c == 'x' || (*i == 0 && *c == '-'))
        .count();
    let tok = &s[..num_len];
    let result = if let Some(hex) = tok.strip_prefix("0x") {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        let digits: String = tok.chars().take_while(|c| *c == '-' || c.is_ascii_digit()).collect();
        digits.parse().ok()?
    };
    let errno = s[num_len..]
        .split_whitespace()
        .next()
        .filter(|t| t.len() > 1 && t.starts_with('E') && t.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit()))
        .map(str::to_string);
    Some((result, errno))
}

/// First double-quoted string in an argument list, unescaped.
fn first_quoted(args: &str) -> Option<String> {
    let start = args.find('"')?;
    let bytes = args.as_bytes();
    let mut out: Vec<u8> = Vec::new();
    let mut i = start + 1;
    while i < bytes.len() {
        match bytes[i] {
            b'"' => return Some(String::from_utf8_lossy(&out).into_owned()),
            b'\\' if i + 1 < bytes.len() => {
                i += 1;
                match bytes[i] {
                    b'n' => out.push(b'\n'),
                    b't' => out.push(b'\t'),
                    b'r' => out.push(b'\r'),
                    b'v' => out.push(0x0b),
                    b'f' => out.push(0x0c),
                    b'x' => {
                        let hex = args.get(i + 1..i + 3)?;
                        out.push(u8::from_str_radix(hex, 16).ok()?);
                        i += 2;
                    }
                    b'0'..=b'7' => {
                        let len = bytes[i..]
                            .iter()
                            .take(3)
                            .take_while(|b| (b'0'..=b'7').contains(b))
                            .count();
                        let oct = &args[i..i + len];
                        out.push(u8::from_str_radix(oct, 8).ok()?);
                        i += len - 1;
                    }
                    other => out.push(other),
                }
            }
            b => out.push(b),
        }
        i += 1;
    }
    None
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    pub lines: usize,
    pub events: usize,
    /// Lines that produced no event (other syscalls, signals, exits, noise).
    pub skipped: usize,
    /// Unfinished/resumed fragments that never found their partner.
    pub unjoined: usize,
}

/// Streaming parser that joins `<unfinished ...>` / `<... resumed>` pairs by
/// (pid, syscall).
#[derive(Debug, Default)]
pub struct TraceParser {
    opts: TraceOptions,
    pending: HashMap<(u32, String), String>,
    stats: ParseStats,
}

impl TraceParser {
    pub fn new(opts: TraceOptions) -> Self {
        TraceParser {
            opts,
            ..Default::default()
        }
    }

    pub fn feed(&mut self, line: &str) -> Option<TraceEvent> {
        self.stats.lines += 1;
        let ev = match classify_line(line, &self.opts) {
            TraceLine::Complete(ev) => Some(ev),
            TraceLine::Unfinished { pid, syscall, path } => {
                if self.pending.insert((pid, syscall), path).is_some() {
                    self.stats.unjoined += 1;
                }
                return None;
            }
            TraceLine::Resumed {
                pid,
                syscall,
                result,
                errno,
            } => match self.pending.remove(&(pid, syscall.clone())) {
                Some(path) => Some(TraceEvent {
                    pid,
                    syscall,
                    path,
                    result,
                    errno,
                }),
                None => {
                    self.stats.unjoined += 1;
                    None
                }
            },
            TraceLine::Skip => None,
        };
        match ev {
            Some(_) => self.stats.events += 1,
            None => self.stats.skipped += 1,
        }
        ev
    }

    pub fn finish(mut self) -> ParseStats {
        self.stats.unjoined += self.pending.len();
        self.stats
    }
}

pub fn read_events<R: BufRead>(
    reader: R,
    opts: &TraceOptions,
) -> Result<(Vec<TraceEvent>, ParseStats), TraceError> {
    let mut parser = TraceParser::new(opts.clone());
    let mut events = Vec::new();
    for line in reader.split(b'\n') {
        let line = line?;
        let line = String::from_utf8_lossy(&line);
        if let Some(ev) = parser.feed(&line) {
            events.push(ev);
        }
    }
    Ok((events, parser.finish()))
}

/// Textual normalization of an absolute path: collapses `//`, resolves `.`
/// and `..`. Relative paths yield `None`.
pub fn normalize_path(path: &str) -> Option<String> {
    if !path.starts_with('/') {
        return None;
    }
    let mut parts: Vec<&str> = Vec::new();
    for c in path.split('/') {
        match c {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c),
        }
    }
    Some(format!("/{}", parts.join("/")))
}

/// Module files opened under the package's node_modules folder.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessSet {
    pub module_paths: BTreeSet<String>,
    pub instance_paths: BTreeSet<String>,
    /// instance path -> accessed files relative to the instance directory.
    #[serde(skip)]
    files_by_instance: BTreeMap<String, BTreeSet<String>>,
}

impl AccessSet {
    /// Instances whose only accessed file is their `package.json`.
    pub fn manifest_only_instances(&self) -> BTreeSet<String> {
        self.files_by_instance
            .iter()
            .filter(|(_, files)| files.iter().all(|f| f == "package.json"))
            .map(|(p, _)| p.clone())
            .collect()
    }
}

pub fn filter_module_accesses<I>(events: I, package_root: &str, opts: &TraceOptions) -> AccessSet
where
    I: IntoIterator<Item = TraceEvent>,
{
    let root = normalize_path(package_root).unwrap_or_else(|| package_root.to_string());
    let prefix = if root == "/" {
        "/node_modules/".to_string()
    } else {
        format!("{root}/node_modules/")
    };
    let mut acc = AccessSet::default();
    for ev in events {
        if !ev.succeeded() || !opts.syscalls.contains(&ev.syscall) {
            continue;
        }
        let Some(path) = normalize_path(&ev.path) else {
            continue;
        };
        if !path.starts_with(&prefix) || !opts.accepts_extension(&path) {
            continue;
        }
        if let Ok((install, _)) = map_path_to_instance(&path, &root) {
            let inner = path[root.len()..]
                .trim_start_matches('/')
                .strip_prefix(install.as_str())
                .unwrap_or_default()
                .trim_start_matches('/')
                .to_string();
            acc.files_by_instance
                .entry(install.clone())
                .or_default()
                .insert(inner);
            acc.instance_paths.insert(install);
            acc.module_paths.insert(path);
        }
    }
    acc
}

/// Map a module file to `(install_path, name)`: the prefix ending at the
/// last node_modules segment plus the dependency directory (two components
/// for `@scope/name`).
pub fn map_path_to_instance(
    module_path: &str,
    package_root: &str,
) -> Result<(String, String), TraceError> {
    let malformed = || TraceError::MalformedModulePath(module_path.to_string());
    let root = package_root.trim_end_matches('/');
    let rel = match module_path.strip_prefix(root) {
        Some(r) if !root.is_empty() && (r.is_empty() || r.starts_with('/')) => r,
        _ => module_path,
    };
    let parts: Vec<&str> = rel.split('/').filter(|c| !c.is_empty()).collect();
    let first = parts
        .iter()
        .position(|c| *c == "node_modules")
        .ok_or_else(malformed)?;
    let last = parts
        .iter()
        .rposition(|c| *c == "node_modules")
        .ok_or_else(malformed)?;
    let dep = *parts.get(last + 1).ok_or_else(malformed)?;
    let end = if dep.starts_with('@') {
        parts.get(last + 2).ok_or_else(malformed)?;
        last + 2
    } else {
        last + 1
    };
    let install = parts[first..=end].join("/");
    let name = parts[last + 1..=end].join("/");
    Ok((install, name))
}

/// Access results against a lockfile.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessedDependencies {
    pub accessed: BTreeSet<InstallPath>,
    /// Accessed dependency folders the lockfile does not know about.
    pub untracked: BTreeSet<String>,
}

pub fn accessed_dependencies(acc: &AccessSet, lock: &Lockfile) -> AccessedDependencies {
    let mut out = AccessedDependencies::default();
    for p in &acc.instance_paths {
        match lock.instances.get_key_value(p.as_str()) {
            Some((key, _)) => {
                out.accessed.insert(key.clone());
            }
            None => {
                out.untracked.insert(p.clone());
            }
        }
    }
    out
}
