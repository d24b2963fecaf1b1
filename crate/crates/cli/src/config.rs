//! Settings resolution: command-line flags, then `DEPPRUNE_*` environment
//! variables (handled by clap), then `depprune.toml` in the package
//! directory, then built-in defaults.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Deserialize;

use depprune_core::report::Format;
use depprune_core::trace::{TraceOptions, EXTRA_EXTENSIONS};
use depprune_core::tracer::TracerKind;
use depprune_core::transform::Strategy;
use depprune_core::validate::{default_install_cmd, RestoreMode, DEFAULT_TIMEOUT};

pub const CONFIG_FILE: &str = "depprune.toml";

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub strategy: Option<String>,
    pub extensions: Option<Vec<String>>,
    pub include_stat: Option<bool>,
    pub allow_shadow_fallback: Option<bool>,
    pub timeout: Option<u64>,
    pub format: Option<String>,
    pub tracer: Option<String>,
    pub restore: Option<String>,
    pub trace_root: Option<String>,
    pub install_cmd: Option<Vec<String>>,
    pub workload: Option<Vec<String>>,
}

impl FileConfig {
    pub fn load(package_dir: &Path) -> Result<Self> {
        let path = package_dir.join(CONFIG_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => toml::from_str(&text).with_context(|| format!("parsing {}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
        }
    }
}

/// Raw values from flags or the environment; `None` when neither was given.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub strategy: Option<String>,
    pub extensions: Option<String>,
    pub include_stat: Option<bool>,
    pub allow_shadow_fallback: Option<bool>,
    pub timeout: Option<u64>,
    pub format: Option<String>,
    pub tracer: Option<String>,
    pub restore: Option<String>,
    pub trace_root: Option<String>,
    pub install_cmd: Option<String>,
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub strategy: Strategy,
    pub trace_opts: TraceOptions,
    pub allow_shadow_fallback: bool,
    pub timeout: Duration,
    pub format: Format,
    pub tracer: TracerKind,
    pub restore: RestoreMode,
    pub trace_root: Option<String>,
    pub install_cmd: Vec<String>,
    pub workload: Vec<String>,
}

fn pick<T: std::str::FromStr<Err = String>>(
    flag: Option<String>,
    file: Option<String>,
    what: &str,
) -> Result<Option<T>> {
    flag.or(file)
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("{what}: {e}")))
        .transpose()
}

/// `.js,.json` or `js json` → {".js", ".json"}.
pub fn parse_extensions(list: &str) -> BTreeSet<String> {
    list.split([',', ' '])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| if s.starts_with('.') { s.to_string() } else { format!(".{s}") })
        .collect()
}

impl Settings {
    pub fn resolve(package_dir: &Path, o: Overrides, workload: Vec<String>) -> Result<Self> {
        let f = FileConfig::load(package_dir)?;
        let strategy = pick(o.strategy, f.strategy, "strategy")?.unwrap_or(Strategy::FullScale);
        let format = pick(o.format, f.format, "format")?.unwrap_or(Format::Text);
        let tracer = pick(o.tracer, f.tracer, "tracer")?.unwrap_or_default();
        let restore = pick(o.restore, f.restore, "restore")?.unwrap_or_default();

        let mut trace_opts = TraceOptions::default();
        let exts = match (o.extensions, f.extensions) {
            (Some(list), _) => Some(parse_extensions(&list)),
            (None, Some(v)) => Some(parse_extensions(&v.join(","))),
            (None, None) => None,
        };
        if let Some(exts) = exts {
            for e in &exts {
                if !e[1..].bytes().all(|b| b.is_ascii_alphanumeric()) {
                    anyhow::bail!("bad extension `{e}`");
                }
            }
            trace_opts = trace_opts.with_extensions(exts);
        }
        if o.include_stat.or(f.include_stat).unwrap_or(false) {
            trace_opts = trace_opts.with_stat_calls();
        }

        let install_cmd = match (o.install_cmd, f.install_cmd) {
            (Some(s), _) => s.split_whitespace().map(String::from).collect(),
            (None, Some(v)) => v,
            (None, None) => default_install_cmd(),
        };
        if install_cmd.is_empty() {
            anyhow::bail!("install command is empty");
        }
        let workload = if workload.is_empty() { f.workload.unwrap_or_default() } else { workload };

        Ok(Settings {
            strategy,
            trace_opts,
            allow_shadow_fallback: o.allow_shadow_fallback.or(f.allow_shadow_fallback).unwrap_or(false),
            timeout: o.timeout.or(f.timeout).map(Duration::from_secs).unwrap_or(DEFAULT_TIMEOUT),
            format,
            tracer,
            restore,
            trace_root: o.trace_root.or(f.trace_root),
            install_cmd,
            workload,
        })
    }
}

/// Extensions accepted by `--ext` beyond the defaults, for help text.
pub fn extension_help() -> String {
    format!("comma-separated file extensions that count as module loads (default .js,.json; e.g. add {})", EXTRA_EXTENSIONS.join(","))
}
