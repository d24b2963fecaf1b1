//! Classify runtime instances as accessed or unaccessed and derive the
//! direct/indirect split, the cascade of direct removals, and R_d.

use std::collections::BTreeSet;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InstallPath, Lockfile, ModelError, Scope};
use crate::trace::{accessed_dependencies, filter_module_accesses, read_events, TraceError, TraceOptions};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("accessed path `{0}` is not an instance of the lockfile")]
    AccessOutsideLockfile(String),
    #[error("ratio requested with a zero total")]
    ZeroTotal,
    #[error("removed count {removed} exceeds total {total}")]
    RatioOutOfRange { removed: usize, total: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Extra findings that do not change the classification.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Dependency folders accessed during the workload but absent from the lockfile.
    pub untracked_accesses: BTreeSet<String>,
    /// Instances counted as accessed only because their package.json was opened.
    pub manifest_only_accesses: BTreeSet<String>,
    /// Instances shipped inside another package (`inBundle`), treated as ordinary edges.
    pub bundled: BTreeSet<InstallPath>,
    pub trace_lines: usize,
    pub skipped_lines: usize,
    pub unjoined_lines: usize,
    pub warnings: Vec<String>,
}

/// Outcome of trace-based detection for one package.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BloatReport {
    pub schema_version: u32,
    pub package: String,
    /// Number of runtime instances (Dep_o, #T).
    pub total_runtime: usize,
    /// Number of direct runtime instances (#D).
    pub direct_count: usize,
    pub accessed: BTreeSet<InstallPath>,
    pub unaccessed: BTreeSet<InstallPath>,
    /// Names of unaccessed direct dependencies (#BD).
    pub direct_bloated: BTreeSet<String>,
    pub indirect_bloated: BTreeSet<InstallPath>,
    /// Indirect instances that disappear once `direct_bloated` is dropped (#BD→I).
    pub cascade_from_direct: BTreeSet<InstallPath>,
    /// Accessed nested instances whose name also resolves at an ancestor level.
    pub shadow_candidates: BTreeSet<InstallPath>,
    /// Runtime instances unreachable from the root even before any removal.
    pub orphans: BTreeSet<InstallPath>,
    /// Full-scale ratio: |unaccessed| / total_runtime.
    pub r_d: f64,
    /// Direct-only ratio: (|direct_bloated| + |cascade_from_direct|) / total_runtime.
    pub r_d_direct: f64,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

impl BloatReport {
    /// Instances removed by the direct-only strategy (Prune_d numerator).
    pub fn direct_only_removed(&self) -> usize {
        self.direct_bloated.len() + self.cascade_from_direct.len()
    }

    pub fn direct_bloated_paths(&self) -> BTreeSet<InstallPath> {
        self.direct_bloated
            .iter()
            .filter_map(|n| InstallPath::parse(&format!("node_modules/{n}")).ok())
            .collect()
    }
}

/// R_d = removed / total.
pub fn compute_rd(removed: usize, total: usize) -> Result<f64, DetectError> {
    if total == 0 {
        return Err(DetectError::ZeroTotal);
    }
    if removed > total {
        return Err(DetectError::RatioOutOfRange { removed, total });
    }
    Ok(removed as f64 / total as f64)
}

fn ratio_or_zero(removed: usize, total: usize) -> Result<f64, DetectError> {
    match compute_rd(removed, total) {
        Err(DetectError::ZeroTotal) => Ok(0.0),
        other => other,
    }
}

/// Classify `lock`'s runtime instances against the accessed set.
///
/// Accessed dev instances are ignored; paths the lockfile does not contain
/// are rejected (route them to diagnostics beforehand).
pub fn detect(lock: &Lockfile, accessed: &BTreeSet<InstallPath>) -> Result<BloatReport, DetectError> {
    for p in accessed {
        if lock.get(p.as_str()).is_none() {
            return Err(DetectError::AccessOutsideLockfile(p.to_string()));
        }
    }
    let runtime = lock.runtime_instances();
    let accessed_rt: BTreeSet<InstallPath> = accessed.intersection(&runtime).cloned().collect();
    let unaccessed: BTreeSet<InstallPath> = runtime.difference(&accessed_rt).cloned().collect();

    let mut direct_bloated = BTreeSet::new();
    let mut indirect_bloated = BTreeSet::new();
    for p in &unaccessed {
        let inst = &lock.instances[p];
        if inst.is_direct {
            direct_bloated.insert(inst.name.clone());
        } else {
            indirect_bloated.insert(p.clone());
        }
    }

    let full = lock.reachable_instances(&BTreeSet::new())?;
    let after = lock.reachable_instances(&direct_bloated)?;
    let cascade_from_direct: BTreeSet<InstallPath> = full
        .difference(&after)
        .filter(|p| !lock.instances[*p].is_direct)
        .cloned()
        .collect();
    let orphans: BTreeSet<InstallPath> = runtime.difference(&full).cloned().collect();

    let shadow_candidates = shadow_candidates(lock, &accessed_rt);
    let direct_count = runtime
        .iter()
        .filter(|p| lock.instances[*p].is_direct)
        .count();
    let bundled = lock
        .instances
        .values()
        .filter(|i| i.scope == Scope::Runtime && i.is_bundled())
        .map(|i| i.install_path.clone())
        .collect();

    let total = runtime.len();
    let r_d = ratio_or_zero(unaccessed.len(), total)?;
    let r_d_direct = ratio_or_zero(direct_bloated.len() + cascade_from_direct.len(), total)?;

    Ok(BloatReport {
        schema_version: REPORT_SCHEMA_VERSION,
        package: lock.root_name.clone(),
        total_runtime: total,
        direct_count,
        accessed: accessed_rt,
        unaccessed,
        direct_bloated,
        indirect_bloated,
        cascade_from_direct,
        shadow_candidates,
        orphans,
        r_d,
        r_d_direct,
        diagnostics: Diagnostics {
            bundled,
            ..Default::default()
        },
    })
}

/// Full detection from a raw trace log. `package_root` is the package
/// directory as it appears in the trace.
pub fn detect_from_trace<R: BufRead>(
    reader: R,
    lock: &Lockfile,
    package_root: &str,
    opts: &TraceOptions,
) -> Result<BloatReport, DetectError> {
    let (events, stats) = read_events(reader, opts)?;
    let acc = filter_module_accesses(events, package_root, opts);
    let deps = accessed_dependencies(&acc, lock);
    let mut report = detect(lock, &deps.accessed)?;
    let d = &mut report.diagnostics;
    d.untracked_accesses = deps.untracked;
    d.manifest_only_accesses = acc
        .manifest_only_instances()
        .into_iter()
        .filter(|p| lock.get(p).is_some_and(|i| i.scope == Scope::Runtime))
        .collect();
    d.trace_lines = stats.lines;
    d.skipped_lines = stats.skipped;
    d.unjoined_lines = stats.unjoined;
    if acc.module_paths.is_empty() {
        d.warnings.push(format!(
            "no successful access under {package_root}/node_modules in the trace; every runtime dependency is reported bloated"
        ));
    }
    if stats.unjoined > 0 {
        d.warnings.push(format!("{} unfinished/resumed trace fragments were never joined", stats.unjoined));
    }
    if !report.orphans.is_empty() {
        d.warnings.push(format!(
            "{} runtime instance(s) are unreachable from the root declarations",
            report.orphans.len()
        ));
    }
    Ok(report)
}

/// Accessed, non-root-level runtime instances whose name also resolves at an
/// ancestor level. Report-only: such instances are never removed.
pub fn shadow_candidates(lock: &Lockfile, accessed: &BTreeSet<InstallPath>) -> BTreeSet<InstallPath> {
    accessed
        .iter()
        .filter(|p| p.depth() > 1)
        .filter(|p| lock.get(p.as_str()).is_some_and(|i| i.scope == Scope::Runtime))
        .filter(|p| lock.shadowing_instance(p).is_some())
        .cloned()
        .collect()
}
