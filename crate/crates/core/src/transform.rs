//! Rewrite the manifest and lockfile for the two removal strategies.
//!
//! Direct-only removes bloated direct declarations from `package.json`; the
//! instances that only they pulled in disappear on the next clean install.
//! Full-scale deletes every unaccessed instance from `package-lock.json` and
//! cleans references that can no longer resolve.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detect::BloatReport;
use crate::model::{resolve_with, InstallPath, Lockfile, Manifest, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "direct")]
    DirectOnly,
    #[serde(rename = "full")]
    FullScale,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::DirectOnly => "direct",
            Strategy::FullScale => "full",
        })
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" | "direct-only" | "direct_only" => Ok(Strategy::DirectOnly),
            "full" | "full-scale" | "full_scale" => Ok(Strategy::FullScale),
            other => Err(format!("unknown strategy `{other}` (expected `direct` or `full`)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("`{0}` is not declared in the manifest's dependencies")]
    UnknownDirectDependency(String),
    #[error(
        "removing `{removed}` makes `{survivor}` resolve `{name}` to `{fallback}` instead; \
         re-run detection or pass --allow-shadow-fallback"
    )]
    RemovalBreaksSurvivor {
        survivor: String,
        name: String,
        removed: String,
        fallback: String,
    },
    #[error("plan strategy is `{found}`, this operation needs `{expected}`")]
    WrongStrategy { expected: Strategy, found: Strategy },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebloatPlan {
    pub strategy: Strategy,
    pub remove_direct: BTreeSet<String>,
    /// Full-scale only; direct-only leaves the cascade to the clean install.
    pub remove_instances: BTreeSet<InstallPath>,
}

impl DebloatPlan {
    pub fn is_empty(&self) -> bool {
        self.remove_direct.is_empty() && self.remove_instances.is_empty()
    }

    /// Drop direct names the manifest only declares under `devDependencies`
    /// (they are runtime instances because a runtime package also needs
    /// them). Returns the dropped names.
    pub fn restrict_to_manifest(&mut self, manifest: &Manifest) -> Vec<String> {
        let dropped: Vec<String> = self
            .remove_direct
            .iter()
            .filter(|n| !manifest.runtime_deps.contains_key(n.as_str()))
            .cloned()
            .collect();
        for n in &dropped {
            self.remove_direct.remove(n);
        }
        dropped
    }
}

/// Removal is all at once: every candidate goes in one plan.
pub fn plan(report: &BloatReport, strategy: Strategy) -> DebloatPlan {
    match strategy {
        Strategy::DirectOnly => DebloatPlan {
            strategy,
            remove_direct: report.direct_bloated.clone(),
            remove_instances: BTreeSet::new(),
        },
        Strategy::FullScale => DebloatPlan {
            strategy,
            remove_direct: report.direct_bloated.clone(),
            remove_instances: report.unaccessed.clone(),
        },
    }
}

/// Drop the plan's direct names from `dependencies`, keeping survivor order.
pub fn apply_direct(manifest: &Manifest, plan: &DebloatPlan) -> Result<Manifest, TransformError> {
    if plan.strategy != Strategy::DirectOnly {
        return Err(TransformError::WrongStrategy {
            expected: Strategy::DirectOnly,
            found: plan.strategy,
        });
    }
    if let Some(missing) = plan
        .remove_direct
        .iter()
        .find(|n| !manifest.runtime_deps.contains_key(n.as_str()))
    {
        return Err(TransformError::UnknownDirectDependency(missing.clone()));
    }
    let mut out = manifest.clone();
    out.runtime_deps.retain(|name, _| !plan.remove_direct.contains(name));
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransformOptions {
    /// Keep references whose target was removed but which now resolve to an
    /// ancestor copy of the same name.
    pub allow_shadow_fallback: bool,
}

/// Rewritten documents plus anything worth telling the user.
#[derive(Debug, Clone, PartialEq)]
pub struct Debloated {
    pub lockfile: Lockfile,
    pub manifest: Manifest,
    pub removed: BTreeSet<InstallPath>,
    pub warnings: Vec<String>,
}

/// Delete the plan's instances from the lockfile and clean what referenced
/// them. Paths already absent are ignored, so re-applying a plan is a no-op.
pub fn apply_full(
    lock: &Lockfile,
    manifest: &Manifest,
    plan: &DebloatPlan,
    opts: TransformOptions,
) -> Result<Debloated, TransformError> {
    if plan.strategy != Strategy::FullScale {
        return Err(TransformError::WrongStrategy {
            expected: Strategy::FullScale,
            found: plan.strategy,
        });
    }
    remove_instances(lock, manifest, &plan.remove_instances, &BTreeSet::new(), opts)
}

/// Offline realization of a direct-only plan: the manifest edit plus the
/// lockfile a clean install would leave behind (instances no longer
/// reachable from any root are pruned).
pub fn realize_direct(
    lock: &Lockfile,
    manifest: &Manifest,
    plan: &DebloatPlan,
) -> Result<Debloated, TransformError> {
    let new_manifest = apply_direct(manifest, plan)?;
    let before = lock.reachable_from_all_roots(&BTreeSet::new())?;
    let after = lock.reachable_from_all_roots(&plan.remove_direct)?;
    let pruned: BTreeSet<InstallPath> = before.difference(&after).cloned().collect();
    let mut out = remove_instances(
        lock,
        &new_manifest,
        &pruned,
        &plan.remove_direct,
        TransformOptions::default(),
    )?;
    out.manifest = new_manifest;
    Ok(out)
}

fn remove_instances(
    lock: &Lockfile,
    manifest: &Manifest,
    requested: &BTreeSet<InstallPath>,
    root_names: &BTreeSet<String>,
    opts: TransformOptions,
) -> Result<Debloated, TransformError> {
    let removed: BTreeSet<InstallPath> = requested
        .iter()
        .filter(|p| lock.get(p.as_str()).is_some())
        .cloned()
        .collect();
    let mut out = lock.clone();
    let mut new_manifest = manifest.clone();
    let mut warnings = Vec::new();

    for p in &removed {
        out.remove_instance(p.as_str());
    }

    let was_present = |c: &str| lock.instances.contains_key(c);
    let survivors: Vec<InstallPath> = out.instances.keys().cloned().collect();
    for s in &survivors {
        let inst = &out.instances[s.as_str()];
        let mut dangling = Vec::new();
        for name in inst.declared_deps.keys() {
            let Some(before) = resolve_with(Some(s), name, was_present) else {
                continue;
            };
            if !removed.contains(before.as_str()) {
                continue;
            }
            match resolve_with(Some(s), name, |c| out.instances.contains_key(c)) {
                None => dangling.push(name.clone()),
                Some(fallback) if !opts.allow_shadow_fallback => {
                    return Err(TransformError::RemovalBreaksSurvivor {
                        survivor: s.to_string(),
                        name: name.clone(),
                        removed: before,
                        fallback,
                    })
                }
                Some(_) => {}
            }
        }
        let inst = out.get_mut(s.as_str()).expect("survivor present");
        for name in dangling {
            inst.remove_declared(&name);
        }
    }

    let mut root_drop: BTreeSet<String> = root_names.clone();
    for name in lock.root_declared().keys() {
        if let Some(before) = resolve_with(None, name, was_present) {
            if removed.contains(before.as_str()) {
                root_drop.insert(name.clone());
            }
        }
    }
    let mut dev_drop = BTreeSet::new();
    for name in lock.root_dev_declared().keys() {
        if let Some(before) = resolve_with(None, name, was_present) {
            if removed.contains(before.as_str()) {
                dev_drop.insert(name.clone());
            }
        }
    }
    for name in &root_drop {
        out.remove_root_declared(name);
        new_manifest.runtime_deps.shift_remove(name);
    }
    for name in &dev_drop {
        out.remove_root_dev_declared(name);
        new_manifest.dev_deps.shift_remove(name);
        warnings.push(format!(
            "`{name}` was declared as a devDependency but its runtime instance was removed"
        ));
    }

    if !removed.is_empty() && out.drop_legacy_tree() {
        warnings.push(
            "dropped the legacy `dependencies` tree of the v2 lockfile; npm 7+ reads `packages`"
                .to_string(),
        );
    }

    Ok(Debloated {
        lockfile: out,
        manifest: new_manifest,
        removed,
        warnings,
    })
}
