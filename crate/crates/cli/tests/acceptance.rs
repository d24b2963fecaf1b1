//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the summary is printed in a fixed order.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use depprune_core::detect::detect;
use depprune_core::model::{InstallPath, Lockfile, Manifest};
use depprune_core::report::{render_percent, spearman};
use depprune_core::trace::{
    classify_line, filter_module_accesses, map_path_to_instance, parse_trace_line, read_events, TraceLine, TraceOptions,
};
use depprune_core::transform::{apply_full, plan, DebloatPlan, Debloated, Strategy, TransformError};
use depprune_core::validate::installed_paths;
use depprune_testkit::{lookup_in, naive_spearman, oracle_reachable, random_lockfile};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const INSTALL: &str = "npm ci --offline --no-audit --no-fund";

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for entry in fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dst.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            fs::copy(entry.path(), to).unwrap();
        }
    }
}

fn depprune(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_depprune"))
        .args(args)
        .output()
        .unwrap()
}

fn have_node() -> bool {
    ["node", "npm"].iter().all(|p| {
        Command::new(p)
            .arg("--version")
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    })
}

fn shell(dir: &Path, cmd: &str) -> Result<(), String> {
    let out = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .current_dir(dir)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("`{cmd}` failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Install the `.debloated` documents from `src` into a fresh copy and
/// return the installed instance paths after checking the workload passes.
fn install_debloated(fixture: &Path, src: &Path) -> Result<BTreeSet<String>, String> {
    let fresh = tempfile::tempdir().unwrap();
    copy_dir(fixture, fresh.path());
    for name in ["package.json", "package-lock.json"] {
        fs::copy(src.join(format!("{name}.debloated")), fresh.path().join(name)).map_err(|e| e.to_string())?;
    }
    shell(fresh.path(), INSTALL)?;
    shell(fresh.path(), "node test.js")?;
    installed_paths(fresh.path()).map_err(|e| e.to_string())
}

fn timed(limit: Duration, f: impl FnOnce() -> Check) -> Check {
    let start = Instant::now();
    let detail = f()?;
    let took = start.elapsed();
    ensure!(took < limit, "took {took:.1?}, limit {limit:?}");
    Ok(format!("{detail} in {took:.1?}"))
}

fn c1_percent() -> Check {
    timed(Duration::from_secs(1), || {
        for (r, t, want) in [
            (680, 681, "99.85"),
            (12, 22, "54.55"),
            (206, 828, "24.88"),
            (1470, 1470, "100"),
        ] {
            let got = render_percent(r, t);
            ensure!(got == want, "{r}/{t} rendered {got}, want {want}");
        }
        Ok("4 ratios".into())
    })
}

fn c2_trace_lines() -> Check {
    timed(Duration::from_secs(1), || {
        let opts = TraceOptions::default();
        let ok = r#"644728 openat(AT_FDCWD, "/lib/x86_64-linux-gnu/libc.so.6", O_RDONLY|O_CLOEXEC) = 3"#;
        let e = parse_trace_line(ok).ok_or("success line not parsed")?;
        ensure!(
            (e.pid, e.syscall.as_str(), e.path.as_str(), e.result, e.errno.as_deref())
                == (644728, "openat", "/lib/x86_64-linux-gnu/libc.so.6", 3, None),
            "success line: {e:?}"
        );

        let root = "/disk/eslint-plugin-ocd";
        let fail = r#"1090 openat(AT_FDCWD, "/disk/eslint-plugin-ocd/node_modules/require-uncached/node_modules/resolve-from/package.json", O_RDONLY|O_CLOEXEC) = -1 ENOENT (No such file or directory)"#;
        let e = parse_trace_line(fail).ok_or("failure line not parsed")?;
        ensure!(
            (e.pid, e.result, e.errno.as_deref()) == (1090, -1, Some("ENOENT")),
            "failure line: {e:?}"
        );
        let acc = filter_module_accesses([e], root, &opts);
        ensure!(acc.instance_paths.is_empty(), "failed open counted as access");

        for other in [
            r#"644728 read(17, "MemTotal:       16318480 kB\n", 4096) = 1024"#,
            "644728 mmap(NULL, 8192, PROT_READ|PROT_WRITE, MAP_PRIVATE|MAP_ANONYMOUS, -1, 0) = 0x7f3a1c000000",
        ] {
            ensure!(
                classify_line(other, &opts) == TraceLine::Skip,
                "non-file syscall not skipped: {other}"
            );
        }

        let multi = "\
644728 openat(AT_FDCWD, \"/w/airtap/node_modules/airtap-default/index.js\", O_RDONLY|O_CLOEXEC <unfinished ...>
644746 openat(AT_FDCWD, \"/w/airtap/node_modules/readable-stream/readable.js\", O_RDONLY|O_CLOEXEC) = 18
644728 <... openat resumed>) = 17
";
        let (events, stats) = read_events(multi.as_bytes(), &opts).map_err(|e| e.to_string())?;
        let got: Vec<(u32, &str, i64)> = events.iter().map(|e| (e.pid, e.path.as_str(), e.result)).collect();
        ensure!(
            got == [
                (644746, "/w/airtap/node_modules/readable-stream/readable.js", 18),
                (644728, "/w/airtap/node_modules/airtap-default/index.js", 17)
            ],
            "multi-pid events: {got:?}"
        );
        ensure!(stats.unjoined == 0, "unjoined fragments: {}", stats.unjoined);

        let nested = r#"816 openat(AT_FDCWD, "/disk/eslint-plugin-ocd/node_modules/require-uncached/node_modules/resolve-from/index.js", O_RDONLY|O_CLOEXEC) = 22"#;
        let e = parse_trace_line(nested).ok_or("nested line not parsed")?;
        ensure!((e.pid, e.result) == (816, 22), "nested line: {e:?}");
        let acc = filter_module_accesses([e], root, &opts);
        let want: BTreeSet<String> = ["node_modules/require-uncached/node_modules/resolve-from".to_string()].into();
        ensure!(acc.instance_paths == want, "nested mapping: {:?}", acc.instance_paths);

        let m = map_path_to_instance("airtap/node_modules/airtap-default/index.js", "/w").map_err(|e| e.to_string())?;
        ensure!(
            m == ("node_modules/airtap-default".to_string(), "airtap-default".to_string()),
            "airtap mapping: {m:?}"
        );
        Ok("5 line shapes + airtap mapping".into())
    })
}

fn c3_reachability() -> Check {
    timed(Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xacc3);
        let mut scoped = 0;
        for i in 0..100 {
            let gen = random_lockfile(&mut rng, 200, 4);
            let lock = Lockfile::parse(&gen.lockfile).map_err(|e| e.to_string())?;
            scoped += gen.instances.keys().any(|p| p.contains("/@")) as usize;
            let excl: HashSet<String> = gen.root_deps.iter().filter(|_| rng.gen_bool(0.3)).cloned().collect();
            let ours: BTreeSet<String> = lock
                .reachable_instances(&excl.iter().cloned().collect())
                .map_err(|e| e.to_string())?
                .iter()
                .map(|p| p.to_string())
                .collect();
            ensure!(
                ours == oracle_reachable(&gen, &excl),
                "lockfile {i} differs from the BFS oracle"
            );
        }
        ensure!(scoped > 0, "no scoped names generated");
        Ok("100 lockfiles".into())
    })
}

fn closed_removal(
    rng: &mut ChaCha8Rng,
    lock: &Lockfile,
    manifest: &Manifest,
) -> Result<(BTreeSet<InstallPath>, Debloated), String> {
    let mut accessed: BTreeSet<InstallPath> = lock
        .runtime_instances()
        .into_iter()
        .filter(|_| rng.gen_bool(0.5))
        .collect();
    loop {
        let report = detect(lock, &accessed).map_err(|e| e.to_string())?;
        let p = plan(&report, Strategy::FullScale);
        match apply_full(lock, manifest, &p, Default::default()) {
            Ok(d) => return Ok((p.remove_instances, d)),
            Err(TransformError::RemovalBreaksSurvivor { removed, .. }) => {
                accessed.insert(InstallPath::parse(&removed).map_err(|e| e.to_string())?);
            }
            Err(e) => return Err(e.to_string()),
        }
    }
}

fn declared(text: &str) -> Result<Vec<(String, String)>, String> {
    let v: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for (path, entry) in v["packages"].as_object().ok_or("no packages")? {
        for key in ["dependencies", "optionalDependencies", "peerDependencies"] {
            if let Some(m) = entry.get(key).and_then(Value::as_object) {
                out.extend(m.keys().map(|n| (path.clone(), n.clone())));
            }
        }
    }
    Ok(out)
}

fn c4_apply_full() -> Check {
    timed(Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(0xacc4);
        let mut removed_total = 0;
        for i in 0..100 {
            let gen = random_lockfile(&mut rng, 200, 4);
            let lock = Lockfile::parse(&gen.lockfile).map_err(|e| e.to_string())?;
            let manifest = Manifest::parse(&gen.manifest).map_err(|e| e.to_string())?;
            let (removed, out) = closed_removal(&mut rng, &lock, &manifest)?;
            removed_total += removed.len();
            let text = out.lockfile.serialize();
            let present: HashSet<String> = serde_json::from_str::<Value>(&text).map_err(|e| e.to_string())?["packages"]
                .as_object()
                .ok_or("no packages")?
                .keys()
                .cloned()
                .collect();
            let had = |p: &str| gen.instances.contains_key(p) || p.is_empty();
            let has = |p: &str| present.contains(p);
            for p in &removed {
                ensure!(!has(p.as_str()), "lockfile {i}: removed {p} still present");
            }
            for (path, name) in declared(&text)? {
                let pre = lookup_in(had, &path, &name);
                if pre.is_some() {
                    ensure!(
                        lookup_in(has, &path, &name) == pre,
                        "lockfile {i}: {path:?} -> {name} no longer resolves"
                    );
                }
            }
            let again = apply_full(
                &out.lockfile,
                &out.manifest,
                &DebloatPlan {
                    strategy: Strategy::FullScale,
                    remove_direct: BTreeSet::new(),
                    remove_instances: removed,
                },
                Default::default(),
            )
            .map_err(|e| e.to_string())?;
            ensure!(
                again.lockfile.serialize() == text,
                "lockfile {i}: second application changed the lockfile"
            );
            let reparsed = Lockfile::parse(&text).map_err(|e| e.to_string())?;
            ensure!(
                reparsed.serialize() == text,
                "lockfile {i}: parse/serialize round trip differs"
            );
        }
        ensure!(removed_total > 0, "nothing was ever removed");
        Ok(format!("100 lockfiles, {removed_total} removals"))
    })
}

fn c5_end_to_end() -> Check {
    if !have_node() {
        return Ok("SKIPPED: node/npm not on PATH".into());
    }
    timed(Duration::from_secs(120), || {
        let fixture = fixtures().join("e2e-five");
        let work = tempfile::tempdir().unwrap();
        copy_dir(&fixture, work.path());
        let dir = work.path().to_str().unwrap();
        let out = depprune(&[
            "run",
            dir,
            "--install-cmd",
            INSTALL,
            "--format",
            "json",
            "--",
            "node",
            "test.js",
        ]);
        ensure!(
            out.status.success(),
            "run failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let v: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
        let bloated = v["validation"]["bloated"].as_array().ok_or("no bloated list")?.len();
        ensure!(bloated == 2, "confirmed {bloated} bloated, want 2");
        let installed = install_debloated(&fixture, work.path())?;
        ensure!(
            installed.len() == 3,
            "debloated install has {} instances: {installed:?}",
            installed.len()
        );
        Ok("2 bloated, 3 installed, workload passes".into())
    })
}

fn c6_seeded() -> Check {
    if !have_node() {
        return Ok("SKIPPED: node/npm not on PATH".into());
    }
    timed(Duration::from_secs(120), || {
        let fixture = fixtures().join("seeded-ten");
        let trace = fixtures().join("seeded-ten.trace");
        let mut details = Vec::new();
        for (mode, bound) in [("targeted", 2), ("bisect", 5)] {
            let work = tempfile::tempdir().unwrap();
            copy_dir(&fixture, work.path());
            let out = depprune(&[
                "validate",
                work.path().to_str().unwrap(),
                "--trace",
                trace.to_str().unwrap(),
                "--trace-root",
                "/fixture/seeded",
                "--install-cmd",
                INSTALL,
                "--restore",
                mode,
                "--format",
                "json",
                "--",
                "node",
                "test.js",
            ]);
            ensure!(
                out.status.success(),
                "{mode}: validate failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
            let v: Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
            let candidates = v["report"]["unaccessed"].as_array().ok_or("no report")?.len();
            ensure!(candidates == 10, "{mode}: {candidates} candidates, want 10");
            let iterations = v["validation"]["iterations"].as_u64().ok_or("no iterations")?;
            ensure!(iterations <= bound, "{mode}: {iterations} iterations, bound {bound}");
            let bloated: Vec<&str> = v["validation"]["bloated"]
                .as_array()
                .ok_or("no bloated")?
                .iter()
                .filter_map(Value::as_str)
                .collect();
            ensure!(
                !bloated.contains(&"node_modules/hidden"),
                "{mode}: misclassified dependency stayed removed"
            );
            let installed = install_debloated(&fixture, work.path())?;
            for b in &bloated {
                ensure!(!installed.contains(*b), "{mode}: {b} still installed");
            }
            details.push(format!("{mode} {iterations} iter/{} removed", bloated.len()));
        }
        Ok(details.join(", "))
    })
}

fn c7_spearman() -> Check {
    timed(Duration::from_secs(1), || {
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        let up: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
        let down: Vec<f64> = xs.iter().map(|x| 1.0 / x).collect();
        let (a, _) = spearman(&xs, &up).map_err(|e| e.to_string())?;
        let (b, _) = spearman(&xs, &down).map_err(|e| e.to_string())?;
        ensure!(a == 1.0 && b == -1.0, "perfect cases gave {a}, {b}");
        let mut rng = ChaCha8Rng::seed_from_u64(0xacc7);
        let xs: Vec<f64> = (0..20).map(|_| f64::from(rng.gen_range(0..15))).collect();
        let ys: Vec<f64> = (0..20).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (rs, _) = spearman(&xs, &ys).map_err(|e| e.to_string())?;
        let oracle = naive_spearman(&xs, &ys);
        ensure!((rs - oracle).abs() < 1e-9, "20-point sample {rs} vs oracle {oracle}");
        Ok(format!("rs = {rs:.6} on 20 points"))
    })
}

fn c8_deterministic() -> Check {
    let dir = fixtures().join("e2e-five");
    let trace = fixtures().join("e2e-five.trace");
    let args = [
        "detect",
        dir.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--trace-root",
        "/fixture/e2e",
        "--format",
        "json",
    ];
    let a = depprune(&args);
    let b = depprune(&args);
    ensure!(
        a.status.success(),
        "detect failed: {}",
        String::from_utf8_lossy(&a.stderr)
    );
    ensure!(a.stdout == b.stdout, "outputs differ");
    ensure!(!a.stdout.is_empty(), "empty output");
    Ok(format!("{} identical bytes", a.stdout.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("R_d rendering", c1_percent),
        ("trace line shapes and path mapping", c2_trace_lines),
        ("reachability matches BFS oracle", c3_reachability),
        ("full-scale removal soundness", c4_apply_full),
        ("end-to-end run on five-dependency fixture", c5_end_to_end),
        ("validation converges on seeded fixture", c6_seeded),
        ("Spearman correlation", c7_spearman),
        ("detection is deterministic", c8_deterministic),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS - {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL - {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
