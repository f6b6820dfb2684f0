//! The property suite plus the command-line properties, which need the
//! built executable.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use ua_core::propsuite::{registry, run_properties, uncovered, Property, PropertyResult, Tally};
use ua_core::RunConfig;

use crate::commands::{CONFIG_FILE, PROBE_FILE};
use crate::error::{io_error, CliError, CliResult, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};

/// Machine-readable outcome of `ua verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub quick: bool,
    pub passed: bool,
    pub failures: usize,
    pub uncovered: Vec<String>,
    pub results: Vec<PropertyResult>,
}

/// A config small enough to pretrain and probe in a few seconds.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.world.episodes = 12;
    cfg.world.episode_length = 10;
    cfg.batch_size = 8;
    cfg.epochs = 1;
    cfg.atlas.chart_dim = 16;
    cfg.probe.epochs = 3;
    cfg
}

fn sha256_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| hex::encode(Sha256::digest(&b)))
}

/// Hashes of every file below `root`, keyed by relative path.
pub fn tree_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let Ok(entries) = fs::read_dir(&dir) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if let Some(h) = sha256_file(&p) {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned();
                out.insert(rel, h);
            }
        }
    }
    out
}

fn run(exe: &Path, args: &[&str]) -> Result<i32, String> {
    let out = Command::new(exe)
        .args(args)
        .output()
        .map_err(|e| format!("cannot run {}: {e}", exe.display()))?;
    Ok(out.status.code().unwrap_or(-1))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap_or_default()
}

fn idempotence(exe: &Path, t: &mut Tally) {
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => return t.error(e),
    };
    let root = tmp.path();
    let config = root.join(CONFIG_FILE);
    if let Err(e) = fs::write(&config, tiny_config().to_text()) {
        return t.error(e);
    }
    let data = root.join("data");
    let run_dir = root.join("run");
    let checkpoint = run_dir.join(ua_core::train::CHECKPOINT_FILE);
    let probe_out = root.join("probe");

    let steps: Vec<(&str, Vec<&str>, PathBuf)> = vec![
        (
            "generate",
            vec!["generate", "--config", path_str(&config), "--out", path_str(&data)],
            data.clone(),
        ),
        (
            "pretrain",
            vec!["pretrain", "--config", path_str(&config), "--out", path_str(&run_dir)],
            checkpoint.clone(),
        ),
        (
            "probe",
            vec![
                "probe",
                "--checkpoint",
                path_str(&checkpoint),
                "--seeds",
                "2",
                "--out",
                path_str(&probe_out),
            ],
            probe_out.join(PROBE_FILE),
        ),
    ];
    for (name, args, artifact) in steps {
        let mut hashes = Vec::new();
        for _ in 0..2 {
            match run(exe, &args) {
                Ok(0) => {}
                Ok(code) => return t.check(false, || json!({ "command": name, "exit": code })),
                Err(e) => return t.error(e),
            }
            hashes.push(if artifact.is_dir() {
                tree_hashes(&artifact)
            } else {
                sha256_file(&artifact).map(|h| BTreeMap::from([(String::new(), h)])).unwrap_or_default()
            });
        }
        let same = !hashes[0].is_empty() && hashes[0] == hashes[1];
        t.check(same, || json!({ "command": name, "first": hashes[0], "second": hashes[1] }));
    }
}

fn exit_codes(exe: &Path, t: &mut Tally) {
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => return t.error(e),
    };
    let root = tmp.path();
    let good = root.join("good.txt");
    let bad_world = root.join("bad_world.txt");
    let mut cfg = tiny_config();
    let _ = fs::write(&good, cfg.to_text());
    cfg.world.grid_width = 0;
    let _ = fs::write(&bad_world, cfg.to_text());
    let missing = root.join("missing.txt");
    let out = root.join("out");

    let cases: Vec<(&str, Vec<&str>, i32)> = vec![
        ("generate", vec!["generate", "--config", path_str(&good), "--out", path_str(&out)], EXIT_OK),
        ("invalid_world", vec!["generate", "--config", path_str(&bad_world), "--out", path_str(&out)], EXIT_VALIDATION),
        ("missing_config", vec!["pretrain", "--config", path_str(&missing), "--out", path_str(&out)], EXIT_VALIDATION),
        ("unknown_flag", vec!["generate", "--no-such-flag"], EXIT_VALIDATION),
        ("empty_report", vec!["report", "--out", path_str(&out)], EXIT_VALIDATION),
        (
            "unwritable_out",
            vec!["generate", "--config", path_str(&good), "--out", "/proc/ua-unwritable/data"],
            EXIT_RUNTIME,
        ),
    ];
    for (name, args, expected) in cases {
        match run(exe, &args) {
            Ok(code) => t.check(code == expected, || json!({ "case": name, "expected": expected, "exit": code })),
            Err(e) => t.error(e),
        }
    }
}

/// Properties that drive the executable at `exe`.
pub fn cli_properties(exe: &Path) -> Vec<Property> {
    let a = exe.to_path_buf();
    let b = exe.to_path_buf();
    vec![
        Property::new("cli_idempotence", false, move |t| idempotence(&a, t)),
        Property::new("cli_exit_codes", false, move |t| exit_codes(&b, t)),
    ]
}

/// Runs the library and command-line properties and checks that every
/// checklist entry is provided.
pub fn run_all(exe: &Path, quick: bool) -> SuiteReport {
    let mut properties = registry();
    properties.extend(cli_properties(exe));
    let names: Vec<&str> = properties.iter().map(|p| p.name.as_str()).collect();
    let missing = uncovered(&names);
    let results = run_properties(&properties, quick);
    let failures = results.iter().filter(|r| !r.passed()).count();
    SuiteReport {
        quick,
        passed: failures == 0 && missing.is_empty(),
        failures,
        uncovered: missing,
        results,
    }
}

pub fn render(report: &SuiteReport) -> String {
    let width = report.results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut lines: Vec<String> = report
        .results
        .iter()
        .map(|r| {
            format!(
                "{} {:<width$} {:>5} instances {:>4} failures {:>7.1}s{}",
                if r.passed() { "PASS" } else { "FAIL" },
                r.name,
                r.instances,
                r.failures,
                r.seconds,
                r.counterexample.as_ref().map(|c| format!("  {c}")).unwrap_or_default(),
            )
        })
        .collect();
    for m in &report.uncovered {
        lines.push(format!("FAIL checklist names `{m}` but no property provides it"));
    }
    lines.push(format!(
        "{} properties, {} failed",
        report.results.len(),
        report.failures
    ));
    lines.join("\n")
}

pub fn write_report(report: &SuiteReport, path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    let text = serde_json::to_string_pretty(report).map_err(CliError::from)?;
    fs::write(path, text).map_err(|e| io_error(path, e))
}
