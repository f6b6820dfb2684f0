//! Behavior of the `ua` executable.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ua_cli::ablate::{read_summary, AblationGrid, SUMMARY_FILE};
use ua_cli::commands::ProbeSummary;
use ua_cli::verify::SuiteReport;

const TINY: &str = "\
world.episodes = 12
world.episode_length = 10
batch_size = 8
chart_dim = 16
epochs = 2
probe.epochs = 3
";

fn ua(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ua"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run ua")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn pretrain(dir: &Path, config: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["pretrain", "--config", s(config), "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = ua(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    out
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(ua(&["--help"]).status.code(), Some(0));
    assert_eq!(ua(&[]).status.code(), Some(1));
    assert_eq!(ua(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(ua(&["probe", "--seeds", "x", "--checkpoint", "c", "--out", "o"]).status.code(), Some(1));
}

#[test]
fn generate_is_repeatable_and_names_bad_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.txt", TINY);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = ua(&["generate", "--config", s(&cfg), "--seed", "4", "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let manifest = |p: &Path| fs::read(p.join("manifest.json")).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    let text = String::from_utf8(manifest(&a)).unwrap();
    assert!(text.contains("episode_0011") && !text.contains("episode_0012"));

    let bad = write(tmp.path(), "bad.txt", "world.sprites = 9\n");
    let o = ua(&["generate", "--config", s(&bad), "--out", s(&tmp.path().join("c"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sprites"), "{}", stderr(&o));

    let typo = write(tmp.path(), "typo.txt", "world.sprits = 2\n");
    let o = ua(&["generate", "--config", s(&typo), "--out", s(&tmp.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("world.sprits"), "{}", stderr(&o));
}

#[test]
fn pretrain_dispatches_and_flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.txt", &format!("{}pipeline = st_dim_baseline\nepochs = 3\n", TINY.replace("epochs = 2\n", "")));
    let run = pretrain(tmp.path(), &cfg, "run", &["--epochs", "1"]);
    let saved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(saved.contains("pipeline = st_dim_baseline"));
    assert!(saved.contains("n_charts = 1"));
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 1);
}

#[test]
fn missing_dataset_fails_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let cfg = write(tmp.path(), "c.txt", &format!("{TINY}data_path = {}\n", missing.display()));
    let out = tmp.path().join("run");
    let o = ua(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nowhere"));
    assert!(!out.join("checkpoint.tar").exists());

    let folder = write(tmp.path(), "f.txt", "pipeline = simclr_ua\n");
    let o = ua(&["pretrain", "--config", s(&folder), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn probe_aggregates_seeds_and_rejects_mismatched_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.txt", TINY);
    let run = pretrain(tmp.path(), &cfg, "run", &[]);
    let ck = run.join("checkpoint.tar");
    let o = ua(&["probe", "--checkpoint", s(&ck), "--seeds", "3", "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary: ProbeSummary = serde_json::from_str(&fs::read_to_string(run.join("probe.json")).unwrap()).unwrap();
    assert_eq!(summary.runs.len(), 3);
    assert_eq!(summary.seeds, vec![0, 1, 2]);
    let f1s: Vec<f64> = summary.runs.iter().map(|r| r.overall.f1).collect();
    let m = f1s.iter().sum::<f64>() / 3.0;
    assert!((summary.overall.f1.mean - m).abs() < 1e-12);

    let small = write(tmp.path(), "small.txt", &format!("{TINY}world.cell_size = 4\n"));
    let data = tmp.path().join("small");
    assert_eq!(ua(&["generate", "--config", s(&small), "--out", s(&data)]).status.code(), Some(0));
    let o = ua(&["probe", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&tmp.path().join("p"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("expects"), "{}", stderr(&o));
}

#[test]
fn grid_is_a_cartesian_product() {
    let grid = AblationGrid::parse(
        "pipelines = dim_ua\nn_charts = 2, 4, 8\ntotal_units = 512, 2048\nseeds = 0, 1\n",
        Path::new("."),
    )
    .unwrap();
    let cells = grid.cells();
    assert_eq!(cells.len(), 6 * 2);
    assert!(cells.iter().all(|c| c.n * c.d == 512 || c.n * c.d == 2048));
    assert!(AblationGrid::parse("pipelines = dim_ua\nn_charts = 3\ntotal_units = 512\nseeds = 0\n", Path::new(".")).is_err());
}

#[test]
fn ablation_resumes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "base.txt", TINY);
    let grid = write(
        tmp.path(),
        "grid.txt",
        "base = base.txt\npipelines = dim_ua, mmd_uniform_baseline\nn_charts = 2, 4\ntotal_units = 32\nseeds = 0\n",
    );
    let out = tmp.path().join("grid");
    let o = ua(&["ablate", "--config", s(&grid), "--workers", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows = read_summary(&out.join(SUMMARY_FILE)).unwrap();
    assert_eq!(rows.len(), 4);
    let header = fs::read_to_string(out.join(SUMMARY_FILE)).unwrap();
    assert!(header.starts_with("pipeline,n,d,n_x_d,seed,mean_F1,mean_acc,final_entropy"));

    let before = fs::metadata(out.join("dim_ua-n2-d16-lr1-seed0/checkpoint.tar")).unwrap().modified().unwrap();
    let o = ua(&["ablate", "--config", s(&grid), "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("4 reused"));
    let after = fs::metadata(out.join("dim_ua-n2-d16-lr1-seed0/checkpoint.tar")).unwrap().modified().unwrap();
    assert_eq!(before, after);

    let rep = tmp.path().join("report");
    let o = ua(&["report", s(&out), "--out", s(&rep)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svg = fs::read_to_string(rep.join("units.svg")).unwrap();
    assert!(svg.contains("dim_ua (n=2)") && svg.contains("mmd_uniform_baseline (n=4)"));
    assert!(fs::read_to_string(rep.join("tables.txt")).unwrap().contains("agent_loc"));
}

#[test]
fn report_draws_one_entropy_curve_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let ua_cfg = write(tmp.path(), "a.txt", TINY);
    let mmd_cfg = write(tmp.path(), "b.txt", &format!("{TINY}pipeline = mmd_uniform_baseline\n"));
    let a = pretrain(tmp.path(), &ua_cfg, "ua", &[]);
    let b = pretrain(tmp.path(), &mmd_cfg, "mmd", &[]);
    let rep = tmp.path().join("report");
    let o = ua(&["report", s(&a), s(&b), s(&tmp.path().join("absent")), "--out", s(&rep)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svg = fs::read_to_string(rep.join("entropy.svg")).unwrap();
    assert!(svg.contains("dim_ua (4x16)") && svg.contains("mmd_uniform_baseline (4x16)"));
    assert!(fs::read_to_string(rep.join("tables.txt")).unwrap().contains("no metrics log"));

    let empty = ua(&["report", "--out", s(&rep)]);
    assert_eq!(empty.status.code(), Some(1));
    let nothing = ua(&["report", s(&tmp.path().join("absent")), "--out", s(&rep)]);
    assert_eq!(nothing.status.code(), Some(1));
}

#[test]
fn verify_writes_json_and_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let json = tmp.path().join("verify.json");
    let o = ua(&["verify", "--out", s(&json)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let report: SuiteReport = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert!(report.passed && report.quick && report.uncovered.is_empty());
    assert!(report.results.iter().any(|r| r.name == "cli_exit_codes"));
}
