use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_selfcond");

const SMALL: &[&str] = &[
    "--dataset",
    "ring",
    "--k",
    "4",
    "--iterations",
    "40",
    "--recluster-every",
    "20",
    "--eval-every",
    "20",
    "--eval-samples",
    "200",
    "--train-size",
    "400",
];

fn selfcond(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SELFCOND_OUT")
        .output()
        .expect("binary runs")
}

fn run_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    selfcond(&args)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn single_cell_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(dir.path(), &["--seeds", "1", "--export-data"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let cell = dir.path().join("selfcond_ring_k4_var0.0001_seed1");
    for f in ["config.json", "metrics.jsonl", "checkpoint.json", "samples.svg", "train.csv"] {
        assert!(cell.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(cell.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let svg = fs::read_to_string(cell.join("samples.svg")).unwrap();
    assert_eq!(svg.matches(r#"r="1.5""#).count(), 1000);
    let csv = fs::read_to_string(cell.join("train.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("x,y,true_mode"));
    assert_eq!(csv.lines().count(), 401);

    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "method,dataset,k,variance,seed_count,modes,hq_pct,rev_kl,nmi,purity");
    assert!(lines[1].starts_with("selfcond,ring,4,0.0001,1,"), "{}", lines[1]);
}

#[test]
fn rerun_is_a_noop_and_force_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_small(dir.path(), &["--seeds", "2"])), 0);
    let cell = dir.path().join("selfcond_ring_k4_var0.0001_seed2");
    let metrics = fs::read(cell.join("metrics.jsonl")).unwrap();
    let summary = fs::read(dir.path().join("summary.csv")).unwrap();
    let modified = fs::metadata(cell.join("metrics.jsonl")).unwrap().modified().unwrap();

    let again = run_small(dir.path(), &["--seeds", "2"]);
    assert_eq!(code(&again), 0);
    assert!(stderr(&again).contains("skipped"));
    assert_eq!(fs::metadata(cell.join("metrics.jsonl")).unwrap().modified().unwrap(), modified);
    assert_eq!(fs::read(dir.path().join("summary.csv")).unwrap(), summary);

    let forced = run_small(dir.path(), &["--seeds", "2", "--force"]);
    assert_eq!(code(&forced), 0);
    assert!(!stderr(&forced).contains("skipped"));
    assert_eq!(fs::read(cell.join("metrics.jsonl")).unwrap(), metrics);
    assert_eq!(fs::read(dir.path().join("summary.csv")).unwrap(), summary);
}

#[test]
fn sweep_cross_product_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_small(dir.path(), &["--k", "3,4", "--seeds", "1,2", "--jobs", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cells = fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(cells, 4);

    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("selfcond,ring,3,0.0001,2,"));
    assert!(rows[1].starts_with("selfcond,ring,4,0.0001,2,"));

    let report = selfcond(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(code(&report), 0);
    let text = String::from_utf8(report.stdout).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(
        header,
        ["method", "dataset", "k", "variance", "seed_count", "modes", "hq_pct", "rev_kl", "nmi", "purity"]
    );
    assert_eq!(text.lines().count(), 3);
    assert_eq!(fs::read_to_string(dir.path().join("report.csv")).unwrap(), summary);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["run", "--seeds", "3"];
    args.extend_from_slice(SMALL);
    let out = Command::new(BIN).args(&args).env("SELFCOND_OUT", dir.path()).output().unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("summary.csv").is_file());
    let report = Command::new(BIN).arg("report").env("SELFCOND_OUT", dir.path()).output().unwrap();
    assert_eq!(code(&report), 0);
}

#[test]
fn divergence_is_a_partial_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(&cfg, "seeds = [1]\n[train]\nlearning_rate = 1e200\n").unwrap();
    let out = run_small(&dir.path().join("out"), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let summary = fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().ends_with("0,diverged,diverged,diverged,diverged,diverged"));
    let report = selfcond(&["report", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&report), 2);
    assert!(String::from_utf8(report.stdout).unwrap().contains("diverged"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&selfcond(&["run", "--bogus"])), 1);
    assert_eq!(code(&selfcond(&["frobnicate"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = run_small(dir.path(), &["--variance", "0.1,-2"]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("variance[1]"), "{}", stderr(&bad));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatch_size = 0\n").unwrap();
    let bad = run_small(dir.path(), &["--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("batch_size"), "{}", stderr(&bad));

    fs::write(&cfg, "[train]\nno_such_field = 1\n").unwrap();
    assert_eq!(code(&run_small(dir.path(), &["--config", cfg.to_str().unwrap()])), 1);

    assert_eq!(code(&selfcond(&["--help"])), 0);
}

#[test]
fn empty_report_and_unknown_cell() {
    let dir = tempfile::tempdir().unwrap();
    let report = selfcond(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(code(&report), 1);
    let resume = selfcond(&["resume", "nope", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&resume), 1);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("not-a-dir");
    fs::write(&file, "x").unwrap();
    assert_eq!(code(&run_small(&file, &["--seeds", "1"])), 3);
}

#[test]
fn resume_after_kill_matches_uninterrupted_run() {
    let args = |out: &Path| -> Vec<String> {
        [
            "run", "--out", out.to_str().unwrap(), "--dataset", "ring", "--k", "4", "--seeds", "5",
            "--iterations", "3000", "--recluster-every", "100", "--eval-every", "100",
            "--eval-samples", "200", "--train-size", "400",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    };
    let dir = tempfile::tempdir().unwrap();
    let straight = dir.path().join("straight");
    let interrupted = dir.path().join("interrupted");
    assert_eq!(code(&Command::new(BIN).args(args(&straight)).output().unwrap()), 0);

    let cell = "selfcond_ring_k4_var0.0001_seed5";
    let mut child = Command::new(BIN)
        .args(args(&interrupted))
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let metrics = interrupted.join(cell).join("metrics.jsonl");
    let start = Instant::now();
    loop {
        let lines = fs::read_to_string(&metrics).map(|t| t.lines().count()).unwrap_or(0);
        if lines >= 3 || start.elapsed() > Duration::from_secs(120) {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    child.kill().unwrap();
    child.wait().unwrap();

    let finished_early = fs::read_to_string(interrupted.join("manifest.json")).is_ok_and(|m| m.contains(cell));
    if !finished_early {
        let out = selfcond(&["resume", cell, "--out", interrupted.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for f in ["metrics.jsonl", "checkpoint.json", "samples.svg"] {
        assert_eq!(
            fs::read(straight.join(cell).join(f)).unwrap(),
            fs::read(interrupted.join(cell).join(f)).unwrap(),
            "{f} differs"
        );
    }
    let again = selfcond(&["resume", cell, "--out", interrupted.to_str().unwrap()]);
    assert_eq!(code(&again), 0);
}
