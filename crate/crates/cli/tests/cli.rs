use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gradesync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradesync"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--out", dir.to_str().unwrap()];
    full.extend_from_slice(args);
    gradesync(&full)
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&gradesync(&[])), 2);
    assert_eq!(code(&gradesync(&["--scenario", "fig9", "--out", out])), 2);
    assert_eq!(
        code(&gradesync(&[
            "--scenario",
            "fig1-pairwise",
            "--set",
            "nodes=4",
            "--out",
            out
        ])),
        2
    );
    assert_eq!(
        code(&gradesync(&[
            "--scenario",
            "fig1-pairwise",
            "--set",
            "sigma_d",
            "--out",
            out
        ])),
        2
    );
    assert_eq!(
        code(&gradesync(&[
            "--scenario",
            "fig1-pairwise",
            "--set",
            "sigma_d=x",
            "--out",
            out
        ])),
        2
    );
    assert_eq!(
        code(&gradesync(&[
            "--scenario",
            "fig1-pairwise",
            "--format",
            "json"
        ])),
        2
    );
    assert_eq!(
        code(&gradesync(&["--scenario", "fig1-pairwise", "--seed", "-3"])),
        2
    );
    let err = gradesync(&["--scenario", "fig9"]);
    assert!(String::from_utf8_lossy(&err.stderr).contains("unknown scenario"));
}

#[test]
fn help_exits_0() {
    let out = gradesync(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("--scenario"));
}

#[test]
fn contract_violation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "--scenario",
            "fig3-multihop",
            "--set",
            "alpha=cap:0.5",
            "--set",
            "nodes=26",
            "--set",
            "seeds=1",
            "--set",
            "duration=6000",
        ],
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("node"));
}

#[test]
fn fig1_writes_csvs_with_expected_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["--scenario", "fig1-pairwise", "--format", "csv"],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let skew = fs::read_to_string(dir.path().join("skew.csv")).unwrap();
    assert!(trace.contains("# units=normalized\n"));
    assert!(trace.contains("\nt_seconds,node_id,protocol,logical_ticks\n"));
    assert!(skew.contains("\nt_seconds,protocol,global_skew_ticks\n"));
    let freq = fs::read_to_string(dir.path().join("frequency.csv")).unwrap();
    assert!(freq.lines().any(|l| l.starts_with("20,600,grades,")));
    let conv = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(conv.contains("grades,initial,"));
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "--scenario",
        "fig3-multihop",
        "--set",
        "seeds=2",
        "--set",
        "duration=3000",
        "--seed",
        "9",
    ];
    assert_eq!(code(&run_in(a.path(), &args)), 0);
    let mut seq = args.to_vec();
    seq.push("--sequential");
    assert_eq!(code(&run_in(b.path(), &seq)), 0);
    for f in ["trace.csv", "skew.csv", "summary.csv"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# pairwise run\nseed=5\nsigma_d = 0   # noiseless\n").unwrap();
    let out_a = dir.path().join("a");
    let a = gradesync(&[
        "--scenario",
        "fig1-pairwise",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(code(&a), 0);
    assert!(fs::read_to_string(out_a.join("skew.csv"))
        .unwrap()
        .contains("# seed=5\n"));

    let out_b = dir.path().join("b");
    let b = gradesync(&[
        "--scenario",
        "fig1-pairwise",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "seed=6",
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(code(&b), 0);
    assert!(fs::read_to_string(out_b.join("skew.csv"))
        .unwrap()
        .contains("# seed=6\n"));

    let out_c = dir.path().join("c");
    let c = gradesync(&[
        "--scenario",
        "fig1-pairwise",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "seed=6",
        "--seed",
        "8",
        "--out",
        out_c.to_str().unwrap(),
    ]);
    assert_eq!(code(&c), 0);
    assert!(fs::read_to_string(out_c.join("skew.csv"))
        .unwrap()
        .contains("# seed=8\n"));

    fs::write(&cfg, "bogus_key=1\n").unwrap();
    assert_eq!(
        code(&gradesync(&[
            "--scenario",
            "fig1-pairwise",
            "--config",
            cfg.to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn report_summarizes_noise_free_pair_as_zero_skew() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "--scenario",
            "fig1-pairwise",
            "--set",
            "sigma_d=0",
            "--set",
            "drift_ppm=0",
            "--set",
            "switch_ppm=0",
        ],
    );
    assert_eq!(code(&out), 0);
    let skew = dir.path().join("skew.csv");
    let report = gradesync(&["--report", skew.to_str().unwrap()]);
    assert_eq!(code(&report), 0);
    let text = String::from_utf8_lossy(&report.stdout);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(&cols[3..], &["0", "0", "0", "0"], "{row}");
    }
    assert_eq!(code(&gradesync(&["--report", "/nonexistent/skew.csv"])), 3);
}

#[test]
fn theory_check_and_scaling_run_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "--scenario",
            "theory-check",
            "--set",
            "rounds=200",
            "--set",
            "trials=10",
        ],
    );
    assert_eq!(code(&out), 0);
    let table = fs::read_to_string(dir.path().join("theory.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 54);
    let out = run_in(
        dir.path(),
        &[
            "--scenario",
            "scaling",
            "--set",
            "seeds=2",
            "--set",
            "diameters=1,2,4",
        ],
    );
    assert_eq!(code(&out), 0);
    let table = fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    assert!(table.contains("\n4,grades,"));
    let out = run_in(
        dir.path(),
        &["--scenario", "fig2-stepsize", "--set", "alphas=0.5,0.1"],
    );
    assert_eq!(code(&out), 0);
    let table = fs::read_to_string(dir.path().join("stepsize.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}
