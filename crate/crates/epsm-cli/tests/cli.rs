//! End-to-end tests of the `epsm` binary: exit codes, stderr messages,
//! and artifact layout. Everything runs on deliberately tiny bases so
//! the whole file takes seconds.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn epsm() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_epsm"));
    // one worker: byte-identical artifacts and no oversubscription
    c.env("RAYON_NUM_THREADS", "1");
    c
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.ini");
    fs::write(&path, text).unwrap();
    path
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const CUBIC_SMALL: &str = "\
[crystal]
preset = mathieu
period = 6.283185307179586
amplitudes = 2 2 2

[numerics]
g_max = 1.2
n_k = 2
path_points = 6
";

#[test]
fn bands_writes_deterministic_provenance_stamped_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), CUBIC_SMALL);

    let run = |out: &Path| {
        epsm()
            .args(["bands", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .args(["--override", "numerics.n_bands=3"])
            .output()
            .unwrap()
    };
    let a_dir = tmp.path().join("a");
    let b_dir = tmp.path().join("b");
    let first = run(&a_dir);
    assert!(first.status.success(), "stderr: {}", stderr_of(&first));
    let second = run(&b_dir);
    assert!(second.status.success());

    let a = fs::read_to_string(a_dir.join("bands.csv")).unwrap();
    let b = fs::read_to_string(b_dir.join("bands.csv")).unwrap();
    assert_eq!(a, b, "same config + thread count must give identical bytes");

    let mut lines = a.lines();
    assert!(lines.next().unwrap().starts_with("# epsm "));
    assert!(lines.next().unwrap().starts_with("# config-hash "));
    assert_eq!(lines.next().unwrap(), "s,qx,qy,qz,e1,e2,e3");
    // 4 segments x 6 points + closing corner
    assert_eq!(lines.count(), 25);
    assert!(!a.contains('\r'));

    let summary = fs::read_to_string(a_dir.join("summary.txt")).unwrap();
    // the resolved config is echoed, including applied defaults and the
    // override
    assert!(summary.contains("preset = mathieu"));
    assert!(summary.contains("n_k = 2"));
    assert!(summary.contains("n_bands = 3"));
    assert!(summary.contains("mix = 2.0000000000000001e-1"));
    assert!(summary.contains("[fermi]"));
    assert!(summary.contains("gap = "));
}

#[test]
fn rejected_config_names_the_key_and_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[crystal]\npreset = mathieu\nperiod = 6.283185307179586\namplitudes = 2 2 2\n\n[numerics]\ng_max = -1.5\n",
    );
    let out = epsm().args(["bands", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("numerics.g_max"), "stderr: {}", stderr_of(&out));
    // nothing should have been written
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn missing_config_file_exits_2() {
    let out = epsm()
        .args(["respond", "--config", "/nonexistent/run.ini"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn free_model_at_one_k_point_is_not_insulating() {
    let tmp = tempfile::tempdir().unwrap();
    // no fourier lines: the free model; two electrons land in the
    // degenerate second shell at Gamma, so there is no gap
    let cfg = write_config(
        tmp.path(),
        "\
[crystal]
a1 = 6.283185307179586 0 0
a2 = 0 6.283185307179586 0
a3 = 0 0 6.283185307179586
electrons = 2

[numerics]
g_max = 1.2
n_k = 1
",
    );
    let out = epsm()
        .args(["bands", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("not gapped"));
}

const DEFECT_SMALL: &str = "\
[crystal]
preset = mathieu
period = 6.283185307179586
amplitudes = 2 2 2

[numerics]
g_max = 1.2
n_k = 2
gap_tol = 5e-3

[defect]
z = 0.01
sigma = 1.0
m = 2
mix = 0.5
anderson_depth = 5
tol = 1e-8
max_iter = 60
";

#[test]
fn defect_scf_converges_and_conserves_charge() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), DEFECT_SMALL);
    let out_dir = tmp.path().join("out");
    let out = epsm()
        .args(["defect", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("scf iteration"));

    let hist = fs::read_to_string(out_dir.join("scf_history.csv")).unwrap();
    assert!(hist.lines().filter(|l| !l.starts_with('#')).count() > 2);
    assert!(out_dir.join("screening.csv").exists());

    let summary = fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    let conservation: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("charge_conservation = "))
        .expect("summary carries the charge-conservation entry")
        .parse()
        .unwrap();
    assert!(conservation.abs() < 1e-8, "tr0 = {conservation}");
}

#[test]
fn oversized_defect_charge_fails_at_the_fermi_level() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), DEFECT_SMALL);
    let out = epsm()
        .args(["defect", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .args(["--override", "defect.z=12"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("Fermi level"), "stderr: {}", stderr_of(&out));
}

#[test]
fn selftest_runs_a_single_criterion_and_reports_it() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = epsm()
        .args(["selftest", "--only", "2", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    let log = stderr_of(&out);
    assert!(log.contains("criterion  2 [pass]"), "stderr: {log}");

    let table = fs::read_to_string(out_dir.join("selftest.csv")).unwrap();
    assert!(table.contains("index,name,passed,seconds,detail"));
    assert!(table.contains("\n2,"));

    let summary = fs::read_to_string(out_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("passed = 1"));
    assert!(summary.contains("failed = 0"));
}

#[test]
fn selftest_rejects_out_of_range_criterion_numbers() {
    let out = epsm().args(["selftest", "--only", "13"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("1..=12"));
}
