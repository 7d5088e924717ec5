use std::fs;
use std::process::{Command, Output};

fn secmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_secmoe"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &tempfile::TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn cost_writes_csv_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "c.toml", "[dims]\nL = 2\nd0 = 4\nalpha = 1.0\n");
    let out = dir.path().join("cost.csv");
    let o = secmoe(&[
        "cost",
        "--config",
        &cfg,
        "--emin",
        "1",
        "--emax",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
    let s_total: f64 = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(8)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(s_total, 257.0);
}

#[test]
fn unwritable_output_exits_2() {
    let o = secmoe(&["cost", "--out", "/nonexistent-dir/x/cost.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot write"));
}

#[test]
fn invalid_range_exits_2() {
    assert_eq!(
        secmoe(&["opt", "--emin", "5", "--emax", "2"]).status.code(),
        Some(2)
    );
    assert_eq!(
        secmoe(&["cost", "--emin", "0", "--emax", "2"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn opt_reports_toy_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "c.toml", "[dims]\nL = 2\nd0 = 4\nalpha = 1.0\n");
    let o = secmoe(&["opt", "--config", &cfg, "--emin", "1", "--emax", "16"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("e_opt_int: 1\n"));
    assert!(text.contains("convention: consistent"));
    assert!(text.contains("derivative_check: pass"));
}

#[test]
fn audit_exit_codes() {
    assert_eq!(secmoe(&["audit"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "off.toml", "[dims]\nL = 4\n[model]\nr = 2\n");
    let o = secmoe(&["audit", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("off-model"));
}

#[test]
fn audit_csv_matches_text_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("audit.csv");
    let o = secmoe(&["audit", "--out", csv_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let csv = fs::read_to_string(&csv_path).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "equation,predicted,measured,match,note"
    );
    for line in csv.lines().skip(1) {
        let label = line.split(',').next().unwrap();
        assert!(
            text.lines().any(|l| l.starts_with(label)),
            "{label} missing from text"
        );
    }
}

#[test]
fn gradcheck_exit_codes() {
    let o = secmoe(&["gradcheck"]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("sectional_stack"));
    assert_eq!(
        secmoe(&["gradcheck", "--corrupt-adjoint"]).status.code(),
        Some(1)
    );
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "bad.toml", "[dims]\nd_zero = 8\n");
    let o = secmoe(&["cost", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("d_zero"));
    assert_eq!(
        secmoe(&["cost", "--config", "/no/such/file.toml"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn unknown_command_exits_2() {
    assert_eq!(secmoe(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn compare_and_route_stats_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "c.toml", "[dims]\nL = 4\nE = 2\nd0 = 8\n");
    let o = secmoe(&["compare", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for arch in ["dense", "traditional", "sectional"] {
        assert!(text.contains(&format!("architecture: {arch}")));
    }
    let o = secmoe(&["route-stats", "--config", &cfg, "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("tokens: 8") && text.contains("cv: "));
}

#[test]
fn seeded_outputs_are_reproducible() {
    let a = secmoe(&["route-stats", "--seed", "1"]).stdout;
    let b = secmoe(&["route-stats", "--seed", "1"]).stdout;
    assert_eq!(a, b);
    let cost_a = secmoe(&["cost", "--seed", "1"]).stdout;
    let cost_b = secmoe(&["cost", "--seed", "2"]).stdout;
    assert_eq!(cost_a, cost_b);
}
