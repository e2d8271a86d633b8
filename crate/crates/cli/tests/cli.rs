use std::path::Path;
use std::process::{Command, Output};

fn starris(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_starris"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"K": 2, "M": 4, "scheme": "tin", "ris_mode": "none", "trials": 2}"#,
    );
    let out = dir.path().join("rows.csv");
    let res = starris(&[
        "run",
        "--config",
        &config,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sweep_var,sweep_value,trial,scheme,ris_mode,min_ee_nats,min_ee_bits,iters,status,wall_ms,r_1,r_2,e_1,e_2"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn sweep_prints_json_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{"K": 2, "M": 4, "scheme": "tin", "ris_mode": "random"}"#,
    );
    let res = starris(&[
        "sweep", "--config", &config, "--var", "P_C", "--values", "0.5,1", "--format", "json",
    ]);
    assert_eq!(
        res.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = String::from_utf8(res.stdout).unwrap();
    assert_eq!(text.matches("\"sweep_var\": \"P_C\"").count(), 2);
}

#[test]
fn config_problems_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"K": 2, "Pc": 1.0}"#);
    assert_eq!(
        starris(&["run", "--config", &config]).status.code(),
        Some(2)
    );
    assert_eq!(
        starris(&["run", "--config", "/nonexistent/config.json"])
            .status
            .code(),
        Some(2)
    );
    let config = write_config(dir.path(), r#"{"K": 2}"#);
    let res = starris(&[
        "sweep", "--config", &config, "--var", "n", "--values", "512,256",
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn check_prints_one_line_per_criterion() {
    let res = starris(&["check", "--only", "1,2"]);
    assert_eq!(res.status.code(), Some(0));
    let text = String::from_utf8(res.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 2);
}
