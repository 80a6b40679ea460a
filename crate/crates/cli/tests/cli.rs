use std::path::Path;
use std::process::{Command, Output};

fn cmpc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmpc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn cmpc")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_accepts_shipped_configs() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&configs).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let o = cmpc(&["validate", p.to_str().unwrap()], &configs);
            assert!(o.status.success(), "{}: {}", p.display(), stderr(&o));
            n += 1;
        }
    }
    assert!(n >= 5);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad_pc = write(dir.path(), "a.toml", "kind = \"toy\"\n[toy]\npc = 1.5\n");
    let o = cmpc(&["validate", &bad_pc], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("toy.pc"), "{}", stderr(&o));

    let unknown = write(dir.path(), "b.toml", "kind = \"toy\"\nhorizon = 3\n");
    let o = cmpc(&["run", &unknown], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = cmpc(&["run", "missing.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let ok = write(dir.path(), "c.toml", "kind = \"av\"\n");
    let o = cmpc(&["run", &ok, "--pc", "0.2,0.4"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--pc"), "{}", stderr(&o));
}

#[test]
fn toy_run_writes_trace_into_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", "kind = \"toy\"\n");
    let o = cmpc(
        &["run", &cfg, "--out", "res", "--pc", "0.5", "--trigger", "3"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(dir.path().join("res/trace.csv")).unwrap();
    assert!(trace.starts_with("step,x,y,u0,cost_step,cost_cum\n"));
    let written = std::fs::read_to_string(dir.path().join("res/config.toml")).unwrap();
    assert!(
        written.contains("pc = 0.5") && written.contains("pop = 3"),
        "{written}"
    );
}

#[test]
fn fractional_toy_trigger_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "toy.toml", "kind = \"toy\"\n");
    let o = cmpc(&["run", &cfg, "--trigger", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solver_failure_flags_exit_with_three() {
    // a single IPM iteration cannot converge, so every step is flagged
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "av.toml",
        "kind = \"av\"\n[av]\nduration = 0.06\n[av.controller.solver]\nmax_iterations = 1\n",
    );
    let o = cmpc(&["run", &cfg, "--out", "res"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(
        stderr(&o).contains("solver failure in run av"),
        "{}",
        stderr(&o)
    );
    assert!(dir.path().join("res/trace.csv").exists());
}
