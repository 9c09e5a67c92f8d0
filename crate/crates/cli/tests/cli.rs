use std::process::{Command, Output};

fn acnc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acnc")).args(args).output().expect("run acnc")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_topo_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        let o = acnc(&["gen-topo", "--size", "12", "--seed", "4", "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with("V=12 "));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gen_topo_rejects_a_single_device() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.txt");
    let o = acnc(&["gen-topo", "--size", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[experiment]\nno_such_key = 1\n").unwrap();
    let o = acnc(&["run", cfg.to_str().unwrap(), "--desk", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn key_outside_a_section_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bare.ini");
    std::fs::write(&cfg, "seed = 3\n").unwrap();
    let o = acnc(&["run", cfg.to_str().unwrap(), "--desk", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(acnc(&["gen-topo"]).status.code(), Some(2));
    assert_eq!(acnc(&["ctx-demo", "--stream", "bogus"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_config_key() {
    let o = acnc(&["run", "--help"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for &(section, key, _) in acnc_core::config::KEYS {
        assert!(text.contains(&format!("[{section}]")), "missing section {section}");
        assert!(text.contains(&format!("    {key} = ")), "missing key {key}");
    }
}

#[test]
fn ctx_demo_prints_one_row_per_step() {
    let o = acnc(&["ctx-demo", "--stream", "1,1,2,2,1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "index,regime,context,match,created");
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[6], "contexts 2");
}

#[test]
fn solve_prints_the_optimum_and_placement() {
    let o = acnc(&["solve", "--desk", "--size", "4", "--requests", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("objective "));
    assert!(text.contains("served "));
    assert!(text.contains("bind "));
}

#[test]
fn dump_state_writes_its_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = acnc(&["dump-state", "--desk", "--size", "4", "--slots", "2", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["memory-bank.txt", "codebook.txt", "placement.txt", "topology.txt"] {
        assert!(!std::fs::read_to_string(dir.path().join(f)).unwrap().is_empty(), "{f} empty");
    }
}

#[test]
fn out_dir_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_acnc"))
        .args(["gen-topo", "--size", "5"])
        .env("ACNC_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("topology-5.txt").exists());
}
