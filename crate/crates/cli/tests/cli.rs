use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[solver]
modes = 16
grid_size = 64
dt = 1e-3
horizon = 0.05

[experiment]
paths = 64
seed = 7
"#;

fn config(dir: &Path, model: &str, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, format!("[model]\n{model}\n{SMALL}\n{extra}")).unwrap();
    path
}

fn spde(args: &[&str], archive: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spde"))
        .args(args)
        .arg("--archive")
        .arg(archive)
        .env_remove("SPDE_ARCHIVE")
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

/// Every file under `root` keyed by relative path, excluding host metadata.
fn archive_contents(root: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(dir: &Path, prefix: &str, out: &mut Vec<(String, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let name = format!("{prefix}{}", p.file_name().unwrap().to_string_lossy());
            if p.is_dir() {
                walk(&p, &format!("{name}/"), out);
            } else if !name.ends_with("/run.json") {
                out.push((name, fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, "", &mut out);
    out.sort();
    out
}

#[test]
fn linear_energy_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "preset = \"d\"", "");
    let out = spde(&["energy", "--config", cfg.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(out.status.code(), Some(0), "{}{}", text(&out.stdout), text(&out.stderr));
    let files = archive_contents(&dir.path().join("a"));
    let names: Vec<_> = files.iter().map(|(n, _)| n.split('/').nth(1).unwrap()).collect();
    for want in ["config.json", "config.toml", "manifest.json", "report.json", "report.txt"] {
        assert!(names.contains(&want), "{names:?}");
    }
}

#[test]
fn absurd_blowup_threshold_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "preset = \"d\"", "");
    let text_cfg = fs::read_to_string(&cfg).unwrap().replace("horizon = 0.05", "horizon = 0.05\nblowup_threshold = 1e-6");
    fs::write(&cfg, text_cfg).unwrap();
    let out = spde(&["energy", "--config", cfg.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(out.status.code(), Some(2), "{}{}", text(&out.stdout), text(&out.stderr));
    // The invalid report is still stored.
    assert!(!archive_contents(&dir.path().join("a")).is_empty());
}

#[test]
fn wrong_drift_constant_fails_audit_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "preset = \"a\"\n[model.constants]\nk = 0.25", "");
    let out = spde(&["audit", "--config", cfg.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(out.status.code(), Some(1), "{}{}", text(&out.stdout), text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("violated at xi="), "{stdout}");

    let cfg = config(dir.path(), "preset = \"a\"", "");
    let out = spde(&["audit", "--config", cfg.to_str().unwrap()], &dir.path().join("b"));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stdout));
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "preset = \"d\"", "[noise]\nfoo = 1\n");
    let out = spde(&["simulate", "--config", cfg.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("foo"), "{}", text(&out.stderr));
    assert!(!dir.path().join("a").exists());
}

#[test]
fn alpha_outside_unit_interval_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "preset = \"b\"", "");
    let t = fs::read_to_string(&cfg).unwrap().replace("horizon = 0.05", "horizon = 0.05\nalpha = 1.5");
    fs::write(&cfg, t).unwrap();
    let out = spde(&["simulate", "--config", cfg.to_str().unwrap()], &dir.path().join("a"));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("solver.alpha"), "{}", text(&out.stderr));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "preset = \"c\"", "");
    let cfg = cfg.to_str().unwrap();
    for cmd in ["simulate", "moment2m", "fpe-check"] {
        let mut runs = Vec::new();
        for threads in ["1", "8"] {
            let root = dir.path().join(format!("{cmd}-{threads}"));
            let out = spde(&[cmd, "--config", cfg, "--threads", threads, "--emit-plots"], &root);
            assert!(matches!(out.status.code(), Some(0 | 1)), "{}", text(&out.stderr));
            runs.push(archive_contents(&root));
        }
        assert!(runs[0].iter().any(|(n, _)| n.contains("/plots/")), "{cmd}");
        assert_eq!(runs[0], runs[1], "{cmd}");
    }
}

#[test]
fn archive_environment_variable_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "preset = \"d\"", "");
    let root = dir.path().join("env");
    let out = Command::new(env!("CARGO_BIN_EXE_spde"))
        .args(["simulate", "--config", cfg.to_str().unwrap(), "--seed", "11"])
        .env("SPDE_ARCHIVE", &root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let files = archive_contents(&root);
    assert!(files.iter().any(|(n, _)| n.ends_with("trajectory-11-0.bin")), "{files:?}");
    let echo = files.iter().find(|(n, _)| n.ends_with("config.toml")).unwrap();
    assert!(text(&echo.1).contains("seed = 11"));

    // Re-running from the echoed config reproduces the run exactly.
    let again = dir.path().join("again.toml");
    fs::write(&again, &echo.1).unwrap();
    let root2 = dir.path().join("again");
    let out = spde(&["simulate", "--config", again.to_str().unwrap()], &root2);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(archive_contents(&root2), files);
}
