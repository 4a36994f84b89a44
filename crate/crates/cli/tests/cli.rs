use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const HEAT: &str = r#"
scenario = "heat"
seed = 11

[grid]
t_end = 1.0
steps = 20

[ensemble]
particles = 4000
initial = "gaussian"
mean = [0.0]
std = 1.0

[fields]
kind = "constant"
params = { dim = 1, scale = 1.0 }

[model]
kind = "zero"

[terminal]
kind = "square"
params = { scale = 1.0 }
"#;

const DECOUPLED: &str = r#"
scenario = "decoupled"
seed = 5

[grid]
t_end = 1.0
steps = 10

[ensemble]
particles = 1000
initial = "point"
point = [0.0]

[fields]
kind = "constant"
params = { dim = 1, scale = 1.0 }

[model]
kind = "quadratic"
params = { weight = "constant", value = 1.0 }

[terminal]
kind = "square"
params = { scale = 0.5 }

[solver]
max_iter = 30
"#;

fn weakmfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weakmfg")).args(args).output().unwrap()
}

fn run(dir: &Path, command: &str, config: &str, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = dir.join(format!("{command}.toml"));
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join(format!("run-{command}-{}", extra.join("")));
    let mut args = vec![command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    (weakmfg(&args), out)
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn decoupled_equilibrium_converges() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, dir) = run(tmp.path(), "solve-mfg", DECOUPLED, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&dir);
    assert_eq!(m["convergence"]["converged"], true);
    assert_eq!(m["exit_code"], 0);
    assert!(dir.join("weights.csv").exists());
}

#[test]
fn zero_particles_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, _) = run(tmp.path(), "simulate", &HEAT.replace("particles = 4000", "particles = 0"), &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("particles") && err.contains("line"), "{err}");
}

#[test]
fn unknown_strategy_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, _) = run(tmp.path(), "simulate", &HEAT.replace("kind = \"square\"", "kind = \"cube\""), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cube"));
}

#[test]
fn outputs_are_byte_identical_across_runs_and_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, da) = run(tmp.path(), "solve-bsde", HEAT, &["--threads", "1"]);
    let (b, db) = run(tmp.path(), "solve-bsde", HEAT, &["--threads", "2"]);
    let (c, dc) = run(tmp.path(), "solve-bsde", HEAT, &["--threads", "2", "--seed", "11"]);
    for o in [&a, &b, &c] {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["paths.csv", "solution.csv", "u_field.csv", "z_representation.json"] {
        let x = std::fs::read(da.join(f)).unwrap();
        assert_eq!(x, std::fs::read(db.join(f)).unwrap(), "{f}");
        assert_eq!(x, std::fs::read(dc.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn manifest_checksums_match_files() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, dir) = run(tmp.path(), "solve-bsde", HEAT, &[]);
    assert!(out.status.success());
    let m = manifest(&dir);
    let files = m["files"].as_array().unwrap();
    assert!(files.len() >= 4);
    for f in files {
        let bytes = std::fs::read(dir.join(f["path"].as_str().unwrap())).unwrap();
        let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(f["sha256"].as_str().unwrap(), hex);
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
    assert_eq!(m["seed"], 11);
    assert!(m["stages"].as_array().unwrap().iter().all(|s| s["status"] == "ok"));
}

#[test]
fn heat_field_matches_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, dir) = run(tmp.path(), "solve-bsde", HEAT, &[]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.join("u_field.csv")).unwrap();
    let mut checked = 0;
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let (t, x, u) = (f[1], f[2], f[3]);
        if x.abs() <= 2.0 {
            let exact = x * x + (1.0 - t);
            assert!((u - exact).abs() <= 0.03 * exact.max(1.0), "t={t} x={x} u={u} exact={exact}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn emit_plots_writes_only_available_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, dir) = run(tmp.path(), "solve-bsde", HEAT, &[]);
    assert!(out.status.success());
    let p = weakmfg(&["emit-plots", "--out", dir.to_str().unwrap()]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    assert!(dir.join("plots/u_slices.dat").exists());
    assert!(dir.join("plots/yz_scatter.dat").exists());
    assert!(!dir.join("plots/kde.dat").exists());

    let with_density = HEAT.to_string() + "\n[diagnostics]\ndensity = true\n";
    let (out, dir) = run(tmp.path(), "simulate", &with_density, &[]);
    assert!(out.status.success());
    // simulate alone leaves nothing to plot
    let p = weakmfg(&["emit-plots", "--out", dir.to_str().unwrap()]);
    assert_eq!(p.status.code(), Some(1));
}

#[test]
fn emit_plots_without_a_run_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let p = weakmfg(&["emit-plots", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(p.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&p.stderr).contains("manifest"));
}

#[test]
fn verify_assumptions_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, dir) = run(tmp.path(), "verify-assumptions", DECOUPLED, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("assumptions.json")).unwrap()).unwrap();
    assert!(r.is_object());
}
