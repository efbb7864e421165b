use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

fn varlab(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varlab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("VARLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn lambda_out_of_range_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# malformed\nh = 0.0625\nlambda = 2\n").unwrap();
    let o = varlab(&["lipapprox", "--config", cfg.to_str().unwrap()], &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("λ ∈ (0,1) required"), "{e}");
    assert!(e.contains("line 3"), "{e}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_keys_and_bad_flags_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "h = 0.0625\ncolour = red\n").unwrap();
    let o = varlab(&["height", "--config", cfg.to_str().unwrap()], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2: `colour`: unknown key"), "{}", stderr(&o));

    let o = varlab(&["height", "--set", "h"], tmp.path());
    assert_eq!(o.status.code(), Some(1));

    let o = varlab(&["run"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no experiment"));

    let o = Command::new(env!("CARGO_BIN_EXE_varlab"))
        .args(["generate", "--out"])
        .arg(tmp.path())
        .env("VARLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn decay_default_fits_quadratic_exponent() {
    let tmp = tempfile::tempdir().unwrap();
    let o = varlab(&["decay", "--plot"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = std::fs::read_to_string(tmp.path().join("decay_summary.csv")).unwrap();
    let k: f64 = column(&summary, "fitted_exponent")[0].parse().unwrap();
    assert!((k - 2.0).abs() < 0.1, "{k}");
    assert!(tmp.path().join("decay.svg").exists());
    let predecay = std::fs::read_to_string(tmp.path().join("predecay.csv")).unwrap();
    assert!(predecay.starts_with("eta,lhs,rhs"));
}

#[test]
fn catenoid_table_lists_all_constants() {
    let tmp = tempfile::tempdir().unwrap();
    let o = varlab(&["run", "--set", "experiment=catenoid-asymptotics"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("catenoid.csv")).unwrap();
    assert_eq!(column(&csv, "constant"), ["d1", "d2", "d3", "d4"]);
    assert!(column(&csv, "converged").iter().all(|c| c == "true"));
    let est: Vec<f64> = column(&csv, "estimate").iter().map(|s| s.parse().unwrap()).collect();
    let lim: Vec<f64> = column(&csv, "analytic_limit").iter().map(|s| s.parse().unwrap()).collect();
    for (e, l) in est.iter().zip(&lim) {
        assert!((e - l).abs() / l < 5e-3, "{e} vs {l}");
    }
    for d in ["d1", "d2", "d3", "d4"] {
        let seq = std::fs::read_to_string(tmp.path().join(format!("{d}.csv"))).unwrap();
        assert!(seq.starts_with("R,ratio,extrapolated,err_estimate\n"));
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = |t: &'static str| ["lipapprox", "--threads", t, "--set", "q=2", "--set", "h=0.0625"];
    assert_eq!(varlab(&args("1"), &a).status.code(), Some(0));
    assert_eq!(varlab(&args("4"), &b).status.code(), Some(0));
    for f in ["estimates.csv", "summary.csv", "approximant.txt", "kmask.txt", "manifest.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn manifest_digests_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("h.cfg");
    std::fs::write(&cfg, "radius = 0.25, 0.5\n").unwrap();
    let out = tmp.path().join("out");
    let o = varlab(&["height", "--plot", "--config", cfg.to_str().unwrap(), "--set", "radius=0.5"], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m["experiment"], "height");
    assert_eq!(m["config"]["radius"], "0.5");
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    let input = &m["inputs"][0];
    let digest: String = Sha256::digest(std::fs::read(&cfg).unwrap()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(input["sha256"], digest.as_str());
    let mut listed: Vec<String> = Vec::new();
    for e in m["outputs"].as_array().unwrap() {
        let p = e["path"].as_str().unwrap();
        let body = std::fs::read(out.join(p)).unwrap();
        let d: String = Sha256::digest(&body).iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(e["sha256"], d.as_str(), "{p}");
        listed.push(p.to_string());
    }
    let mut on_disk: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    assert_eq!(listed, on_disk);
}

#[test]
fn measured_violation_has_its_own_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    // three well separated sheets read as Q = 1
    let o = varlab(&["height", "--set", "sheets=3", "--set", "epsilon=0.001"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("exceed Q = 1"));
    assert!(manifest(tmp.path())["violation"].is_string());
}

#[test]
fn failed_precondition_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = varlab(&["lipapprox", "--set", "model=cone"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("precondition"));
}

#[test]
fn every_subcommand_produces_csv() {
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, file) in [
        ("generate", "summary.csv"),
        ("excess", "cylindrical.csv"),
        ("lipen", "lipen.csv"),
        ("validators", "validators.csv"),
    ] {
        let dir = tmp.path().join(cmd);
        let o = varlab(&[cmd, "--set", "h=0.0625"], &dir);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        let csv = std::fs::read_to_string(dir.join(file)).unwrap();
        assert!(csv.lines().count() >= 2, "{cmd}");
    }
}
