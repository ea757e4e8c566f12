mod common;

use std::fs;
use std::path::Path;

use common::{bsvie, bsvie_env, scenario, variant};

#[test]
fn schema_errors_are_all_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(
        &cfg,
        r#"schema_version = 1
[grid]
T = "one"
N = 8
colour = "blue"
[diffusion]
x0 = 0.0
[mc]
n_paths = 100
[driver]
g_expr = "0"
lipschitz_C = 0.0
[extras]
"#,
    )
    .unwrap();
    let r = bsvie("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    for needle in ["grid.T: expected a number", "grid.colour: unknown key", "mc.seed: missing required key", "psi: missing required section", "extras"] {
        assert!(r.stderr.contains(needle), "missing `{needle}` in:\n{}", r.stderr);
    }
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn missing_terminal_section_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("risk_zero.toml")).unwrap();
    let cfg = tmp.path().join("no_psi.toml");
    fs::write(&cfg, text.replace("[psi]\nexpr = \"x\"\n", "")).unwrap();
    let r = bsvie("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("psi"), "{}", r.stderr);
}

#[test]
fn semantic_errors_are_collected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(
        tmp.path(),
        "risk_zero.toml",
        "bad",
        &[("N = 8", "N = 0"), ("g_expr = \"0\"", "g_expr = \"max(z)\""), ("expr = \"x\"", "expr = \"log(\"")],
    );
    let r = bsvie("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(r.code, 1);
    for needle in ["grid.N", "driver", "psi.expr"] {
        assert!(r.stderr.contains(needle), "missing `{needle}` in:\n{}", r.stderr);
    }
}

#[test]
fn kernel_table_matches_exponential() {
    let tmp = tempfile::tempdir().unwrap();
    let r = bsvie("kernel", &scenario("kernel_unit.toml"), tmp.path(), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rows = r.csv("kernel.csv");
    let corner = rows
        .iter()
        .find(|row| row[0].1.parse::<f64>().unwrap() == 0.0 && row[1].1.parse::<f64>().unwrap() == 1.0)
        .expect("phi(0, 1) is tabulated");
    let phi: f64 = corner[2].1.parse().unwrap();
    assert!((phi - std::f64::consts::E).abs() <= 1e-3, "{phi}");
}

#[test]
fn zero_driver_axioms_pass() {
    let tmp = tempfile::tempdir().unwrap();
    let r = bsvie("axioms", &scenario("risk_zero.toml"), tmp.path(), &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let rep = r.json("axioms.json");
    let axioms = rep["axioms"].as_array().unwrap();
    assert_eq!(axioms.len(), 4);
    assert!(axioms.iter().all(|a| a["verdict"] == "pass"), "{axioms:?}");
    assert_eq!(rep["normalization"]["max_abs"].as_f64(), Some(0.0));
}

#[test]
fn risk_rejects_an_explicit_sign() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "risk_zero.toml", "signed", &[("expr = \"x\"", "expr = \"x\"\nsign = 1")]);
    let r = bsvie("risk", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(r.code, 1);
    assert!(r.stderr.contains("psi.sign"), "{}", r.stderr);
}

fn header(dir: &Path, file: &str) -> String {
    fs::read_to_string(dir.join(file)).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn overrides_reach_outputs_and_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scenario("risk_zero.toml");
    let plain = bsvie("risk", &cfg, &tmp.path().join("plain"), &[]);
    let seeded = bsvie("risk", &cfg, &tmp.path().join("seeded"), &["--seed", "99", "--paths", "500"]);
    assert_eq!(plain.code, 0, "{}", plain.stderr);
    assert_eq!(seeded.code, 0, "{}", seeded.stderr);
    assert!(header(&plain.dir, "rho.csv").ends_with("seed=5"));
    assert!(header(&seeded.dir, "rho.csv").ends_with("seed=99"));
    assert_ne!(plain.json("risk.json"), seeded.json("risk.json"));
    let hash = |d: &Path| {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    assert_ne!(hash(&plain.dir), hash(&seeded.dir));

    // an explicit override equal to the file's value leaves the hash alone
    let same = bsvie("risk", &cfg, &tmp.path().join("same"), &["--seed", "5"]);
    assert_eq!(hash(&plain.dir), hash(&same.dir));
}

#[test]
fn output_directory_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let target = tmp.path().join("from-env");
    let r = bsvie_env("kernel", &scenario("kernel_unit.toml"), Path::new(""), &[], &[("BSVIE_OUT_DIR", &target)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(target.join("kernel.csv").exists());
    assert!(target.join("manifest.json").exists());
}

#[test]
fn failed_ordering_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    // swapping the roles makes the first problem the smaller one
    let cfg = variant(
        tmp.path(),
        "comparison.toml",
        "swapped",
        &[("g_expr = \"0.5*abs(z)\"", "g_expr = \"0\""), ("[compare.second]\ng_expr = \"0\"", "[compare.second]\ng_expr = \"0.5*abs(z)\"")],
    );
    let r = bsvie("compare", &cfg, tmp.path().join("out").as_path(), &["--paths", "4000"]);
    assert_eq!(r.code, 2, "{}\n{}", r.stdout, r.stderr);
    let rep = r.json("compare.json");
    assert_eq!(rep["ordering"]["passed"], false);
    assert!(!rep["ordering"]["violations"].as_array().unwrap().is_empty());
}

#[test]
fn understated_lipschitz_constant_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "risk_zero.toml", "lip", &[("g_expr = \"0\"\nlipschitz_C = 0.0", "g_expr = \"2*z\"\nlipschitz_C = 1.0")]);
    let r = bsvie("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(r.stderr.to_lowercase().contains("lipschitz"), "{}", r.stderr);
}

#[test]
fn artifacts_carry_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = variant(tmp.path(), "solve_nonlinear.toml", "dump", &[("paths_csv = false", "paths_csv = true")]);
    let r = bsvie("solve", &cfg, &tmp.path().join("out"), &["--paths", "300"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.dir.join("manifest.json")).unwrap()).unwrap();
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    let listed: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f.as_str().unwrap()).collect();
    for f in ["surface.csv", "nodes.csv", "convergence.json", "paths.csv"] {
        assert!(listed.contains(&f), "{listed:?}");
    }
    for f in listed {
        if f.ends_with(".csv") {
            assert_eq!(header(&r.dir, f), format!("# config_hash={hash}, seed=8"));
        } else {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.dir.join(f)).unwrap()).unwrap();
            assert_eq!(v["config_hash"], hash);
            assert_eq!(v["seed"], 8);
        }
    }
}
