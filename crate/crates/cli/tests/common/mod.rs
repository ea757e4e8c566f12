#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

pub fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
    pub dir: PathBuf,
}

impl Run {
    pub fn json(&self, name: &str) -> Value {
        let text = fs::read_to_string(self.dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}\n{}", self.stderr));
        let v: Value = serde_json::from_str(&text).unwrap();
        v["report"].clone()
    }

    /// Rows of a CSV artifact keyed by header, metadata line skipped.
    pub fn csv(&self, name: &str) -> Vec<Vec<(String, String)>> {
        let text = fs::read_to_string(self.dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}\n{}", self.stderr));
        let mut lines = text.lines();
        assert!(lines.next().is_some_and(|l| l.starts_with("# config_hash=")));
        let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
        lines
            .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
            .collect()
    }

    pub fn column(&self, name: &str, col: &str) -> Vec<f64> {
        self.csv(name)
            .iter()
            .map(|row| row.iter().find(|(k, _)| k == col).unwrap().1.parse().unwrap())
            .collect()
    }
}

pub fn bsvie(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Run {
    bsvie_env(cmd, config, out, extra, &[])
}

pub fn bsvie_env(cmd: &str, config: &Path, out: &Path, extra: &[&str], env: &[(&str, &Path)]) -> Run {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bsvie"));
    c.arg(cmd).arg(config).args(extra).env_remove("BSVIE_OUT_DIR");
    if !out.as_os_str().is_empty() {
        c.arg("--out").arg(out);
    }
    for (k, v) in env {
        c.env(k, v);
    }
    let o = c.output().expect("binary runs");
    Run {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&o.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        dir: out.to_path_buf(),
    }
}

/// Writes a copy of a scenario with textual replacements applied.
pub fn variant(dir: &Path, base: &str, tag: &str, edits: &[(&str, &str)]) -> PathBuf {
    let mut text = fs::read_to_string(scenario(base)).unwrap();
    for (from, to) in edits {
        assert!(text.contains(from), "{base} lacks `{from}`");
        text = text.replacen(from, to, 1);
    }
    let path = dir.join(format!("{tag}-{base}"));
    fs::write(&path, text).unwrap();
    path
}
