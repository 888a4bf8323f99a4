//! Run manifest and verdicts.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub status: Status,
    pub measured: String,
    pub tolerance: String,
}

impl Verdict {
    pub fn new(name: impl Into<String>, status: Status, measured: impl fmt::Display, tolerance: impl fmt::Display) -> Self {
        Self {
            name: name.into(),
            status,
            measured: measured.to_string(),
            tolerance: tolerance.to_string(),
        }
    }

    pub fn check(name: impl Into<String>, ok: bool, measured: impl fmt::Display, tolerance: impl fmt::Display) -> Self {
        Self::new(name, if ok { Status::Pass } else { Status::Fail }, measured, tolerance)
    }
}

/// Collects artifacts and verdicts; written last so its presence marks a
/// completed run.
pub struct Manifest {
    command: String,
    out_dir: PathBuf,
    seed: u64,
    started: Instant,
    artifacts: Vec<String>,
    verdicts: Vec<Verdict>,
    extra: Vec<(String, String)>,
}

pub const MANIFEST_NAME: &str = "manifest";

impl Manifest {
    pub fn new(command: &str, out_dir: &Path, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            out_dir: out_dir.to_path_buf(),
            seed,
            started: Instant::now(),
            artifacts: Vec::new(),
            verdicts: Vec::new(),
            extra: Vec::new(),
        }
    }

    /// Write `contents` to `name` inside the output directory and list it.
    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    pub fn note(&mut self, key: impl Into<String>, value: impl fmt::Display) {
        self.extra.push((key.into(), value.to_string()));
    }

    pub fn verdict(&mut self, v: Verdict) {
        self.verdicts.push(v);
    }

    pub fn verdicts(&self) -> &[Verdict] {
        &self.verdicts
    }

    pub fn finish(self, config: &std::collections::BTreeMap<String, String>) -> Result<Vec<Verdict>> {
        let mut lines = vec![
            format!("command = {}", self.command),
            format!("seed = {}", self.seed),
        ];
        for (k, v) in config {
            lines.push(format!("config.{k} = {v}"));
        }
        for (k, v) in &self.extra {
            lines.push(format!("{k} = {v}"));
        }
        for a in &self.artifacts {
            lines.push(format!("artifact = {a}"));
        }
        for v in &self.verdicts {
            lines.push(format!("verdict.{} = {}", v.name, v.status));
            lines.push(format!("verdict.{}.measured = {}", v.name, v.measured));
            lines.push(format!("verdict.{}.tolerance = {}", v.name, v.tolerance));
        }
        lines.push(format!("wall_clock_seconds = {:.3}", self.started.elapsed().as_secs_f64()));
        let path = self.out_dir.join(MANIFEST_NAME);
        std::fs::write(&path, lines.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(self.verdicts)
    }
}
