//! Deterministic experiment manifests: config echo, seed plan, input and
//! artifact digests. Re-running a command on unchanged inputs must
//! reproduce the manifest byte for byte, so no timestamps appear here.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use viewmetric::config::ExperimentConfig;
use viewmetric::Result;

pub struct Manifest {
    command: String,
    config_echo: String,
    seed_plan: String,
    inputs: Vec<(String, PathBuf)>,
    artifacts: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Manifest {
        Manifest {
            command: command.to_string(),
            config_echo: cfg.echo(),
            seed_plan: cfg.seed_plan().describe(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) {
        self.inputs.push((label.to_string(), path.to_path_buf()));
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "#viewmetric-manifest v1");
        let _ = writeln!(text, "command = {}", self.command);
        let _ = writeln!(text, "tool_version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(text, "seed_plan = {}", self.seed_plan);
        let _ = writeln!(text, "config_begin");
        let _ = writeln!(text, "{}", self.config_echo);
        let _ = writeln!(text, "config_end");
        for (label, path) in &self.inputs {
            let _ = writeln!(text, "input {} {} sha256={}", label, path.display(), digest(path)?);
        }
        let mut artifacts = self.artifacts.clone();
        artifacts.sort();
        for path in &artifacts {
            let shown = path.strip_prefix(out_dir).unwrap_or(path);
            let _ = writeln!(text, "artifact {} sha256={}", shown.display(), digest(path)?);
        }
        std::fs::write(out_dir.join("manifest.txt"), text)?;
        Ok(())
    }
}

fn digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let mut hex = String::with_capacity(64);
    for byte in hasher.finalize() {
        let _ = write!(hex, "{byte:02x}");
    }
    Ok(hex)
}
