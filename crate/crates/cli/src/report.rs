use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Machine-readable record of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub subcommand: String,
    pub version: String,
    /// Fully resolved arguments of the invocation.
    pub config: Value,
    /// Wall-clock milliseconds per phase, in execution order.
    pub timings_ms: Vec<(String, f64)>,
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
    pub result: Value,
}

impl RunReport {
    pub fn new(subcommand: &str, config: Value) -> Self {
        RunReport {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            timings_ms: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            result: Value::Null,
        }
    }

    /// Runs `f` and records its wall-clock time under `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_ms
            .push((phase.to_string(), start.elapsed().as_secs_f64() * 1e3));
        out
    }

    pub fn wrote(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn warn(&mut self, message: String) {
        self.warnings.push(message);
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing report {}", path.display()))
    }
}
