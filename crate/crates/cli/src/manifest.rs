//! Run manifests: the resolved settings of every command, written atomically
//! next to its outputs. Identical manifests (ignoring the wall-clock lines)
//! reproduce outputs bit-for-bit on the same platform.

use crate::CliError;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let now_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        let mut m = Manifest { lines: Vec::new() };
        m.set("command", command);
        m.set("engine_version", env!("CARGO_PKG_VERSION"));
        m.set("created_unix_ms", now_ms);
        m
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.lines.push((key.to_string(), value.to_string()));
        self
    }

    /// Writes `<key> = <value>` lines via a temp file + rename.
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut body = String::new();
        for (k, v) in &self.lines {
            body.push_str(k);
            body.push_str(" = ");
            body.push_str(v);
            body.push('\n');
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, body).map_err(|e| CliError {
            category: "io",
            code: 2,
            message: format!("{}: {e}", tmp.display()),
        })?;
        std::fs::rename(&tmp, path).map_err(|e| CliError {
            category: "io",
            code: 2,
            message: format!("{}: {e}", path.display()),
        })?;
        Ok(())
    }
}
