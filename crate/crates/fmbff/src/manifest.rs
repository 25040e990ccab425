//! `run.manifest`: one per artifact-producing command, written next to its
//! outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use sha1::{Digest, Sha1};

use crate::error::{IoContext, Result};

pub const FILE: &str = "run.manifest";

/// Content hash as computed by `git hash-object`.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(40), |mut s, b| {
        let _ = write!(s, "{:02x}", b);
        s
    })
}

/// Current time, or `SOURCE_DATE_EPOCH` when set for reproducible output.
pub fn now() -> SystemTime {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map_or_else(SystemTime::now, |secs| UNIX_EPOCH + Duration::from_secs(secs))
}

#[derive(Clone, Debug)]
pub struct RunManifest {
    /// Subcommand and its arguments.
    pub command: Vec<String>,
    pub seed: Option<u64>,
    /// Rendered run configuration.
    pub config: Option<String>,
    /// `(file name, git blob hash)` of the primary checkpoint.
    pub checkpoint: Option<(String, String)>,
    pub started: SystemTime,
    pub finished: SystemTime,
    /// `(path relative to the output directory, git blob hash)`.
    pub outputs: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(command: Vec<String>) -> Self {
        let t = now();
        RunManifest {
            command,
            seed: None,
            config: None,
            checkpoint: None,
            started: t,
            finished: t,
            outputs: Vec::new(),
        }
    }

    pub fn output(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.outputs.push((name.into(), git_blob_sha1(bytes)));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command.join(" "));
        if let Some(seed) = self.seed {
            let _ = writeln!(out, "seed = {}", seed);
        }
        let _ = writeln!(out, "started = {}", humantime::format_rfc3339_seconds(self.started));
        let _ = writeln!(out, "finished = {}", humantime::format_rfc3339_seconds(self.finished));
        if let Some((name, hash)) = &self.checkpoint {
            let _ = writeln!(out, "checkpoint = {} {}", name, hash);
        }
        for (name, hash) in &self.outputs {
            let _ = writeln!(out, "output = {} {}", name, hash);
        }
        if let Some(cfg) = &self.config {
            for line in cfg.lines() {
                let _ = writeln!(out, "config.{}", line);
            }
        }
        out
    }

    /// Stamps the finish time and writes `<dir>/run.manifest`.
    pub fn write(mut self, dir: &Path) -> Result<()> {
        self.finished = now();
        let path = dir.join(FILE);
        fs::write(&path, self.render()).at(&path)
    }
}
