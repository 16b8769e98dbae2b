use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{commands, Cli, CmdResult, Command, Failure};

/// What a subcommand read and wrote, reported back for the manifest.
#[derive(Debug, Default)]
pub struct Record {
    pub seed: Option<u64>,
    pub configs: Vec<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Arguments after the program name, verbatim.
    pub args: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    pub version: String,
    pub seed: Option<u64>,
    pub config_paths: Vec<PathBuf>,
    pub inputs: Vec<PathBuf>,
    /// Output path to SHA-256 of its bytes.
    pub outputs: BTreeMap<PathBuf, String>,
    pub elapsed_secs: f64,
    #[serde(skip)]
    path: PathBuf,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl RunManifest {
    pub fn new(subcommand: &str, args: Vec<String>, record: Record, elapsed: Duration) -> Self {
        let outputs = record
            .outputs
            .iter()
            .map(|p| (p.clone(), sha256_file(p).unwrap_or_default()))
            .collect();
        Self {
            subcommand: subcommand.to_string(),
            args,
            cwd: std::env::current_dir().unwrap_or_default(),
            version: format!("kbq {}", env!("CARGO_PKG_VERSION")),
            seed: record.seed,
            config_paths: record.configs,
            inputs: record.inputs,
            outputs,
            elapsed_secs: elapsed.as_secs_f64(),
            path: record.manifest,
        }
    }

    pub fn write(&self) -> CmdResult {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&self.path, text + "\n")
            .with_context(|| format!("writing {}", self.path.display()))
            .map_err(Failure::data)
    }

    pub fn load(path: &Path) -> CmdResult<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::data)?;
        let mut m: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(Failure::data)?;
        m.path = path.to_path_buf();
        Ok(m)
    }
}

/// Re-runs the recorded command and fails unless every output hashes as
/// recorded.
pub fn replay(path: &Path) -> CmdResult {
    let m = RunManifest::load(path)?;
    let argv = std::iter::once("kbq".to_string()).chain(m.args.iter().cloned());
    let cli = Cli::try_parse_from(argv).map_err(Failure::usage)?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Failure::usage(anyhow::anyhow!(
            "a replay manifest cannot replay itself"
        )));
    }
    if std::env::current_dir().ok().as_deref() != Some(m.cwd.as_path()) {
        std::env::set_current_dir(&m.cwd)
            .with_context(|| format!("entering {}", m.cwd.display()))
            .map_err(Failure::data)?;
    }
    commands::execute(cli.command)?;
    let mut mismatched = Vec::new();
    for (out, want) in &m.outputs {
        let got = sha256_file(out).unwrap_or_default();
        if &got != want {
            mismatched.push(out.display().to_string());
        }
    }
    if !mismatched.is_empty() {
        return Err(Failure::state(anyhow::anyhow!(
            "replay produced different bytes for {}",
            mismatched.join(", ")
        )));
    }
    println!("replayed {}: {} outputs identical", m.subcommand, m.outputs.len());
    Ok(())
}
