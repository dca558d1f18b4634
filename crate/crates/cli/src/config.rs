//! Run configuration file (TOML).
//!
//! ```toml
//! seed = 0
//! out = "runs/train"
//!
//! [data]
//! train = "data/train"      # dataset directory with rgb_path entries
//! val = "data/val"          # optional
//! sensor = [34, 34]         # optional, width and height
//!
//! [model]
//! preset = "tiny"           # "tiny" or "standard"
//!
//! [train]                   # any TrainConfig field
//! epochs = 20
//! learning_rate = 1e-3
//! weights = { lambda_semantic = 1.0, gamma_fidelity = 1.0 }
//!
//! [backend]                 # any BackendConfig field
//! kind = "mock"
//!
//! [eval]
//! kinds = ["tencode", "evrep"]
//! checkpoint = "runs/train/best.ckpt"
//! out = "runs/eval"
//! datasets = [{ name = "nmnist", path = "data/test", classes = "nmnist" }]
//! external = [{ name = "e2vid", dir = "frames/e2vid" }]
//! ```
//!
//! Relative paths are taken from the working directory (`--workdir`).

use std::path::{Path, PathBuf};

use evrep::generator::GeneratorConfig;
use evrep::llm_client::BackendConfig;
use evrep::trainer::TrainConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub backend: BackendConfig,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub sensor: Option<[u32; 2]>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Option<String>,
    /// Full architecture; takes precedence over `preset`.
    pub config: Option<GeneratorConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub kinds: Vec<String>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub datasets: Vec<DatasetEntry>,
    pub external: Vec<ExternalEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub path: PathBuf,
    /// Built-in list name (`nmnist`, `ncaltech101`) or a file with one class per line.
    pub classes: Option<String>,
    pub sensor: Option<[u32; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalEntry {
    pub name: String,
    pub dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig, String> {
        if let Some(c) = &self.model.config {
            return Ok(c.clone());
        }
        preset(self.model.preset.as_deref().unwrap_or("standard"))
    }
}

pub fn preset(name: &str) -> Result<GeneratorConfig, String> {
    match name {
        "tiny" => Ok(GeneratorConfig::tiny()),
        "standard" => Ok(GeneratorConfig::default()),
        other => Err(format!("unknown model preset {other:?} (expected tiny or standard)")),
    }
}

/// `NAME=VALUE` pairs given on the command line.
pub fn split_pair(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected NAME=VALUE, got {s:?}")),
    }
}

pub fn parse_size(s: &str) -> Result<[u32; 2], String> {
    let bad = || format!("expected WIDTHxHEIGHT, got {s:?}");
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let (w, h): (u32, u32) = (w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?);
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok([w, h])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_example_parses() {
        let text = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let c = RunConfig::parse(&text).unwrap();
        assert_eq!(c.train.epochs, 20);
        assert_eq!(c.eval.datasets[0].classes.as_deref(), Some("nmnist"));
        assert_eq!(c.generator_config().unwrap(), GeneratorConfig::tiny());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("sed = 1").is_err());
        assert!(RunConfig::parse("[train]\nepoch = 3").is_err());
        assert!(RunConfig::parse("[backend]\nkind = \"mock\"\nmodle = \"x\"").is_err());
    }

    #[test]
    fn pairs_and_sizes() {
        assert_eq!(split_pair("a=b/c").unwrap(), ("a".into(), "b/c".into()));
        assert!(split_pair("a").is_err());
        assert_eq!(parse_size("34x34").unwrap(), [34, 34]);
        assert!(parse_size("0x3").is_err());
    }
}
