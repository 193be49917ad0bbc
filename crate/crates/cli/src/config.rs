//! Run configuration: defaults, TOML file, `--set` overrides, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use rmadapter_core::fewshot::AblationMatrix;
use rmadapter_core::{EncoderConfig, PretrainConfig, TrainConfig, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the synthetic world.
    pub world_seed: u64,
    /// Artifact directory.
    pub out: PathBuf,
    /// Backbone checkpoint read by adapt, eval, ablate and gradcheck.
    pub backbone: Option<PathBuf>,
    /// Adapter checkpoint read by eval.
    pub adapters: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub world: WorldConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world_seed: 0,
            out: PathBuf::from("runs/latest"),
            backbone: None,
            adapters: None,
            encoder: EncoderConfig::default(),
            world: WorldConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    /// Variant, sharing-mode and depth slices around the default cell.
    #[default]
    Standard,
    /// Every variant × mode × depth.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub matrix: MatrixKind,
    pub seeds: Vec<u64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            matrix: MatrixKind::Standard,
            seeds: (0..5).collect(),
        }
    }
}

impl AblateConfig {
    pub fn matrix(&self) -> AblationMatrix {
        match self.matrix {
            MatrixKind::Standard => AblationMatrix::standard(self.seeds.clone()),
            MatrixKind::Full => AblationMatrix::full_product(self.seeds.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f64,
    pub max_elements: usize,
    /// Samples in the checked batch, drawn from distinct base classes.
    pub batch: usize,
    pub tolerance: f64,
    /// Std of the noise added to fresh adapters before checking. At exact
    /// identity the L1 consistency term sits on its kink.
    pub perturb: f64,
    /// Seeds the noise and the element subsample.
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_elements: 10_000,
            batch: 2,
            tolerance: 1e-4,
            perturb: 0.1,
            seed: 0,
        }
    }
}

/// Command-line layers applied on top of the config file, last wins.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| {
                    CliError::Config(format!("{}: {}", path.display(), one_line(&e)))
                })?
            }
            None => toml::Table::new(),
        };
        for s in &overrides.sets {
            apply_set(&mut table, s)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(one_line(&e)))?;
        if let Some(seed) = overrides.seed {
            cfg.pretrain.seed = seed;
            cfg.train.seed = seed;
            cfg.gradcheck.seed = seed;
        }
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn one_line(e: &impl std::fmt::Display) -> String {
    e.to_string()
        .lines()
        .map(str::trim)
        .filter(|l| {
            !l.is_empty() && !l.starts_with('|') && !l.chars().all(|c| c == '^' || c == ' ')
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Applies one dotted `key=value`. Values parse as TOML, falling back to a bare string.
pub fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {assignment}: expected key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "--set {assignment}: empty key segment"
        )));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("--set {key}: {p} is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}
