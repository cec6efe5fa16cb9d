//! Run configuration: built-in profile defaults, overlaid by an optional TOML
//! file, overlaid by command-line flags. The result is written to every run
//! directory as `resolved_config.toml`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use embryo_core::augment::AugmentationConfig;
use embryo_core::cohort::SplitMode;
use embryo_core::experiments::{DEFAULT_ALPHA, DEFAULT_THRESHOLD_KID};
use embryo_core::stats::Tail;
use embryo_core::synth::SynthConfig;
use embryo_net::{NetworkConfig, Profile, RunConfig, TrainConfig};

use crate::error::{io_err, CliError, ErrorClass, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const DEFAULT_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub train_fraction: f64,
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.85,
            split_mode: SplitMode::PerEmbryo,
            seed: DEFAULT_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub threshold_kid: usize,
    pub alpha: f64,
    pub tail: Tail,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            threshold_kid: DEFAULT_THRESHOLD_KID,
            alpha: DEFAULT_ALPHA,
            tail: Tail::One,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub command: String,
    pub seed: u64,
    pub profile: Profile,
    /// Input paths by role, as given on the command line or inherited from
    /// an upstream run directory.
    pub inputs: BTreeMap<String, String>,
    pub synth: SynthConfig,
    pub ingest: IngestConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationConfig,
    pub reports: ReportConfig,
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
    pub threshold_kid: Option<usize>,
    pub alpha: Option<f64>,
    pub tail: Option<Tail>,
}

impl ResolvedConfig {
    pub fn defaults(command: &str, profile: Profile) -> Self {
        Self {
            command: command.to_owned(),
            seed: DEFAULT_SEED,
            profile,
            inputs: BTreeMap::new(),
            synth: SynthConfig::default(),
            ingest: IngestConfig::default(),
            network: NetworkConfig::for_profile(profile),
            train: TrainConfig::for_profile(profile),
            augmentation: AugmentationConfig::default(),
            reports: ReportConfig::default(),
        }
    }

    pub fn resolve(command: &str, o: &Overrides) -> Result<Self> {
        let user = match &o.config {
            Some(path) => read_toml(path)?,
            None => toml::Table::new(),
        };
        let profile = match (o.profile, user.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::new(ErrorClass::Usage, format!("config: bad profile {v}")))?,
            (None, None) => Profile::Paper,
        };
        let mut merged = toml::Table::try_from(Self::defaults(command, profile))
            .map_err(|e| CliError::new(ErrorClass::Usage, e.to_string()))?;
        overlay(&mut merged, user);
        let mut cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| CliError::new(ErrorClass::Usage, format!("config: {}", e.message())))?;
        cfg.command = command.to_owned();
        cfg.profile = profile;
        if let Some(seed) = o.seed {
            cfg.seed = seed;
        }
        cfg.set_seed(cfg.seed);
        if let Some(t) = o.threshold_kid {
            cfg.reports.threshold_kid = t;
        }
        if let Some(a) = o.alpha {
            cfg.reports.alpha = a;
        }
        if let Some(t) = o.tail {
            cfg.reports.tail = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every seeded component draws from the one run seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.ingest.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.network.profile != self.profile || self.train.profile != self.profile {
            return Err(CliError::new(
                ErrorClass::IncompatibleProfile,
                format!(
                    "profile {} conflicts with network profile {} / training profile {}",
                    self.profile, self.network.profile, self.train.profile
                ),
            ));
        }
        self.run().validate()?;
        self.synth.validate()?;
        if !(self.ingest.train_fraction > 0.0 && self.ingest.train_fraction < 1.0) {
            return Err(CliError::new(ErrorClass::Usage, "ingest.train_fraction must lie in (0, 1)"));
        }
        if !(self.reports.alpha > 0.0 && self.reports.alpha < 1.0) {
            return Err(CliError::new(ErrorClass::Usage, "alpha must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn run(&self) -> RunConfig {
        RunConfig {
            network: self.network.clone(),
            train: self.train.clone(),
            augmentation: self.augmentation.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::new(ErrorClass::Usage, format!("cannot serialize config: {e}")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(io_err(&path))
    }

    /// Reads the snapshot of an upstream run directory; a directory without
    /// one is refused.
    pub fn read_from_run(dir: &Path) -> Result<Self> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        if !path.is_file() {
            return Err(CliError::new(
                ErrorClass::Provenance,
                format!("{} has no {RESOLVED_CONFIG_FILE}; it was not produced by a recorded run", dir.display()),
            ));
        }
        let table = read_toml(&path)?;
        table.try_into().map_err(|e: toml::de::Error| {
            CliError::new(ErrorClass::Provenance, format!("{}: {}", path.display(), e.message()))
        })
    }
}

fn read_toml(path: &Path) -> Result<toml::Table> {
    if !path.is_file() {
        return Err(CliError::new(ErrorClass::MissingConfig, format!("config file {} not found", path.display())));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::new(ErrorClass::Usage, format!("{}: {}", path.display(), e.message())))
}

/// Recursively replaces entries of `base` by those of `top`.
fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
