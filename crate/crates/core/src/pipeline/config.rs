use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AdversaryConfig;
use crate::error::{Error, Result};
use crate::reconstruct::FrameLengthConfig;
use crate::seqgan::GanConfig;
use crate::signatures::SignatureConfig;
use crate::synthesize::Addressing;
use crate::vqstae::VqstaeConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Everything a pipeline run depends on, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    /// Holds one directory of captures per device.
    pub dataset_root: PathBuf,
    /// Devices to process; empty means every directory under the root.
    pub devices: Vec<String>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Devices processed at once.
    pub workers: usize,
    /// Window length L.
    pub window_len: usize,
    /// Training windows per device.
    pub windows: usize,
    /// Synthetic windows per device.
    pub synthetic_windows: usize,
    pub duration_k: usize,
    pub signatures: SignatureConfig,
    pub vqstae: VqstaeConfig,
    pub gan: GanConfig,
    pub reconstruct: FrameLengthConfig,
    pub adversary: AdversaryConfig,
    pub addressing: Addressing,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            dataset_root: PathBuf::from("data"),
            devices: Vec::new(),
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            workers: 1,
            window_len: 20,
            windows: 256,
            synthetic_windows: 256,
            duration_k: 8,
            signatures: SignatureConfig::default(),
            vqstae: VqstaeConfig::default(),
            gan: GanConfig::default(),
            reconstruct: FrameLengthConfig::default(),
            adversary: AdversaryConfig::default(),
            addressing: Addressing::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Check every field and every referenced path; nothing is written.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !self.dataset_root.is_dir() {
            return Err(Error::Config(format!(
                "dataset root {} is not a directory",
                self.dataset_root.display()
            )));
        }
        for d in &self.devices {
            if !self.dataset_root.join(d).is_dir() {
                return Err(Error::Config(format!("device directory {} not found under the dataset root", d)));
            }
        }
        if self.workers == 0 || self.windows == 0 || self.synthetic_windows == 0 {
            return Err(Error::Config("workers and window counts must be >= 1".into()));
        }
        if self.window_len < 2 {
            return Err(Error::Config(format!("window length must be >= 2, got {}", self.window_len)));
        }
        if self.duration_k == 0 {
            return Err(Error::Config("duration partition count must be >= 1".into()));
        }
        if self.adversary.folds < 2 {
            return Err(Error::Config("adversary needs at least 2 folds".into()));
        }
        self.signatures.validate()?;
        self.vqstae.validate()?;
        self.gan.validate()
    }

    /// Configured devices, or every subdirectory of the dataset root in name order.
    pub fn device_ids(&self) -> Result<Vec<String>> {
        if !self.devices.is_empty() {
            return Ok(self.devices.clone());
        }
        let root = &self.dataset_root;
        let entries = std::fs::read_dir(root).map_err(|e| Error::io(format!("listing {}", root.display()), e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry?;
            if entry.path().is_dir() {
                if let Some(name) = entry.file_name().to_str() {
                    ids.push(name.to_string());
                }
            }
        }
        ids.sort();
        if ids.is_empty() {
            return Err(Error::Config(format!("no device directories under {}", root.display())));
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);
        let partial = PipelineConfig::from_toml("seed = 9\n[vqstae]\nk = 16\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.vqstae.k, 16);
        assert_eq!(partial.vqstae.d, 64);
        assert!(PipelineConfig::from_toml("sed = 9\n").is_err());
    }

    #[test]
    fn missing_dataset_root_is_rejected() {
        let cfg = PipelineConfig {
            dataset_root: PathBuf::from("/definitely/not/here"),
            ..PipelineConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
