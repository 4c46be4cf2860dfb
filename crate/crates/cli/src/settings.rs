//! Resolved run settings: built-in defaults, then an optional `--config`
//! TOML file, then command-line flags. Every command writes the result as
//! `run.toml` next to its outputs; passing that file back through
//! `--config` repeats the run.

use std::path::{Path, PathBuf};

use gst_core::{SamplingMode, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

/// Name of the resolved-settings file written into every output directory.
pub const RUN_FILE: &str = "run.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Command that produced this file; informational.
    pub command: String,
    /// Scene name from the data manifest, `all`, or `synthetic`.
    pub scene: String,
    pub data_manifest: Option<PathBuf>,
    /// Window cache from `prepare`; replaces `scene` lookups when set.
    pub windows: Option<PathBuf>,
    /// Frames between consecutive window starts.
    pub stride: usize,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    /// Variant requested from the checkpoint; taken from it when absent.
    pub variant: Option<Variant>,
    pub rollouts: usize,
    /// Base seed of prediction rollouts.
    pub seed: u64,
    pub mode: SamplingMode,
    pub tau: f64,
    /// Test-split window index for `predict`.
    pub window: usize,
    pub scenarios: Vec<String>,
    pub train: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            command: String::new(),
            scene: "all".into(),
            data_manifest: None,
            windows: None,
            stride: 1,
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            variant: None,
            rollouts: 20,
            seed: 0,
            mode: SamplingMode::Soft,
            tau: 0.03,
            window: 0,
            scenarios: vec!["all".into()],
            train: TrainConfig::default(),
        }
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
        toml::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }

    /// Writes `run.toml` into `dir`.
    pub fn save_into(&self, dir: &Path) -> Result<(), Failure> {
        let path = dir.join(RUN_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Failure::io(&path, e))
    }
}

/// Variant switches as given on the command line.
#[derive(Clone, Copy, Debug, Default)]
pub struct VariantFlags {
    pub config_id: Option<u8>,
    pub partial: Option<bool>,
    pub sparsity: Option<bool>,
    pub neighbors: Option<usize>,
}

impl VariantFlags {
    /// Applies the flags on top of `base`.
    pub fn apply(&self, base: Variant) -> Result<Variant, Failure> {
        let mut v = match self.config_id {
            Some(id) => Variant::from_id(id)?,
            None => base,
        };
        if let Some(p) = self.partial {
            v.partial_input = p;
        }
        if let Some(s) = self.sparsity {
            v.sparsity = s;
        }
        if let Some(n) = self.neighbors {
            v.neighbors = n;
        }
        Ok(v)
    }
}

pub fn train_variant(cfg: &TrainConfig) -> Variant {
    Variant {
        partial_input: cfg.partial_input,
        sparsity: cfg.sparsity,
        neighbors: cfg.neighbors,
    }
}

pub fn set_train_variant(cfg: &mut TrainConfig, v: Variant) {
    cfg.partial_input = v.partial_input;
    cfg.sparsity = v.sparsity;
    cfg.neighbors = v.neighbors;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_materializes_defaults() {
        let mut s = Settings::default();
        s.variant = Some(Variant::from_id(3).unwrap());
        s.checkpoint = Some("ck.json".into());
        let text = s.to_toml();
        assert!(text.contains("rollouts = 20"));
        assert!(text.contains("[train]"));
        let back: Settings = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn flags_override_base_variant() {
        let base = Variant::from_id(8).unwrap();
        let f = VariantFlags {
            config_id: None,
            partial: Some(false),
            sparsity: None,
            neighbors: Some(4),
        };
        assert_eq!(f.apply(base).unwrap(), Variant::from_id(3).unwrap());
        let id = VariantFlags {
            config_id: Some(1),
            ..VariantFlags::default()
        };
        assert_eq!(id.apply(base).unwrap(), Variant::from_id(1).unwrap());
    }
}
