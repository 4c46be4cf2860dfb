//! Parameter container and checkpoint format for the whole predictor.

use std::fs;
use std::path::Path;

use gst_autodiff::{ParamStore, CHECKPOINT_VERSION};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::error::{GstError, Result};
use crate::{decoder, encoder, graph, selector};

/// Architecture plus all learnable weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh weights. Selector weights exist only when sparsity is on.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        graph::init_params(&mut params, &mut rng, &config);
        if config.sparsity {
            selector::init_params(&mut params, &mut rng, &config);
        }
        encoder::init_params(&mut params, &mut rng, &config);
        decoder::init_params(&mut params, &mut rng, &config);
        Ok(Self { config, params })
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }
}

/// On-disk model: weights plus everything needed to rebuild the forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub partial_input: bool,
    pub params: ParamStore,
}

impl ModelCheckpoint {
    pub fn new(model: &Model, partial_input: bool) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            model: model.config.clone(),
            partial_input,
            params: model.params.clone(),
        }
    }

    pub fn variant(&self) -> Variant {
        Variant {
            partial_input: self.partial_input,
            sparsity: self.model.sparsity,
            neighbors: self.model.neighbors,
        }
    }

    pub fn into_model(self) -> Model {
        Model {
            config: self.model,
            params: self.params,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| GstError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GstError::io(path, e))?;
        let ck: Self = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(GstError::ConfigMismatch(format!(
                "{}: checkpoint format {} (expected {CHECKPOINT_VERSION})",
                path.display(),
                ck.format_version
            )));
        }
        ck.model.validate()?;
        let fresh = Model::init(ck.model.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            let stored = ck.params.get(name).map_err(|_| {
                GstError::ConfigMismatch(format!("{}: missing parameter {name}", path.display()))
            })?;
            if stored.shape() != t.shape() {
                return Err(GstError::ConfigMismatch(format!(
                    "{}: parameter {name} has shape {:?}, expected {:?}",
                    path.display(),
                    stored.shape(),
                    t.shape()
                )));
            }
        }
        if ck.params.len() != fresh.params.len() {
            return Err(GstError::ConfigMismatch(format!(
                "{}: {} parameters, expected {}",
                path.display(),
                ck.params.len(),
                fresh.params.len()
            )));
        }
        Ok(ck)
    }
}
