use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Dense, Head, MlpParams};
use crate::{Error, Result};

pub const MLP_FORMAT: &str = "dtr-mlp/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBlock {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Versioned text container for one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub head: Head,
    pub layer_dims: Vec<usize>,
    pub layers: Vec<LayerBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    pub fn new(params: &MlpParams, head: Head, optimizer: Option<AdamState>) -> Self {
        Checkpoint {
            format: MLP_FORMAT.to_string(),
            head,
            layer_dims: params.layer_dims(),
            layers: params
                .layers
                .iter()
                .map(|l| LayerBlock { weights: l.weights.clone(), biases: l.biases.clone() })
                .collect(),
            optimizer,
        }
    }

    pub fn params(&self) -> Result<MlpParams> {
        if self.format != MLP_FORMAT {
            return Err(Error::SchemaVersion { found: self.format.clone(), expected: MLP_FORMAT });
        }
        let mut params = MlpParams::zeros(&self.layer_dims)?;
        if self.layers.len() != params.layers.len() {
            return Err(Error::DimensionMismatch {
                context: "checkpoint layers",
                expected: params.layers.len(),
                found: self.layers.len(),
            });
        }
        for (dst, src) in params.layers.iter_mut().zip(&self.layers) {
            copy_block(dst, src)?;
        }
        if !params.is_finite() {
            return Err(Error::invalid("layers", "non-finite parameter"));
        }
        if let Some(opt) = &self.optimizer {
            if !opt.m.same_shape(&params) || !opt.v.same_shape(&params) {
                return Err(Error::invalid("optimizer", "moment shapes differ from layer_dims"));
            }
        }
        Ok(params)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.params()?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}

fn copy_block(dst: &mut Dense, src: &LayerBlock) -> Result<()> {
    if src.weights.len() != dst.weights.len() {
        return Err(Error::DimensionMismatch {
            context: "checkpoint weights",
            expected: dst.weights.len(),
            found: src.weights.len(),
        });
    }
    if src.biases.len() != dst.biases.len() {
        return Err(Error::DimensionMismatch {
            context: "checkpoint biases",
            expected: dst.biases.len(),
            found: src.biases.len(),
        });
    }
    dst.weights.copy_from_slice(&src.weights);
    dst.biases.copy_from_slice(&src.biases);
    Ok(())
}
