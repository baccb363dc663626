//! Checkpoint files: a JSON key -> tensor map with a header recording shapes,
//! seed, and stage. Values round-trip bit-exactly (shortest-representation
//! float encoding on write, exact parse on read).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{ComponentKind, ViewNetworkSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Training stage a checkpoint was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Train,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub seed: u64,
    pub view_dims: Vec<usize>,
    pub num_classes: usize,
    pub shapes: BTreeMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Flat `{component}.{view}.{layer}.{weight|bias}` -> tensor map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub frozen: BTreeMap<String, bool>,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn from_networks<R: Scalar>(set: &ViewNetworkSet<R>, stage: Stage, seed: u64) -> Self {
        let mut tensors = BTreeMap::new();
        let mut shapes = BTreeMap::new();
        for key in set.param_keys() {
            let (shape, values) = set.param(key).to_f64();
            shapes.insert(key.name(), shape.clone());
            tensors.insert(key.name(), TensorRecord { shape, values });
        }
        let mut frozen = BTreeMap::new();
        for (v, view) in set.views.iter().enumerate() {
            for kind in ComponentKind::ALL {
                frozen.insert(format!("{}.{v}", kind.name()), view.component(kind).frozen);
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                stage,
                seed,
                view_dims: set.view_dims.clone(),
                num_classes: set.num_classes,
                shapes,
            },
            frozen,
            tensors,
        }
    }

    pub fn to_networks<R: Scalar>(&self) -> Result<ViewNetworkSet<R>> {
        let mut set = ViewNetworkSet::new(&self.header.view_dims, self.header.num_classes);
        for key in set.param_keys() {
            let name = key.name();
            let record = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Serde(format!("checkpoint missing tensor {name}")))?;
            let expected = set.param(key).shape().to_vec();
            if record.shape != expected {
                return Err(Error::Serde(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    record.shape, expected
                )));
            }
            *set.param_mut(key) = Tensor::from_f64(record.shape.clone(), &record.values)?;
        }
        for (v, view) in set.views.iter_mut().enumerate() {
            for kind in ComponentKind::ALL {
                if let Some(&f) = self.frozen.get(&format!("{}.{v}", kind.name())) {
                    view.component_mut(kind).frozen = f;
                }
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Serde(e.to_string()))
    }
}
