//! JSON checkpoints: every parameter value plus the config that produced it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::ParamStore;
use crate::Scalar;

pub const FORMAT: &str = "tumorseg-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub fingerprint: String,
    pub config: RunConfig,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn from_store<T: Scalar>(config: &RunConfig, store: &ParamStore<T>) -> Self {
        let params = store
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|v| v.wide()).collect(),
            })
            .collect();
        Self { format: FORMAT.into(), fingerprint: config.fingerprint(), config: config.clone(), params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_slice(&bytes)?;
        if ck.format != FORMAT {
            return Err(Error::Input(format!("{}: unknown checkpoint format `{}`", path.display(), ck.format)));
        }
        Ok(ck)
    }

    /// Copies the stored values into `store`, which must have the same parameter set.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        store.load_values(self.params.iter().map(|p| (p.name.as_str(), p.shape.as_slice(), p.values.as_slice())))
    }

    /// Rebuilds the network described by `config` (the stored one by default) and loads the values.
    pub fn restore<T: Scalar>(&self, config: Option<&RunConfig>) -> Result<(Network, ParamStore<T>)> {
        let cfg = config.unwrap_or(&self.config);
        let (net, mut store) = Network::new::<T>(cfg.model.clone(), cfg.seed)?;
        self.load_into(&mut store)?;
        Ok((net, store))
    }
}
