//! Checkpoint directories: `meta.json` plus `params.safetensors`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ParamStore, Tensor};
use crate::train::TrainConfig;

pub const CHECKPOINT_VERSION: &str = "1";
pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.safetensors";

/// Enough to continue the shuffling stream: epochs reseed from `seed` and
/// the epoch number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: String,
    /// `best` or `last`.
    pub tag: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub val_loss: Option<f64>,
    pub rng_state: RngState,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(model: &Model, train: &TrainConfig, tag: &str, epoch: usize, step: u64, val_loss: Option<f64>) -> Self {
        Self {
            meta: CheckpointMeta {
                version: CHECKPOINT_VERSION.into(),
                tag: tag.into(),
                model: model.config().clone(),
                train: train.clone(),
                epoch,
                step,
                val_loss,
                rng_state: RngState {
                    seed: train.seed,
                    next_epoch: epoch + 1,
                },
                param_count: model.num_params(),
            },
            params: model.params().clone(),
        }
    }

    /// Short human-readable identity, e.g. `best:no_rft:seed3:epoch12`.
    pub fn id(&self) -> String {
        format!(
            "{}:{}:seed{}:epoch{}",
            self.meta.tag,
            self.meta.model.ablations.label(),
            self.meta.train.seed,
            self.meta.epoch
        )
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.meta.model.clone(), &self.params)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&self.meta).map_err(|e| Error::json(&meta_path, e))?;
        fs::write(&meta_path, text + "\n").map_err(|e| Error::io(&meta_path, e))?;

        let params_path = dir.join(PARAMS_FILE);
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .params
            .iter()
            .map(|(_, name, t)| {
                let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.to_string(), raw, t.shape().to_vec())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, raw, shape)| {
                TensorView::new(Dtype::F64, shape.clone(), raw).map(|v| (name.clone(), v))
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| format_err(&params_path, e))?;
        let blob = safetensors::serialize(views, None).map_err(|e| format_err(&params_path, e))?;
        fs::write(&params_path, blob).map_err(|e| Error::io(&params_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
        let found = value.get("version").and_then(|v| v.as_str()).unwrap_or("<missing>");
        if found != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: found.into(),
                expected: CHECKPOINT_VERSION.into(),
            });
        }
        let meta: CheckpointMeta =
            serde_json::from_value(value).map_err(|e| Error::json(&meta_path, e))?;

        let params_path = dir.join(PARAMS_FILE);
        let blob = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let st = SafeTensors::deserialize(&blob).map_err(|e| format_err(&params_path, e))?;
        let mut params = Model::new(meta.model.clone(), 0)?.params().clone();
        let expected: HashSet<String> = params.iter().map(|(_, n, _)| n.to_string()).collect();
        if let Some(extra) = st.names().into_iter().find(|n| !expected.contains(*n)) {
            return Err(Error::Format {
                path: params_path,
                reason: format!("unexpected parameter {extra}"),
            });
        }
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.name(id).to_string();
            let view = st.tensor(&name).map_err(|e| format_err(&params_path, e))?;
            if view.dtype() != Dtype::F64 || view.shape() != params.get(id).shape() {
                return Err(Error::Format {
                    path: params_path,
                    reason: format!(
                        "parameter {name}: {:?} {:?}, expected F64 {:?}",
                        view.dtype(),
                        view.shape(),
                        params.get(id).shape()
                    ),
                });
            }
            let data: Vec<f64> = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            *params.get_mut(id) = Tensor::new(view.shape(), data)?;
        }
        Ok(Self { meta, params })
    }
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}
