//! Versioned JSON model files with base64 parameter blobs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::{ModelKind, TrainConfig};
use crate::data::{Dataset, Schema, TransformState};
use crate::encoder::NormStats;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model};
use crate::params::{ParamStore, RegClass};

pub const FORMAT_VERSION: u32 = 1;

/// A trained model with everything needed to score raw rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub model: Model,
    pub transforms: TransformState,
    pub config: TrainConfig,
    pub schema: Schema,
    /// Rows of the source table the model was fitted on; explanations
    /// center over these. Empty means every row.
    pub train_rows: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    class: RegClass,
    data: String,
}

#[derive(Serialize, Deserialize)]
struct StatsEntry {
    mean: String,
    var: String,
}

#[derive(Serialize, Deserialize)]
struct Repr {
    format_version: u32,
    model_kind: ModelKind,
    architecture: Architecture,
    iteration: usize,
    parameters: Vec<ParamEntry>,
    norm_stats: BTreeMap<String, StatsEntry>,
    transforms: TransformState,
    config: TrainConfig,
    schema: Schema,
    #[serde(default)]
    train_rows: Vec<usize>,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

fn decode(text: &str, what: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::ModelFormat(format!("{what}: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::ModelFormat(format!("{what}: blob length is not a multiple of 8")));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

impl FittedModel {
    pub fn to_json(&self) -> Result<String> {
        let repr = Repr {
            format_version: FORMAT_VERSION,
            model_kind: self.model.arch.kind,
            architecture: self.model.arch.clone(),
            iteration: self.model.iteration,
            parameters: self
                .model
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    class: p.class,
                    data: encode(p.value.data()),
                })
                .collect(),
            norm_stats: self
                .model
                .norm_stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        StatsEntry {
                            mean: encode(&s.mean),
                            var: encode(&s.var),
                        },
                    )
                })
                .collect(),
            transforms: self.transforms.clone(),
            config: self.config.clone(),
            schema: self.schema.clone(),
            train_rows: self.train_rows.clone(),
        };
        Ok(serde_json::to_string_pretty(&repr)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::ModelFormat("missing format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::ModelVersion {
                found: found.try_into().unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let repr: Repr = serde_json::from_value(value)?;
        let mut params = ParamStore::new();
        for p in repr.parameters {
            let data = decode(&p.data, &p.name)?;
            if data.len() != p.shape.iter().product::<usize>() {
                return Err(Error::ModelFormat(format!("{}: data does not match shape {:?}", p.name, p.shape)));
            }
            if params.position(&p.name).is_some() {
                return Err(Error::ModelFormat(format!("duplicate parameter `{}`", p.name)));
            }
            params.insert(p.name, Tensor::new(p.shape, data), p.class);
        }
        let norm_stats = repr
            .norm_stats
            .into_iter()
            .map(|(k, s)| {
                let stats = NormStats {
                    mean: decode(&s.mean, &k)?,
                    var: decode(&s.var, &k)?,
                };
                Ok((k, stats))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(FittedModel {
            model: Model {
                arch: repr.architecture,
                params,
                norm_stats,
                iteration: repr.iteration,
            },
            transforms: repr.transforms,
            config: repr.config,
            schema: repr.schema,
            train_rows: repr.train_rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// Training rows of `data`, or all of it when none were recorded.
    pub fn training_rows(&self, data: &Dataset) -> Result<Dataset> {
        if self.train_rows.is_empty() {
            return Ok(data.clone());
        }
        if let Some(&bad) = self.train_rows.iter().find(|&&r| r >= data.n_samples()) {
            return Err(Error::Split(format!(
                "model was trained on row {bad}, but the data has {} rows",
                data.n_samples()
            )));
        }
        Ok(data.select(&self.train_rows))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }
}
