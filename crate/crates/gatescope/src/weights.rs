//! Tensor archive IO in the safetensors container format.
//!
//! Tensor names are fixed:
//!
//! ```text
//! embed                 vocab × d_model
//! unembed               vocab × d_model
//! final_norm.gain       d_model
//! blocks.L.attn.Q|K|V|O d_model × d_model
//! blocks.L.norm1.gain   d_model
//! blocks.L.norm2.gain   d_model
//! blocks.L.mlp.W_gate   d_mlp × d_model
//! blocks.L.mlp.W_in     d_mlp × d_model
//! blocks.L.mlp.W_out    d_model × d_mlp
//! ```
//!
//! A matrix may be stored transposed if its name is listed under
//! `transposed` in the archive metadata. All archive metadata lives in one
//! JSON document under the `gatescope` key so that written archives are
//! byte-stable. F32 and F64 tensors are accepted; archives are written as F64.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use gatescope_core::model::{LayerWeights, Matrix, ModelConfig, ModelError, WeightSet};
use safetensors::tensor::{Dtype, SafeTensorError, SafeTensors, View};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const METADATA_KEY: &str = "gatescope";

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("archive: {0}")]
    Format(#[from] SafeTensorError),
    #[error("missing tensor \"{0}\"")]
    Missing(String),
    #[error("tensor \"{name}\": expected shape {expected:?}, found {actual:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor \"{name}\": unsupported dtype {dtype}")]
    Dtype { name: String, dtype: String },
    #[error("tensor \"{name}\": non-finite entry at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("archive metadata: {0}")]
    Metadata(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Contents of the archive's metadata document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    /// Matrices stored as their transpose.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transposed: Vec<String>,
}

pub fn layer_name(layer: usize, part: &str) -> String {
    format!("blocks.{layer}.{part}")
}

/// Every required tensor name in archive order, with its canonical shape.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (dm, dh, v) = (cfg.d_model, cfg.d_mlp, cfg.vocab_size);
    let mut out = vec![
        ("embed".to_string(), vec![v, dm]),
        ("unembed".to_string(), vec![v, dm]),
        ("final_norm.gain".to_string(), vec![dm]),
    ];
    for l in 0..cfg.n_layers {
        for p in ["Q", "K", "V", "O"] {
            out.push((layer_name(l, &format!("attn.{p}")), vec![dm, dm]));
        }
        out.push((layer_name(l, "norm1.gain"), vec![dm]));
        out.push((layer_name(l, "norm2.gain"), vec![dm]));
        out.push((layer_name(l, "mlp.W_gate"), vec![dh, dm]));
        out.push((layer_name(l, "mlp.W_in"), vec![dh, dm]));
        out.push((layer_name(l, "mlp.W_out"), vec![dm, dh]));
    }
    out
}

struct F64Tensor {
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

impl F64Tensor {
    fn new(shape: Vec<usize>, values: &[f64]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        F64Tensor { shape, bytes }
    }
}

impl View for &F64Tensor {
    fn dtype(&self) -> Dtype {
        Dtype::F64
    }
    fn shape(&self) -> &[usize] {
        &self.shape
    }
    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }
    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

fn tensors_of(ws: &WeightSet) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let m = |x: &Matrix| (vec![x.rows(), x.cols()], x.data().to_vec());
    let mut out = Vec::new();
    let mut push = |name: String, (shape, data): (Vec<usize>, Vec<f64>)| out.push((name, shape, data));
    push("embed".into(), m(&ws.embed));
    push("unembed".into(), m(&ws.unembed));
    push("final_norm.gain".into(), (vec![ws.final_norm.len()], ws.final_norm.clone()));
    for (l, lw) in ws.layers.iter().enumerate() {
        push(layer_name(l, "attn.Q"), m(&lw.attn_q));
        push(layer_name(l, "attn.K"), m(&lw.attn_k));
        push(layer_name(l, "attn.V"), m(&lw.attn_v));
        push(layer_name(l, "attn.O"), m(&lw.attn_o));
        push(layer_name(l, "norm1.gain"), (vec![lw.norm1.len()], lw.norm1.clone()));
        push(layer_name(l, "norm2.gain"), (vec![lw.norm2.len()], lw.norm2.clone()));
        push(layer_name(l, "mlp.W_gate"), m(&lw.w_gate));
        push(layer_name(l, "mlp.W_in"), m(&lw.w_in));
        push(layer_name(l, "mlp.W_out"), m(&lw.w_out));
    }
    out
}

/// Serializes `ws` as an F64 archive. Matrices named in `transposed` are
/// stored as their transpose and flagged in the metadata.
pub fn save_weights(ws: &WeightSet, model_id: &str, transposed: &[&str]) -> Result<Vec<u8>, WeightsError> {
    ws.validate()?;
    let mut flagged: Vec<String> = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in tensors_of(ws) {
        if transposed.contains(&name.as_str()) && shape.len() == 2 {
            let t = Matrix::from_vec(shape[0], shape[1], data).transpose();
            tensors.push((name.clone(), F64Tensor::new(vec![t.rows(), t.cols()], t.data())));
            flagged.push(name);
        } else {
            tensors.push((name, F64Tensor::new(shape, &data)));
        }
    }
    if let Some(bad) = transposed.iter().find(|n| !flagged.iter().any(|f| f == *n)) {
        return Err(WeightsError::Metadata(format!("cannot transpose \"{bad}\"")));
    }
    let meta = ArchiveMeta {
        model_id: model_id.to_string(),
        config: Some(ws.config.clone()),
        transposed: flagged,
    };
    let doc = serde_json::to_string(&meta).map_err(|e| WeightsError::Metadata(e.to_string()))?;
    let metadata = HashMap::from([(METADATA_KEY.to_string(), doc)]);
    Ok(safetensors::serialize(
        tensors.iter().map(|(n, t)| (n.as_str(), t)),
        Some(metadata),
    )?)
}

/// Reads the metadata document; an archive without one yields `None`.
pub fn read_archive_meta(bytes: &[u8]) -> Result<Option<ArchiveMeta>, WeightsError> {
    let (_, meta) = SafeTensors::read_metadata(bytes)?;
    match meta.metadata().as_ref().and_then(|m| m.get(METADATA_KEY)) {
        None => Ok(None),
        Some(doc) => serde_json::from_str(doc)
            .map(Some)
            .map_err(|e| WeightsError::Metadata(e.to_string())),
    }
}

fn read_tensor(
    st: &SafeTensors<'_>,
    name: &str,
    expected: &[usize],
    transposed: bool,
) -> Result<Vec<f64>, WeightsError> {
    let view = st
        .tensor(name)
        .map_err(|_| WeightsError::Missing(name.to_string()))?;
    let stored: Vec<usize> = if transposed {
        expected.iter().rev().copied().collect()
    } else {
        expected.to_vec()
    };
    if view.shape() != stored.as_slice() {
        return Err(WeightsError::Shape {
            name: name.to_string(),
            expected: stored,
            actual: view.shape().to_vec(),
        });
    }
    let values: Vec<f64> = match view.dtype() {
        Dtype::F64 => view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => view
            .data()
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        other => {
            return Err(WeightsError::Dtype {
                name: name.to_string(),
                dtype: format!("{other:?}"),
            })
        }
    };
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(WeightsError::NonFinite {
            name: name.to_string(),
            index,
        });
    }
    if transposed {
        Ok(Matrix::from_vec(stored[0], stored[1], values).transpose().data().to_vec())
    } else {
        Ok(values)
    }
}

/// Loads a weight set with shapes checked against `config`.
pub fn load_weights(bytes: &[u8], config: &ModelConfig) -> Result<WeightSet, WeightsError> {
    config.validate()?;
    let st = SafeTensors::deserialize(bytes)?;
    let transposed = read_archive_meta(bytes)?.map(|m| m.transposed).unwrap_or_default();
    let get = |name: &str, shape: &[usize]| {
        read_tensor(&st, name, shape, transposed.iter().any(|t| t == name))
    };
    let mat = |name: &str, r: usize, c: usize| get(name, &[r, c]).map(|d| Matrix::from_vec(r, c, d));
    let (dm, dh, v) = (config.d_model, config.d_mlp, config.vocab_size);

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let n = |p: &str| layer_name(l, p);
        layers.push(LayerWeights {
            attn_q: mat(&n("attn.Q"), dm, dm)?,
            attn_k: mat(&n("attn.K"), dm, dm)?,
            attn_v: mat(&n("attn.V"), dm, dm)?,
            attn_o: mat(&n("attn.O"), dm, dm)?,
            norm1: get(&n("norm1.gain"), &[dm])?,
            norm2: get(&n("norm2.gain"), &[dm])?,
            w_gate: mat(&n("mlp.W_gate"), dh, dm)?,
            w_in: mat(&n("mlp.W_in"), dh, dm)?,
            w_out: mat(&n("mlp.W_out"), dm, dh)?,
        });
    }
    let ws = WeightSet {
        config: config.clone(),
        embed: mat("embed", v, dm)?,
        unembed: mat("unembed", v, dm)?,
        final_norm: get("final_norm.gain", &[dm])?,
        layers,
    };
    ws.validate()?;
    Ok(ws)
}

/// Loaded archive together with its metadata.
#[derive(Debug, Clone)]
pub struct LoadedWeights {
    pub model_id: String,
    pub weights: WeightSet,
}

/// Reads an archive from disk. The config comes from `config` if given,
/// otherwise from the archive metadata.
pub fn load_weights_file(path: &Path, config: Option<&ModelConfig>) -> Result<LoadedWeights, WeightsError> {
    let bytes = std::fs::read(path).map_err(|source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let meta = read_archive_meta(&bytes)?;
    let cfg = match (config, meta.as_ref().and_then(|m| m.config.as_ref())) {
        (Some(c), _) | (None, Some(c)) => c.clone(),
        (None, None) => {
            return Err(WeightsError::Metadata(
                "archive carries no model config; pass one explicitly".into(),
            ))
        }
    };
    let model_id = meta.map(|m| m.model_id).unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    Ok(LoadedWeights {
        model_id,
        weights: load_weights(&bytes, &cfg)?,
    })
}

pub fn save_weights_file(path: &Path, ws: &WeightSet, model_id: &str) -> Result<(), WeightsError> {
    let bytes = save_weights(ws, model_id, &[])?;
    std::fs::write(path, bytes).map_err(|source| WeightsError::Io {
        path: path.display().to_string(),
        source,
    })
}
