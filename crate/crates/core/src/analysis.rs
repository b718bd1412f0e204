//! Weight-space cosines, gate-positive frequency and Pearson correlation
//! between the two across the neurons of a layer.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::SignCombo;
use crate::aggregator::NeuronRecord;
use crate::model::{dot, preprocess_weights, WeightSet};
use crate::stats::student_t_two_sided;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("layer {layer}, neuron {neuron}: {source}")]
    Neuron {
        layer: usize,
        neuron: usize,
        #[source]
        source: alloc::boxed::Box<AnalysisError>,
    },
    #[error("no observations")]
    NoObservations,
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("input is constant")]
    ConstantInput,
    #[error("non-finite input")]
    NonFinite,
    #[error("layer {layer} out of range (model has {n_layers})")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("dataset has no row for neuron {layer}.{neuron}")]
    MissingNeuron { layer: usize, neuron: usize },
    #[error("dataset has more than one row for neuron {layer}.{neuron}")]
    DuplicateNeuron { layer: usize, neuron: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    /// Two-sided.
    pub p: f64,
    pub n: usize,
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, AnalysisError> {
    if u.len() != v.len() {
        return Err(AnalysisError::LengthMismatch(u.len(), v.len()));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let nu = libm::sqrt(dot(u, u));
    let nv = libm::sqrt(dot(v, v));
    if nu == 0.0 || nv == 0.0 {
        return Err(AnalysisError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `cos(w_in, w_out)` for every neuron of `layer`, on the weights as given.
pub fn neuron_in_out_cosines(ws: &WeightSet, layer: usize) -> Result<Vec<f64>, AnalysisError> {
    let lw = ws.layers.get(layer).ok_or(AnalysisError::LayerOutOfRange {
        layer,
        n_layers: ws.layers.len(),
    })?;
    (0..lw.w_in.rows())
        .map(|n| {
            cosine(lw.w_in.row(n), &lw.w_out.col(n)).map_err(|e| AnalysisError::Neuron {
                layer,
                neuron: n,
                source: alloc::boxed::Box::new(e),
            })
        })
        .collect()
}

/// Anything that knows how often a neuron's gate pre-activation was
/// non-negative.
pub trait GateFrequency {
    fn layer(&self) -> usize;
    fn neuron(&self) -> usize;
    fn gate_positive_freq(&self) -> Result<f64, AnalysisError>;
}

/// `(count(gate+_in+) + count(gate+_in-)) / total_observations`.
pub fn gate_positive_freq(record: &NeuronRecord) -> Result<f64, AnalysisError> {
    if record.total_observations == 0 {
        return Err(AnalysisError::NoObservations);
    }
    let pos = record.combo(SignCombo::PP).count + record.combo(SignCombo::PN).count;
    Ok(pos as f64 / record.total_observations as f64)
}

impl GateFrequency for NeuronRecord {
    fn layer(&self) -> usize {
        self.layer
    }

    fn neuron(&self) -> usize {
        self.neuron
    }

    fn gate_positive_freq(&self) -> Result<f64, AnalysisError> {
        gate_positive_freq(self)
    }
}

/// Sample Pearson correlation with a two-sided p-value from Student's t with
/// `n - 2` degrees of freedom.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult, AnalysisError> {
    if xs.len() != ys.len() {
        return Err(AnalysisError::LengthMismatch(xs.len(), ys.len()));
    }
    let n = xs.len();
    if n < 3 {
        return Err(AnalysisError::TooFewSamples(n));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::ConstantInput);
    }
    let r = (sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * libm::sqrt(df / ((1.0 - r) * (1.0 + r)));
        student_t_two_sided(t, df)
    };
    Ok(CorrelationResult { r, p, n })
}

/// Pearson correlation between `cos(w_in, w_out)` on preprocessed weights and
/// the gate-positive frequency, paired by neuron index across `layer`.
pub fn correlate_layer<R: GateFrequency>(
    dataset: &[R],
    ws: &WeightSet,
    layer: usize,
) -> Result<CorrelationResult, AnalysisError> {
    if layer >= ws.layers.len() {
        return Err(AnalysisError::LayerOutOfRange {
            layer,
            n_layers: ws.layers.len(),
        });
    }
    let cosines = neuron_in_out_cosines(&preprocess_weights(ws), layer)?;
    let mut freqs: Vec<Option<f64>> = vec![None; cosines.len()];
    for row in dataset.iter().filter(|r| r.layer() == layer) {
        let neuron = row.neuron();
        let slot = freqs
            .get_mut(neuron)
            .ok_or(AnalysisError::MissingNeuron { layer, neuron })?;
        if slot.is_some() {
            return Err(AnalysisError::DuplicateNeuron { layer, neuron });
        }
        *slot = Some(row.gate_positive_freq().map_err(|e| AnalysisError::Neuron {
            layer,
            neuron,
            source: alloc::boxed::Box::new(e),
        })?);
    }
    let freqs = freqs
        .into_iter()
        .enumerate()
        .map(|(neuron, f)| f.ok_or(AnalysisError::MissingNeuron { layer, neuron }))
        .collect::<Result<Vec<_>, _>>()?;
    pearson(&cosines, &freqs)
}
