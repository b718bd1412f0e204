//! Micro-scale pre-norm decoder with gated MLPs.
//!
//! Architecture: token embedding, then per layer RMS norm, causal multi-head
//! self-attention with rotary position encoding, residual add, RMS norm,
//! gated MLP, residual add; a final RMS norm closes the stack. No biases.
//!
//! Weight convention is right-to-left: row `n` of `w_gate` / `w_in` is the
//! input weight of neuron `n`, column `n` of `w_out` its output weight.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::ActivationKind;
use crate::aggregator::DocActivations;
use crate::corpus::TokenizedDoc;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(&'static str),
    #[error("tensor {name}: expected shape {expected:?}, got {actual:?}")]
    Shape {
        name: alloc::string::String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("tensor {name}: non-finite entry at flat index {index}")]
    NonFinite {
        name: alloc::string::String,
        index: usize,
    },
    #[error("token id {token} at position {pos} out of range for vocab size {vocab}")]
    TokenOutOfRange { pos: usize, token: u32, vocab: usize },
    #[error("input length {actual} does not match expected {expected}")]
    InputLength { expected: usize, actual: usize },
}

fn default_rope_theta() -> f64 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub activation: ActivationKind,
    pub norm_eps: f64,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.d_mlp == 0
            || self.n_heads == 0
            || self.vocab_size == 0
        {
            return Err(ModelError::Config("all counts must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config("d_model must be divisible by n_heads"));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(ModelError::Config("head dimension must be even for rotary encoding"));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(ModelError::Config("norm_eps must be finite and non-negative"));
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 0.0) {
            return Err(ModelError::Config("rope_theta must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_mlp
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub attn_q: Matrix,
    pub attn_k: Matrix,
    pub attn_v: Matrix,
    pub attn_o: Matrix,
    /// Pre-attention RMS norm gain.
    pub norm1: Vec<f64>,
    /// Pre-MLP RMS norm gain.
    pub norm2: Vec<f64>,
    /// `d_mlp x d_model`.
    pub w_gate: Matrix,
    /// `d_mlp x d_model`.
    pub w_in: Matrix,
    /// `d_model x d_mlp`.
    pub w_out: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub config: ModelConfig,
    /// `vocab x d_model`, row per token.
    pub embed: Matrix,
    /// `vocab x d_model`, row per token.
    pub unembed: Matrix,
    pub final_norm: Vec<f64>,
    pub layers: Vec<LayerWeights>,
}

impl WeightSet {
    /// Checks every shape against the config and that all entries are finite.
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = &self.config;
        c.validate()?;
        if self.layers.len() != c.n_layers {
            return Err(ModelError::Config("layer count does not match config"));
        }
        let dm = c.d_model;
        let mut mats: Vec<(alloc::string::String, &Matrix, [usize; 2])> = vec![
            ("embed".into(), &self.embed, [c.vocab_size, dm]),
            ("unembed".into(), &self.unembed, [c.vocab_size, dm]),
        ];
        let mut vecs: Vec<(alloc::string::String, &Vec<f64>)> =
            vec![("final_norm.gain".into(), &self.final_norm)];
        for (l, lw) in self.layers.iter().enumerate() {
            let name = |s: &str| alloc::format!("blocks.{l}.{s}");
            mats.push((name("attn.Q"), &lw.attn_q, [dm, dm]));
            mats.push((name("attn.K"), &lw.attn_k, [dm, dm]));
            mats.push((name("attn.V"), &lw.attn_v, [dm, dm]));
            mats.push((name("attn.O"), &lw.attn_o, [dm, dm]));
            mats.push((name("mlp.W_gate"), &lw.w_gate, [c.d_mlp, dm]));
            mats.push((name("mlp.W_in"), &lw.w_in, [c.d_mlp, dm]));
            mats.push((name("mlp.W_out"), &lw.w_out, [dm, c.d_mlp]));
            vecs.push((name("norm1.gain"), &lw.norm1));
            vecs.push((name("norm2.gain"), &lw.norm2));
        }
        for (name, m, shape) in mats {
            if m.shape() != shape {
                return Err(ModelError::Shape {
                    name,
                    expected: shape.to_vec(),
                    actual: m.shape().to_vec(),
                });
            }
            if let Some(index) = m.first_non_finite() {
                return Err(ModelError::NonFinite { name, index });
            }
        }
        for (name, v) in vecs {
            if v.len() != dm {
                return Err(ModelError::Shape {
                    name,
                    expected: vec![dm],
                    actual: vec![v.len()],
                });
            }
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(ModelError::NonFinite { name, index });
            }
        }
        Ok(())
    }
}

/// Output of one gated MLP application.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpOutput {
    pub out: Vec<f64>,
    pub gate_pre: Vec<f64>,
    pub in_pre: Vec<f64>,
}

/// `W_out (gate(W_gate x) ⊙ (W_in x))`, also returning both pre-activations.
pub fn mlp_forward(
    layer: &LayerWeights,
    x: &[f64],
    kind: ActivationKind,
) -> Result<MlpOutput, ModelError> {
    let d_model = layer.w_gate.cols();
    if x.len() != d_model {
        return Err(ModelError::InputLength {
            expected: d_model,
            actual: x.len(),
        });
    }
    if layer.w_in.shape() != layer.w_gate.shape()
        || layer.w_out.shape() != [d_model, layer.w_gate.rows()]
    {
        return Err(ModelError::Config("inconsistent MLP weight shapes"));
    }
    let gate_pre = layer.w_gate.matvec(x);
    let in_pre = layer.w_in.matvec(x);
    let hidden: Vec<f64> = gate_pre
        .iter()
        .zip(&in_pre)
        .map(|(&g, &i)| kind.gate(g) * i)
        .collect();
    let out = layer.w_out.matvec(&hidden);
    Ok(MlpOutput {
        out,
        gate_pre,
        in_pre,
    })
}

/// Folds each layer's pre-MLP norm gain into the rows of `w_gate` and `w_in`
/// and resets the gain to ones. The MLP sees the same input up to rounding.
pub fn preprocess_weights(ws: &WeightSet) -> WeightSet {
    let mut out = ws.clone();
    for lw in &mut out.layers {
        let ones = vec![1.0; lw.norm2.len()];
        let gain = core::mem::replace(&mut lw.norm2, ones);
        for m in [&mut lw.w_gate, &mut lw.w_in] {
            for r in 0..m.rows() {
                for (w, g) in m.row_mut(r).iter_mut().zip(&gain) {
                    *w *= g;
                }
            }
        }
    }
    out
}

pub fn rms_norm(x: &[f64], gain: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / libm::sqrt(ms + eps);
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// `(x_gate, x_in)` pairs of one layer for a run of positions, stored as
/// 32-bit reals, position-major then neuron-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub doc_id: u64,
    pub start_pos: usize,
    pub layer: usize,
    pub d_mlp: usize,
    pub pairs: Vec<[f32; 2]>,
}

impl ActivationBatch {
    pub fn n_positions(&self) -> usize {
        self.pairs.len().checked_div(self.d_mlp).unwrap_or(0)
    }

    pub fn pair(&self, pos_offset: usize, neuron: usize) -> [f32; 2] {
        self.pairs[pos_offset * self.d_mlp + neuron]
    }
}

/// Receives activation batches from [`forward_collect`].
pub trait ActivationSink {
    fn consume(&mut self, batch: ActivationBatch);
}

impl ActivationSink for Vec<ActivationBatch> {
    fn consume(&mut self, batch: ActivationBatch) {
        self.push(batch);
    }
}

/// Reassembles per-layer batches of one document into the position-major
/// layout used by the aggregator and the dump format.
#[derive(Debug)]
pub struct DocCollector {
    doc: DocActivations,
    n_layers: usize,
    d_mlp: usize,
}

impl DocCollector {
    pub fn new(doc_id: u64, n_tokens: usize, n_layers: usize, d_mlp: usize) -> Self {
        DocCollector {
            doc: DocActivations {
                doc_id,
                n_tokens,
                pairs: vec![[0.0; 2]; n_tokens * n_layers * d_mlp],
            },
            n_layers,
            d_mlp,
        }
    }

    pub fn into_doc(self) -> DocActivations {
        self.doc
    }
}

impl ActivationSink for DocCollector {
    fn consume(&mut self, batch: ActivationBatch) {
        let stride = self.n_layers * self.d_mlp;
        for p in 0..batch.n_positions() {
            let dst = (batch.start_pos + p) * stride + batch.layer * self.d_mlp;
            self.doc.pairs[dst..dst + self.d_mlp]
                .copy_from_slice(&batch.pairs[p * self.d_mlp..(p + 1) * self.d_mlp]);
        }
    }
}

fn apply_rope(v: &mut [f64], pos: usize, n_heads: usize, theta: f64) {
    let hd = v.len() / n_heads;
    for h in 0..n_heads {
        let head = &mut v[h * hd..(h + 1) * hd];
        for i in 0..hd / 2 {
            let freq = libm::pow(theta, -(2.0 * i as f64) / hd as f64);
            let angle = pos as f64 * freq;
            let (s, c) = (libm::sin(angle), libm::cos(angle));
            let (a, b) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

fn attention(lw: &LayerWeights, cfg: &ModelConfig, normed: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = normed.len();
    let hd = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(hd as f64);
    let mut qs = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    for (p, x) in normed.iter().enumerate() {
        let mut q = lw.attn_q.matvec(x);
        let mut k = lw.attn_k.matvec(x);
        apply_rope(&mut q, p, cfg.n_heads, cfg.rope_theta);
        apply_rope(&mut k, p, cfg.n_heads, cfg.rope_theta);
        qs.push(q);
        ks.push(k);
        vs.push(lw.attn_v.matvec(x));
    }
    let mut out = Vec::with_capacity(n);
    let mut scores = vec![0.0; n];
    for (p, qp) in qs.iter().enumerate() {
        let mut mixed = vec![0.0; cfg.d_model];
        for h in 0..cfg.n_heads {
            let span = h * hd..(h + 1) * hd;
            let q = &qp[span.clone()];
            let mut max = f64::NEG_INFINITY;
            for j in 0..=p {
                scores[j] = dot(q, &ks[j][span.clone()]) * scale;
                max = max.max(scores[j]);
            }
            let mut total = 0.0;
            for s in scores.iter_mut().take(p + 1) {
                *s = libm::exp(*s - max);
                total += *s;
            }
            for j in 0..=p {
                let w = scores[j] / total;
                for (m, v) in mixed[span.clone()].iter_mut().zip(&vs[j][span.clone()]) {
                    *m += w * v;
                }
            }
        }
        out.push(lw.attn_o.matvec(&mixed));
    }
    out
}

/// Runs the decoder over `tokens`, handing each layer's pre-activations to
/// `sink`, and returns the final-normed residual stream.
pub fn forward_hidden(
    ws: &WeightSet,
    doc_id: u64,
    tokens: &[u32],
    sink: &mut dyn ActivationSink,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let cfg = &ws.config;
    for (pos, &t) in tokens.iter().enumerate() {
        if t as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                pos,
                token: t,
                vocab: cfg.vocab_size,
            });
        }
    }
    let mut resid: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| ws.embed.row(t as usize).to_vec())
        .collect();
    for (l, lw) in ws.layers.iter().enumerate() {
        let normed: Vec<Vec<f64>> = resid
            .iter()
            .map(|x| rms_norm(x, &lw.norm1, cfg.norm_eps))
            .collect();
        for (r, a) in resid.iter_mut().zip(attention(lw, cfg, &normed)) {
            for (x, y) in r.iter_mut().zip(a) {
                *x += y;
            }
        }
        let mut pairs = Vec::with_capacity(tokens.len() * cfg.d_mlp);
        for r in resid.iter_mut() {
            let m = rms_norm(r, &lw.norm2, cfg.norm_eps);
            let mlp = mlp_forward(lw, &m, cfg.activation)?;
            pairs.extend(
                mlp.gate_pre
                    .iter()
                    .zip(&mlp.in_pre)
                    .map(|(&g, &i)| [g as f32, i as f32]),
            );
            for (x, y) in r.iter_mut().zip(mlp.out) {
                *x += y;
            }
        }
        if !tokens.is_empty() {
            sink.consume(ActivationBatch {
                doc_id,
                start_pos: 0,
                layer: l,
                d_mlp: cfg.d_mlp,
                pairs,
            });
        }
    }
    Ok(resid
        .iter()
        .map(|x| rms_norm(x, &ws.final_norm, cfg.norm_eps))
        .collect())
}

/// Runs the decoder over one document and delivers one batch per layer
/// covering every position.
pub fn forward_collect(
    ws: &WeightSet,
    doc: &TokenizedDoc,
    sink: &mut dyn ActivationSink,
) -> Result<(), ModelError> {
    forward_hidden(ws, doc.doc_id, &doc.tokens, sink).map(|_| ())
}

/// Convenience: run one document and return its activations in aggregator
/// layout.
pub fn collect_doc(ws: &WeightSet, doc: &TokenizedDoc) -> Result<DocActivations, ModelError> {
    let cfg = &ws.config;
    let mut collector = DocCollector::new(doc.doc_id, doc.tokens.len(), cfg.n_layers, cfg.d_mlp);
    forward_collect(ws, doc, &mut collector)?;
    Ok(collector.into_doc())
}

/// Random weights for tests and demos. Attention and MLP matrices are drawn
/// from `N(0, scale^2 / fan_in)`, gains near one.
pub fn random_weights(cfg: &ModelConfig, seed: u64) -> WeightSet {
    let mut rng = crate::rng::SeededRng::new(seed);
    let dm = cfg.d_model;
    let mut mat = |rows: usize, cols: usize, std: f64| {
        Matrix::from_fn(rows, cols, |_, _| rng.normal() * std)
    };
    let s_model = 1.0 / libm::sqrt(dm as f64);
    let s_mlp = 1.0 / libm::sqrt(cfg.d_mlp as f64);
    let embed = mat(cfg.vocab_size, dm, 1.0);
    let unembed = mat(cfg.vocab_size, dm, s_model);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            attn_q: mat(dm, dm, s_model),
            attn_k: mat(dm, dm, s_model),
            attn_v: mat(dm, dm, s_model),
            attn_o: mat(dm, dm, s_model),
            norm1: vec![1.0; dm],
            norm2: vec![1.0; dm],
            w_gate: mat(cfg.d_mlp, dm, s_model),
            w_in: mat(cfg.d_mlp, dm, s_model),
            w_out: mat(dm, cfg.d_mlp, s_mlp),
        });
    }
    let mut gains = crate::rng::SeededRng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    for lw in &mut layers {
        for g in lw.norm1.iter_mut().chain(lw.norm2.iter_mut()) {
            *g = 1.0 + 0.2 * gains.normal();
        }
    }
    WeightSet {
        config: cfg.clone(),
        embed,
        unembed,
        final_norm: vec![1.0; dm],
        layers,
    }
}
