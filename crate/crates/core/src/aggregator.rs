//! Streaming per-neuron statistics split by sign combination.
//!
//! For every neuron and each of the four sign combinations the state keeps an
//! observation count and, for each of the four intermediates, an exact sum,
//! the extrema and a top-k list of examples. Memory is fixed by the config
//! and independent of the stream length.
//!
//! Top-k lists are deduplicated by document: while a document is being
//! observed, each (neuron, combo, intermediate) slot remembers only the most
//! extreme occurrence in that document, and that single candidate is merged
//! into the global list when the document ends.
//!
//! "Most extreme" follows the fixed sign an intermediate has inside a combo
//! (see [`SignCombo::direction`]): for a positive direction the largest
//! values win, for a negative direction the smallest. Ties are broken by
//! `doc_id` then `token_pos`, ascending. Together with exact summation this
//! makes [`AggregatorState::merge`] reproduce sequential processing exactly.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{ActivationKind, Intermediate, NeuronActivation, Sign, SignCombo};
use crate::exact_sum::ExactSum;

pub const DEFAULT_K: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregatorError {
    #[error("invalid aggregator config: {0}")]
    Config(&'static str),
    #[error("doc {doc_id}: expected {expected} activation pairs, got {actual}")]
    Shape {
        doc_id: u64,
        expected: usize,
        actual: usize,
    },
    #[error("doc {doc_id}: non-finite activation at layer {layer}, position {position}, neuron {neuron}")]
    NonFinite {
        doc_id: u64,
        layer: usize,
        position: usize,
        neuron: usize,
    },
    #[error("doc {doc_id} observed after doc {last}; doc ids must increase within a state")]
    DocOrder { doc_id: u64, last: u64 },
    #[error("cannot merge states with different configs")]
    ConfigMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub k: usize,
    pub n_layers: usize,
    pub d_mlp: usize,
    pub activation: ActivationKind,
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<(), AggregatorError> {
        if self.k == 0 {
            return Err(AggregatorError::Config("k must be at least 1"));
        }
        if self.n_layers == 0 || self.d_mlp == 0 {
            return Err(AggregatorError::Config("n_layers and d_mlp must be at least 1"));
        }
        Ok(())
    }

    fn n_neurons(&self) -> usize {
        self.n_layers * self.d_mlp
    }
}

/// Raw `(x_gate, x_in)` pairs of one document, position-major, then
/// layer-major, then neuron-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DocActivations {
    pub doc_id: u64,
    pub n_tokens: usize,
    pub pairs: Vec<[f32; 2]>,
}

impl DocActivations {
    #[inline]
    pub fn pair(&self, n_layers: usize, d_mlp: usize, pos: usize, layer: usize, neuron: usize) -> [f32; 2] {
        self.pairs[(pos * n_layers + layer) * d_mlp + neuron]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExampleRef {
    pub doc_id: u64,
    pub token_pos: u32,
    pub value: f64,
}

/// Ranking used by every top-k list: more extreme first, then lower
/// `doc_id`, then lower `token_pos`.
pub fn rank_cmp(direction: Sign, a: &ExampleRef, b: &ExampleRef) -> Ordering {
    let (ka, kb) = match direction {
        Sign::Pos => (a.value, b.value),
        Sign::Neg => (-a.value, -b.value),
    };
    kb.total_cmp(&ka)
        .then(a.doc_id.cmp(&b.doc_id))
        .then(a.token_pos.cmp(&b.token_pos))
}

#[inline]
fn total_min(a: f64, b: f64) -> f64 {
    if b.total_cmp(&a) == Ordering::Less {
        b
    } else {
        a
    }
}

#[inline]
fn total_max(a: f64, b: f64) -> f64 {
    if b.total_cmp(&a) == Ordering::Greater {
        b
    } else {
        a
    }
}

#[derive(Debug, Clone, PartialEq)]
struct InterAcc {
    sum: ExactSum,
    min: f64,
    max: f64,
    examples: Vec<ExampleRef>,
}

impl InterAcc {
    fn new() -> Self {
        InterAcc {
            sum: ExactSum::new(),
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            examples: Vec::new(),
        }
    }

    fn offer(&mut self, candidate: ExampleRef, direction: Sign, k: usize) {
        let at = self
            .examples
            .partition_point(|e| rank_cmp(direction, e, &candidate) == Ordering::Less);
        if at >= k {
            return;
        }
        if self.examples.len() == k {
            self.examples.pop();
        }
        self.examples.insert(at, candidate);
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Cell {
    count: u64,
    inter: [InterAcc; 4],
}

impl Cell {
    fn new() -> Self {
        Cell {
            count: 0,
            inter: core::array::from_fn(|_| InterAcc::new()),
        }
    }
}

/// Best occurrence of the current document in one slot.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    pos: u32,
    value: f64,
}

#[derive(Debug, Clone)]
pub struct AggregatorState {
    config: AggregatorConfig,
    total_positions: u64,
    last_doc: Option<u64>,
    /// `[neuron][combo]`, neuron = layer * d_mlp + index.
    cells: Vec<Cell>,
    /// `[neuron][combo][intermediate]`, reset after every document.
    scratch: Vec<Option<Candidate>>,
    touched: Vec<u32>,
}

impl PartialEq for AggregatorState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.total_positions == other.total_positions
            && self.cells == other.cells
    }
}

impl AggregatorState {
    pub fn new(config: AggregatorConfig) -> Result<Self, AggregatorError> {
        config.validate()?;
        let n = config.n_neurons();
        Ok(AggregatorState {
            cells: (0..n * 4).map(|_| Cell::new()).collect(),
            scratch: vec![None; n * 16],
            touched: Vec::new(),
            total_positions: 0,
            last_doc: None,
            config,
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    /// Token positions observed so far.
    pub fn total_positions(&self) -> u64 {
        self.total_positions
    }

    /// Number of neuron slots (`n_layers * d_mlp`).
    pub fn n_neurons(&self) -> usize {
        self.config.n_neurons()
    }

    pub fn observe_doc(&mut self, doc: &DocActivations) -> Result<(), AggregatorError> {
        let (n_layers, d_mlp) = (self.config.n_layers, self.config.d_mlp);
        let expected = doc.n_tokens * n_layers * d_mlp;
        if doc.pairs.len() != expected {
            return Err(AggregatorError::Shape {
                doc_id: doc.doc_id,
                expected,
                actual: doc.pairs.len(),
            });
        }
        if let Some(i) = doc
            .pairs
            .iter()
            .position(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(AggregatorError::NonFinite {
                doc_id: doc.doc_id,
                position: i / (n_layers * d_mlp),
                layer: (i / d_mlp) % n_layers,
                neuron: i % d_mlp,
            });
        }
        if doc.n_tokens == 0 {
            return Ok(());
        }
        if let Some(last) = self.last_doc {
            if doc.doc_id <= last {
                return Err(AggregatorError::DocOrder {
                    doc_id: doc.doc_id,
                    last,
                });
            }
        }
        let kind = self.config.activation;
        let n_neurons = self.config.n_neurons();
        for (pos, chunk) in doc.pairs.chunks_exact(n_neurons).enumerate() {
            let pos = pos as u32;
            for (neuron, &[g, i]) in chunk.iter().enumerate() {
                let act = NeuronActivation::compute(kind, g as f64, i as f64);
                self.record(neuron, pos, &act);
            }
        }
        self.total_positions += doc.n_tokens as u64;
        self.last_doc = Some(doc.doc_id);
        self.flush(doc.doc_id);
        Ok(())
    }

    #[inline]
    fn record(&mut self, neuron: usize, pos: u32, act: &NeuronActivation) {
        let combo = act.combo();
        let cell_idx = neuron * 4 + combo.index();
        let cell = &mut self.cells[cell_idx];
        cell.count += 1;
        for (w, value) in Intermediate::ALL.into_iter().zip(act.values()) {
            let acc = &mut cell.inter[w.index()];
            acc.sum.add(value);
            acc.min = total_min(acc.min, value);
            acc.max = total_max(acc.max, value);
            let slot_idx = cell_idx * 4 + w.index();
            let slot = &mut self.scratch[slot_idx];
            match slot {
                None => {
                    *slot = Some(Candidate { pos, value });
                    self.touched.push(slot_idx as u32);
                }
                Some(best) => {
                    let (new_key, old_key) = match combo.direction(w) {
                        Sign::Pos => (value, best.value),
                        Sign::Neg => (-value, -best.value),
                    };
                    if new_key.total_cmp(&old_key) == Ordering::Greater {
                        *best = Candidate { pos, value };
                    }
                }
            }
        }
    }

    fn flush(&mut self, doc_id: u64) {
        let k = self.config.k;
        for slot_idx in self.touched.drain(..) {
            let slot_idx = slot_idx as usize;
            let Some(best) = self.scratch[slot_idx].take() else {
                continue;
            };
            let cell_idx = slot_idx / 4;
            let w = Intermediate::ALL[slot_idx % 4];
            let combo = SignCombo::ALL[cell_idx % 4];
            self.cells[cell_idx].inter[w.index()].offer(
                ExampleRef {
                    doc_id,
                    token_pos: best.pos,
                    value: best.value,
                },
                combo.direction(w),
                k,
            );
        }
    }

    /// Combines two states built from disjoint documents. The result equals
    /// the state obtained by observing both streams sequentially.
    pub fn merge(mut self, other: &AggregatorState) -> Result<AggregatorState, AggregatorError> {
        self.merge_from(other)?;
        Ok(self)
    }

    pub fn merge_from(&mut self, other: &AggregatorState) -> Result<(), AggregatorError> {
        if self.config != other.config {
            return Err(AggregatorError::ConfigMismatch);
        }
        let k = self.config.k;
        self.total_positions += other.total_positions;
        self.last_doc = match (self.last_doc, other.last_doc) {
            (Some(a), Some(b)) => Some(a.max(b)),
            (a, b) => a.or(b),
        };
        for (idx, (mine, theirs)) in self.cells.iter_mut().zip(&other.cells).enumerate() {
            let combo = SignCombo::ALL[idx % 4];
            mine.count += theirs.count;
            for w in Intermediate::ALL {
                let (a, b) = (&mut mine.inter[w.index()], &theirs.inter[w.index()]);
                a.sum.merge(&b.sum);
                a.min = total_min(a.min, b.min);
                a.max = total_max(a.max, b.max);
                let dir = combo.direction(w);
                for e in &b.examples {
                    a.offer(*e, dir, k);
                }
            }
        }
        Ok(())
    }

    pub fn neuron_record(&self, layer: usize, neuron: usize) -> NeuronRecord {
        let idx = layer * self.config.d_mlp + neuron;
        let combos = core::array::from_fn(|c| {
            let cell = &self.cells[idx * 4 + c];
            let has = cell.count > 0;
            ComboStats {
                count: cell.count,
                stats: core::array::from_fn(|w| {
                    let acc = &cell.inter[w];
                    let sum = acc.sum.value();
                    IntermediateStats {
                        sum,
                        mean: has.then(|| sum / cell.count as f64),
                        min: has.then_some(acc.min),
                        max: has.then_some(acc.max),
                        examples: acc.examples.clone(),
                    }
                }),
            }
        });
        NeuronRecord {
            layer,
            neuron,
            combos,
            total_observations: self.total_positions,
        }
    }

    /// One record per `(layer, neuron)`, in layer-then-neuron order.
    pub fn finalize(&self) -> Vec<NeuronRecord> {
        let mut out = Vec::with_capacity(self.n_neurons());
        for layer in 0..self.config.n_layers {
            for neuron in 0..self.config.d_mlp {
                out.push(self.neuron_record(layer, neuron));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateStats {
    /// Exact sum rounded once to `f64`.
    pub sum: f64,
    /// `None` when the combo never occurred.
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub examples: Vec<ExampleRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComboStats {
    pub count: u64,
    /// Indexed by [`Intermediate::index`].
    pub stats: [IntermediateStats; 4],
}

impl ComboStats {
    pub fn get(&self, which: Intermediate) -> &IntermediateStats {
        &self.stats[which.index()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRecord {
    pub layer: usize,
    pub neuron: usize,
    /// Indexed by [`SignCombo::index`].
    pub combos: [ComboStats; 4],
    pub total_observations: u64,
}

impl NeuronRecord {
    pub fn combo(&self, combo: SignCombo) -> &ComboStats {
        &self.combos[combo.index()]
    }

    /// `count / total_observations`, or 0 when nothing was observed.
    pub fn freq(&self, combo: SignCombo) -> f64 {
        if self.total_observations == 0 {
            0.0
        } else {
            self.combo(combo).count as f64 / self.total_observations as f64
        }
    }
}
