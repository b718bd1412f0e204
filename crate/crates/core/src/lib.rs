//! Per-neuron activation statistics for transformer MLPs with gated
//! activation functions (SwiGLU, GEGLU).
//!
//! A gated neuron has two scalar pre-activations, `x_gate` and `x_in`, and
//! the signs of the two split every observation into four classes. This crate
//! holds the algorithmic side of the toolkit:
//!
//! - [`activation`]: gate functions, sign classification, intermediates.
//! - [`model`]: a micro-scale pre-norm decoder that emits `(x_gate, x_in)`
//!   pairs for every token, layer and neuron.
//! - [`aggregator`]: bounded-memory streaming statistics split by sign
//!   combination, with per-document deduplicated top-k examples.
//! - [`analysis`]: weight-space cosines and Pearson correlation.
//! - [`corpus`]: token-budgeted corpus sampling.
//! - [`fixtures`]: deterministic synthetic models used by tests.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, the CLI and the
//! page server live in the `gatescope` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod activation;
pub mod aggregator;
pub mod analysis;
pub mod corpus;
pub mod exact_sum;
pub mod fixtures;
pub mod model;
pub mod rng;
pub mod stats;

pub use activation::{
    classify_signs, gelu, glu_activation, swish, ActivationKind, Intermediate, MathError,
    NeuronActivation, SignCombo,
};
pub use aggregator::{
    AggregatorConfig, AggregatorError, AggregatorState, ComboStats, DocActivations, ExampleRef,
    IntermediateStats, NeuronRecord,
};
pub use analysis::{
    correlate_layer, cosine, gate_positive_freq, neuron_in_out_cosines, pearson, AnalysisError,
    CorrelationResult, GateFrequency,
};
pub use corpus::{sample_corpus, Corpus, CorpusError, CorpusManifest, CorpusSpec, TokenizedDoc};
pub use model::{
    forward_collect, mlp_forward, preprocess_weights, ActivationBatch, ActivationSink, LayerWeights,
    Matrix, ModelConfig, ModelError, WeightSet,
};
