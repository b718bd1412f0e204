//! Corpus or dump → aggregator, sharded across threads.
//!
//! Documents are split into contiguous shards, each shard is aggregated into
//! its own state, and the states are merged in shard order. Merging is exact,
//! so the result does not depend on the shard count.

use std::io::Read;

use gatescope_core::aggregator::{AggregatorConfig, AggregatorError, AggregatorState};
use gatescope_core::corpus::Corpus;
use gatescope_core::model::{collect_doc, ModelError, WeightSet};
use rayon::prelude::*;
use thiserror::Error;

use crate::dump::{DumpError, DumpHeader, DumpReader};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("doc {doc_id}: {source}")]
    Model {
        doc_id: u64,
        #[source]
        source: ModelError,
    },
    #[error(transparent)]
    Aggregate(#[from] AggregatorError),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("dump header {found:?} does not match the expected model shape {expected:?}")]
    DumpShape { expected: DumpHeader, found: DumpHeader },
    #[error("shard count must be at least 1")]
    Shards,
}

/// Contiguous, near-equal split of `0..n` into `shards` ranges.
pub fn shard_ranges(n: usize, shards: usize) -> Vec<std::ops::Range<usize>> {
    (0..shards)
        .map(|s| (n * s / shards)..(n * (s + 1) / shards))
        .collect()
}

fn merge_all(states: Vec<AggregatorState>) -> Result<AggregatorState, PipelineError> {
    let mut it = states.into_iter();
    let mut acc = it.next().ok_or(PipelineError::Shards)?;
    for s in it {
        acc.merge_from(&s)?;
    }
    Ok(acc)
}

/// Runs the model over every document of `corpus`.
pub fn aggregate_corpus(
    ws: &WeightSet,
    corpus: &Corpus,
    k: usize,
    shards: usize,
) -> Result<AggregatorState, PipelineError> {
    if shards == 0 {
        return Err(PipelineError::Shards);
    }
    let cfg = AggregatorConfig {
        k,
        n_layers: ws.config.n_layers,
        d_mlp: ws.config.d_mlp,
        activation: ws.config.activation,
    };
    AggregatorState::new(cfg.clone())?;
    let states = shard_ranges(corpus.docs.len(), shards)
        .into_par_iter()
        .map(|range| {
            let mut st = AggregatorState::new(cfg.clone())?;
            for doc in &corpus.docs[range] {
                let acts = collect_doc(ws, doc).map_err(|source| PipelineError::Model {
                    doc_id: doc.doc_id,
                    source,
                })?;
                st.observe_doc(&acts)?;
            }
            Ok(st)
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    merge_all(states)
}

/// Docs read from the dump per parallel round.
const DUMP_CHUNK: usize = 256;

/// Streams a dump. Documents are read sequentially in chunks; within a chunk
/// each shard observes a contiguous slice in parallel.
pub fn aggregate_dump<R: Read>(
    reader: DumpReader<R>,
    k: usize,
    shards: usize,
    expected: Option<DumpHeader>,
) -> Result<AggregatorState, PipelineError> {
    if shards == 0 {
        return Err(PipelineError::Shards);
    }
    let header = *reader.header();
    if let Some(expected) = expected {
        if expected != header {
            return Err(PipelineError::DumpShape {
                expected,
                found: header,
            });
        }
    }
    let cfg = AggregatorConfig {
        k,
        n_layers: header.n_layers as usize,
        d_mlp: header.d_mlp as usize,
        activation: header.activation,
    };
    let mut states = (0..shards)
        .map(|_| AggregatorState::new(cfg.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = AggregatorState::new(cfg.clone())?;
    let mut last_doc: Option<u64> = None;
    let mut reader = reader.peekable();
    while reader.peek().is_some() {
        let chunk = reader
            .by_ref()
            .take(DUMP_CHUNK)
            .collect::<Result<Vec<_>, DumpError>>()?;
        for d in &chunk {
            if let Some(last) = last_doc.filter(|&l| d.doc_id <= l) {
                return Err(AggregatorError::DocOrder { doc_id: d.doc_id, last }.into());
            }
            last_doc = Some(d.doc_id);
        }
        let ranges = shard_ranges(chunk.len(), shards);
        states
            .par_iter_mut()
            .zip(ranges)
            .try_for_each(|(st, range)| {
                chunk[range].iter().try_for_each(|d| st.observe_doc(d))
            })?;
        // Shard states of one chunk cover consecutive doc ranges; fold them
        // into the running total in order, then reuse them.
        for st in states.iter_mut() {
            total.merge_from(st)?;
            *st = AggregatorState::new(cfg.clone())?;
        }
    }
    Ok(total)
}
