//! File formats, pipelines, the command-line tool and the page server built
//! on `gatescope-core`.
//!
//! - [`weights`], tensor archive loading and saving.
//! - [`dump`], the binary activation stream format.
//! - [`corpus_io`], corpus directories.
//! - [`dataset`], the line-delimited activation dataset.
//! - [`pipeline`], sharded aggregation over a corpus or a dump.
//! - [`page`], per-neuron page bundles.
//! - [`serve`], HTTP service for the viewer.
//! - [`cli`], subcommands.

pub mod cli;
pub mod corpus_io;
pub mod dataset;
pub mod dump;
pub mod page;
pub mod pipeline;
pub mod serve;
pub mod weights;
