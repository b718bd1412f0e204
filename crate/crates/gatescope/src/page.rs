//! Per-neuron page bundles for the viewer.
//!
//! A bundle directory contains `index.json` and `pages/L{layer}_N{neuron}.json`.
//! Each page carries the neuron's summary table and, for all 16
//! (combo, intermediate) lists, display windows around the recorded examples
//! with the values of all four intermediates at every shown token. The
//! values are recomputed by running the model over the example's document,
//! and the value at the token of interest must reproduce the recorded one
//! bit for bit.

use std::collections::{BTreeSet, HashMap};
use std::io;
use std::path::{Path, PathBuf};

use gatescope_core::activation::{Intermediate, NeuronActivation, SignCombo};
use gatescope_core::corpus::Corpus;
use gatescope_core::model::{collect_doc, ModelError, WeightSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetManifest, DatasetRow};

pub const DEFAULT_CONTEXT_LEFT: usize = 64;
/// Tokens shown after the token of interest.
pub const CONTEXT_RIGHT: usize = 2;
pub const INDEX_FILE: &str = "index.json";
pub const PAGES_DIR: &str = "pages";

#[derive(Debug, Error)]
pub enum PageError {
    #[error("neuron {layer}.{neuron}: documents not in corpus: {missing:?}")]
    MissingDocs {
        layer: usize,
        neuron: usize,
        missing: Vec<u64>,
    },
    #[error("neuron {layer}.{neuron} does not exist in the model")]
    UnknownNeuron { layer: usize, neuron: usize },
    #[error("doc {doc_id}: {source}")]
    Model {
        doc_id: u64,
        #[source]
        source: ModelError,
    },
    #[error("doc {doc_id}: token position {pos} outside a {len}-token document")]
    Position { doc_id: u64, pos: u32, len: usize },
    #[error(
        "neuron {layer}.{neuron}, {combo} {intermediate} example at doc {doc_id} pos {pos}: \
         recorded {recorded:e}, recomputed {recomputed:e}"
    )]
    Inconsistent {
        layer: usize,
        neuron: usize,
        combo: &'static str,
        intermediate: &'static str,
        doc_id: u64,
        pos: u32,
        recorded: f64,
        recomputed: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Json { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatCell {
    pub intermediate: Intermediate,
    pub max: Option<f64>,
    pub min: Option<f64>,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryColumn {
    pub combo: SignCombo,
    pub freq: f64,
    pub stats: Vec<StatCell>,
}

/// Per-token values of the four intermediates across a display window.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TokenValues {
    pub hook_post: Vec<f64>,
    pub hook_pre_linear: Vec<f64>,
    pub hook_pre: Vec<f64>,
    pub swish: Vec<f64>,
}

impl TokenValues {
    pub fn get(&self, which: Intermediate) -> &[f64] {
        match which {
            Intermediate::HookPost => &self.hook_post,
            Intermediate::HookPreLinear => &self.hook_pre_linear,
            Intermediate::HookPre => &self.hook_pre,
            Intermediate::Swish => &self.swish,
        }
    }

    fn push(&mut self, a: &NeuronActivation) {
        self.hook_post.push(a.get(Intermediate::HookPost));
        self.hook_pre_linear.push(a.get(Intermediate::HookPreLinear));
        self.hook_pre.push(a.get(Intermediate::HookPre));
        self.swish.push(a.get(Intermediate::Swish));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayExample {
    pub doc_id: u64,
    pub token_pos: u32,
    /// The value recorded in the dataset list.
    pub value: f64,
    /// Document position of the first shown token.
    pub start: usize,
    /// Index of the token of interest within the window.
    pub focus: usize,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub values: TokenValues,
    /// Sign combination at every shown token.
    pub combos: Vec<SignCombo>,
    /// True where the token's combo is the section's combo.
    pub combo_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSection {
    pub combo: SignCombo,
    pub intermediate: Intermediate,
    pub examples: Vec<DisplayExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronPage {
    pub id: String,
    pub model_id: String,
    pub corpus_id: String,
    pub layer: usize,
    pub neuron: usize,
    pub total_tokens: u64,
    pub context_left: usize,
    /// One column per combo in canonical order.
    pub summary: Vec<SummaryColumn>,
    /// Combo-major, intermediates in dataset column order.
    pub sections: Vec<ExampleSection>,
}

/// Inclusive display window `[max(0, pos - left), min(pos + 2, len - 1)]`.
pub fn example_window(pos: usize, len: usize, context_left: usize) -> (usize, usize) {
    (pos.saturating_sub(context_left), (pos + CONTEXT_RIGHT).min(len - 1))
}

pub fn page_id(layer: usize, neuron: usize) -> String {
    format!("L{layer}_N{neuron}")
}

fn summary_of(row: &DatasetRow) -> Vec<SummaryColumn> {
    SignCombo::ALL
        .iter()
        .map(|&c| SummaryColumn {
            combo: c,
            freq: row.combo(c).freq,
            stats: Intermediate::ALL
                .iter()
                .map(|&i| {
                    let s = row.stat(c, i);
                    StatCell {
                        intermediate: i,
                        max: s.max,
                        min: s.min,
                        mean: s.mean,
                    }
                })
                .collect(),
        })
        .collect()
}

pub fn build_neuron_page(
    row: &DatasetRow,
    manifest: &DatasetManifest,
    corpus: &Corpus,
    ws: &WeightSet,
    context_left: usize,
) -> Result<NeuronPage, PageError> {
    let (layer, neuron) = (row.layer, row.neuron);
    let cfg = &ws.config;
    if layer >= cfg.n_layers || neuron >= cfg.d_mlp {
        return Err(PageError::UnknownNeuron { layer, neuron });
    }

    let referenced: BTreeSet<u64> = row
        .combos
        .iter()
        .flat_map(|c| c.stats.iter())
        .flat_map(|s| s.examples.iter().map(|e| e.doc_id))
        .collect();
    let missing: Vec<u64> = referenced.iter().copied().filter(|&d| corpus.doc(d).is_none()).collect();
    if !missing.is_empty() {
        return Err(PageError::MissingDocs {
            layer,
            neuron,
            missing,
        });
    }

    // One forward pass per referenced document.
    let mut acts: HashMap<u64, Vec<NeuronActivation>> = HashMap::new();
    for &doc_id in &referenced {
        let doc = corpus.doc(doc_id).expect("checked above");
        let da = collect_doc(ws, doc).map_err(|source| PageError::Model { doc_id, source })?;
        let per_doc = (0..da.n_tokens)
            .map(|p| {
                let [g, i] = da.pair(cfg.n_layers, cfg.d_mlp, p, layer, neuron);
                NeuronActivation::compute(cfg.activation, f64::from(g), f64::from(i))
            })
            .collect();
        acts.insert(doc_id, per_doc);
    }

    let mut sections = Vec::with_capacity(16);
    for combo in SignCombo::ALL {
        for which in Intermediate::ALL {
            let mut examples = Vec::new();
            for e in &row.stat(combo, which).examples {
                let doc = corpus.doc(e.doc_id).expect("checked above");
                let a = &acts[&e.doc_id];
                let pos = e.token_pos as usize;
                if pos >= a.len() {
                    return Err(PageError::Position {
                        doc_id: e.doc_id,
                        pos: e.token_pos,
                        len: a.len(),
                    });
                }
                let recomputed = a[pos].get(which);
                if recomputed.to_bits() != e.value.to_bits() || a[pos].combo() != combo {
                    return Err(PageError::Inconsistent {
                        layer,
                        neuron,
                        combo: combo.as_str(),
                        intermediate: which.as_str(),
                        doc_id: e.doc_id,
                        pos: e.token_pos,
                        recorded: e.value,
                        recomputed,
                    });
                }
                let (lo, hi) = example_window(pos, a.len(), context_left);
                let mut values = TokenValues::default();
                for x in &a[lo..=hi] {
                    values.push(x);
                }
                let combos: Vec<SignCombo> = a[lo..=hi].iter().map(|x| x.combo()).collect();
                examples.push(DisplayExample {
                    doc_id: e.doc_id,
                    token_pos: e.token_pos,
                    value: e.value,
                    start: lo,
                    focus: pos - lo,
                    tokens: doc.tokens[lo..=hi].iter().map(|&t| corpus.token_str(t)).collect(),
                    token_ids: doc.tokens[lo..=hi].to_vec(),
                    values,
                    combo_mask: combos.iter().map(|&c| c == combo).collect(),
                    combos,
                });
            }
            sections.push(ExampleSection {
                combo,
                intermediate: which,
                examples,
            });
        }
    }

    Ok(NeuronPage {
        id: page_id(layer, neuron),
        model_id: manifest.model_id.clone(),
        corpus_id: manifest.corpus_id.clone(),
        layer,
        neuron,
        total_tokens: manifest.total_tokens,
        context_left,
        summary: summary_of(row),
        sections,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub layer: usize,
    pub neuron: usize,
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PageIndex {
    pub pages: Vec<IndexEntry>,
}

impl PageIndex {
    /// Inserts or replaces the entry for `page`, keeping (layer, neuron) order.
    pub fn upsert(&mut self, page: &NeuronPage) {
        self.pages.retain(|e| e.id != page.id);
        self.pages.push(IndexEntry {
            id: page.id.clone(),
            layer: page.layer,
            neuron: page.neuron,
            model_id: page.model_id.clone(),
        });
        self.pages.sort_by_key(|e| (e.layer, e.neuron));
    }
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("page data serializes");
    s.push('\n');
    s
}

pub fn page_json(page: &NeuronPage) -> String {
    to_pretty(page)
}

pub fn page_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(PAGES_DIR).join(format!("{id}.json"))
}

pub fn read_index(dir: &Path) -> Result<PageIndex, PageError> {
    let path = dir.join(INDEX_FILE);
    match std::fs::read_to_string(&path) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| PageError::Json {
            path,
            message: e.to_string(),
        }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(PageIndex::default()),
        Err(source) => Err(PageError::Io { path, source }),
    }
}

/// Writes the page files and updates `index.json` in `dir`.
pub fn write_pages(dir: &Path, pages: &[NeuronPage]) -> Result<(), PageError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| PageError::Io { path, source }
    };
    let pages_dir = dir.join(PAGES_DIR);
    std::fs::create_dir_all(&pages_dir).map_err(io_err(&pages_dir))?;
    let mut index = read_index(dir)?;
    for page in pages {
        let p = page_path(dir, &page.id);
        std::fs::write(&p, page_json(page)).map_err(io_err(&p))?;
        index.upsert(page);
    }
    let p = dir.join(INDEX_FILE);
    std::fs::write(&p, to_pretty(&index)).map_err(io_err(&p))
}
