//! Deterministic synthetic models for tests and demos.
//!
//! The "again" fixture is a one-layer model with an engineered neuron whose
//! gate and in weights both point along a unit feature direction `u` (read:
//! "minus *again*") and whose output weight is `-u`, which is also the
//! unembedding row of the token `again`. The token `once` is embedded with a
//! negative projection onto `u`, every other token with a positive one, and
//! attention is scaled down so the MLP input at a position is essentially its
//! own normalized embedding. The engineered neuron therefore lands in
//! `gate-_in-` exactly at the `once` positions, where it writes a positive
//! multiple of the `again` unembedding into the residual stream.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::activation::ActivationKind;
use crate::corpus::{Corpus, CorpusManifest, CorpusSpec, TokenizedDoc};
use crate::model::{LayerWeights, Matrix, ModelConfig, WeightSet};
use crate::rng::SeededRng;

pub const PREFIX_TOKEN: u32 = 0;
pub const ONCE_TOKEN: u32 = 1;
pub const AGAIN_TOKEN: u32 = 2;
/// Index of the engineered neuron in layer 0.
pub const AGAIN_NEURON: usize = 2;
/// Scale of the attention output projection.
pub const ATTN_OUT_SCALE: f64 = 0.02;

const WORDS: [&str; 32] = [
    "<|endoftext|>", " once", " again", " the", " door", " opened", " and", " we",
    " walked", " in", " it", " rained", " later", " that", " day", " she",
    " said", " hello", " meanwhile", " volcano", " body", " often", " instead", " river",
    " light", " small", " house", " ran", " home", " cold", " bright", ".",
];

#[derive(Debug, Clone)]
pub struct AgainFixture {
    pub weights: WeightSet,
    pub config: ModelConfig,
    pub corpus: Corpus,
    /// Unit feature direction; `w_gate = w_in = u`, `w_out = -u`.
    pub feature: Vec<f64>,
    /// Signed projection of every token embedding onto `feature`.
    pub token_projection: Vec<f64>,
    /// `(doc_id, token_pos)` of every `once` token, i.e. every crafted
    /// negative-projection position.
    pub negative_positions: Vec<(u64, u32)>,
}

impl AgainFixture {
    pub fn neuron(&self) -> usize {
        AGAIN_NEURON
    }
}

pub fn fixture_config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        d_model: 16,
        d_mlp: 4,
        n_heads: 2,
        vocab_size: 32,
        activation: ActivationKind::Swiglu,
        norm_eps: 1e-6,
        rope_theta: 10_000.0,
    }
}

fn unit_vector(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = libm::sqrt(v.iter().map(|x| x * x).sum());
    v.into_iter().map(|x| x / n).collect()
}

pub fn make_again_fixture(seed: u64) -> AgainFixture {
    let config = fixture_config();
    let dm = config.d_model;
    let mut rng = SeededRng::new(seed);
    let u = unit_vector(&mut rng, dm);

    // Embeddings: a random component orthogonal to u plus a chosen projection.
    let mut token_projection = vec![0.0; config.vocab_size];
    let mut embed = Matrix::zeros(config.vocab_size, dm);
    for (t, proj) in token_projection.iter_mut().enumerate() {
        let mut r: Vec<f64> = (0..dm).map(|_| rng.normal()).collect();
        let along: f64 = r.iter().zip(&u).map(|(a, b)| a * b).sum();
        for (x, ui) in r.iter_mut().zip(&u) {
            *x -= along * ui;
        }
        let s = if t as u32 == ONCE_TOKEN {
            -1.5
        } else {
            rng.uniform(0.5, 1.5)
        };
        *proj = s;
        for (x, ui) in r.iter_mut().zip(&u) {
            *x += s * ui;
        }
        embed.row_mut(t).copy_from_slice(&r);
    }

    let mut unembed = Matrix::from_fn(config.vocab_size, dm, |_, _| rng.normal() * 0.25);
    for (x, ui) in unembed.row_mut(AGAIN_TOKEN as usize).iter_mut().zip(&u) {
        *x = -ui;
    }

    let small = 0.3 / libm::sqrt(dm as f64);
    let attn_q = Matrix::from_fn(dm, dm, |_, _| rng.normal() * small);
    let attn_k = Matrix::from_fn(dm, dm, |_, _| rng.normal() * small);
    let attn_v = Matrix::identity(dm);
    let mut attn_o = Matrix::identity(dm);
    for i in 0..dm {
        attn_o.set(i, i, ATTN_OUT_SCALE);
    }

    let s_in = 1.0 / libm::sqrt(dm as f64);
    let s_out = 1.0 / libm::sqrt(config.d_mlp as f64);
    let mut w_gate = Matrix::from_fn(config.d_mlp, dm, |_, _| rng.normal() * s_in);
    let mut w_in = Matrix::from_fn(config.d_mlp, dm, |_, _| rng.normal() * s_in);
    let mut w_out = Matrix::from_fn(dm, config.d_mlp, |_, _| rng.normal() * s_out);
    w_gate.row_mut(AGAIN_NEURON).copy_from_slice(&u);
    w_in.row_mut(AGAIN_NEURON).copy_from_slice(&u);
    for (i, ui) in u.iter().enumerate() {
        w_out.set(i, AGAIN_NEURON, -ui);
    }

    let weights = WeightSet {
        config: config.clone(),
        embed,
        unembed,
        final_norm: vec![1.0; dm],
        layers: vec![LayerWeights {
            attn_q,
            attn_k,
            attn_v,
            attn_o,
            norm1: vec![1.0; dm],
            norm2: vec![1.0; dm],
            w_gate,
            w_in,
            w_out,
        }],
    };

    // 12 documents with exactly one " once" (followed by " again" when there
    // is room), then 2 without.
    const N_DOCS: u64 = 14;
    const WITH_ONCE: u64 = 12;
    let filler: Vec<u32> = (3..config.vocab_size as u32).collect();
    let mut docs = Vec::new();
    let mut texts = Vec::new();
    let mut negative_positions = Vec::new();
    for doc_id in 0..N_DOCS {
        let len = 6 + rng.below(14) as usize;
        let mut tokens = vec![PREFIX_TOKEN];
        for _ in 1..len {
            tokens.push(filler[rng.below(filler.len() as u64) as usize]);
        }
        if doc_id < WITH_ONCE {
            let pos = 1 + rng.below(len as u64 - 1) as usize;
            tokens[pos] = ONCE_TOKEN;
            if pos + 1 < len {
                tokens[pos + 1] = AGAIN_TOKEN;
            }
            negative_positions.push((doc_id, pos as u32));
        }
        texts.push(tokens[1..].iter().map(|&t| WORDS[t as usize]).collect::<String>());
        docs.push(TokenizedDoc { doc_id, tokens });
    }
    let total_tokens: u64 = docs.iter().map(|d| d.tokens.len() as u64).sum();
    let corpus = Corpus {
        manifest: CorpusManifest {
            source: alloc::format!("fixture:again-neuron:{seed}"),
            spec: CorpusSpec {
                token_budget: total_tokens,
                max_doc_tokens: 32,
                prefix_token: PREFIX_TOKEN,
                seed,
            },
            n_docs: N_DOCS,
            total_tokens,
            budget_reached: true,
            vocab: Some(WORDS.iter().map(|w| String::from(*w)).collect()),
        },
        source_index: (0..N_DOCS).collect(),
        docs,
        texts,
    };

    AgainFixture {
        weights,
        config,
        corpus,
        feature: u,
        token_projection,
        negative_positions,
    }
}
