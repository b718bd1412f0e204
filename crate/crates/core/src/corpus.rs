//! Token-budgeted corpus sampling.
//!
//! Documents are drawn in a seed-determined shuffled order, each gets the
//! prefix token prepended and is truncated to `max_doc_tokens` (prefix
//! included), and sampling stops with the first document that brings the
//! total to the budget or beyond. That document is kept, so the total lands in
//! `[token_budget, token_budget + max_doc_tokens - 1]`.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorpusError {
    #[error("invalid corpus spec: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub token_budget: u64,
    pub max_doc_tokens: usize,
    /// Prepended to every document and counted toward both limits.
    pub prefix_token: u32,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.max_doc_tokens < 2 {
            return Err(CorpusError::Config("max_doc_tokens must be at least 2"));
        }
        if self.token_budget < self.max_doc_tokens as u64 {
            return Err(CorpusError::Config("token_budget must be at least max_doc_tokens"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub doc_id: u64,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub source: String,
    pub spec: CorpusSpec,
    pub n_docs: u64,
    pub total_tokens: u64,
    /// False when the source ran dry before the budget was met.
    pub budget_reached: bool,
    /// Token strings, when the tokenizer is not the byte-level one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

/// A sampled corpus. `docs[i].doc_id == i`; `source_index[i]` is the
/// document's position in the original source and `texts[i]` its text.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub docs: Vec<TokenizedDoc>,
    pub texts: Vec<String>,
    pub source_index: Vec<u64>,
}

impl Corpus {
    pub fn doc(&self, doc_id: u64) -> Option<&TokenizedDoc> {
        self.docs.get(usize::try_from(doc_id).ok()?).filter(|d| d.doc_id == doc_id)
    }

    /// Display string for one token.
    pub fn token_str(&self, token: u32) -> String {
        match &self.manifest.vocab {
            Some(v) => v
                .get(token as usize)
                .cloned()
                .unwrap_or_else(|| alloc::format!("<{token}>")),
            None => ByteTokenizer::token_str(token),
        }
    }
}

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Vec<u32>;
}

impl<F: Fn(&str) -> Vec<u32>> Tokenizer for F {
    fn encode(&self, text: &str) -> Vec<u32> {
        self(text)
    }
}

/// One token per UTF-8 byte; ids 0..=255. Id 256 is free for a prefix token.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = 257;
    pub const EOS: u32 = 256;

    pub fn token_str(token: u32) -> String {
        match token {
            0..=0x7f => String::from(char::from(token as u8)),
            0x80..=0xff => alloc::format!("<0x{token:02X}>"),
            Self::EOS => String::from("<|endoftext|>"),
            _ => alloc::format!("<{token}>"),
        }
    }
}

impl Tokenizer for ByteTokenizer {
    fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }
}

pub fn sample_corpus<I, T>(
    source: I,
    tokenizer: &T,
    spec: &CorpusSpec,
    source_id: &str,
) -> Result<Corpus, CorpusError>
where
    I: IntoIterator<Item = String>,
    T: Tokenizer + ?Sized,
{
    spec.validate()?;
    let texts: Vec<String> = source.into_iter().collect();
    let mut order: Vec<u64> = (0..texts.len() as u64).collect();
    SeededRng::new(spec.seed).shuffle(&mut order);

    let mut docs = Vec::new();
    let mut kept_texts = Vec::new();
    let mut source_index = Vec::new();
    let mut total = 0u64;
    for idx in order {
        if total >= spec.token_budget {
            break;
        }
        let text = &texts[idx as usize];
        let mut tokens = Vec::with_capacity(spec.max_doc_tokens);
        tokens.push(spec.prefix_token);
        tokens.extend(
            tokenizer
                .encode(text)
                .into_iter()
                .take(spec.max_doc_tokens - 1),
        );
        total += tokens.len() as u64;
        docs.push(TokenizedDoc {
            doc_id: docs.len() as u64,
            tokens,
        });
        kept_texts.push(text.clone());
        source_index.push(idx);
    }
    Ok(Corpus {
        manifest: CorpusManifest {
            source: source_id.into(),
            spec: spec.clone(),
            n_docs: docs.len() as u64,
            total_tokens: total,
            budget_reached: total >= spec.token_budget,
            vocab: None,
        },
        docs,
        texts: kept_texts,
        source_index,
    })
}
