//! On-disk corpus: `manifest.json`, `tokens.bin` and `texts.jsonl` in one
//! directory.
//!
//! `tokens.bin` holds, for every document in order, a little-endian `u32`
//! length followed by that many `u32` token ids. Document ids are positions
//! in this sequence. `texts.jsonl` keeps the original text of each document
//! with its index in the source.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use gatescope_core::corpus::{Corpus, CorpusManifest, TokenizedDoc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOKENS_FILE: &str = "tokens.bin";
pub const TEXTS_FILE: &str = "texts.jsonl";

#[derive(Debug, Error)]
pub enum CorpusIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Inconsistent { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusIoError + '_ {
    move |source| CorpusIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Serialize, Deserialize)]
struct TextLine {
    doc_id: u64,
    source_index: u64,
    text: String,
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<(), CorpusIoError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let p = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(&corpus.manifest).expect("manifest serializes");
    json.push('\n');
    std::fs::write(&p, json).map_err(io_err(&p))?;

    let p = dir.join(TOKENS_FILE);
    let mut w = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
    for d in &corpus.docs {
        let len = u32::try_from(d.tokens.len()).map_err(|_| CorpusIoError::Inconsistent {
            path: p.clone(),
            message: format!("doc {} longer than u32::MAX tokens", d.doc_id),
        })?;
        w.write_all(&len.to_le_bytes()).map_err(io_err(&p))?;
        for t in &d.tokens {
            w.write_all(&t.to_le_bytes()).map_err(io_err(&p))?;
        }
    }
    w.flush().map_err(io_err(&p))?;

    let p = dir.join(TEXTS_FILE);
    let mut w = BufWriter::new(File::create(&p).map_err(io_err(&p))?);
    for (i, text) in corpus.texts.iter().enumerate() {
        let line = TextLine {
            doc_id: i as u64,
            source_index: corpus.source_index.get(i).copied().unwrap_or(i as u64),
            text: text.clone(),
        };
        serde_json::to_writer(&mut w, &line).expect("text line serializes");
        w.write_all(b"\n").map_err(io_err(&p))?;
    }
    w.flush().map_err(io_err(&p))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest, CorpusIoError> {
    let p = dir.join(MANIFEST_FILE);
    let s = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    serde_json::from_str(&s).map_err(|e| CorpusIoError::Json {
        path: p,
        line: e.line(),
        message: e.to_string(),
    })
}

/// Streams the token file one document at a time.
pub struct TokenReader {
    inner: BufReader<File>,
    path: PathBuf,
    next_id: u64,
}

impl TokenReader {
    pub fn open(dir: &Path) -> Result<Self, CorpusIoError> {
        let path = dir.join(TOKENS_FILE);
        let f = File::open(&path).map_err(io_err(&path))?;
        Ok(TokenReader {
            inner: BufReader::new(f),
            path,
            next_id: 0,
        })
    }

    fn read_doc(&mut self) -> Result<Option<TokenizedDoc>, CorpusIoError> {
        let mut len = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match self.inner.read(&mut len[got..]) {
                Ok(0) => break,
                Ok(k) => got += k,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(io_err(&self.path)(e)),
            }
        }
        match got {
            0 => return Ok(None),
            4 => {}
            _ => return Err(self.truncated()),
        }
        let n = u32::from_le_bytes(len) as u64;
        let mut raw = Vec::new();
        (&mut self.inner)
            .take(n * 4)
            .read_to_end(&mut raw)
            .map_err(io_err(&self.path))?;
        if raw.len() as u64 != n * 4 {
            return Err(self.truncated());
        }
        let tokens = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let doc = TokenizedDoc {
            doc_id: self.next_id,
            tokens,
        };
        self.next_id += 1;
        Ok(Some(doc))
    }

    fn truncated(&self) -> CorpusIoError {
        CorpusIoError::Inconsistent {
            path: self.path.clone(),
            message: format!("truncated after {} complete docs", self.next_id),
        }
    }
}

impl Iterator for TokenReader {
    type Item = Result<TokenizedDoc, CorpusIoError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.read_doc().transpose()
    }
}

pub fn read_corpus(dir: &Path) -> Result<Corpus, CorpusIoError> {
    let manifest = read_manifest(dir)?;
    let docs = TokenReader::open(dir)?.collect::<Result<Vec<_>, _>>()?;
    let p = dir.join(TOKENS_FILE);
    if docs.len() as u64 != manifest.n_docs {
        return Err(CorpusIoError::Inconsistent {
            path: p,
            message: format!("{} docs, manifest says {}", docs.len(), manifest.n_docs),
        });
    }
    let total: u64 = docs.iter().map(|d| d.tokens.len() as u64).sum();
    if total != manifest.total_tokens {
        return Err(CorpusIoError::Inconsistent {
            path: p,
            message: format!("{total} tokens, manifest says {}", manifest.total_tokens),
        });
    }

    let mut texts = Vec::with_capacity(docs.len());
    let mut source_index = Vec::with_capacity(docs.len());
    let p = dir.join(TEXTS_FILE);
    if p.exists() {
        let r = BufReader::new(File::open(&p).map_err(io_err(&p))?);
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(io_err(&p))?;
            let t: TextLine = serde_json::from_str(&line).map_err(|e| CorpusIoError::Json {
                path: p.clone(),
                line: i + 1,
                message: e.to_string(),
            })?;
            texts.push(t.text);
            source_index.push(t.source_index);
        }
        if texts.len() != docs.len() {
            return Err(CorpusIoError::Inconsistent {
                path: p,
                message: format!("{} texts for {} docs", texts.len(), docs.len()),
            });
        }
    } else {
        texts.resize(docs.len(), String::new());
        source_index.extend(0..docs.len() as u64);
    }
    Ok(Corpus {
        manifest,
        docs,
        texts,
        source_index,
    })
}

/// Raw documents for sampling. A `.jsonl` file has one JSON object per line
/// with the text under `"text"`; any other file has one document per
/// non-empty line.
pub fn read_source_docs(path: &Path) -> Result<Vec<String>, CorpusIoError> {
    let r = BufReader::new(File::open(path).map_err(io_err(path))?);
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        if jsonl {
            let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| CorpusIoError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            let text = v.get("text").and_then(|t| t.as_str()).ok_or_else(|| CorpusIoError::Json {
                path: path.to_path_buf(),
                line: i + 1,
                message: "missing string field \"text\"".into(),
            })?;
            out.push(text.to_string());
        } else {
            out.push(line);
        }
    }
    Ok(out)
}
