//! Binary activation dump.
//!
//! Layout, little-endian, no padding:
//!
//! ```text
//! header   "GLUA" | version u32 = 1 | n_layers u32 | d_mlp u32 | activation u8
//! block*   doc_id u64 | n_tokens u32 | n_tokens × n_layers × d_mlp × (x_gate f32, x_in f32)
//! ```
//!
//! Pairs are position-major, then layer, then neuron, which is exactly the
//! layout of [`DocActivations::pairs`].

use std::io::{self, Read, Write};

use gatescope_core::activation::ActivationKind;
use gatescope_core::aggregator::DocActivations;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"GLUA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 17;
pub const BLOCK_HEADER_LEN: u64 = 12;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("offset {offset}: {message}")]
    Parse { offset: u64, message: String },
    #[error("offset {offset}: truncated block (last complete doc_id: {last_doc})")]
    Truncated { offset: u64, last_doc: String },
    #[error("doc {doc_id}: {message}")]
    Shape { doc_id: u64, message: String },
    #[error("doc {doc_id}, position {position}, layer {layer}, neuron {neuron}: non-finite value")]
    NonFinite {
        doc_id: u64,
        position: usize,
        layer: usize,
        neuron: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub n_layers: u32,
    pub d_mlp: u32,
    pub activation: ActivationKind,
}

impl DumpHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(&MAGIC);
        b[4..8].copy_from_slice(&VERSION.to_le_bytes());
        b[8..12].copy_from_slice(&self.n_layers.to_le_bytes());
        b[12..16].copy_from_slice(&self.d_mlp.to_le_bytes());
        b[16] = self.activation.code();
        b
    }

    fn pairs_per_token(&self) -> usize {
        self.n_layers as usize * self.d_mlp as usize
    }
}

fn check_doc(header: &DumpHeader, doc: &DocActivations) -> Result<(), DumpError> {
    let per = header.pairs_per_token();
    if doc.pairs.len() != doc.n_tokens * per {
        return Err(DumpError::Shape {
            doc_id: doc.doc_id,
            message: format!(
                "{} pairs for {} tokens, expected {}",
                doc.pairs.len(),
                doc.n_tokens,
                doc.n_tokens * per
            ),
        });
    }
    if u32::try_from(doc.n_tokens).is_err() {
        return Err(DumpError::Shape {
            doc_id: doc.doc_id,
            message: "more than u32::MAX tokens".into(),
        });
    }
    if let Some(i) = doc.pairs.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
        let d = header.d_mlp as usize;
        return Err(DumpError::NonFinite {
            doc_id: doc.doc_id,
            position: i / per,
            layer: (i % per) / d,
            neuron: i % d,
        });
    }
    Ok(())
}

/// Streaming writer. A block is validated in full before any of it is
/// written, so a rejected doc leaves the stream ending at the previous block.
pub struct DumpWriter<W: Write> {
    inner: W,
    header: DumpHeader,
    buf: Vec<u8>,
}

impl<W: Write> DumpWriter<W> {
    pub fn new(mut inner: W, header: DumpHeader) -> Result<Self, DumpError> {
        if header.n_layers == 0 || header.d_mlp == 0 {
            return Err(DumpError::Parse {
                offset: 8,
                message: "n_layers and d_mlp must be at least 1".into(),
            });
        }
        inner.write_all(&header.to_bytes())?;
        Ok(DumpWriter {
            inner,
            header,
            buf: Vec::new(),
        })
    }

    pub fn write_doc(&mut self, doc: &DocActivations) -> Result<(), DumpError> {
        check_doc(&self.header, doc)?;
        self.buf.clear();
        self.buf.extend_from_slice(&doc.doc_id.to_le_bytes());
        self.buf.extend_from_slice(&(doc.n_tokens as u32).to_le_bytes());
        for [g, i] in &doc.pairs {
            self.buf.extend_from_slice(&g.to_le_bytes());
            self.buf.extend_from_slice(&i.to_le_bytes());
        }
        self.inner.write_all(&self.buf)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, DumpError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub fn write_dump<W: Write, I>(sink: W, header: DumpHeader, docs: I) -> Result<W, DumpError>
where
    I: IntoIterator<Item = DocActivations>,
{
    let mut w = DumpWriter::new(sink, header)?;
    for d in docs {
        w.write_doc(&d)?;
    }
    w.finish()
}

/// Fills `buf` completely; returns how many bytes were read before EOF.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// Single-pass reader; holds one doc block in memory at a time.
pub struct DumpReader<R: Read> {
    inner: R,
    header: DumpHeader,
    offset: u64,
    last_doc: Option<u64>,
    done: bool,
}

impl<R: Read> DumpReader<R> {
    pub fn new(mut inner: R) -> Result<Self, DumpError> {
        let mut b = [0u8; HEADER_LEN as usize];
        let n = read_full(&mut inner, &mut b)?;
        if n < 4 || b[0..4] != MAGIC {
            return Err(DumpError::Parse {
                offset: 0,
                message: "bad magic, expected \"GLUA\"".into(),
            });
        }
        if n < HEADER_LEN as usize {
            return Err(DumpError::Parse {
                offset: n as u64,
                message: "truncated header".into(),
            });
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(DumpError::Parse {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let (n_layers, d_mlp) = (u32_at(8), u32_at(12));
        if n_layers == 0 || d_mlp == 0 {
            return Err(DumpError::Parse {
                offset: 8,
                message: "n_layers and d_mlp must be at least 1".into(),
            });
        }
        let activation = ActivationKind::from_code(b[16]).ok_or_else(|| DumpError::Parse {
            offset: 16,
            message: format!("unknown activation code {}", b[16]),
        })?;
        Ok(DumpReader {
            inner,
            header: DumpHeader {
                n_layers,
                d_mlp,
                activation,
            },
            offset: HEADER_LEN,
            last_doc: None,
            done: false,
        })
    }

    pub fn header(&self) -> &DumpHeader {
        &self.header
    }

    fn truncated(&self, at: u64) -> DumpError {
        DumpError::Truncated {
            offset: at,
            last_doc: self.last_doc.map_or_else(|| "none".into(), |d| d.to_string()),
        }
    }

    fn next_doc(&mut self) -> Result<Option<DocActivations>, DumpError> {
        let start = self.offset;
        let mut bh = [0u8; BLOCK_HEADER_LEN as usize];
        match read_full(&mut self.inner, &mut bh)? {
            0 => return Ok(None),
            n if n < bh.len() => return Err(self.truncated(start + n as u64)),
            _ => {}
        }
        let doc_id = u64::from_le_bytes(bh[0..8].try_into().unwrap());
        let n_tokens = u32::from_le_bytes(bh[8..12].try_into().unwrap()) as usize;
        let len = (n_tokens as u64)
            .checked_mul(self.header.pairs_per_token() as u64 * 8)
            .ok_or_else(|| DumpError::Parse {
                offset: start + 8,
                message: format!("doc {doc_id}: n_tokens {n_tokens} overflows the payload size"),
            })?;
        // Grows with the bytes actually present, so a corrupt length cannot
        // force a huge allocation up front.
        let mut payload = Vec::new();
        (&mut self.inner).take(len).read_to_end(&mut payload)?;
        if (payload.len() as u64) < len {
            return Err(self.truncated(start + BLOCK_HEADER_LEN + payload.len() as u64));
        }
        let pairs: Vec<[f32; 2]> = payload
            .chunks_exact(8)
            .map(|c| {
                [
                    f32::from_le_bytes(c[0..4].try_into().unwrap()),
                    f32::from_le_bytes(c[4..8].try_into().unwrap()),
                ]
            })
            .collect();
        let doc = DocActivations {
            doc_id,
            n_tokens,
            pairs,
        };
        check_doc(&self.header, &doc)?;
        self.offset = start + BLOCK_HEADER_LEN + payload.len() as u64;
        self.last_doc = Some(doc_id);
        Ok(Some(doc))
    }
}

impl<R: Read> Iterator for DumpReader<R> {
    type Item = Result<DocActivations, DumpError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let r = self.next_doc();
        if !matches!(r, Ok(Some(_))) {
            self.done = true;
        }
        r.transpose()
    }
}

pub fn read_dump<R: Read>(source: R) -> Result<(DumpHeader, DumpReader<R>), DumpError> {
    let r = DumpReader::new(source)?;
    Ok((*r.header(), r))
}
