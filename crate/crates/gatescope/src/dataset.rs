//! Line-delimited activation dataset.
//!
//! A dataset directory holds `dataset.jsonl`, one JSON object per neuron in
//! (layer, neuron) order, and `manifest.json`. Row fields, in order:
//!
//! ```text
//! layer, neuron,
//! for c in gate+_in+, gate+_in-, gate-_in+, gate-_in-:
//!     {c}_freq
//!     for i in hook_post, hook_pre_linear, hook_pre, swish:
//!         {c}_{i}_max, {c}_{i}_min, {c}_{i}_mean      number or null
//!         {c}_{i}_examples                            [[doc_id, token_pos, value], ...]
//! ```
//!
//! Frequencies are fractions of the manifest's `total_tokens`. Floats are
//! written in shortest round-trip form, so write → read → write is
//! byte-identical.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gatescope_core::activation::{ActivationKind, Intermediate, SignCombo};
use gatescope_core::aggregator::{ExampleRef, NeuronRecord};
use gatescope_core::analysis::{AnalysisError, GateFrequency};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub const ROWS_FILE: &str = "dataset.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT: &str = "gatescope-activation-dataset";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("line {line}, field \"{field}\": {message}")]
    Field {
        line: usize,
        field: String,
        message: String,
    },
    #[error("missing dataset manifest {0}")]
    MissingManifest(PathBuf),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub model_id: String,
    pub corpus_id: String,
    pub k: usize,
    /// Token positions observed; the denominator of every `_freq` field.
    pub total_tokens: u64,
    pub n_layers: usize,
    pub d_mlp: usize,
    pub activation: ActivationKind,
}

impl DatasetManifest {
    pub fn new(
        model_id: &str,
        corpus_id: &str,
        k: usize,
        total_tokens: u64,
        n_layers: usize,
        d_mlp: usize,
        activation: ActivationKind,
    ) -> Self {
        DatasetManifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            model_id: model_id.into(),
            corpus_id: corpus_id.into(),
            k,
            total_tokens,
            n_layers,
            d_mlp,
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StatRow {
    pub max: Option<f64>,
    pub min: Option<f64>,
    pub mean: Option<f64>,
    pub examples: Vec<ExampleRef>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComboRow {
    pub freq: f64,
    /// Indexed by [`Intermediate::index`].
    pub stats: [StatRow; 4],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetRow {
    pub layer: usize,
    pub neuron: usize,
    /// Indexed by [`SignCombo::index`].
    pub combos: [ComboRow; 4],
}

impl DatasetRow {
    pub fn from_record(r: &NeuronRecord) -> Self {
        let combos = SignCombo::ALL.map(|c| {
            let cs = r.combo(c);
            ComboRow {
                freq: r.freq(c),
                stats: Intermediate::ALL.map(|i| {
                    let s = cs.get(i);
                    StatRow {
                        max: s.max,
                        min: s.min,
                        mean: s.mean,
                        examples: s.examples.clone(),
                    }
                }),
            }
        });
        DatasetRow {
            layer: r.layer,
            neuron: r.neuron,
            combos,
        }
    }

    pub fn id(&self) -> String {
        format!("L{}_N{}", self.layer, self.neuron)
    }

    pub fn combo(&self, c: SignCombo) -> &ComboRow {
        &self.combos[c.index()]
    }

    pub fn stat(&self, c: SignCombo, i: Intermediate) -> &StatRow {
        &self.combos[c.index()].stats[i.index()]
    }

    pub fn to_json(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("layer".into(), json!(self.layer));
        m.insert("neuron".into(), json!(self.neuron));
        for c in SignCombo::ALL {
            let cr = self.combo(c);
            m.insert(format!("{}_freq", c.as_str()), json!(cr.freq));
            for i in Intermediate::ALL {
                let s = &cr.stats[i.index()];
                let p = format!("{}_{}", c.as_str(), i.as_str());
                m.insert(format!("{p}_max"), json!(s.max));
                m.insert(format!("{p}_min"), json!(s.min));
                m.insert(format!("{p}_mean"), json!(s.mean));
                let ex: Vec<Value> = s
                    .examples
                    .iter()
                    .map(|e| json!([e.doc_id, e.token_pos, e.value]))
                    .collect();
                m.insert(format!("{p}_examples"), Value::Array(ex));
            }
        }
        m
    }

    /// Parses one row; `line` is only used in error messages.
    pub fn from_json(v: &Value, line: usize) -> Result<Self, DatasetError> {
        let obj = v.as_object().ok_or(DatasetError::Json {
            line,
            message: "row is not a JSON object".into(),
        })?;
        let field_err = |field: &str, message: &str| DatasetError::Field {
            line,
            field: field.into(),
            message: message.into(),
        };
        let get = |field: &str| obj.get(field).ok_or_else(|| field_err(field, "missing"));
        let index = |field: &str| {
            get(field)?
                .as_u64()
                .and_then(|x| usize::try_from(x).ok())
                .ok_or_else(|| field_err(field, "expected a non-negative integer"))
        };
        let opt_num = |field: &str| match get(field)? {
            Value::Null => Ok(None),
            x => x
                .as_f64()
                .filter(|f| f.is_finite())
                .map(Some)
                .ok_or_else(|| field_err(field, "expected a number or null")),
        };

        let mut row = DatasetRow {
            layer: index("layer")?,
            neuron: index("neuron")?,
            ..Default::default()
        };
        let mut expected_fields = 2;
        for c in SignCombo::ALL {
            let f = format!("{}_freq", c.as_str());
            let freq = get(&f)?
                .as_f64()
                .filter(|x| (0.0..=1.0).contains(x))
                .ok_or_else(|| field_err(&f, "expected a number in [0, 1]"))?;
            row.combos[c.index()].freq = freq;
            expected_fields += 1;
            for i in Intermediate::ALL {
                let p = format!("{}_{}", c.as_str(), i.as_str());
                let s = &mut row.combos[c.index()].stats[i.index()];
                s.max = opt_num(&format!("{p}_max"))?;
                s.min = opt_num(&format!("{p}_min"))?;
                s.mean = opt_num(&format!("{p}_mean"))?;
                let f = format!("{p}_examples");
                let arr = get(&f)?
                    .as_array()
                    .ok_or_else(|| field_err(&f, "expected an array"))?;
                s.examples = arr
                    .iter()
                    .map(|e| parse_example(e).ok_or_else(|| field_err(&f, "expected [doc_id, token_pos, value]")))
                    .collect::<Result<_, _>>()?;
                expected_fields += 4;
            }
        }
        if obj.len() != expected_fields {
            let extra = obj
                .keys()
                .find(|k| !row.to_json().contains_key(*k))
                .cloned()
                .unwrap_or_default();
            return Err(field_err(&extra, "unexpected field"));
        }
        Ok(row)
    }
}

fn parse_example(v: &Value) -> Option<ExampleRef> {
    match v.as_array()?.as_slice() {
        [d, p, x] => Some(ExampleRef {
            doc_id: d.as_u64()?,
            token_pos: u32::try_from(p.as_u64()?).ok()?,
            value: x.as_f64().filter(|f| f.is_finite())?,
        }),
        _ => None,
    }
}

/// `freq(gate+_in+) + freq(gate+_in-)`, the same sum the dataset's users
/// compute from the two columns.
impl GateFrequency for DatasetRow {
    fn layer(&self) -> usize {
        self.layer
    }

    fn neuron(&self) -> usize {
        self.neuron
    }

    fn gate_positive_freq(&self) -> Result<f64, AnalysisError> {
        let f = self.combo(SignCombo::PP).freq + self.combo(SignCombo::PN).freq;
        let total: f64 = self.combos.iter().map(|c| c.freq).sum();
        if total == 0.0 {
            return Err(AnalysisError::NoObservations);
        }
        Ok(f)
    }
}

pub fn write_rows<W: Write>(rows: &[DatasetRow], mut sink: W) -> io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut sink, &r.to_json())?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

pub fn read_rows<R: BufRead>(source: R) -> Result<Vec<DatasetRow>, DatasetError> {
    let mut rows = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DatasetError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line).map_err(|e| DatasetError::Json {
            line: line_no,
            message: e.to_string(),
        })?;
        rows.push(DatasetRow::from_json(&v, line_no)?);
    }
    Ok(rows)
}

pub fn manifest_json(m: &DatasetManifest) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serializes");
    s.push('\n');
    s
}

pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, rows: &[DatasetRow]) -> Result<(), DatasetError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join(ROWS_FILE);
    let f = File::create(&p).map_err(io_err(&p))?;
    write_rows(rows, BufWriter::new(f)).map_err(io_err(&p))?;
    let p = dir.join(MANIFEST_FILE);
    std::fs::write(&p, manifest_json(manifest)).map_err(io_err(&p))?;
    Ok(())
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let p = dir.join(MANIFEST_FILE);
    let s = match std::fs::read_to_string(&p) {
        Ok(s) => s,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(DatasetError::MissingManifest(p)),
        Err(source) => return Err(DatasetError::Io { path: p, source }),
    };
    let m: DatasetManifest = serde_json::from_str(&s).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if m.format != FORMAT || m.version != FORMAT_VERSION {
        return Err(DatasetError::Manifest(format!(
            "unsupported format {} v{}",
            m.format, m.version
        )));
    }
    Ok(m)
}

/// Reads manifest and rows and checks them against each other.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<DatasetRow>), DatasetError> {
    let manifest = read_dataset_manifest(dir)?;
    let p = dir.join(ROWS_FILE);
    let f = File::open(&p).map_err(|source| DatasetError::Io {
        path: p.clone(),
        source,
    })?;
    let rows = read_rows(BufReader::new(f))?;
    for (i, r) in rows.iter().enumerate() {
        let line = i + 1;
        if r.layer >= manifest.n_layers || r.neuron >= manifest.d_mlp {
            return Err(DatasetError::Field {
                line,
                field: "neuron".into(),
                message: format!("{}.{} outside the manifest's model shape", r.layer, r.neuron),
            });
        }
        for c in SignCombo::ALL {
            for it in Intermediate::ALL {
                if r.stat(c, it).examples.len() > manifest.k {
                    return Err(DatasetError::Field {
                        line,
                        field: format!("{}_{}_examples", c.as_str(), it.as_str()),
                        message: format!("more than k = {} examples", manifest.k),
                    });
                }
            }
        }
    }
    Ok((manifest, rows))
}

/// Finds the row of `layer.neuron`.
pub fn find_row(rows: &[DatasetRow], layer: usize, neuron: usize) -> Option<&DatasetRow> {
    rows.iter().find(|r| r.layer == layer && r.neuron == neuron)
}
