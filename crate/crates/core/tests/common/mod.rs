//! Test support: frozen oracle data, random activation streams and a
//! brute-force aggregation that materializes every event.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::path::PathBuf;

use gatescope_core::activation::{ActivationKind, Intermediate, NeuronActivation, SignCombo};
use gatescope_core::aggregator::{DocActivations, ExampleRef, NeuronRecord};
use gatescope_core::rng::SeededRng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("..").join("core").join("tests").join("data")
}

/// `(x, swish(x), gelu(x))` on the grid `x_i = -20 + i / 256`.
pub fn activation_oracle() -> Vec<(f64, f64, f64)> {
    let text = std::fs::read_to_string(data_dir().join("activation_oracle.txt")).unwrap();
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let mut it = line.split_whitespace().map(|v| v.parse::<f64>().unwrap());
            (-20.0 + i as f64 / 256.0, it.next().unwrap(), it.next().unwrap())
        })
        .collect()
}

pub struct PearsonCase {
    pub name: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub r: f64,
    pub p: f64,
}

pub fn pearson_oracle() -> Vec<PearsonCase> {
    let text = std::fs::read_to_string(data_dir().join("pearson_oracle.txt")).unwrap();
    let mut lines = text.lines();
    let mut cases = Vec::new();
    while let Some(head) = lines.next() {
        let parts: Vec<&str> = head.split_whitespace().collect();
        assert_eq!(parts[0], "case");
        let n: usize = parts[2].parse().unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let mut it = lines.next().unwrap().split_whitespace();
            xs.push(it.next().unwrap().parse().unwrap());
            ys.push(it.next().unwrap().parse().unwrap());
        }
        let val = |l: &str, key: &str| {
            let (k, v) = l.split_once(' ').unwrap();
            assert_eq!(k, key);
            v.parse::<f64>().unwrap()
        };
        let r = val(lines.next().unwrap(), "r");
        let p = val(lines.next().unwrap(), "p");
        cases.push(PearsonCase {
            name: parts[1].to_string(),
            xs,
            ys,
            r,
            p,
        });
    }
    cases
}

/// Value generator with deliberate ties, exact zeros and signed zeros.
pub fn random_value(rng: &mut SeededRng) -> f32 {
    match rng.below(10) {
        0 => 0.0,
        1 => -0.0,
        2 | 3 => (rng.below(7) as f32 - 3.0) * 0.5,
        _ => (rng.normal() * 2.0) as f32,
    }
}

/// Documents with ids `first_id, first_id + 1, ...` and random lengths in
/// `0..=max_len`.
pub fn random_docs(
    rng: &mut SeededRng,
    n_docs: usize,
    max_len: usize,
    n_layers: usize,
    d_mlp: usize,
    first_id: u64,
) -> Vec<DocActivations> {
    (0..n_docs)
        .map(|i| {
            let n_tokens = rng.below(max_len as u64 + 1) as usize;
            let pairs = (0..n_tokens * n_layers * d_mlp)
                .map(|_| [random_value(rng), random_value(rng)])
                .collect();
            DocActivations {
                doc_id: first_id + i as u64,
                n_tokens,
                pairs,
            }
        })
        .collect()
}

/// Random docs totalling exactly `n_events` (position, layer, neuron)
/// events.
pub fn docs_with_events(seed: u64, n_events: usize, n_layers: usize, d_mlp: usize) -> Vec<DocActivations> {
    let mut rng = SeededRng::new(seed);
    let per_pos = n_layers * d_mlp;
    assert_eq!(n_events % per_pos, 0);
    let mut positions = n_events / per_pos;
    let mut docs = Vec::new();
    while positions > 0 {
        let n_tokens = (1 + rng.below(40) as usize).min(positions);
        positions -= n_tokens;
        let pairs = (0..n_tokens * per_pos)
            .map(|_| [random_value(&mut rng), random_value(&mut rng)])
            .collect();
        docs.push(DocActivations {
            doc_id: docs.len() as u64 * 3 + 1,
            n_tokens,
            pairs,
        });
    }
    docs
}

#[derive(Debug, Clone, Default)]
pub struct BruteCell {
    pub values: Vec<(u64, u32, f64)>,
}

#[derive(Debug, Clone)]
pub struct BruteNeuron {
    pub layer: usize,
    pub neuron: usize,
    pub total: u64,
    /// `[combo][intermediate]`.
    pub cells: Vec<Vec<BruteCell>>,
    /// Observations with `x_gate >= 0`, counted directly.
    pub gate_nonneg: u64,
}

/// Materializes every event per (neuron, combo, intermediate).
pub fn brute_force(docs: &[DocActivations], n_layers: usize, d_mlp: usize, kind: ActivationKind) -> Vec<BruteNeuron> {
    let mut out: Vec<BruteNeuron> = (0..n_layers * d_mlp)
        .map(|i| BruteNeuron {
            layer: i / d_mlp,
            neuron: i % d_mlp,
            total: 0,
            cells: vec![vec![BruteCell::default(); 4]; 4],
            gate_nonneg: 0,
        })
        .collect();
    for d in docs {
        for pos in 0..d.n_tokens {
            for layer in 0..n_layers {
                for neuron in 0..d_mlp {
                    let [g, i] = d.pairs[(pos * n_layers + layer) * d_mlp + neuron];
                    let (g, i) = (f64::from(g), f64::from(i));
                    let b = &mut out[layer * d_mlp + neuron];
                    b.total += 1;
                    if g >= 0.0 {
                        b.gate_nonneg += 1;
                    }
                    // Scalar math is checked against its own oracle; here
                    // only the aggregation logic is under test.
                    let gated = activation_of(kind, [g as f32, i as f32]).gated;
                    let combo = match (g >= 0.0, i >= 0.0) {
                        (true, true) => 0,
                        (true, false) => 1,
                        (false, true) => 2,
                        (false, false) => 3,
                    };
                    // hook_post, hook_pre_linear, hook_pre, swish
                    let vals = [gated * i, i, g, gated];
                    for (w, v) in vals.into_iter().enumerate() {
                        b.cells[combo][w].values.push((d.doc_id, pos as u32, v));
                    }
                }
            }
        }
    }
    out
}

/// Whether larger values are more extreme for this cell, from first
/// principles: hook_pre and swish carry the gate sign, hook_pre_linear the
/// in sign, hook_post their product.
pub fn larger_is_extreme(combo: usize, which: usize) -> bool {
    let gate_pos = combo < 2;
    let in_pos = combo.is_multiple_of(2);
    match which {
        0 => gate_pos == in_pos,
        1 => in_pos,
        _ => gate_pos,
    }
}

impl BruteCell {
    pub fn count(&self) -> u64 {
        self.values.len() as u64
    }

    pub fn min(&self) -> Option<f64> {
        self.values.iter().map(|v| v.2).min_by(|a, b| a.total_cmp(b))
    }

    pub fn max(&self) -> Option<f64> {
        self.values.iter().map(|v| v.2).max_by(|a, b| a.total_cmp(b))
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|v| v.2).sum()
    }

    /// Most extreme occurrence per doc, then the `k` most extreme of those.
    pub fn top_k(&self, larger: bool, k: usize) -> Vec<ExampleRef> {
        let better = |a: f64, b: f64| -> Ordering {
            if larger {
                b.total_cmp(&a)
            } else {
                a.total_cmp(&b)
            }
        };
        let mut best: std::collections::BTreeMap<u64, (u32, f64)> = Default::default();
        for &(doc, pos, v) in &self.values {
            let replace = match best.get(&doc) {
                None => true,
                Some(&(bp, bv)) => match better(v, bv) {
                    Ordering::Less => true,
                    Ordering::Equal => pos < bp,
                    Ordering::Greater => false,
                },
            };
            if replace {
                best.insert(doc, (pos, v));
            }
        }
        let mut all: Vec<ExampleRef> = best
            .into_iter()
            .map(|(doc_id, (token_pos, value))| ExampleRef {
                doc_id,
                token_pos,
                value,
            })
            .collect();
        all.sort_by(|a, b| {
            better(a.value, b.value)
                .then(a.doc_id.cmp(&b.doc_id))
                .then(a.token_pos.cmp(&b.token_pos))
        });
        all.truncate(k);
        all
    }
}

/// Compares a streaming record with the brute-force oracle. Returns a
/// description of the first difference.
pub fn compare_record(rec: &NeuronRecord, b: &BruteNeuron, k: usize, mean_rel_tol: f64) -> Result<(), String> {
    if (rec.layer, rec.neuron) != (b.layer, b.neuron) {
        return Err(format!("record order: {}.{} vs {}.{}", rec.layer, rec.neuron, b.layer, b.neuron));
    }
    if rec.total_observations != b.total {
        return Err(format!("{}.{} total {} vs {}", b.layer, b.neuron, rec.total_observations, b.total));
    }
    for c in SignCombo::ALL {
        let cs = rec.combo(c);
        for w in Intermediate::ALL {
            let cell = &b.cells[c.index()][w.index()];
            let s = cs.get(w);
            let at = format!("{}.{} {} {}", b.layer, b.neuron, c.as_str(), w.as_str());
            if cs.count != cell.count() {
                return Err(format!("{at}: count {} vs {}", cs.count, cell.count()));
            }
            let bits = |x: Option<f64>| x.map(f64::to_bits);
            if bits(s.min) != bits(cell.min()) || bits(s.max) != bits(cell.max()) {
                return Err(format!("{at}: min/max {:?}/{:?} vs {:?}/{:?}", s.min, s.max, cell.min(), cell.max()));
            }
            match s.mean {
                None if cell.count() == 0 => {}
                Some(m) if cell.count() > 0 => {
                    let want = cell.sum() / cell.count() as f64;
                    let scale = want.abs().max(f64::MIN_POSITIVE);
                    if (m - want).abs() > mean_rel_tol * scale && (m - want).abs() > 1e-300 {
                        return Err(format!("{at}: mean {m} vs {want}"));
                    }
                }
                other => return Err(format!("{at}: mean {other:?} with count {}", cell.count())),
            }
            let want = cell.top_k(larger_is_extreme(c.index(), w.index()), k);
            let same = want.len() == s.examples.len()
                && want.iter().zip(&s.examples).all(|(a, b)| {
                    a.doc_id == b.doc_id && a.token_pos == b.token_pos && a.value.to_bits() == b.value.to_bits()
                });
            if !same {
                return Err(format!("{at}: examples {:?} vs {:?}", s.examples, want));
            }
        }
    }
    Ok(())
}

/// `NeuronActivation` for a raw pair, as the aggregator sees it.
pub fn activation_of(kind: ActivationKind, pair: [f32; 2]) -> NeuronActivation {
    NeuronActivation::compute(kind, f64::from(pair[0]), f64::from(pair[1]))
}
