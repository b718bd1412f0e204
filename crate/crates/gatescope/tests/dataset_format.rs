use std::io::Cursor;

use gatescope::dataset::{read_dataset, read_rows, write_dataset, write_rows, DatasetError, DatasetManifest, DatasetRow};
use gatescope_core::activation::{ActivationKind, Intermediate, SignCombo};
use gatescope_core::aggregator::{AggregatorConfig, AggregatorState, DocActivations};
use gatescope_core::analysis::GateFrequency;
use gatescope_core::rng::SeededRng;
use serde_json::Value;

fn state(k: usize, n_layers: usize, d_mlp: usize) -> AggregatorState {
    AggregatorState::new(AggregatorConfig {
        k,
        n_layers,
        d_mlp,
        activation: ActivationKind::Swiglu,
    })
    .unwrap()
}

fn rows_of(st: &AggregatorState) -> Vec<DatasetRow> {
    st.finalize().iter().map(DatasetRow::from_record).collect()
}

fn to_bytes(rows: &[DatasetRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_rows(rows, &mut out).unwrap();
    out
}

#[test]
fn three_event_row() {
    let mut st = state(16, 1, 1);
    st.observe_doc(&DocActivations {
        doc_id: 4,
        n_tokens: 3,
        pairs: vec![[1.0, 1.0], [2.0, 2.0], [-1.0, 1.0]],
    })
    .unwrap();
    let bytes = to_bytes(&rows_of(&st));
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    assert!((v["gate+_in+_freq"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((v["gate-_in+_freq"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(v["gate+_in-_freq"].as_f64(), Some(0.0));
    assert_eq!(v["gate-_in-_freq"].as_f64(), Some(0.0));
    assert!(v["gate-_in-_hook_post_max"].is_null());
    assert!(v["gate-_in-_swish_mean"].is_null());
    assert_eq!(v["gate-_in-_hook_pre_examples"], serde_json::json!([]));
    assert_eq!(v["gate+_in+_hook_pre_max"].as_f64(), Some(2.0));
    assert_eq!(v["gate+_in+_hook_pre_examples"], serde_json::json!([[4, 1, 2.0]]));
}

#[test]
fn field_names_and_order() {
    let bytes = to_bytes(&rows_of(&state(2, 1, 1)));
    let v: serde_json::Map<String, Value> = serde_json::from_slice(&bytes).unwrap();
    let keys: Vec<&str> = v.keys().map(String::as_str).collect();
    assert_eq!(keys.len(), 2 + 4 * (1 + 4 * 4));
    assert_eq!(&keys[..4], &["layer", "neuron", "gate+_in+_freq", "gate+_in+_hook_post_max"]);
    assert_eq!(keys[6], "gate+_in+_hook_post_examples");
    assert_eq!(keys.last().copied(), Some("gate-_in-_swish_examples"));
    for c in SignCombo::ALL {
        assert!(v.contains_key(&format!("{}_freq", c.as_str())));
        for i in Intermediate::ALL {
            for s in ["max", "min", "mean", "examples"] {
                assert!(v.contains_key(&format!("{}_{}_{s}", c.as_str(), i.as_str())));
            }
        }
    }
}

#[test]
fn empty_aggregation() {
    let rows = rows_of(&state(16, 2, 3));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!(r.combos.iter().all(|c| c.freq == 0.0));
        assert!(r.combos.iter().flat_map(|c| &c.stats).all(|s| s.max.is_none() && s.mean.is_none() && s.examples.is_empty()));
    }
    assert_eq!(read_rows(Cursor::new(to_bytes(&rows))).unwrap(), rows);
}

fn random_rows(seed: u64) -> (DatasetManifest, Vec<DatasetRow>) {
    let mut rng = SeededRng::new(seed);
    let (n_layers, d_mlp, k) = (1 + rng.below(3) as usize, 1 + rng.below(5) as usize, 1 + rng.below(6) as usize);
    let mut st = state(k, n_layers, d_mlp);
    for doc_id in 0..rng.below(12) {
        let n_tokens = rng.below(7) as usize;
        let pairs = (0..n_tokens * n_layers * d_mlp)
            .map(|_| [(rng.normal() * 3.0) as f32, (rng.normal() * 1e-3) as f32])
            .collect();
        st.observe_doc(&DocActivations { doc_id: doc_id * 5, n_tokens, pairs }).unwrap();
    }
    let m = DatasetManifest::new("model", "corpus", k, st.total_positions(), n_layers, d_mlp, ActivationKind::Swiglu);
    (m, rows_of(&st))
}

#[test]
fn write_read_write_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..100 {
        let (m, rows) = random_rows(seed);
        let a = dir.path().join(format!("a{seed}"));
        write_dataset(&a, &m, &rows).unwrap();
        let (m2, rows2) = read_dataset(&a).unwrap();
        assert_eq!((&m2, &rows2), (&m, &rows));
        let b = dir.path().join(format!("b{seed}"));
        write_dataset(&b, &m2, &rows2).unwrap();
        for f in ["dataset.jsonl", "manifest.json"] {
            assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        }
    }
}

#[test]
fn frequencies_sum_to_one() {
    let (_, rows) = random_rows(3);
    for r in rows.iter().filter(|r| r.combos.iter().any(|c| c.freq > 0.0)) {
        let s: f64 = r.combos.iter().map(|c| c.freq).sum();
        assert!((s - 1.0).abs() <= 1e-12);
        let g = r.gate_positive_freq().unwrap();
        assert_eq!(g, r.combo(SignCombo::PP).freq + r.combo(SignCombo::PN).freq);
    }
}

#[test]
fn malformed_field_is_reported_with_line() {
    let rows = rows_of(&state(2, 1, 2));
    let text = String::from_utf8(to_bytes(&rows)).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = lines[1].replace("\"gate+_in-_freq\":0.0", "\"gate+_in-_freq\":\"x\"");
    match read_rows(Cursor::new(lines.join("\n"))).unwrap_err() {
        DatasetError::Field { line, field, .. } => assert_eq!((line, field.as_str()), (2, "gate+_in-_freq")),
        e => panic!("{e}"),
    }
    let e = read_rows(Cursor::new("{\"layer\":0}\n")).unwrap_err();
    assert!(e.to_string().contains("neuron"), "{e}");
    let with_extra = text.lines().next().unwrap().replacen('{', "{\"bogus\":1,", 1);
    let e = read_rows(Cursor::new(with_extra)).unwrap_err();
    assert!(e.to_string().contains("bogus"), "{e}");
}

#[test]
fn missing_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dataset.jsonl"), "").unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(DatasetError::MissingManifest(_))));
}
