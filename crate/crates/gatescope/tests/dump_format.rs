use gatescope::dump::{read_dump, write_dump, DumpError, DumpHeader, DumpWriter};
use gatescope_core::aggregator::DocActivations;
use gatescope_core::rng::SeededRng;
use gatescope_core::ActivationKind;
use proptest::prelude::*;

fn header(n_layers: u32, d_mlp: u32) -> DumpHeader {
    DumpHeader {
        n_layers,
        d_mlp,
        activation: ActivationKind::Swiglu,
    }
}

fn random_docs(seed: u64, n: usize, h: &DumpHeader) -> Vec<DocActivations> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let n_tokens = rng.below(6) as usize;
            let pairs = (0..n_tokens * (h.n_layers * h.d_mlp) as usize)
                .map(|_| [rng.normal() as f32, rng.normal() as f32])
                .collect();
            DocActivations {
                doc_id: i as u64 * 7,
                n_tokens,
                pairs,
            }
        })
        .collect()
}

fn encode(h: DumpHeader, docs: &[DocActivations]) -> Vec<u8> {
    write_dump(Vec::new(), h, docs.iter().cloned()).unwrap()
}

fn decode(bytes: &[u8]) -> (DumpHeader, Vec<DocActivations>) {
    let (h, r) = read_dump(bytes).unwrap();
    (h, r.collect::<Result<Vec<_>, _>>().unwrap())
}

#[test]
fn single_token_file_size() {
    let doc = DocActivations {
        doc_id: 9,
        n_tokens: 1,
        pairs: vec![[1.0, 2.0], [3.0, -4.0]],
    };
    let bytes = encode(header(1, 2), std::slice::from_ref(&doc));
    assert_eq!(bytes.len(), 17 + 12 + 16);
    assert_eq!(&bytes[..4], b"GLUA");
    assert_eq!(&bytes[17..25], &9u64.to_le_bytes());
    assert_eq!(&bytes[29..33], &1.0f32.to_le_bytes());
    assert_eq!(decode(&bytes).1, vec![doc]);
}

#[test]
fn header_only_is_valid() {
    let bytes = encode(header(3, 4), &[]);
    assert_eq!(bytes.len(), 17);
    let (h, docs) = decode(&bytes);
    assert_eq!(h, header(3, 4));
    assert!(docs.is_empty());
}

#[test]
fn bad_block_writes_nothing() {
    let h = header(1, 2);
    let mut w = DumpWriter::new(Vec::new(), h).unwrap();
    let good = DocActivations { doc_id: 0, n_tokens: 1, pairs: vec![[0.5, 0.5]; 2] };
    w.write_doc(&good).unwrap();
    let bad = DocActivations { doc_id: 1, n_tokens: 2, pairs: vec![[0.5, 0.5]; 3] };
    assert!(matches!(w.write_doc(&bad), Err(DumpError::Shape { doc_id: 1, .. })));
    let nan = DocActivations { doc_id: 2, n_tokens: 1, pairs: vec![[0.5, 0.5], [f32::NAN, 0.0]] };
    assert!(matches!(w.write_doc(&nan), Err(DumpError::NonFinite { doc_id: 2, neuron: 1, .. })));
    assert_eq!(w.finish().unwrap().len(), 17 + 12 + 16);
}

#[test]
fn three_doc_round_trip_is_byte_identical() {
    let h = header(2, 3);
    let bytes = encode(h, &random_docs(5, 3, &h));
    let (h2, docs) = decode(&bytes);
    assert_eq!(encode(h2, &docs), bytes);
}

#[test]
fn bad_magic_reports_offset_zero() {
    let mut bytes = encode(header(1, 1), &[]);
    bytes[..4].copy_from_slice(b"XXXX");
    match read_dump(&bytes[..]) {
        Err(DumpError::Parse { offset, .. }) => assert_eq!(offset, 0),
        other => panic!("{:?}", other.map(|x| x.0)),
    }
}

#[test]
fn bad_version_and_activation_code() {
    let mut bytes = encode(header(1, 1), &[]);
    bytes[4] = 2;
    assert!(matches!(read_dump(&bytes[..]), Err(DumpError::Parse { offset: 4, .. })));
    let mut bytes = encode(header(1, 1), &[]);
    bytes[16] = 9;
    assert!(matches!(read_dump(&bytes[..]), Err(DumpError::Parse { offset: 16, .. })));
}

#[test]
fn truncation_names_last_complete_doc() {
    let h = header(1, 2);
    let docs: Vec<DocActivations> = (0..3)
        .map(|i| DocActivations { doc_id: 10 + i, n_tokens: 2, pairs: vec![[1.0, 1.0]; 4] })
        .collect();
    let bytes = encode(h, &docs);
    let cut = &bytes[..bytes.len() - 5];
    let (_, r) = read_dump(cut).unwrap();
    let results: Vec<_> = r.collect();
    assert_eq!(results.len(), 3);
    match &results[2] {
        Err(e @ DumpError::Truncated { last_doc, .. }) => {
            assert_eq!(last_doc, "11");
            assert!(e.to_string().contains("11"));
        }
        other => panic!("{other:?}"),
    }
    // Cut inside the first block header.
    let (_, mut r) = read_dump(&bytes[..20]).unwrap();
    assert!(matches!(r.next(), Some(Err(DumpError::Truncated { offset: 20, .. }))));
    assert!(r.next().is_none());
}

proptest! {
    #[test]
    fn random_shapes_round_trip(seed in any::<u64>(), l in 1u32..4, d in 1u32..6, n in 0usize..6, geglu in any::<bool>()) {
        let mut h = header(l, d);
        if geglu {
            h.activation = ActivationKind::Geglu;
        }
        let bytes = encode(h, &random_docs(seed, n, &h));
        let (h2, docs) = decode(&bytes);
        prop_assert_eq!(h2, h);
        prop_assert_eq!(encode(h2, &docs), bytes);
    }
}
