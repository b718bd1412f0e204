use gatescope_core::activation::{gelu, swish, ActivationKind};
use gatescope_core::model::{
    collect_doc, mlp_forward, preprocess_weights, random_weights, rms_norm, LayerWeights, Matrix, ModelConfig,
};
use gatescope_core::rng::SeededRng;
use gatescope_core::TokenizedDoc;

/// Per-neuron form: `sum_n gate(<w_gate_n, x>) * <w_in_n, x> * w_out_n`.
fn per_neuron(lw: &LayerWeights, x: &[f64], kind: ActivationKind) -> Vec<f64> {
    let d_model = x.len();
    let mut out = vec![0.0; d_model];
    for n in 0..lw.w_gate.rows() {
        let g: f64 = lw.w_gate.row(n).iter().zip(x).map(|(a, b)| a * b).sum();
        let i: f64 = lw.w_in.row(n).iter().zip(x).map(|(a, b)| a * b).sum();
        let act = match kind {
            ActivationKind::Swiglu => swish(g).unwrap(),
            ActivationKind::Geglu => gelu(g).unwrap(),
        } * i;
        for (j, o) in out.iter_mut().enumerate() {
            *o += act * lw.w_out.get(j, n);
        }
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn random_layer(rng: &mut SeededRng, d_model: usize, d_mlp: usize) -> LayerWeights {
    let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.normal() * 0.5);
    LayerWeights {
        attn_q: m(d_model, d_model),
        attn_k: m(d_model, d_model),
        attn_v: m(d_model, d_model),
        attn_o: m(d_model, d_model),
        norm1: vec![1.0; d_model],
        norm2: vec![1.0; d_model],
        w_gate: m(d_mlp, d_model),
        w_in: m(d_mlp, d_model),
        w_out: m(d_model, d_mlp),
    }
}

#[test]
fn matrix_form_equals_per_neuron_sum() {
    let mut rng = SeededRng::new(2024);
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let d_model = 1 + rng.below(32) as usize;
        let d_mlp = 1 + rng.below(64) as usize;
        let kind = if draw % 2 == 0 { ActivationKind::Swiglu } else { ActivationKind::Geglu };
        let lw = random_layer(&mut rng, d_model, d_mlp);
        let x: Vec<f64> = (0..d_model).map(|_| rng.normal() * 2.0).collect();
        let m = mlp_forward(&lw, &x, kind).unwrap();
        worst = worst.max(rel_err(&m.out, &per_neuron(&lw, &x, kind)));
    }
    assert!(worst <= 1e-6, "max relative error {worst:e}");
}

#[test]
fn documented_small_case() {
    let lw = LayerWeights {
        attn_q: Matrix::zeros(2, 2),
        attn_k: Matrix::zeros(2, 2),
        attn_v: Matrix::zeros(2, 2),
        attn_o: Matrix::zeros(2, 2),
        norm1: vec![1.0; 2],
        norm2: vec![1.0; 2],
        w_gate: Matrix::from_vec(1, 2, vec![1.0, 0.0]),
        w_in: Matrix::from_vec(1, 2, vec![1.0, 0.0]),
        w_out: Matrix::from_vec(2, 1, vec![0.0, 1.0]),
    };
    let m = mlp_forward(&lw, &[2.0, 0.0], ActivationKind::Swiglu).unwrap();
    assert_eq!(m.gate_pre, vec![2.0]);
    assert_eq!(m.in_pre, vec![2.0]);
    assert_eq!(m.out[0], 0.0);
    assert!((m.out[1] - 3.5231883119).abs() < 1e-9);
    let z = mlp_forward(&lw, &[0.0, 0.0], ActivationKind::Swiglu).unwrap();
    assert_eq!(z.out, vec![0.0, 0.0]);
}

#[test]
fn gain_folding_preserves_mlp_input_behavior() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        d_mlp: 16,
        n_heads: 2,
        vocab_size: 20,
        activation: ActivationKind::Swiglu,
        norm_eps: 1e-6,
        rope_theta: 10_000.0,
    };
    let mut ws = random_weights(&cfg, 11);
    let mut rng = SeededRng::new(3);
    for lw in &mut ws.layers {
        for g in &mut lw.norm2 {
            *g = rng.uniform(0.2, 3.0);
        }
    }
    let pre = preprocess_weights(&ws);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        for (a, b) in ws.layers.iter().zip(&pre.layers) {
            let before = mlp_forward(a, &rms_norm(&x, &a.norm2, cfg.norm_eps), cfg.activation).unwrap();
            let after = mlp_forward(b, &rms_norm(&x, &b.norm2, cfg.norm_eps), cfg.activation).unwrap();
            worst = worst.max(rel_err(&after.out, &before.out));
        }
    }
    assert!(worst < 1e-6, "{worst:e}");
    assert_eq!(preprocess_weights(&pre), pre);

    // Whole-model activations agree too.
    let doc = TokenizedDoc { doc_id: 0, tokens: vec![1, 5, 7, 2, 19, 3] };
    let a = collect_doc(&ws, &doc).unwrap();
    let b = collect_doc(&pre, &doc).unwrap();
    for (p, q) in a.pairs.iter().zip(&b.pairs) {
        for j in 0..2 {
            let (x, y) = (f64::from(p[j]), f64::from(q[j]));
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0));
        }
    }
}

#[test]
fn causal_and_counted() {
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        d_mlp: 6,
        n_heads: 4,
        vocab_size: 10,
        activation: ActivationKind::Geglu,
        norm_eps: 1e-6,
        rope_theta: 10_000.0,
    };
    let ws = random_weights(&cfg, 5);
    let a = collect_doc(&ws, &TokenizedDoc { doc_id: 0, tokens: vec![0, 3, 4, 9, 1] }).unwrap();
    let b = collect_doc(&ws, &TokenizedDoc { doc_id: 0, tokens: vec![0, 3, 4, 2, 2, 8] }).unwrap();
    let per_pos = cfg.n_layers * cfg.d_mlp;
    assert_eq!(a.pairs.len(), 5 * per_pos);
    assert_eq!(b.pairs.len(), 6 * per_pos);
    assert_eq!(a.pairs[..3 * per_pos], b.pairs[..3 * per_pos]);
    assert_ne!(a.pairs[3 * per_pos..4 * per_pos], b.pairs[3 * per_pos..4 * per_pos]);
}
