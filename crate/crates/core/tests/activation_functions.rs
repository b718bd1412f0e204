mod common;

use gatescope_core::activation::{classify_signs, gelu, glu_activation, swish, ActivationKind, MathError, SignCombo};
use proptest::prelude::*;

#[test]
fn grid_matches_high_precision_oracle() {
    let grid = common::activation_oracle();
    assert_eq!(grid.len(), 10_000);
    let mut worst = (0.0f64, 0.0f64);
    for (x, s, g) in grid {
        worst.0 = worst.0.max((swish(x).unwrap() - s).abs());
        worst.1 = worst.1.max((gelu(x).unwrap() - g).abs());
    }
    assert!(worst.0 <= 1e-12, "swish max abs error {:e}", worst.0);
    assert!(worst.1 <= 1e-12, "gelu max abs error {:e}", worst.1);
}

#[test]
fn zero_maps_to_zero_exactly() {
    assert_eq!(swish(0.0).unwrap().to_bits(), 0.0f64.to_bits());
    assert_eq!(gelu(0.0).unwrap().to_bits(), 0.0f64.to_bits());
}

#[test]
fn documented_values() {
    assert!((swish(1.0).unwrap() - 0.7310585786).abs() < 1e-10);
    assert!((swish(-1.0).unwrap() + 0.2689414214).abs() < 1e-10);
    assert!((gelu(1.0).unwrap() - 0.8413447461).abs() < 1e-10);
    assert!((gelu(-2.0).unwrap() + 0.0455002638).abs() < 1e-10);
    assert_eq!(glu_activation(ActivationKind::Swiglu, 0.0, 7.5).unwrap().post, 0.0);
    // 3 * Swish(2)
    assert!((glu_activation(ActivationKind::Swiglu, 2.0, 3.0).unwrap().post - 5.2847824678673).abs() < 1e-9);
    // -10 * Swish(5)
    let a = glu_activation(ActivationKind::Swiglu, 5.0, -10.0).unwrap();
    assert!((a.post + 49.6653574537858).abs() < 1e-9);
    assert!(a.post < 0.0);
}

#[test]
fn zero_sign_rule() {
    assert_eq!(classify_signs(1.0, 2.0), Ok(SignCombo::PP));
    assert_eq!(classify_signs(0.5, -3.0), Ok(SignCombo::PN));
    assert_eq!(classify_signs(0.0, -1.0), Ok(SignCombo::PN));
    assert_eq!(classify_signs(-0.0, 0.0), Ok(SignCombo::PP));
    assert_eq!(classify_signs(-1.0, 0.0), Ok(SignCombo::NP));
}

#[test]
fn non_finite_is_rejected() {
    assert!(matches!(swish(f64::NAN), Err(MathError::NonFinite(_))));
    assert!(matches!(gelu(f64::INFINITY), Err(MathError::NonFinite(_))));
    assert!(glu_activation(ActivationKind::Geglu, 1.0, f64::NEG_INFINITY).is_err());
    assert!(classify_signs(f64::NAN, 1.0).is_err());
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -50.0..50.0f64, Just(0.0), Just(-0.0)]
}

proptest! {
    #[test]
    fn sign_product_law(g in finite(), i in finite(), geglu in any::<bool>()) {
        let kind = if geglu { ActivationKind::Geglu } else { ActivationKind::Swiglu };
        let a = glu_activation(kind, g, i).unwrap();
        match classify_signs(g, i).unwrap() {
            SignCombo::PP | SignCombo::NN => prop_assert!(a.post >= 0.0),
            SignCombo::PN | SignCombo::NP => prop_assert!(a.post <= 0.0),
        }
    }

    #[test]
    fn gate_bounds_and_sign(x in finite().prop_filter("nonzero", |x| *x != 0.0)) {
        for f in [swish(x).unwrap(), gelu(x).unwrap()] {
            prop_assert!(f >= x.min(0.0));
            prop_assert!(f <= x.max(0.0));
            prop_assert!(f == 0.0 || f.signum() == x.signum());
        }
    }

    #[test]
    fn bilinear_in_x_in(g in -30.0..30.0f64, i in -1e3..1e3f64) {
        let a = glu_activation(ActivationKind::Swiglu, g, i).unwrap();
        let unit = glu_activation(ActivationKind::Swiglu, g, 1.0).unwrap();
        let want = unit.gated * i;
        prop_assert!((a.post - want).abs() <= 4.0 * f64::EPSILON * want.abs());
    }
}
