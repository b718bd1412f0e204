//! Gate functions, sign classification and the four intermediate activations
//! of a gated neuron.
//!
//! All computation is done in `f64`. The gate functions go through `libm` so
//! results are bitwise identical across platforms.

use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum MathError {
    #[error("non-finite input {0}")]
    NonFinite(f64),
}

fn check_finite(x: f64) -> Result<f64, MathError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(MathError::NonFinite(x))
    }
}

/// Which gate function a GLU variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    /// `Swish(x_gate) * x_in`.
    Swiglu,
    /// `GELU(x_gate) * x_in`, exact erf formulation.
    Geglu,
}

impl ActivationKind {
    pub const fn as_str(self) -> &'static str {
        match self {
            ActivationKind::Swiglu => "swiglu",
            ActivationKind::Geglu => "geglu",
        }
    }

    /// Wire code used by the activation dump header.
    pub const fn code(self) -> u8 {
        match self {
            ActivationKind::Swiglu => 0,
            ActivationKind::Geglu => 1,
        }
    }

    pub const fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ActivationKind::Swiglu),
            1 => Some(ActivationKind::Geglu),
            _ => None,
        }
    }

    /// The gate function without the finiteness check.
    #[inline]
    pub fn gate(self, x: f64) -> f64 {
        match self {
            ActivationKind::Swiglu => swish_unchecked(x),
            ActivationKind::Geglu => gelu_unchecked(x),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[inline]
fn swish_unchecked(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

#[inline]
fn gelu_unchecked(x: f64) -> f64 {
    // x * Phi(x) with Phi(x) = erfc(-x / sqrt(2)) / 2; erfc keeps full
    // relative precision in the negative tail.
    0.5 * x * libm::erfc(-x * core::f64::consts::FRAC_1_SQRT_2)
}

/// `x / (1 + exp(-x))`.
pub fn swish(x: f64) -> Result<f64, MathError> {
    check_finite(x).map(swish_unchecked)
}

/// `x * Phi(x)` where `Phi` is the standard normal CDF.
pub fn gelu(x: f64) -> Result<f64, MathError> {
    check_finite(x).map(gelu_unchecked)
}

/// Sign class of a single pre-activation. Zero counts as positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    #[inline]
    pub fn of(x: f64) -> Sign {
        if x >= 0.0 {
            Sign::Pos
        } else {
            Sign::Neg
        }
    }
}

/// One of the four `{gate±, in±}` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SignCombo {
    #[serde(rename = "gate+_in+")]
    PP,
    #[serde(rename = "gate+_in-")]
    PN,
    #[serde(rename = "gate-_in+")]
    NP,
    #[serde(rename = "gate-_in-")]
    NN,
}

impl SignCombo {
    pub const ALL: [SignCombo; 4] = [SignCombo::PP, SignCombo::PN, SignCombo::NP, SignCombo::NN];

    pub const fn as_str(self) -> &'static str {
        match self {
            SignCombo::PP => "gate+_in+",
            SignCombo::PN => "gate+_in-",
            SignCombo::NP => "gate-_in+",
            SignCombo::NN => "gate-_in-",
        }
    }

    pub fn parse(s: &str) -> Option<SignCombo> {
        SignCombo::ALL.into_iter().find(|c| c.as_str() == s)
    }

    #[inline]
    pub const fn index(self) -> usize {
        self as usize
    }

    pub fn from_signs(gate: Sign, input: Sign) -> SignCombo {
        match (gate, input) {
            (Sign::Pos, Sign::Pos) => SignCombo::PP,
            (Sign::Pos, Sign::Neg) => SignCombo::PN,
            (Sign::Neg, Sign::Pos) => SignCombo::NP,
            (Sign::Neg, Sign::Neg) => SignCombo::NN,
        }
    }

    pub fn gate_sign(self) -> Sign {
        match self {
            SignCombo::PP | SignCombo::PN => Sign::Pos,
            SignCombo::NP | SignCombo::NN => Sign::Neg,
        }
    }

    pub fn in_sign(self) -> Sign {
        match self {
            SignCombo::PP | SignCombo::NP => Sign::Pos,
            SignCombo::PN | SignCombo::NN => Sign::Neg,
        }
    }

    /// The fixed sign an intermediate takes inside this combo. Top-k lists keep
    /// the values farthest from zero in this direction.
    pub fn direction(self, which: Intermediate) -> Sign {
        match which {
            Intermediate::HookPre | Intermediate::Swish => self.gate_sign(),
            Intermediate::HookPreLinear => self.in_sign(),
            Intermediate::HookPost => {
                if self.gate_sign() == self.in_sign() {
                    Sign::Pos
                } else {
                    Sign::Neg
                }
            }
        }
    }
}

impl fmt::Display for SignCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The four recorded intermediate activations of a neuron, in dataset column
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intermediate {
    /// Final activation, `gate(x_gate) * x_in`.
    HookPost,
    /// `x_in`.
    HookPreLinear,
    /// `x_gate`.
    HookPre,
    /// `gate(x_gate)`; named after Swish even for GEGLU.
    Swish,
}

impl Intermediate {
    pub const ALL: [Intermediate; 4] = [
        Intermediate::HookPost,
        Intermediate::HookPreLinear,
        Intermediate::HookPre,
        Intermediate::Swish,
    ];

    pub const fn as_str(self) -> &'static str {
        match self {
            Intermediate::HookPost => "hook_post",
            Intermediate::HookPreLinear => "hook_pre_linear",
            Intermediate::HookPre => "hook_pre",
            Intermediate::Swish => "swish",
        }
    }

    pub fn parse(s: &str) -> Option<Intermediate> {
        Intermediate::ALL.into_iter().find(|i| i.as_str() == s)
    }

    #[inline]
    pub const fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Intermediate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One `(x_gate, x_in)` observation with its derived intermediates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeuronActivation {
    pub x_gate: f64,
    pub x_in: f64,
    pub gated: f64,
    pub post: f64,
}

impl NeuronActivation {
    /// Computes the intermediates for finite inputs without re-checking them.
    #[inline]
    pub fn compute(kind: ActivationKind, x_gate: f64, x_in: f64) -> Self {
        let gated = kind.gate(x_gate);
        NeuronActivation {
            x_gate,
            x_in,
            gated,
            post: gated * x_in,
        }
    }

    #[inline]
    pub fn combo(&self) -> SignCombo {
        SignCombo::from_signs(Sign::of(self.x_gate), Sign::of(self.x_in))
    }

    #[inline]
    pub fn get(&self, which: Intermediate) -> f64 {
        match which {
            Intermediate::HookPost => self.post,
            Intermediate::HookPreLinear => self.x_in,
            Intermediate::HookPre => self.x_gate,
            Intermediate::Swish => self.gated,
        }
    }

    /// Values in [`Intermediate::ALL`] order.
    #[inline]
    pub fn values(&self) -> [f64; 4] {
        [self.post, self.x_in, self.x_gate, self.gated]
    }
}

pub fn glu_activation(
    kind: ActivationKind,
    x_gate: f64,
    x_in: f64,
) -> Result<NeuronActivation, MathError> {
    check_finite(x_gate)?;
    check_finite(x_in)?;
    Ok(NeuronActivation::compute(kind, x_gate, x_in))
}

pub fn classify_signs(x_gate: f64, x_in: f64) -> Result<SignCombo, MathError> {
    check_finite(x_gate)?;
    check_finite(x_in)?;
    Ok(SignCombo::from_signs(Sign::of(x_gate), Sign::of(x_in)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn swish_examples() {
        assert_eq!(swish(0.0).unwrap(), 0.0);
        assert!(close(swish(1.0).unwrap(), 0.7310585786, 1e-10));
        assert!(close(swish(-1.0).unwrap(), -0.2689414214, 1e-10));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0).unwrap(), 0.0);
        assert!(close(gelu(1.0).unwrap(), 0.8413447461, 1e-10));
        assert!(close(gelu(-2.0).unwrap(), -0.0455002638, 1e-10));
    }

    #[test]
    fn non_finite_is_rejected() {
        assert!(swish(f64::NAN).is_err());
        assert!(gelu(f64::INFINITY).is_err());
        assert!(glu_activation(ActivationKind::Swiglu, 1.0, f64::NEG_INFINITY).is_err());
        assert!(classify_signs(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn glu_examples() {
        let a = glu_activation(ActivationKind::Swiglu, 0.0, 7.5).unwrap();
        assert_eq!(a.post, 0.0);
        // 40-digit reference: -10 * Swish(5) = -49.6653574537858
        let b = glu_activation(ActivationKind::Swiglu, 5.0, -10.0).unwrap();
        assert!(close(b.post, -49.6653574537858, 1e-12));
        let c = glu_activation(ActivationKind::Swiglu, 2.0, 3.0).unwrap();
        assert!(close(c.post, 5.28478246786729, 1e-12));
        let g = glu_activation(ActivationKind::Geglu, 1.0, 2.0).unwrap();
        assert_eq!(g.gated, gelu(1.0).unwrap());
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_signs(1.0, 2.0).unwrap(), SignCombo::PP);
        assert_eq!(classify_signs(0.5, -3.0).unwrap(), SignCombo::PN);
        assert_eq!(classify_signs(0.0, -1.0).unwrap(), SignCombo::PN);
        assert_eq!(classify_signs(-0.0, -1.0).unwrap(), SignCombo::PN);
        assert_eq!(classify_signs(-1.0, 0.0).unwrap(), SignCombo::NP);
    }

    #[test]
    fn names_round_trip() {
        for c in SignCombo::ALL {
            assert_eq!(SignCombo::parse(c.as_str()), Some(c));
        }
        for i in Intermediate::ALL {
            assert_eq!(Intermediate::parse(i.as_str()), Some(i));
        }
        assert_eq!(ActivationKind::from_code(ActivationKind::Geglu.code()), Some(ActivationKind::Geglu));
        assert_eq!(ActivationKind::from_code(2), None);
    }

    #[test]
    fn direction_table() {
        use Intermediate::*;
        use Sign::*;
        assert_eq!(SignCombo::PN.direction(HookPre), Pos);
        assert_eq!(SignCombo::PN.direction(HookPost), Neg);
        assert_eq!(SignCombo::PN.direction(HookPreLinear), Neg);
        assert_eq!(SignCombo::NN.direction(HookPost), Pos);
        assert_eq!(SignCombo::NN.direction(Swish), Neg);
        assert_eq!(SignCombo::NP.direction(HookPreLinear), Pos);
        assert_eq!(SignCombo::NP.direction(HookPost), Neg);
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![-50.0f64..50.0, -1e6f64..1e6, Just(0.0)]
    }

    fn kind() -> impl Strategy<Value = ActivationKind> {
        prop_oneof![Just(ActivationKind::Swiglu), Just(ActivationKind::Geglu)]
    }

    proptest! {
        #[test]
        fn sign_product_law(g in finite(), i in finite(), k in kind()) {
            let a = glu_activation(k, g, i).unwrap();
            match classify_signs(g, i).unwrap() {
                SignCombo::PP | SignCombo::NN => prop_assert!(a.post >= 0.0),
                SignCombo::PN | SignCombo::NP => prop_assert!(a.post <= 0.0),
            }
            for which in Intermediate::ALL {
                let v = a.get(which);
                match a.combo().direction(which) {
                    Sign::Pos => prop_assert!(v >= 0.0),
                    Sign::Neg => prop_assert!(v <= 0.0),
                }
            }
        }

        #[test]
        fn gate_functions_bounded_by_identity(x in -700.0f64..700.0) {
            prop_assume!(x != 0.0);
            for v in [swish(x).unwrap(), gelu(x).unwrap()] {
                prop_assert!(v <= x.max(0.0));
                prop_assert!(v >= x.min(0.0));
                // strict sign agreement only where the value does not underflow
                if x.abs() < 30.0 {
                    prop_assert_eq!(v > 0.0, x > 0.0);
                    prop_assert!(v != 0.0);
                }
            }
        }

        #[test]
        fn bilinear_in_x_in(g in finite(), i in finite(), k in kind()) {
            let a = glu_activation(k, g, i).unwrap();
            let unit = glu_activation(k, g, 1.0).unwrap();
            let expect = unit.gated * i;
            prop_assert!((a.post - expect).abs() <= 4.0 * f64::EPSILON * expect.abs());
        }

        #[test]
        fn deterministic(g in finite(), i in finite(), k in kind()) {
            let a = glu_activation(k, g, i).unwrap();
            let b = glu_activation(k, g, i).unwrap();
            prop_assert_eq!(a.post.to_bits(), b.post.to_bits());
            prop_assert_eq!(a.gated.to_bits(), b.gated.to_bits());
        }
    }
}
