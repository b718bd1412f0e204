//! Exact, order-independent summation of `f64` values.
//!
//! Every finite double is an integer multiple of `2^-1074`, so a sum of
//! doubles is a (large) fixed-point integer. [`ExactSum`] keeps that integer
//! in 32-bit digits stored in `i64` limbs, covering only the window of bit
//! positions actually touched. Adding is a handful of integer adds, merging
//! is limb-wise addition, and the result does not depend on the order in
//! which values arrived. That is what makes sharded aggregation reproduce the
//! sequential result bit for bit.

use alloc::vec::Vec;

const DIGIT_BITS: u32 = 32;
const DIGIT_MASK: i64 = (1 << DIGIT_BITS) - 1;
/// Each add moves at most `2^32 - 1` into a limb, so limbs cannot overflow
/// before this many adds.
const CARRY_BUDGET: u32 = 1 << 30;

#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    /// Digit index of `limbs[0]`; digit `d` has weight `2^(32 d - 1074)`.
    base: usize,
    limbs: Vec<i64>,
    pending: u32,
}

impl ExactSum {
    pub const fn new() -> Self {
        ExactSum {
            base: 0,
            limbs: Vec::new(),
            pending: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.canonical().2.is_empty()
    }

    /// Adds a finite value. Non-finite values are ignored by contract of the
    /// caller; they are checked upstream.
    pub fn add(&mut self, x: f64) {
        debug_assert!(x.is_finite());
        if x == 0.0 || !x.is_finite() {
            return;
        }
        let bits = x.to_bits();
        let negative = bits >> 63 == 1;
        let exp_field = ((bits >> 52) & 0x7ff) as u32;
        let frac = bits & ((1u64 << 52) - 1);
        // value = mant * 2^(shift - 1074)
        let (mant, shift) = if exp_field == 0 {
            (frac, 0u32)
        } else {
            (frac | (1u64 << 52), exp_field - 1)
        };
        let digit = (shift / DIGIT_BITS) as usize;
        let wide = (mant as u128) << (shift % DIGIT_BITS);
        let parts = [
            (wide & 0xffff_ffff) as i64,
            ((wide >> 32) & 0xffff_ffff) as i64,
            ((wide >> 64) & 0xffff_ffff) as i64,
        ];
        self.ensure_range(digit, digit + 3);
        let start = digit - self.base;
        for (k, p) in parts.into_iter().enumerate() {
            if negative {
                self.limbs[start + k] -= p;
            } else {
                self.limbs[start + k] += p;
            }
        }
        self.pending += 1;
        if self.pending >= CARRY_BUDGET {
            self.propagate();
        }
    }

    /// Adds another accumulator into this one.
    pub fn merge(&mut self, other: &ExactSum) {
        if other.limbs.is_empty() {
            return;
        }
        let mut other = other.clone();
        other.propagate();
        self.propagate();
        self.ensure_range(other.base, other.base + other.limbs.len());
        let off = other.base - self.base;
        for (k, l) in other.limbs.iter().enumerate() {
            self.limbs[off + k] += *l;
        }
        self.pending = 2;
        self.propagate();
    }

    fn ensure_range(&mut self, lo: usize, hi: usize) {
        if self.limbs.is_empty() {
            self.base = lo;
            self.limbs.resize(hi - lo, 0);
            return;
        }
        if lo < self.base {
            let grow = self.base - lo;
            self.limbs.splice(0..0, core::iter::repeat_n(0, grow));
            self.base = lo;
        }
        let end = self.base + self.limbs.len();
        if hi > end {
            self.limbs.resize(hi - self.base, 0);
        }
    }

    /// Brings every limb but the last into `[0, 2^32)`.
    fn propagate(&mut self) {
        let n = self.limbs.len();
        if n == 0 {
            return;
        }
        let mut carry = 0i64;
        for l in self.limbs.iter_mut().take(n - 1) {
            let v = *l + carry;
            *l = v & DIGIT_MASK;
            carry = v >> DIGIT_BITS;
        }
        self.limbs[n - 1] += carry;
        // keep the top limb small so later adds cannot overflow it
        while self.limbs[self.limbs.len() - 1].unsigned_abs() > DIGIT_MASK as u64 {
            let last = self.limbs.len() - 1;
            let v = self.limbs[last];
            self.limbs[last] = v & DIGIT_MASK;
            self.limbs.push(v >> DIGIT_BITS);
        }
        self.pending = 0;
    }

    /// Sign and magnitude digits (least significant first, trimmed), plus the
    /// digit index of the first digit. Unique for every value.
    fn canonical(&self) -> (bool, usize, Vec<u32>) {
        let mut limbs = self.limbs.clone();
        let mut tmp = ExactSum {
            base: self.base,
            limbs: core::mem::take(&mut limbs),
            pending: 0,
        };
        tmp.propagate();
        let negative = tmp.limbs.last().is_some_and(|&t| t < 0);
        if negative {
            for l in tmp.limbs.iter_mut() {
                *l = -*l;
            }
            tmp.propagate();
        }
        let mut digits: Vec<u32> = tmp.limbs.iter().map(|&l| l as u32).collect();
        while digits.last() == Some(&0) {
            digits.pop();
        }
        let lead = digits.iter().take_while(|&&d| d == 0).count();
        digits.drain(..lead);
        if digits.is_empty() {
            return (false, 0, digits);
        }
        (negative, tmp.base + lead, digits)
    }

    /// The exact sum rounded to the nearest double (ties to even).
    pub fn value(&self) -> f64 {
        let (negative, base, digits) = self.canonical();
        if digits.is_empty() {
            return 0.0;
        }
        // Take the top three digits (96 bits) and fold the rest into a sticky
        // bit; 96 >= 53 + 2 so one rounding step is exact.
        let n = digits.len();
        let take = n.min(3);
        let mut top: u128 = 0;
        for d in digits[n - take..].iter().rev() {
            top = (top << 32) | *d as u128;
        }
        let sticky = digits[..n - take].iter().any(|&d| d != 0);
        if sticky {
            top |= 1;
        }
        let low_digit = base + n - take;
        let scale = (low_digit as i32) * DIGIT_BITS as i32 - 1074;
        let mag = libm::scalbn(top as f64, scale);
        if negative {
            -mag
        } else {
            mag
        }
    }
}

impl PartialEq for ExactSum {
    fn eq(&self, other: &Self) -> bool {
        self.canonical() == other.canonical()
    }
}
