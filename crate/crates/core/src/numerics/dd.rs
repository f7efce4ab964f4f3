//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64`s with
//! about 106 significant bits.
//!
//! Used to evaluate objectives for the finite-difference oracle, where
//! `(f(θ+h) − f(θ−h)) / 2h` in plain `f64` loses most of its digits to
//! cancellation. `exp`, `ln`, `sqrt`, `exp_m1`, `ln_1p` and `tanh` are good
//! to about 1e-29 relative; trigonometric and inverse hyperbolic functions
//! fall back to `f64` accuracy.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use super::scalar::{DType, Scalar};

#[derive(Clone, Copy, Debug, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: 0.6931471805599453,
    lo: 2.3190468138462996e-17,
};
const SPLITTER: f64 = 134217729.0; // 2^27 + 1

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn split(a: f64) -> (f64, f64) {
    let c = SPLITTER * a;
    let hi = c - (c - a);
    (hi, a - hi)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Self { hi, lo }
    }

    pub fn from_f64(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    fn special(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        if !p.is_finite() {
            return Self::special(p);
        }
        let (hi, lo) = quick_two_sum(p, e + self.lo * b);
        Self { hi, lo }
    }

    /// Multiply by `2^k` exactly.
    fn ldexp(self, k: i32) -> Self {
        let half = k / 2;
        let (a, b) = (2f64.powi(half), 2f64.powi(k - half));
        Self {
            hi: self.hi * a * b,
            lo: self.lo * a * b,
        }
    }

    fn fallback(self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_f64(f(self.to_f64()))
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Self::from_f64(v)
    }
}

impl PartialEq for Dd {
    fn eq(&self, other: &Self) -> bool {
        self.hi == other.hi && self.lo == other.lo
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&(*self).to_f64(), f)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd::new(-self.hi, -self.lo)
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        if !s.is_finite() {
            return Dd::special(s);
        }
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        if !p.is_finite() {
            return Dd::special(p);
        }
        let (hi, lo) = quick_two_sum(p, e + (self.hi * o.lo + self.lo * o.hi));
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        if !q1.is_finite() || o.hi == 0.0 {
            return Dd::special(q1);
        }
        let r = self - o.mul_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o.mul_f64(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, o: Dd) -> Dd {
        self - (self / o).trunc() * o
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl $tr for Dd {
            fn $m(&mut self, o: Dd) {
                *self = *self $op o;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + b)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd::from_f64(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::from_f64(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::from_f64)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        (*self).to_f64().to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        (*self).to_f64().to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(Dd::to_f64(*self))
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Dd::from_f64)
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        Some(Dd::from_f64(n as f64))
    }
    fn from_u64(n: u64) -> Option<Self> {
        Some(Dd::from_f64(n as f64))
    }
    fn from_f64(n: f64) -> Option<Self> {
        Some(Dd::from_f64(n))
    }
}

impl Float for Dd {
    fn nan() -> Self {
        Dd::special(f64::NAN)
    }
    fn infinity() -> Self {
        Dd::special(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Dd::special(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Dd::special(-0.0)
    }
    fn min_value() -> Self {
        Dd::special(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Dd::special(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Dd::special(4.930380657631324e-32)
    }
    fn max_value() -> Self {
        Dd::special(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let f = self.hi.floor();
        if f == self.hi {
            let (hi, lo) = quick_two_sum(f, self.lo.floor());
            Dd { hi, lo }
        } else {
            Dd::from_f64(f)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        if self.hi >= 0.0 {
            (self + Dd::from_f64(0.5)).floor()
        } else {
            -((-self) + Dd::from_f64(0.5)).floor()
        }
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Dd::from_f64(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Dd::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = if n < 0 { self.recip() } else { self };
        let mut k = n.unsigned_abs();
        let mut acc = Dd::one();
        while k > 0 {
            if k & 1 == 1 {
                acc *= base;
            }
            base *= base;
            k >>= 1;
        }
        acc
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Dd::special(self.hi.sqrt());
        }
        let y = self.hi.sqrt();
        let q = Dd::from_f64(y);
        let r = self - q * q;
        q + Dd::from_f64(r.hi / (2.0 * y))
    }
    fn exp(self) -> Self {
        if self.hi > 709.7 {
            return Dd::infinity();
        }
        if self.hi < -745.0 {
            return Dd::zero();
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2.mul_f64(k)).ldexp(-10);
        // Taylor series of exp(r) for |r| < 3.4e-4
        let mut term = Dd::one();
        let mut sum = Dd::one();
        for n in 1..=12 {
            term = (term * r) / Dd::from_f64(n as f64);
            sum += term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.ldexp(k as i32)
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Dd::special(self.hi.ln());
        }
        let y = Dd::from_f64(self.hi.ln());
        y + self * (-y).exp() - Dd::one()
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / Dd::from_f64(10.0).ln()
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Dd::zero()
        }
    }
    fn cbrt(self) -> Self {
        self.fallback(f64::cbrt)
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.fallback(f64::sin)
    }
    fn cos(self) -> Self {
        self.fallback(f64::cos)
    }
    fn tan(self) -> Self {
        self.fallback(f64::tan)
    }
    fn asin(self) -> Self {
        self.fallback(f64::asin)
    }
    fn acos(self) -> Self {
        self.fallback(f64::acos)
    }
    fn atan(self) -> Self {
        self.fallback(f64::atan)
    }
    fn atan2(self, other: Self) -> Self {
        Dd::from_f64(self.to_f64().atan2(other.to_f64()))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        if self.hi.abs() < 1e-3 {
            // x + x²/2! + ... + x¹²/12!
            let mut term = self;
            let mut sum = self;
            for n in 2..=12 {
                term = (term * self) / Dd::from_f64(n as f64);
                sum += term;
            }
            sum
        } else {
            self.exp() - Dd::one()
        }
    }
    fn ln_1p(self) -> Self {
        (Dd::one() + self).ln()
    }
    fn sinh(self) -> Self {
        let e = self.exp();
        (e - e.recip()).ldexp(-1)
    }
    fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()).ldexp(-1)
    }
    fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return Dd::from_f64(self.hi.signum());
        }
        let t = (self + self).exp_m1();
        t / (t + Dd::from_f64(2.0))
    }
    fn asinh(self) -> Self {
        self.fallback(f64::asinh)
    }
    fn acosh(self) -> Self {
        self.fallback(f64::acosh)
    }
    fn atanh(self) -> Self {
        self.fallback(f64::atanh)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for Dd {
    /// Serialized as its `f64` rounding.
    const DTYPE: DType = DType::F64;

    fn of(v: f64) -> Self {
        Dd::from_f64(v)
    }

    fn as_f64(self) -> f64 {
        self.to_f64()
    }

    fn widen(self) -> Dd {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_f64().to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        Dd::from_f64(f64::from_le_bytes(bytes[..8].try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: Dd, tol: f64) -> bool {
        (a - b).abs().to_f64() <= tol * b.abs().to_f64().max(1.0)
    }

    #[test]
    fn arithmetic_keeps_extra_bits() {
        let one = Dd::one();
        let tiny = Dd::from_f64(1e-20);
        let s = one + tiny;
        assert_eq!(s.hi, 1.0);
        assert_eq!((s - one).to_f64(), 1e-20);
        let third = one / Dd::from_f64(3.0);
        let back = third * Dd::from_f64(3.0);
        assert!((back - one).abs().to_f64() < 1e-31);
    }

    #[test]
    fn transcendental_identities() {
        for x in [-30.0, -2.5, -1e-3, 1e-7, 0.3, 1.0, 7.25, 40.0] {
            let v = Dd::from_f64(x);
            assert!(close(v.exp().ln(), v, 1e-28), "{x}");
            assert!(close(v.exp() * (-v).exp(), Dd::one(), 1e-28), "{x}");
            assert!((v.exp().to_f64() - x.exp()).abs() <= 4e-16 * x.exp(), "{x}");
        }
        let two = Dd::from_f64(2.0);
        assert!(close(two.sqrt() * two.sqrt(), two, 1e-31));
        assert!(close(Dd::one().exp().ln(), Dd::one(), 1e-28));
        let small = Dd::from_f64(1e-10);
        assert!(close(small.exp_m1(), small + small * small.ldexp(-1), 1e-25));
        assert!(close(small.ln_1p().exp_m1(), small, 1e-25));
        assert!(close(Dd::from_f64(0.5).tanh(), Dd::from_f64(0.5f64.tanh()), 1e-15));
    }

    #[test]
    fn rounding_and_order() {
        let v = Dd::new(3.0, -1e-20);
        assert_eq!(v.floor().to_f64(), 2.0);
        assert_eq!(v.ceil().to_f64(), 3.0);
        assert!(v < Dd::from_f64(3.0));
        assert_eq!(Dd::from_f64(-2.5).round().to_f64(), -3.0);
        assert!(Dd::nan().max(Dd::one()) == Dd::one());
        assert!((Dd::one() / Dd::zero()).is_infinite());
    }
}
