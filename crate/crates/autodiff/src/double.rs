//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64`s with
//! about 32 significant digits.
//!
//! Only the operations a forward pass needs are carried at full width:
//! `+ - * /`, `sqrt`, `exp`, `ln`, `tanh` and their close relatives. The
//! trigonometric and arbitrary-base functions required by [`Float`] fall back
//! to `f64` accuracy.

use std::cmp::Ordering;
use std::fmt;
use std::num::FpCategory;
use std::ops::{
    Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign,
};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct F64x2 {
    hi: f64,
    lo: f64,
}

const LN_2: F64x2 = F64x2 {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn split(a: f64) -> (f64, f64) {
    let t = 134_217_729.0 * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl F64x2 {
    pub const fn from_f64(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    /// Builds `hi + lo`, renormalizing the pair.
    pub fn new(hi: f64, lo: f64) -> Self {
        Self::normalized(hi, lo)
    }

    fn normalized(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Self::from_f64(hi);
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    fn scale_pow2(self, k: i32) -> Self {
        // Two factors keep 2^k representable near both ends of the range.
        let a = k / 2;
        let (fa, fb) = (2f64.powi(a), 2f64.powi(k - a));
        Self {
            hi: self.hi * fa * fb,
            lo: self.lo * fa * fb,
        }
    }

    fn via_f64(self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_f64(f(self.hi))
    }

    fn dd_exp(self) -> Self {
        const SQUARINGS: i32 = 10;
        if self.hi.is_nan() {
            return self;
        }
        if self.hi > 709.0 {
            return Self::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Self::zero();
        }
        // x = k ln 2 + r, then expm1(r / 1024) by Taylor series, squared back up.
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - LN_2 * Self::from_f64(k)).scale_pow2(-SQUARINGS);
        let mut m = Self::zero();
        for n in (1..=12).rev() {
            m = r / Self::from_f64(n as f64) * (Self::one() + m);
        }
        for _ in 0..SQUARINGS {
            m = m * (m + Self::from_f64(2.0));
        }
        (Self::one() + m).scale_pow2(k as i32)
    }

    fn dd_ln(self) -> Self {
        if self.hi.is_nan() || self.hi < 0.0 {
            return Self::nan();
        }
        if self.hi == 0.0 {
            return Self::neg_infinity();
        }
        if self.hi.is_infinite() {
            return self;
        }
        // Newton on exp(y) = x doubles the number of correct digits per step.
        let mut y = Self::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).dd_exp() - Self::one();
        }
        y
    }

    fn dd_trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
}

impl From<f64> for F64x2 {
    fn from(v: f64) -> Self {
        Self::from_f64(v)
    }
}

impl fmt::Display for F64x2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&(self.hi + self.lo), f)
    }
}

impl PartialOrd for F64x2 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for F64x2 {
    type Output = Self;

    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for F64x2 {
    type Output = Self;

    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        if !s.is_finite() {
            return Self::from_f64(s);
        }
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::normalized(s, e + f)
    }
}

impl Sub for F64x2 {
    type Output = Self;

    fn sub(self, b: Self) -> Self {
        self + -b
    }
}

impl Mul for F64x2 {
    type Output = Self;

    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        if !p.is_finite() {
            return Self::from_f64(p);
        }
        Self::normalized(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for F64x2 {
    type Output = Self;

    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() || b.hi.is_infinite() {
            return Self::from_f64(q1);
        }
        let r = self - b * Self::from_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Self::from_f64(q2);
        let q3 = r.hi / b.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Self { hi: q1, lo: q2 } + Self::from_f64(q3)
    }
}

impl Rem for F64x2 {
    type Output = Self;

    fn rem(self, b: Self) -> Self {
        self - (self / b).dd_trunc() * b
    }
}

macro_rules! assign_ops {
    ($($trait:ident $method:ident $op:tt),*) => {$(
        impl $trait for F64x2 {
            fn $method(&mut self, b: Self) {
                *self = *self $op b;
            }
        }
    )*};
}

assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl Zero for F64x2 {
    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for F64x2 {
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Num for F64x2 {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;

    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::from_f64)
    }
}

impl ToPrimitive for F64x2 {
    fn to_i128(&self) -> Option<i128> {
        if !self.is_finite() || self.hi.abs() >= 2f64.powi(126) {
            return None;
        }
        let t = self.dd_trunc();
        Some(t.hi as i128 + t.lo as i128)
    }

    fn to_i64(&self) -> Option<i64> {
        self.to_i128()?.try_into().ok()
    }

    fn to_u64(&self) -> Option<u64> {
        self.to_i128()?.try_into().ok()
    }

    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for F64x2 {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::normalized(hi, (n - hi as i64) as f64))
    }

    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        Some(Self::normalized(hi, (n as i128 - hi as i128) as f64))
    }

    fn from_f64(n: f64) -> Option<Self> {
        Some(Self::from_f64(n))
    }
}

impl NumCast for F64x2 {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Self::from_f64)
    }
}

impl Float for F64x2 {
    fn nan() -> Self {
        Self::from_f64(f64::NAN)
    }

    fn infinity() -> Self {
        Self::from_f64(f64::INFINITY)
    }

    fn neg_infinity() -> Self {
        Self::from_f64(f64::NEG_INFINITY)
    }

    fn neg_zero() -> Self {
        Self::from_f64(-0.0)
    }

    fn min_value() -> Self {
        Self::from_f64(f64::MIN)
    }

    fn min_positive_value() -> Self {
        Self::from_f64(f64::MIN_POSITIVE)
    }

    fn max_value() -> Self {
        Self::from_f64(f64::MAX)
    }

    fn epsilon() -> Self {
        Self::from_f64(f64::EPSILON * f64::EPSILON)
    }

    fn is_nan(self) -> bool {
        self.hi.is_nan() || self.lo.is_nan()
    }

    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }

    fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }

    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }

    fn classify(self) -> FpCategory {
        self.hi.classify()
    }

    fn floor(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            Self::normalized(hi, self.lo.floor())
        } else {
            Self::from_f64(hi)
        }
    }

    fn ceil(self) -> Self {
        let hi = self.hi.ceil();
        if hi == self.hi {
            Self::normalized(hi, self.lo.ceil())
        } else {
            Self::from_f64(hi)
        }
    }

    fn round(self) -> Self {
        (self + Self::from_f64(0.5)).floor()
    }

    fn trunc(self) -> Self {
        self.dd_trunc()
    }

    fn fract(self) -> Self {
        self - self.dd_trunc()
    }

    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn signum(self) -> Self {
        Self::from_f64(self.hi.signum())
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
        Self::one() / self
    }

    fn powi(self, n: i32) -> Self {
        let mut base = self;
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base = base * base;
            e >>= 1;
        }
        if n < 0 {
            acc.recip()
        } else {
            acc
        }
    }

    fn powf(self, n: Self) -> Self {
        (n * self.dd_ln()).dd_exp()
    }

    fn sqrt(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Self::from_f64(self.hi.sqrt());
        }
        let y = Self::from_f64(self.hi.sqrt());
        y + (self - y * y) / (y + y)
    }

    fn exp(self) -> Self {
        self.dd_exp()
    }

    fn exp2(self) -> Self {
        (self * LN_2).dd_exp()
    }

    fn ln(self) -> Self {
        self.dd_ln()
    }

    fn log(self, base: Self) -> Self {
        self.dd_ln() / base.dd_ln()
    }

    fn log2(self) -> Self {
        self.dd_ln() / LN_2
    }

    fn log10(self) -> Self {
        self.dd_ln() / Self::from_f64(10.0).dd_ln()
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
            Self::zero()
        }
    }

    fn cbrt(self) -> Self {
        self.via_f64(f64::cbrt)
    }

    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }

    fn sin(self) -> Self {
        self.via_f64(f64::sin)
    }

    fn cos(self) -> Self {
        self.via_f64(f64::cos)
    }

    fn tan(self) -> Self {
        self.via_f64(f64::tan)
    }

    fn asin(self) -> Self {
        self.via_f64(f64::asin)
    }

    fn acos(self) -> Self {
        self.via_f64(f64::acos)
    }

    fn atan(self) -> Self {
        self.via_f64(f64::atan)
    }

    fn atan2(self, other: Self) -> Self {
        Self::from_f64(self.hi.atan2(other.hi))
    }

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn exp_m1(self) -> Self {
        self.dd_exp() - Self::one()
    }

    fn ln_1p(self) -> Self {
        (Self::one() + self).dd_ln()
    }

    fn sinh(self) -> Self {
        let e = self.dd_exp();
        (e - e.recip()) / Self::from_f64(2.0)
    }

    fn cosh(self) -> Self {
        let e = self.dd_exp();
        (e + e.recip()) / Self::from_f64(2.0)
    }

    fn tanh(self) -> Self {
        if self.is_nan() {
            return self;
        }
        let q = (Self::from_f64(-2.0) * self.abs()).dd_exp();
        let t = (Self::one() - q) / (Self::one() + q);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }

    fn asinh(self) -> Self {
        (self + (self * self + Self::one()).sqrt()).dd_ln()
    }

    fn acosh(self) -> Self {
        (self + (self * self - Self::one()).sqrt()).dd_ln()
    }

    fn atanh(self) -> Self {
        ((Self::one() + self) / (Self::one() - self)).dd_ln() / Self::from_f64(2.0)
    }

    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(value: F64x2, hi: f64, lo: f64) -> bool {
        let reference = F64x2::new(hi, lo);
        ((value - reference) / reference).abs().hi() < 1e-29
    }

    // References computed with 200-bit arithmetic and rounded to two doubles.
    #[test]
    fn functions_match_high_precision_references() {
        let exp = [
            (0.3, 1.3498588075760032, -9.447314673432387e-17),
            (-1.7, 0.18268352405273466, -5.430659906894856e-18),
            (12.5, 268337.2865208745, -2.0035114163950887e-11),
            (-30.0, 9.357622968840175e-14, -2.1170146272646406e-30),
        ];
        let ln = [
            (0.3, -1.2039728043259361, 8.935521583403776e-17),
            (7.25, 1.9810014688665833, 6.013262624124967e-17),
            (1e-5, -11.512925464970229, 2.790027459050308e-16),
        ];
        let tanh = [
            (0.3, 0.2913126124515909, -6.4602656586469586e-18),
            (-2.2, -0.9757431300314515, -6.805858635606157e-18),
            (1e-4, 9.999999966666667e-05, 4.51890806545438e-21),
        ];
        for (x, hi, lo) in exp {
            assert!(close(F64x2::from_f64(x).exp(), hi, lo), "exp({x})");
        }
        for (x, hi, lo) in ln {
            assert!(close(F64x2::from_f64(x).ln(), hi, lo), "ln({x})");
        }
        for (x, hi, lo) in tanh {
            assert!(close(F64x2::from_f64(x).tanh(), hi, lo), "tanh({x})");
        }
    }

    #[test]
    fn arithmetic_matches_high_precision_references() {
        let n = F64x2::new(0.4511883639059736, 1.234e-17);
        let d = F64x2::new(1.5488116360940265, -3.21e-17);
        assert!(close(n / d, 0.29131261245159096, -2.2617873556111772e-17));
        assert!(close(n * d, 0.698805788087798, -2.434330312884572e-17));
        let third = F64x2::one() / F64x2::from_f64(3.0);
        assert!(close(third + third + third, 1.0, 0.0));
        assert!(close(
            F64x2::from_f64(2.0).sqrt(),
            std::f64::consts::SQRT_2,
            -9.667293313452913e-17
        ));
    }

    #[test]
    fn edge_cases() {
        assert_eq!(F64x2::from_f64(-800.0).exp().hi(), 0.0);
        assert!(F64x2::from_f64(800.0).exp().is_infinite());
        assert!(F64x2::from_f64(-1.0).ln().is_nan());
        assert_eq!(F64x2::from_f64(0.0).ln(), F64x2::neg_infinity());
        assert_eq!(F64x2::from_f64(400.0).tanh().hi(), 1.0);
        assert_eq!(F64x2::from_f64(-400.0).tanh().hi(), -1.0);
        assert!(
            F64x2::from_f64(0.5) < F64x2::infinity()
                && F64x2::neg_infinity() < F64x2::from_f64(-1e300)
        );
        assert_eq!(
            F64x2::neg_infinity().max(F64x2::from_f64(2.0)),
            F64x2::from_f64(2.0)
        );
        assert_eq!(
            F64x2::from_f64(7.5) % F64x2::from_f64(2.0),
            F64x2::from_f64(1.5)
        );
        assert_eq!(F64x2::from_f64(-2.5).floor(), F64x2::from_f64(-3.0));
        assert_eq!(F64x2::from_f64(-2.5).trunc(), F64x2::from_f64(-2.0));
        assert_eq!(
            F64x2::from_f64(3.0).powi(-2) * F64x2::from_f64(9.0),
            F64x2::one()
        );
        assert_eq!(<F64x2 as FromPrimitive>::from_f64(2e-8).unwrap().hi(), 2e-8);
        assert_eq!(F64x2::from_u64(u64::MAX).unwrap().to_u64(), Some(u64::MAX));
        assert_eq!(
            F64x2::from_i64(-(1 << 60) - 1).unwrap().to_i64(),
            Some(-(1 << 60) - 1)
        );
    }
}
