//! Scalar abstraction shared by the numeric kernels.

use std::cmp::Ordering;
use std::fmt::{self, Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

/// Floating point scalar used by the generic kernels. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Converts an `f64` literal into the scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits the scalar type")
    }

    /// Converts a count into the scalar type.
    #[inline]
    fn count(n: u64) -> Self {
        Self::from_u64(n).expect("count fits the scalar type")
    }

    /// Natural log of the gamma function.
    fn ln_gamma(self) -> Self {
        Self::lit(statrs::function::gamma::ln_gamma(self.to_f64().unwrap_or(f64::NAN)))
    }

    /// `ln(n choose k)`.
    fn ln_choose(n: u64, k: u64) -> Self {
        debug_assert!(k <= n);
        let one = Self::one();
        (Self::count(n) + one).ln_gamma()
            - (Self::count(k) + one).ln_gamma()
            - (Self::count(n - k) + one).ln_gamma()
    }

    /// Smallest bisection width the type can resolve meaningfully around 1.
    fn resolution() -> Self {
        Self::epsilon() * Self::lit(4.0)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `ln(Σ exp(x_i))`, returning `-∞` for an empty or all-`-∞` input.
pub fn log_sum_exp<T: Real>(terms: &[T]) -> T {
    let max = terms.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let total: T = terms.iter().map(|&t| (t - max).exp()).sum();
    max + total.ln()
}

/// A real number extended with `+∞` and `-∞`. NaN is never representable.
///
/// Serializes finite values as numbers and infinities as the strings `"inf"` / `"-inf"`.
#[derive(Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct ExtendedReal<T>(T);

impl<T: Real> ExtendedReal<T> {
    /// Wraps `x`, returning `None` for NaN.
    pub fn new(x: T) -> Option<Self> {
        if x.is_nan() {
            None
        } else {
            Some(Self(x))
        }
    }

    pub fn pos_inf() -> Self {
        Self(T::infinity())
    }

    pub fn neg_inf() -> Self {
        Self(T::neg_infinity())
    }

    pub fn zero() -> Self {
        Self(T::zero())
    }

    /// Finite value from an `f64` literal.
    pub fn lit(x: f64) -> Self {
        Self::new(T::lit(x)).expect("literal is not NaN")
    }

    #[inline]
    pub fn value(self) -> T {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }

    pub fn is_pos_inf(self) -> bool {
        self.0 == T::infinity()
    }

    pub fn is_neg_inf(self) -> bool {
        self.0 == T::neg_infinity()
    }

    pub fn abs(self) -> Self {
        Self(self.0.abs())
    }

    /// Sign in `{-1, 0, 1}`.
    pub fn signum(self) -> i8 {
        if self.0 > T::zero() {
            1
        } else if self.0 < T::zero() {
            -1
        } else {
            0
        }
    }
}

impl<T: Real> Eq for ExtendedReal<T> {}

impl<T: Real> Ord for ExtendedReal<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.partial_cmp(&other.0).expect("extended reals are never NaN")
    }
}

impl<T: Real> Debug for ExtendedReal<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Display::fmt(self, f)
    }
}

impl<T: Real> Display for ExtendedReal<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_pos_inf() {
            f.write_str("inf")
        } else if self.is_neg_inf() {
            f.write_str("-inf")
        } else {
            Display::fmt(&self.0, f)
        }
    }
}

impl<T: Real + FromStr> FromStr for ExtendedReal<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" | "+infinity" => Ok(Self::pos_inf()),
            "-inf" | "-infinity" => Ok(Self::neg_inf()),
            other => other
                .parse::<T>()
                .ok()
                .and_then(Self::new)
                .ok_or_else(|| format!("not an extended real: {s:?}")),
        }
    }
}

impl<T: Real> Serialize for ExtendedReal<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.is_finite() {
            serializer.serialize_f64(self.0.to_f64().unwrap_or_default())
        } else {
            serializer.collect_str(self)
        }
    }
}

impl<'de, T: Real + FromStr> Deserialize<'de> for ExtendedReal<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(x) => T::from_f64(x).and_then(Self::new).ok_or_else(|| de::Error::custom("NaN")),
            Repr::Text(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

impl From<f64> for ExtendedReal<f64> {
    fn from(x: f64) -> Self {
        Self::new(x).expect("NaN is not an extended real")
    }
}

impl<T: Real> std::ops::Neg for ExtendedReal<T> {
    type Output = Self;

    fn neg(self) -> Self {
        Self(-self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_is_total() {
        let mut xs: Vec<ExtendedReal<f64>> = vec![
            ExtendedReal::pos_inf(),
            ExtendedReal::lit(1.0),
            ExtendedReal::neg_inf(),
            ExtendedReal::lit(-3.0),
        ];
        xs.sort();
        assert!(xs[0].is_neg_inf());
        assert!(xs[3].is_pos_inf());
        assert_eq!(xs[1].value(), -3.0);
    }

    #[test]
    fn json_roundtrip() {
        let v = vec![ExtendedReal::lit(1.5), ExtendedReal::pos_inf(), ExtendedReal::neg_inf()];
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"[1.5,"inf","-inf"]"#);
        assert_eq!(serde_json::from_str::<Vec<ExtendedReal<f64>>>(&json).unwrap(), v);
        assert!(serde_json::from_str::<ExtendedReal<f64>>("\"nan\"").is_err());
    }

    #[test]
    fn nan_rejected() {
        assert!(ExtendedReal::new(f64::NAN).is_none());
        assert!("nan".parse::<ExtendedReal<f64>>().is_err());
    }

    #[test]
    fn parse_and_display_infinities() {
        let x: ExtendedReal<f64> = "inf".parse().unwrap();
        assert!(x.is_pos_inf());
        assert_eq!(x.to_string(), "inf");
        let y: ExtendedReal<f32> = "-inf".parse().unwrap();
        assert_eq!(y.to_string(), "-inf");
        let z: ExtendedReal<f64> = "0.25".parse().unwrap();
        assert_eq!(z.value(), 0.25);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[0.0f64, 0.0]);
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let big = log_sum_exp(&[1000.0f64, 1000.0]);
        assert!((big - 1000.0 - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ln_choose_matches_small_values() {
        assert!((f64::ln_choose(10, 3) - 120f64.ln()).abs() < 1e-10);
        assert!((f32::ln_choose(6, 3) - 20f32.ln()).abs() < 1e-4);
    }
}
