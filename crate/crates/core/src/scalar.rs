//! Scalar abstraction: all numeric code in this crate is generic over [`Real`].
//!
//! `f64` is the working type for production use (see the aliases at the crate
//! root); `f32` instantiations are supported for callers that can live with
//! looser tolerances.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar used throughout the crate.
pub trait Real:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lifts an `f64` constant into the scalar type.
    ///
    /// Constants that underflow the target type (e.g. `1e-300` into `f32`)
    /// saturate to the smallest positive normal value instead of zero, so
    /// guard thresholds stay usable.
    fn of(v: f64) -> Self {
        let lifted = Self::from_f64(v).expect("constant must be representable");
        if v > 0.0 && !(lifted > Self::zero()) {
            Self::min_positive_value()
        } else {
            lifted
        }
    }

    /// Lifts a count into the scalar type.
    fn count(n: usize) -> Self {
        Self::from_usize(n).expect("count must be representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `t * ln(t / d)`, with both arguments floored so the `t -> 0` limit is 0.
pub fn xlog_ratio<R: Real>(t: R, d: R, floor: R) -> R {
    if t <= floor {
        R::zero()
    } else {
        t * (t / d.max(floor)).ln()
    }
}

/// Max-shifted log-sum-exp of `terms`, i.e. `ln(sum_i w_i * exp(v_i))`.
///
/// Weights must be positive. Returns `-inf` for an empty slice.
pub fn weighted_logsumexp<R: Real>(terms: impl Iterator<Item = (R, R)> + Clone) -> R {
    let mut hi = R::neg_infinity();
    for (_, v) in terms.clone() {
        if v > hi {
            hi = v;
        }
    }
    if hi == R::neg_infinity() {
        return hi;
    }
    let mut acc = R::zero();
    for (w, v) in terms {
        acc = acc + w * (v - hi).exp();
    }
    hi + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn of_saturates_subnormal_constants() {
        let v = <f32 as Real>::of(1e-300);
        assert!(v > 0.0);
        assert_eq!(<f64 as Real>::of(1e-300), 1e-300);
    }

    #[test]
    fn logsumexp_is_shift_stable() {
        let vals = [(1.0f64, 700.0), (1.0, 701.0)];
        let got = weighted_logsumexp(vals.iter().copied());
        let expect = 701.0 + (1.0 + (-1.0f64).exp()).ln();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn xlog_ratio_limit_is_zero() {
        assert_eq!(xlog_ratio(0.0, 1.0, 1e-300), 0.0);
        assert!((xlog_ratio(2.0, 4.0, 1e-300) - 2.0 * (0.5f64).ln()).abs() < 1e-15);
    }
}
