//! Log-gamma, digamma and trigamma, plus the Beta-distribution KL divergence
//! built on them.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

// Below this the recurrence shifts the argument up before the asymptotic series.
const ASYMPTOTIC_FROM: f64 = 10.0;

fn check_domain<T: Scalar>(x: T) -> Result<()> {
    if x > T::zero() && x.is_finite() {
        Ok(())
    } else {
        Err(Error::DomainError(x.as_f64()))
    }
}

/// `ln Γ(x)` for `x > 0`.
pub fn lgamma<T: Scalar>(x: T) -> Result<T> {
    check_domain(x)?;
    Ok(lgamma_unchecked(x))
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma<T: Scalar>(x: T) -> Result<T> {
    check_domain(x)?;
    Ok(digamma_unchecked(x))
}

/// `ψ₁(x) = d²/dx² ln Γ(x)` for `x > 0`.
pub fn trigamma<T: Scalar>(x: T) -> Result<T> {
    check_domain(x)?;
    Ok(trigamma_unchecked(x))
}

#[inline]
pub(crate) fn lgamma_unchecked<T: Scalar>(x: T) -> T {
    if x < T::lit(0.5) {
        // Γ(x) = Γ(x + 1) / x
        return lgamma_unchecked(x + T::one()) - x.ln();
    }
    let z = x - T::one();
    let mut acc = T::lit(LANCZOS_COEF[0]);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += T::lit(c) / (z + T::lit(i as f64));
    }
    let t = z + T::lit(LANCZOS_G + 0.5);
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln()) + (z + T::lit(0.5)) * t.ln() - t + acc.ln()
}

#[inline]
pub(crate) fn digamma_unchecked<T: Scalar>(mut x: T) -> T {
    let mut shift = T::zero();
    let top = T::lit(ASYMPTOTIC_FROM);
    while x < top {
        shift += x.recip();
        x += T::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    // Bernoulli-number tail, Horner form in 1/x².
    let tail = inv2
        * (T::lit(1.0 / 12.0)
            - inv2
                * (T::lit(1.0 / 120.0)
                    - inv2
                        * (T::lit(1.0 / 252.0)
                            - inv2
                                * (T::lit(1.0 / 240.0)
                                    - inv2
                                        * (T::lit(1.0 / 132.0)
                                            - inv2 * (T::lit(691.0 / 32760.0) - inv2 * T::lit(1.0 / 12.0)))))));
    x.ln() - T::lit(0.5) * inv - tail - shift
}

#[inline]
pub(crate) fn trigamma_unchecked<T: Scalar>(mut x: T) -> T {
    let mut shift = T::zero();
    let top = T::lit(ASYMPTOTIC_FROM);
    while x < top {
        shift += (x * x).recip();
        x += T::one();
    }
    let inv = x.recip();
    let inv2 = inv * inv;
    let tail = inv
        * inv2
        * (T::lit(1.0 / 6.0)
            - inv2
                * (T::lit(1.0 / 30.0)
                    - inv2
                        * (T::lit(1.0 / 42.0)
                            - inv2
                                * (T::lit(1.0 / 30.0)
                                    - inv2
                                        * (T::lit(5.0 / 66.0)
                                            - inv2 * (T::lit(691.0 / 2730.0) - inv2 * T::lit(7.0 / 6.0)))))));
    inv + T::lit(0.5) * inv2 + tail + shift
}

/// `ln B(a, b)`.
#[inline]
pub fn ln_beta<T: Scalar>(a: T, b: T) -> T {
    lgamma_unchecked(a) + lgamma_unchecked(b) - lgamma_unchecked(a + b)
}

/// `KL(Beta(a1, b1) ‖ Beta(a2, b2))` in closed form.
pub fn beta_kl<T: Scalar>(a1: T, b1: T, a2: T, b2: T) -> Result<T> {
    for v in [a1, b1, a2, b2] {
        check_domain(v)?;
    }
    Ok(ln_beta(a2, b2) - ln_beta(a1, b1)
        + (a1 - a2) * digamma_unchecked(a1)
        + (b1 - b2) * digamma_unchecked(b1)
        + (a2 - a1 + b2 - b1) * digamma_unchecked(a1 + b1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_at_one_and_two_is_zero() {
        assert!(lgamma(1.0f64).unwrap().abs() < 1e-14);
        assert!(lgamma(2.0f64).unwrap().abs() < 1e-14);
    }

    #[test]
    fn euler_mascheroni() {
        assert!((digamma(1.0f64).unwrap() + 0.577_215_664_901_532_9).abs() < 1e-13);
    }

    #[test]
    fn digamma_recurrence() {
        for &x in &[0.1f64, 1.0, 10.0, 100.0] {
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            assert!((d - 1.0 / x).abs() < 1e-10, "x={x} d={d}");
        }
    }

    #[test]
    fn trigamma_at_one_is_zeta_two() {
        let z2 = std::f64::consts::PI.powi(2) / 6.0;
        assert!((trigamma(1.0f64).unwrap() - z2).abs() < 1e-13);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(lgamma(0.0f64), Err(Error::DomainError(_))));
        assert!(matches!(digamma(-1.0f64), Err(Error::DomainError(_))));
        assert!(matches!(trigamma(f64::NAN), Err(Error::DomainError(_))));
    }

    #[test]
    fn kl_identities() {
        assert_eq!(beta_kl(1.0f64, 1.0, 1.0, 1.0).unwrap(), 0.0);
        let k = beta_kl(2.0f64, 2.0, 1.0, 1.0).unwrap();
        assert!((k - 0.1251).abs() < 1e-4);
        assert!(beta_kl(0.3f64, 4.0, 2.0, 0.7).unwrap() > 0.0);
    }
}
