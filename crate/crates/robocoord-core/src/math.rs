//! Scalar special functions used by the confidence-interval machinery.
//!
//! Everything routes through [`libm`] so the crate stays `no_std` and the
//! results are bit-reproducible.

use core::fmt;

/// Error function.
#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Argument of [`inverse_erf`] was outside the open interval (-1, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseErfDomainError(pub f64);

impl fmt::Display for InverseErfDomainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "inverse_erf argument {} outside (-1, 1)", self.0)
    }
}

impl core::error::Error for InverseErfDomainError {}

/// Inverse error function: returns `y` with `erf(y) = x` to about 1e-15.
///
/// Uses Winitzki's rational approximation as the starting point and
/// polishes it with Newton iterations on `erf`.
pub fn inverse_erf(x: f64) -> Result<f64, InverseErfDomainError> {
    if !(x > -1.0 && x < 1.0) {
        return Err(InverseErfDomainError(x));
    }
    if x == 0.0 {
        return Ok(0.0);
    }

    // Winitzki (2008): relative error below 2e-3 on the whole interval.
    let a = 0.147;
    let ln1mx2 = libm::log(1.0 - x * x);
    let term = 2.0 / (core::f64::consts::PI * a) + 0.5 * ln1mx2;
    let mut y = libm::sqrt(libm::sqrt(term * term - ln1mx2 / a) - term);
    if x < 0.0 {
        y = -y;
    }

    for _ in 0..20 {
        let residual = libm::erf(y) - x;
        if libm::fabs(residual) <= 1e-16 {
            break;
        }
        let derivative = core::f64::consts::FRAC_2_SQRT_PI * libm::exp(-y * y);
        if derivative == 0.0 {
            break;
        }
        y -= residual / derivative;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent oracle: bisect erf, which is strictly increasing.
    fn inverse_erf_bisect(x: f64) -> f64 {
        let (mut lo, mut hi) = (-7.0_f64, 7.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if erf(mid) < x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn zero_maps_to_zero() {
        assert_eq!(inverse_erf(0.0).unwrap(), 0.0);
    }

    #[test]
    fn matches_bisection_oracle() {
        // 0.95 -> 1.385903824 (frozen from the bisection oracle).
        let y = inverse_erf(0.95).unwrap();
        assert!((y - 1.385903824).abs() < 1e-8, "y = {y}");
        assert!((y - inverse_erf_bisect(0.95)).abs() < 1e-12);
    }

    #[test]
    fn round_trip_identity() {
        for k in 1..1000 {
            let x = -0.999 + 1.998 * (k as f64) / 1000.0;
            let y = inverse_erf(x).unwrap();
            assert!((erf(y) - x).abs() <= 1e-12, "x = {x}, erf(y) = {}", erf(y));
        }
    }

    #[test]
    fn odd_symmetry() {
        for &x in &[0.1, 0.5, 0.9, 0.99] {
            let pos = inverse_erf(x).unwrap();
            let neg = inverse_erf(-x).unwrap();
            assert!((pos + neg).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_out_of_domain() {
        assert!(inverse_erf(1.0).is_err());
        assert!(inverse_erf(-1.0).is_err());
        assert!(inverse_erf(1.5).is_err());
        assert!(inverse_erf(f64::NAN).is_err());
    }
}
