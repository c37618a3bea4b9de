//! Special functions used by the modulus computations and their validation
//! suite: the Gauss hypergeometric series, complete elliptic integrals,
//! the rectangle exterior-modulus function `psi` and its inverse, the
//! Teichmueller-type ring function `tau`, and closed-form exterior moduli
//! for rectangles and the symmetric-hexagon half problem.
//!
//! Conventions: all elliptic integrals take the modulus `k` (not the
//! parameter `m = k^2`). The complementary modulus is
//! `k' = sqrt((1 - k)(1 + k))`, written that way to keep accuracy near
//! `k = 1`.

use std::sync::OnceLock;
use thiserror::Error;

/// Relative term tolerance for the hypergeometric series.
const HYP2F1_TOL: f64 = 1e-16;
/// Iteration cap for the hypergeometric series.
const HYP2F1_MAX_TERMS: usize = 1_000_000;
/// Convergence target of `psi_inv`: |psi(k) - x| <= PSI_INV_TOL * max(1, x).
const PSI_INV_TOL: f64 = 1e-13;

/// Errors reported by the special-function layer.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecFunError {
    /// An argument lies outside the mathematical domain of the function.
    #[error("domain error in {func}: {msg}")]
    Domain { func: &'static str, msg: String },
    /// An iterative evaluation failed to converge within its budget.
    #[error("{func} failed to converge after {iterations} iterations")]
    NoConvergence { func: &'static str, iterations: usize },
}

fn domain(func: &'static str, msg: impl Into<String>) -> SpecFunError {
    SpecFunError::Domain {
        func,
        msg: msg.into(),
    }
}

/// Gauss hypergeometric function 2F1(a, b; c; z) by direct series summation
/// with shifted factorials, valid for |z| < 1.
///
/// Terminating cases (a or b a non-positive integer) are summed exactly.
/// `c` must not be a non-positive integer, and |z| must be strictly less
/// than 1; both violations are reported as domain errors.
pub fn hyp2f1(a: f64, b: f64, c: f64, z: f64) -> Result<f64, SpecFunError> {
    if !z.is_finite() || z.abs() >= 1.0 {
        return Err(domain("hyp2f1", format!("|z| must be < 1, got z = {z}")));
    }
    if c <= 0.0 && c == c.floor() {
        return Err(domain(
            "hyp2f1",
            format!("c must not be a non-positive integer, got c = {c}"),
        ));
    }
    let mut sum = 1.0_f64;
    let mut term = 1.0_f64;
    for n in 0..HYP2F1_MAX_TERMS {
        let nf = n as f64;
        term *= (a + nf) * (b + nf) / ((c + nf) * (nf + 1.0)) * z;
        sum += term;
        if term == 0.0 || term.abs() <= HYP2F1_TOL * sum.abs().max(f64::MIN_POSITIVE) {
            return Ok(sum);
        }
    }
    Err(SpecFunError::NoConvergence {
        func: "hyp2f1",
        iterations: HYP2F1_MAX_TERMS,
    })
}

/// Complementary modulus `k' = sqrt((1 - k)(1 + k))`.
#[inline]
pub fn complementary_modulus(k: f64) -> f64 {
    ((1.0 - k) * (1.0 + k)).sqrt()
}

fn check_modulus(func: &'static str, k: f64, allow_one: bool) -> Result<(), SpecFunError> {
    if !k.is_finite() || k < 0.0 || k > 1.0 || (!allow_one && k == 1.0) {
        let upper = if allow_one { "<= 1" } else { "< 1" };
        return Err(domain(func, format!("modulus must satisfy 0 <= k {upper}, got {k}")));
    }
    Ok(())
}

/// AGM iteration seeded with b0 and c0 = modulus of the integral being
/// computed (so b0 is its complementary modulus): returns the common limit
/// of the arithmetic-geometric mean of (1, b0) together with the correction
/// sum `sum 2^(n-1) c_n^2` that enters the second integral.
///
/// Callers pass (k', k) for K, E and (k, k') for K', E'; seeding with the
/// exact pair avoids the rounding of `k'` to 1 for tiny k.
fn agm_with_correction(b0: f64, c0: f64) -> (f64, f64) {
    let mut a = 1.0_f64;
    let mut b = b0;
    let mut c = c0;
    let mut sum = 0.5 * c * c;
    let mut pow2 = 0.5;
    for _ in 0..64 {
        if c.abs() <= f64::EPSILON * a {
            break;
        }
        let an = 0.5 * (a + b);
        let bn = (a * b).sqrt();
        c = 0.5 * (a - b);
        a = an;
        b = bn;
        pow2 *= 2.0;
        sum += pow2 * c * c;
    }
    (a, sum)
}

/// Complete elliptic integral of the first kind K(k), 0 <= k < 1, computed
/// by the arithmetic-geometric mean iteration.
pub fn ellip_k(k: f64) -> Result<f64, SpecFunError> {
    check_modulus("ellip_k", k, false)?;
    let (agm, _) = agm_with_correction(complementary_modulus(k), k);
    Ok(std::f64::consts::PI / (2.0 * agm))
}

/// Complete elliptic integral of the second kind E(k), 0 <= k <= 1, computed
/// by the AGM iteration with the quadratic correction sum; E(1) = 1 exactly.
pub fn ellip_e(k: f64) -> Result<f64, SpecFunError> {
    check_modulus("ellip_e", k, true)?;
    if k == 1.0 {
        return Ok(1.0);
    }
    let (agm, sum) = agm_with_correction(complementary_modulus(k), k);
    let big_k = std::f64::consts::PI / (2.0 * agm);
    Ok(big_k * (1.0 - sum))
}

/// Complementary integral K'(k) = K(k'), 0 < k <= 1.
pub fn ellip_k_prime(k: f64) -> Result<f64, SpecFunError> {
    if !k.is_finite() || k <= 0.0 || k > 1.0 {
        return Err(domain("ellip_k_prime", format!("modulus must satisfy 0 < k <= 1, got {k}")));
    }
    let (agm, _) = agm_with_correction(k, complementary_modulus(k));
    Ok(std::f64::consts::PI / (2.0 * agm))
}

/// Complementary integral E'(k) = E(k'), 0 <= k <= 1.
pub fn ellip_e_prime(k: f64) -> Result<f64, SpecFunError> {
    check_modulus("ellip_e_prime", k, true)?;
    if k == 0.0 {
        return Ok(1.0);
    }
    let (agm, sum) = agm_with_correction(k, complementary_modulus(k));
    let big_k = std::f64::consts::PI / (2.0 * agm);
    Ok(big_k * (1.0 - sum))
}

fn psi_unchecked(k: f64) -> f64 {
    let big_k = ellip_k(k).expect("modulus checked by caller");
    let big_e = ellip_e(k).expect("modulus checked by caller");
    let big_kp = ellip_k_prime(k).expect("modulus checked by caller");
    let big_ep = ellip_e_prime(k).expect("modulus checked by caller");
    2.0 * (big_e - (1.0 - k) * big_k) / (big_ep - k * big_kp)
}

/// One-time consistency check of the `psi` implementation against the
/// singular modulus 3 - 2*sqrt(2), where square symmetry forces psi = 1.
fn psi_self_check() {
    static CHECK: OnceLock<()> = OnceLock::new();
    CHECK.get_or_init(|| {
        let k4 = 3.0 - 2.0 * std::f64::consts::SQRT_2;
        let err = (psi_unchecked(k4) - 1.0).abs();
        assert!(
            err < 1e-8,
            "psi self-check failed: |psi(3 - 2 sqrt 2) - 1| = {err:e}"
        );
    });
}

/// The rectangle side-ratio function
/// `psi(k) = 2 (E(k) - (1 - k) K(k)) / (E'(k) - k K'(k))`,
/// strictly increasing from 0 to infinity on 0 < k < 1.
pub fn psi(k: f64) -> Result<f64, SpecFunError> {
    if !k.is_finite() || k <= 0.0 || k >= 1.0 {
        return Err(domain("psi", format!("argument must satisfy 0 < k < 1, got {k}")));
    }
    psi_self_check();
    Ok(psi_unchecked(k))
}

/// Inverse of `psi`: the unique k in (0, 1) with psi(k) = x, for x > 0.
///
/// Solved by bisection on (1e-15, 1 - 1e-15) followed by secant refinement
/// until |psi(k) - x| <= 1e-13 * max(1, x).
pub fn psi_inv(x: f64) -> Result<f64, SpecFunError> {
    if !x.is_finite() || x <= 0.0 {
        return Err(domain("psi_inv", format!("argument must be positive, got {x}")));
    }
    psi_self_check();
    let mut lo = 1e-15_f64;
    let mut hi = 1.0 - 1e-15;
    if psi_unchecked(lo) > x || psi_unchecked(hi) < x {
        return Err(domain(
            "psi_inv",
            format!("{x} is outside the representable range of psi"),
        ));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if psi_unchecked(mid) < x {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tol = PSI_INV_TOL * x.abs().max(1.0);
    let mut k0 = lo;
    let mut k1 = hi;
    let mut f0 = psi_unchecked(k0) - x;
    let mut f1 = psi_unchecked(k1) - x;
    for _ in 0..30 {
        if f1.abs() <= tol {
            return Ok(k1);
        }
        let denom = f1 - f0;
        if denom == 0.0 {
            break;
        }
        let mut k2 = k1 - f1 * (k1 - k0) / denom;
        if !(0.0..1.0).contains(&k2) {
            k2 = 0.5 * (k0 + k1);
        }
        k0 = k1;
        f0 = f1;
        k1 = k2;
        f1 = psi_unchecked(k1) - x;
    }
    if f1.abs() <= tol {
        Ok(k1)
    } else {
        Err(SpecFunError::NoConvergence {
            func: "psi_inv",
            iterations: 90,
        })
    }
}

/// Exterior modulus of an `a x b` rectangle for the curve family that joins
/// the two sides of length `b` through the complementary domain:
/// `K'(k) / (2 K(k))` with `k = psi_inv(a / b)`.
pub fn dp_rect_exterior_modulus(a: f64, b: f64) -> Result<f64, SpecFunError> {
    if !(a.is_finite() && b.is_finite()) || a <= 0.0 || b <= 0.0 {
        return Err(domain(
            "dp_rect_exterior_modulus",
            format!("side lengths must be positive, got a = {a}, b = {b}"),
        ));
    }
    let k = psi_inv(a / b)?;
    Ok(ellip_k_prime(k)? / (2.0 * ellip_k(k)?))
}

/// Teichmueller-type ring modulus
/// `tau(t) = 2 K(1 / sqrt(1 + t)) / K(sqrt(t / (1 + t)))`, t > 0;
/// strictly decreasing with tau(1) = 2 and tau(t) tau(1/t) = 4.
pub fn tau(t: f64) -> Result<f64, SpecFunError> {
    if !t.is_finite() || t <= 0.0 {
        return Err(domain("tau", format!("argument must be positive, got {t}")));
    }
    let k_num = (1.0 / (1.0 + t)).sqrt();
    let k_den = (t / (1.0 + t)).sqrt();
    Ok(2.0 * ellip_k(k_num)? / ellip_k(k_den)?)
}

/// Half the exterior modulus of the symmetric hexagon duplication problem
/// for a unit-width box of height `h`:
/// `K'(k) / (4 K(k))` with `k = psi_inv(1 / (2 h))`.
/// Equals `dp_rect_exterior_modulus(1, 2 h) / 2`.
pub fn hexagon_half_modulus(h: f64) -> Result<f64, SpecFunError> {
    if !h.is_finite() || h <= 0.0 {
        return Err(domain(
            "hexagon_half_modulus",
            format!("height must be positive, got {h}"),
        ));
    }
    let k = psi_inv(1.0 / (2.0 * h))?;
    Ok(ellip_k_prime(k)? / (4.0 * ellip_k(k)?))
}
