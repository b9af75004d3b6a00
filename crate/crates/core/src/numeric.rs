//! Small numeric helpers shared across modules: link functions, bracketed
//! root finding, and the order-one modified Bessel function of the second kind.

use crate::error::{Error, Result};

pub use statrs::function::gamma::{gamma_lr, ln_gamma};

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Bisection on a monotone function with a sign change on `[lo, hi]`.
///
/// Stops once the bracket is narrower than `rel_tol * max(|lo|, |hi|, abs_floor)`.
pub fn bisect<F>(mut f: F, mut lo: f64, mut hi: f64, rel_tol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() || f_lo.is_nan() || f_hi.is_nan() {
        return Err(Error::Convergence {
            message: format!("root not bracketed on [{lo}, {hi}]"),
            trace: vec![f_lo, f_hi],
        });
    }
    for _ in 0..max_iter {
        let mid = 0.5 * (lo + hi);
        if (hi - lo) <= rel_tol * lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE) {
            return Ok(mid);
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Convergence {
        message: format!("bisection exceeded {max_iter} iterations"),
        trace: vec![lo, hi],
    })
}

/// Modified Bessel function of the second kind, order one, for `x > 0`.
///
/// Power series below `x = 2`, Steed's continued fraction above.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k1 requires x > 0");
    if x <= 2.0 {
        k1_series(x)
    } else {
        k0_k1_continued_fraction(x).1
    }
}

fn k1_series(x: f64) -> f64 {
    let y = 0.25 * x * x;
    // I1(x) and the digamma-weighted series share the term (x^2/4)^k / (k! (k+1)!).
    let mut term = 1.0;
    let mut i1_sum = 0.0;
    let mut psi_sum = 0.0;
    let mut harmonic = 0.0; // H_k
    for k in 0..60 {
        let kf = k as f64;
        if k > 0 {
            term *= y / (kf * (kf + 1.0));
            harmonic += 1.0 / kf;
        }
        // psi(k+1) + psi(k+2) = -2 gamma + 2 H_k + 1/(k+1)
        let psi = -2.0 * EULER_GAMMA + 2.0 * harmonic + 1.0 / (kf + 1.0);
        i1_sum += term;
        psi_sum += psi * term;
        if term < 1e-18 * i1_sum {
            break;
        }
    }
    let i1 = 0.5 * x * i1_sum;
    1.0 / x + (0.5 * x).ln() * i1 - 0.25 * x * psi_sum
}

fn k0_k1_continued_fraction(x: f64) -> (f64, f64) {
    let a1 = 0.25;
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut h = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..10_000 {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh = (b * d - 1.0) * delh;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-17 {
            break;
        }
    }
    let h = a1 * h;
    let k0 = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp() / s;
    let k1 = k0 * (x + 0.5 - h) / x;
    (k0, k1)
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
