//! Response laws of the three stages: generalized Pareto (scale and quantile
//! parametrizations), Gamma in mean/shape form, and Bernoulli, together with
//! the predictor derivatives consumed by the Newton iterations.

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaSampler, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{bisect, gamma_lr, ln_gamma, logistic, softplus};

/// Below this tail index the `xi -> 0` expansions are used.
pub const XI_SERIES_THRESHOLD: f64 = 1e-8;

/// Linear predictors are clamped to `[-ETA_CLAMP, ETA_CLAMP]` before `exp`/`logistic`.
pub const ETA_CLAMP: f64 = 40.0;

/// `log(1 + xi * a) / xi`, continuous at `xi = 0`.
#[inline]
fn log1p_over_xi(xi: f64, a: f64) -> f64 {
    if xi <= XI_SERIES_THRESHOLD {
        a - 0.5 * xi * a * a
    } else {
        (xi * a).ln_1p() / xi
    }
}

/// `{(1 - q)^(-xi) - 1} / xi` written in terms of `l = -log(1 - q)`.
#[inline]
fn quantile_factor(xi: f64, l: f64) -> f64 {
    if xi <= XI_SERIES_THRESHOLD {
        l * (1.0 + 0.5 * xi * l)
    } else {
        (xi * l).exp_m1() / xi
    }
}

/// GP law in the classical `(sigma, xi)` form, restricted to `xi >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpScale {
    sigma: f64,
    xi: f64,
}

impl GpScale {
    pub fn new(sigma: f64, xi: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::domain(format!("GP scale must be positive, got {sigma}")));
        }
        if !(xi >= 0.0 && xi.is_finite()) {
            return Err(Error::domain(format!("GP tail index must be >= 0, got {xi}")));
        }
        Ok(Self { sigma, xi })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// `Pr(Y > y)`: `(1 + xi y / sigma)^(-1/xi)`, or `exp(-y / sigma)` in the limit.
    pub fn survival(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(Error::domain(format!("GP survival needs y >= 0, got {y}")));
        }
        Ok((-log1p_over_xi(self.xi, y / self.sigma)).exp())
    }

    pub fn ln_pdf(&self, y: f64) -> f64 {
        if y < 0.0 {
            return f64::NEG_INFINITY;
        }
        let z = y / self.sigma;
        -self.sigma.ln() - (1.0 + self.xi) * log1p_over_xi(self.xi, z)
    }

    pub fn mean(&self) -> f64 {
        if self.xi < 1.0 {
            self.sigma / (1.0 - self.xi)
        } else {
            f64::INFINITY
        }
    }

    /// Inverse-transform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = Open01.sample(rng);
        let m = -u.ln(); // -log(survival)
        if self.xi <= XI_SERIES_THRESHOLD {
            self.sigma * m * (1.0 + 0.5 * self.xi * m)
        } else {
            self.sigma * (self.xi * m).exp_m1() / self.xi
        }
    }
}

/// GP law parametrized by its `q`-quantile `kappa_q` and tail index `xi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpQuantile {
    kappa: f64,
    q: f64,
    xi: f64,
}

impl GpQuantile {
    pub fn new(kappa: f64, q: f64, xi: f64) -> Result<Self> {
        if !(kappa > 0.0 && kappa.is_finite()) {
            return Err(Error::domain(format!("GP quantile must be positive, got {kappa}")));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::domain(format!("q must lie in (0,1), got {q}")));
        }
        if !(xi >= 0.0 && xi.is_finite()) {
            return Err(Error::domain(format!("GP tail index must be >= 0, got {xi}")));
        }
        Ok(Self { kappa, q, xi })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    fn neg_log_1mq(&self) -> f64 {
        -(-self.q).ln_1p()
    }

    /// `(1 - q)^(-xi) - 1` divided by `xi` (equal to `-log(1-q)` at `xi = 0`).
    pub fn b_over_xi(&self) -> f64 {
        quantile_factor(self.xi, self.neg_log_1mq())
    }

    pub fn survival(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(Error::domain(format!("GP survival needs y >= 0, got {y}")));
        }
        Ok((-self.neg_log_survival(y)).exp())
    }

    /// `-log Pr(Y > y)`.
    pub fn neg_log_survival(&self, y: f64) -> f64 {
        let a = self.b_over_xi() * y / self.kappa;
        log1p_over_xi(self.xi, a)
    }

    pub fn cdf(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(Error::domain(format!("GP cdf needs y >= 0, got {y}")));
        }
        Ok(-(-self.neg_log_survival(y)).exp_m1())
    }

    pub fn ln_pdf(&self, y: f64) -> f64 {
        if y < 0.0 {
            return f64::NEG_INFINITY;
        }
        let bx = self.b_over_xi();
        let a = bx * y / self.kappa;
        bx.ln() - self.kappa.ln() - (1.0 + self.xi) * log1p_over_xi(self.xi, a)
    }

    /// The `alpha`-quantile. `quantile(q) == kappa` exactly.
    pub fn quantile(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::domain(format!("alpha must lie in (0,1), got {alpha}")));
        }
        Ok(self.quantile_from_neg_log_survival(-(-alpha).ln_1p()))
    }

    /// Value `y` with `-log Pr(Y > y) = m`.
    pub fn quantile_from_neg_log_survival(&self, m: f64) -> f64 {
        let l = self.neg_log_1mq();
        if self.xi <= XI_SERIES_THRESHOLD {
            self.kappa * (m / l) * (1.0 + 0.5 * self.xi * (m - l))
        } else {
            self.kappa * (self.xi * m).exp_m1() / (self.xi * l).exp_m1()
        }
    }

    /// `sigma = kappa_q * xi / {(1-q)^(-xi) - 1}`, or `kappa_q / log(1/(1-q))` at `xi = 0`.
    pub fn to_scale(&self) -> GpScale {
        GpScale {
            sigma: self.kappa / self.b_over_xi(),
            xi: self.xi,
        }
    }

    pub fn from_scale(scale: &GpScale, q: f64) -> Result<Self> {
        let probe = GpQuantile::new(1.0, q, scale.xi)?;
        GpQuantile::new(scale.sigma * probe.b_over_xi(), q, scale.xi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = Open01.sample(rng);
        self.quantile_from_neg_log_survival(-u.ln())
    }
}

/// Gamma law with mean `mu` and shape `k` (rate `k / mu`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaMeanShape {
    mu: f64,
    k: f64,
}

impl GammaMeanShape {
    pub fn new(mu: f64, k: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::domain(format!("Gamma mean must be positive, got {mu}")));
        }
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::domain(format!("Gamma shape must be positive, got {k}")));
        }
        Ok(Self { mu, k })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn ln_pdf(&self, y: f64) -> Result<f64> {
        if !(y > 0.0) {
            return Err(Error::domain(format!("Gamma density needs y > 0, got {y}")));
        }
        let k = self.k;
        Ok(k * k.ln() - k * self.mu.ln() - ln_gamma(k) + (k - 1.0) * y.ln() - k * y / self.mu)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            0.0
        } else {
            gamma_lr(self.k, self.k * y / self.mu)
        }
    }

    /// Quantile by bracketed bisection on the regularized incomplete gamma function.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("probability must lie in (0,1), got {p}")));
        }
        let mut hi = self.mu.max(f64::MIN_POSITIVE);
        let mut expansions = 0;
        while self.cdf(hi) < p {
            hi *= 2.0;
            expansions += 1;
            if expansions > 200 || !hi.is_finite() {
                return Err(Error::Convergence {
                    message: format!("could not bracket Gamma quantile p={p} (mu={}, k={})", self.mu, self.k),
                    trace: vec![hi],
                });
            }
        }
        bisect(|y| self.cdf(y) - p, 0.0, hi, 1e-13, 400)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        GammaSampler::new(self.k, self.mu / self.k)
            .expect("validated parameters")
            .sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernoulliParam {
    p: f64,
}

impl BernoulliParam {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("Bernoulli probability must lie in (0,1), got {p}")));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn ln_pmf(&self, z: bool) -> f64 {
        if z {
            self.p.ln()
        } else {
            (-self.p).ln_1p()
        }
    }
}

/// Log-likelihood of one datum and its first two derivatives in the predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorDerivatives {
    pub loglik: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// Set when the linear predictor fell outside `[-ETA_CLAMP, ETA_CLAMP]`.
    pub clamped: bool,
}

/// Likelihood family without its hyperparameter value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Family {
    /// Identity link with known noise precision; the conjugate test family.
    Gaussian,
    /// Log link on the mean; hyperparameter is the shape.
    Gamma,
    /// Logit link; no hyperparameter.
    Bernoulli,
    /// Log link on the `q`-quantile; hyperparameter is the tail index.
    Gp { q: f64 },
}

impl Family {
    pub fn has_hyperparameter(&self) -> bool {
        !matches!(self, Family::Bernoulli)
    }

    pub fn with_param(&self, value: f64) -> Likelihood {
        match *self {
            Family::Gaussian => Likelihood::Gaussian { precision: value },
            Family::Gamma => Likelihood::Gamma { shape: value },
            Family::Bernoulli => Likelihood::Bernoulli,
            Family::Gp { q } => Likelihood::Gp { q, xi: value },
        }
    }
}

/// Family with its hyperparameter resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    Gaussian { precision: f64 },
    Gamma { shape: f64 },
    Bernoulli,
    Gp { q: f64, xi: f64 },
}

impl Likelihood {
    /// Derivatives of `log pi(y | eta)` where the full linear predictor is `offset + eta`.
    pub fn derivs(&self, y: f64, eta: f64, offset: f64) -> PredictorDerivatives {
        let raw = offset + eta;
        if let Likelihood::Gaussian { precision } = *self {
            let r = y - raw;
            return PredictorDerivatives {
                loglik: 0.5 * (precision.ln() - (2.0 * std::f64::consts::PI).ln()) - 0.5 * precision * r * r,
                d1: precision * r,
                d2: -precision,
                d3: 0.0,
                clamped: false,
            };
        }
        let lp = raw.clamp(-ETA_CLAMP, ETA_CLAMP);
        let clamped = lp != raw;
        let (loglik, d1, d2, d3) = match *self {
            Likelihood::Gamma { shape: k } => {
                let ratio = y * (-lp).exp();
                (
                    k * k.ln() - k * lp - ln_gamma(k) + (k - 1.0) * y.ln() - k * ratio,
                    -k + k * ratio,
                    -k * ratio,
                    k * ratio,
                )
            }
            Likelihood::Bernoulli => {
                let p = logistic(lp);
                let v = p * (1.0 - p);
                (y * lp - softplus(lp), y - p, -v, -v * (1.0 - 2.0 * p))
            }
            Likelihood::Gp { q, xi } => {
                let bx = quantile_factor(xi, -(-q).ln_1p());
                let a = bx * y * (-lp).exp();
                let denom = 1.0 + xi * a;
                (
                    -lp + bx.ln() - (1.0 + xi) * log1p_over_xi(xi, a),
                    -1.0 + (1.0 + xi) * a / denom,
                    -(1.0 + xi) * a / (denom * denom),
                    (1.0 + xi) * a * (1.0 - xi * a) / (denom * denom * denom),
                )
            }
            Likelihood::Gaussian { .. } => unreachable!(),
        };
        PredictorDerivatives {
            loglik,
            d1,
            d2,
            d3,
            clamped,
        }
    }
}

/// Free-function form of [`Likelihood::derivs`].
pub fn predictor_derivs(y: f64, likelihood: &Likelihood, eta: f64, offset: f64) -> PredictorDerivatives {
    likelihood.derivs(y, eta, offset)
}

/// Overall `alpha`-quantile above threshold `u` given overall exceedance
/// probability `p_u` and the GP excess law. `None` when `alpha <= 1 - p_u`.
pub fn high_quantile(alpha: f64, u: f64, p_u: f64, excess: &GpQuantile) -> Option<f64> {
    if !(alpha > 1.0 - p_u) || !(alpha < 1.0) {
        return None;
    }
    // -log{(1 - alpha) / p_u}
    let m = p_u.ln() - (-alpha).ln_1p();
    Some(u + excess.quantile_from_neg_log_survival(m))
}

/// `Pr(Y > y) = p_u * {1 - GP(y - u)}` for `y >= u`.
pub fn composed_tail_probability(y: f64, u: f64, p_u: f64, excess: &GpQuantile) -> f64 {
    if y < u {
        return f64::NAN;
    }
    p_u * (-excess.neg_log_survival(y - u)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gp_survival_examples() {
        let exp = GpScale::new(2.0, 0.0).unwrap();
        assert!((exp.survival(2.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let par = GpScale::new(1.0, 0.5).unwrap();
        assert_eq!(par.survival(0.0).unwrap(), 1.0);
        assert!((par.survival(1.0).unwrap() - 1.0 / 2.25).abs() < 1e-15);
    }

    #[test]
    fn gp_survival_rejects_bad_input() {
        let par = GpScale::new(1.0, 0.2).unwrap();
        assert!(par.survival(-0.1).is_err());
        assert!(GpScale::new(0.0, 0.2).is_err());
        assert!(GpScale::new(1.0, -0.1).is_err());
    }

    #[test]
    fn gp_continuity_at_zero_tail_index() {
        let sigma = 1.7;
        let near = GpScale::new(sigma, 1e-9).unwrap();
        for i in 1..=1000 {
            let y = 10.0 * sigma * i as f64 / 1000.0;
            let diff = (near.survival(y).unwrap() - (-y / sigma).exp()).abs();
            assert!(diff < 1e-7);
        }
    }

    #[test]
    fn gp_quantile_examples() {
        let par = GpQuantile::new(2.0, 0.5, 0.0).unwrap();
        assert_eq!(par.quantile(0.5).unwrap(), 2.0);
        for &xi in &[0.0, 1e-12, 0.34, 0.9] {
            let p = GpQuantile::new(1.3, 0.7, xi).unwrap();
            assert_eq!(p.quantile(0.7).unwrap(), 1.3);
        }
        assert!(par.quantile(1.0).is_err());
        assert!(par.quantile(0.0).is_err());
    }

    #[test]
    fn gp_quantile_matches_bisection_on_cdf() {
        let par = GpQuantile::new(1.0, 0.5, 0.34).unwrap();
        let y = par.quantile(0.9).unwrap();
        // oracle: bisection on the cdf written directly from the quantile form
        let b = 0.5f64.powf(-0.34) - 1.0;
        let cdf = |y: f64| 1.0 - (1.0 + b * y).powf(-1.0 / 0.34);
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < 0.9 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((y - lo).abs() < 1e-10);
        assert!((cdf(y) - 0.9).abs() < 1e-10);
    }

    #[test]
    fn conversion_examples() {
        let q = 1.0 - (-1.0f64).exp();
        let s = GpQuantile::new(1.0, q, 0.0).unwrap().to_scale();
        assert!((s.sigma() - 1.0).abs() < 1e-14);
        let s = GpQuantile::new(1.0, 0.5, 0.5).unwrap().to_scale();
        let expected = 0.5 / (0.5f64.powf(-0.5) - 1.0);
        assert!((s.sigma() - expected).abs() < 1e-14);
        assert!((s.sigma() - 1.207107).abs() < 1e-6);
    }

    #[test]
    fn conversion_round_trip_grid() {
        for i in 0..10 {
            for j in 0..10 {
                let kappa = 0.05 + 0.7 * i as f64;
                let xi = 0.1 * j as f64;
                let par = GpQuantile::new(kappa, 0.5, xi).unwrap();
                let back = GpQuantile::from_scale(&par.to_scale(), 0.5).unwrap();
                assert!((back.kappa() - kappa).abs() <= 1e-12 * kappa);
                let scale = par.to_scale();
                for &y in &[0.1, 1.0, 7.5] {
                    let s1 = scale.survival(y).unwrap();
                    let s2 = par.survival(y).unwrap();
                    assert!((s1 - s2).abs() <= 1e-12 * s2.max(1e-300));
                }
            }
        }
    }

    #[test]
    fn gamma_logpdf_examples() {
        let g = GammaMeanShape::new(1.0, 1.0).unwrap();
        assert!((g.ln_pdf(1.0).unwrap() + 1.0).abs() < 1e-14);
        // k^k mu^-k / Gamma(k) y^(k-1) exp(-k y / mu) at y=2, mu=2, k=3: 27/8/2 * 4 * e^-3
        let g = GammaMeanShape::new(2.0, 3.0).unwrap();
        let direct = (27.0 / 8.0 / 2.0 * 4.0f64).ln() - 3.0;
        assert!((g.ln_pdf(2.0).unwrap() - direct).abs() < 1e-13);
        assert!(g.ln_pdf(0.0).is_err());
    }

    #[test]
    fn gamma_sample_mean() {
        let g = GammaMeanShape::new(2.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mean = (0..n).map(|_| g.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn gamma_quantile_exponential_case_and_round_trip() {
        let sigma0 = 0.37;
        let g = GammaMeanShape::new(sigma0, 1.0).unwrap();
        for &p in &[0.1, 0.5, 0.92, 0.999] {
            let expected = -sigma0 * (1.0f64 - p).ln();
            let got = g.quantile(p).unwrap();
            assert!((got - expected).abs() <= 1e-10 * expected);
        }
        let g = GammaMeanShape::new(1.0, 2.0).unwrap();
        for &p in &[0.90, 0.92, 0.99] {
            let y = g.quantile(p).unwrap();
            assert!((g.cdf(y) - p).abs() < 1e-9);
        }
    }

    #[test]
    fn bernoulli_derivs_at_zero() {
        let d = Likelihood::Bernoulli.derivs(1.0, 0.0, 0.0);
        assert!((d.loglik - 0.5f64.ln()).abs() < 1e-15);
        assert!((d.d1 - 0.5).abs() < 1e-15);
        assert!((d.d2 + 0.25).abs() < 1e-15);
    }

    #[test]
    fn gamma_derivs_vanish_at_mean() {
        for &k in &[0.3, 1.0, 4.0] {
            let y: f64 = 1.7;
            let d = Likelihood::Gamma { shape: k }.derivs(y, y.ln(), 0.0);
            assert!(d.d1.abs() < 1e-14);
        }
    }

    #[test]
    fn gp_loglik_matches_density() {
        let lik = Likelihood::Gp { q: 0.5, xi: 0.34 };
        let (y, eta, off) = (0.8, 0.2, -0.3);
        let d = lik.derivs(y, eta, off);
        let par = GpQuantile::new((eta + off as f64).exp(), 0.5, 0.34).unwrap();
        assert!((d.loglik - par.ln_pdf(y)).abs() < 1e-13);
        let par0 = GpQuantile::new(1.2, 0.5, 0.0).unwrap();
        let d0 = Likelihood::Gp { q: 0.5, xi: 0.0 }.derivs(0.4, 1.2f64.ln(), 0.0);
        assert!((d0.loglik - par0.ln_pdf(0.4)).abs() < 1e-13);
    }

    #[test]
    fn predictor_clamp_is_flagged() {
        let d = Likelihood::Gamma { shape: 1.0 }.derivs(1.0, 100.0, 0.0);
        assert!(d.clamped);
        assert!(d.loglik.is_finite());
        let d = Likelihood::Bernoulli.derivs(0.0, -5.0, 0.0);
        assert!(!d.clamped);
    }

    #[test]
    fn high_quantile_exponential_branch() {
        let (u, p_u, kappa, alpha) = (2.0, 0.04, 1.0, 0.998);
        let excess = GpQuantile::new(kappa, 0.5, 0.0).unwrap();
        let y = high_quantile(alpha, u, p_u, &excess).unwrap();
        let formula = u + kappa * ((1.0 - alpha) / p_u).ln() / (0.5f64).ln();
        assert!((y - formula).abs() < 1e-13);
        assert!(high_quantile(0.9, u, p_u, &excess).is_none());
    }
}
