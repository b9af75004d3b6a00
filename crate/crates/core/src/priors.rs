//! Penalized-complexity priors for the GP tail index and the remaining
//! hyperparameter priors (Gamma shape, log-gamma precisions, intercepts).
//!
//! The PC prior penalizes the distance `d(xi) = sqrt(2 KLD)` between a GP with
//! tail index `xi` and its exponential base model at constant rate `lambda`.
//! For the GP, `KLD = xi^2 / (1 - xi)` independently of the scale. Both prior
//! forms are parametrized here by `rate = sqrt(2) * lambda`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::ln_gamma;

fn check_unit_interval(xi: f64) -> Result<()> {
    if !(0.0..1.0).contains(&xi) {
        return Err(Error::domain(format!("tail index must lie in [0,1), got {xi}")));
    }
    Ok(())
}

/// Kullback-Leibler divergence from GP(sigma, xi) to the exponential base model.
pub fn kld_gp_exp(xi: f64) -> Result<f64> {
    check_unit_interval(xi)?;
    Ok(xi * xi / (1.0 - xi))
}

/// `sqrt(2 KLD) = sqrt(2) xi / sqrt(1 - xi)`.
pub fn pc_distance(xi: f64) -> Result<f64> {
    check_unit_interval(xi)?;
    Ok(std::f64::consts::SQRT_2 * xi / (1.0 - xi).sqrt())
}

/// `d'(xi) = sqrt(2) (1 - xi/2) (1 - xi)^(-3/2)`.
pub fn pc_distance_derivative(xi: f64) -> Result<f64> {
    check_unit_interval(xi)?;
    Ok(std::f64::consts::SQRT_2 * (1.0 - 0.5 * xi) * (1.0 - xi).powf(-1.5))
}

/// PC prior built on the exact divergence; support `[0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcPriorExact {
    lambda: f64,
}

impl PcPriorExact {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::domain(format!("penalization rate must be positive, got {lambda}")));
        }
        Ok(Self { lambda })
    }

    pub fn from_rate(rate: f64) -> Result<Self> {
        Self::new(rate / std::f64::consts::SQRT_2)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn rate(&self) -> f64 {
        std::f64::consts::SQRT_2 * self.lambda
    }

    pub fn pdf(&self, xi: f64) -> f64 {
        if !(0.0..1.0).contains(&xi) {
            return 0.0;
        }
        self.ln_pdf(xi).exp()
    }

    pub fn ln_pdf(&self, xi: f64) -> f64 {
        if !(0.0..1.0).contains(&xi) {
            return f64::NEG_INFINITY;
        }
        let r = self.rate();
        let one_m = 1.0 - xi;
        r.ln() - r * xi / one_m.sqrt() + (1.0 - 0.5 * xi).ln() - 1.5 * one_m.ln()
    }

    /// `Pr(xi > xi0) = exp(-lambda d(xi0))`.
    pub fn tail_prob(&self, xi0: f64) -> f64 {
        if xi0 <= 0.0 {
            1.0
        } else if xi0 >= 1.0 {
            0.0
        } else {
            (-self.rate() * xi0 / (1.0 - xi0).sqrt()).exp()
        }
    }
}

/// PC prior built on the small-`xi` approximation `KLD ~ xi^2`: exponential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcPriorExp {
    rate: f64,
}

impl PcPriorExp {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::domain(format!("exponential rate must be positive, got {rate}")));
        }
        Ok(Self { rate })
    }

    pub fn from_lambda(lambda: f64) -> Result<Self> {
        Self::new(std::f64::consts::SQRT_2 * lambda)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn pdf(&self, xi: f64) -> f64 {
        if xi < 0.0 {
            0.0
        } else {
            self.rate * (-self.rate * xi).exp()
        }
    }

    pub fn ln_pdf(&self, xi: f64) -> f64 {
        if xi < 0.0 {
            f64::NEG_INFINITY
        } else {
            self.rate.ln() - self.rate * xi
        }
    }

    pub fn tail_prob(&self, xi0: f64) -> f64 {
        if xi0 <= 0.0 {
            1.0
        } else {
            (-self.rate * xi0).exp()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorForm {
    Exact,
    Exp,
}

/// Rate `sqrt(2) lambda` such that `Pr(xi > xi0) = p0` under the chosen form.
pub fn elicit_rate(xi0: f64, p0: f64, form: PriorForm) -> Result<f64> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::domain(format!("p0 must lie in (0,1), got {p0}")));
    }
    let target = -p0.ln();
    match form {
        PriorForm::Exp => {
            if !(xi0 > 0.0 && xi0.is_finite()) {
                return Err(Error::domain(format!("xi0 must be positive, got {xi0}")));
            }
            Ok(target / xi0)
        }
        PriorForm::Exact => {
            if !(xi0 > 0.0 && xi0 < 1.0) {
                return Err(Error::domain(format!("xi0 must lie in (0,1), got {xi0}")));
            }
            Ok(target * (1.0 - xi0).sqrt() / xi0)
        }
    }
}

/// Prior on the GP tail index in either form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "lowercase")]
pub enum TailIndexPrior {
    Exact(PcPriorExact),
    Exp(PcPriorExp),
}

impl TailIndexPrior {
    pub fn ln_pdf(&self, xi: f64) -> f64 {
        match self {
            TailIndexPrior::Exact(p) => p.ln_pdf(xi),
            TailIndexPrior::Exp(p) => p.ln_pdf(xi),
        }
    }
}

/// Gamma prior in shape/rate form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * x.ln() - self.rate * x
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn mode(&self) -> f64 {
        ((self.shape - 1.0) / self.rate).max(0.0)
    }
}

/// Prior on the Gamma likelihood shape `k`: shape 2, mean 1.
pub fn gamma_shape_prior() -> GammaPrior {
    GammaPrior { shape: 2.0, rate: 2.0 }
}

/// Log-gamma prior: `tau ~ Gamma(shape, inverse_scale)`, expressed on `log tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPrior {
    pub shape: f64,
    pub inverse_scale: f64,
}

impl Default for PrecisionPrior {
    fn default() -> Self {
        Self {
            shape: 1.0,
            inverse_scale: 5e-5,
        }
    }
}

impl PrecisionPrior {
    pub fn new(shape: f64, inverse_scale: f64) -> Result<Self> {
        if !(shape > 0.0 && inverse_scale > 0.0) {
            return Err(Error::domain("precision prior parameters must be positive"));
        }
        Ok(Self { shape, inverse_scale })
    }

    /// Density of `theta = log tau`.
    pub fn ln_pdf_log_precision(&self, theta: f64) -> f64 {
        self.shape * self.inverse_scale.ln() - ln_gamma(self.shape) + self.shape * theta
            - self.inverse_scale * theta.exp()
    }
}

/// Gaussian prior for an intercept, mean zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterceptPrior {
    pub variance: f64,
}

impl Default for InterceptPrior {
    fn default() -> Self {
        Self { variance: 1000.0 }
    }
}
