use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::LatentGaussianModel;
use super::EngineConfig;
use crate::distributions::Likelihood;
use crate::error::{Error, Result};

/// Gaussian approximation of `pi(x | theta, y)` at its mode.
#[derive(Debug, Clone)]
pub struct GaussianApprox {
    pub mode: DVector<f64>,
    /// `Q(theta) + A^T diag(c) A` at the mode.
    pub precision: DMatrix<f64>,
    /// Half the log-determinant of `precision` on the constraint complement.
    pub log_det_half: f64,
    /// Half the log-determinant of `Q(theta)` on the constraint complement.
    pub prior_log_det_half: f64,
    /// `x^T Q x` at the mode.
    pub prior_quadratic: f64,
    /// Log-likelihood at the mode.
    pub loglik: f64,
    /// Diagonal of the constrained covariance.
    pub marginal_var: DVector<f64>,
    pub iterations: usize,
    /// Objective values after each accepted step, starting from the projected initial point.
    pub trace: Vec<f64>,
    /// Max-norm of the projected gradient at the mode.
    pub gradient_norm: f64,
    pub curvature_clamps: usize,
    pub predictor_clamps: usize,
}

impl GaussianApprox {
    /// `log pi(y | theta)` by the Laplace identity (exact for Gaussian likelihoods).
    pub fn log_marginal_likelihood(&self) -> f64 {
        self.prior_log_det_half - 0.5 * self.prior_quadratic + self.loglik - self.log_det_half
    }

    /// Latent log density `-x^T Q x / 2 + log-lik` at the mode.
    pub fn objective(&self) -> f64 {
        self.loglik - 0.5 * self.prior_quadratic
    }
}

/// Cholesky of `M + C^T C` with the pieces needed to work on `{x : C x = 0}`.
pub(crate) struct ConstrainedFactor {
    chol: Cholesky<f64, Dyn>,
    c: DMatrix<f64>,
    /// `(M + C^T C)^{-1} C^T`
    w: DMatrix<f64>,
    /// Cholesky of `C W`.
    cw: Option<Cholesky<f64, Dyn>>,
}

impl ConstrainedFactor {
    pub(crate) fn new(m: &DMatrix<f64>, c: &DMatrix<f64>, what: &str) -> Result<Self> {
        let mut aug = m.clone();
        if c.nrows() > 0 {
            aug += c.transpose() * c;
        }
        let chol = Cholesky::new(aug).ok_or_else(|| Error::Decomposition(format!("{what} is not positive definite")))?;
        let (w, cw) = if c.nrows() > 0 {
            let w = chol.solve(&c.transpose());
            let cw = Cholesky::new(c * &w)
                .ok_or_else(|| Error::Decomposition(format!("{what}: constraint system is singular")))?;
            (w, Some(cw))
        } else {
            (DMatrix::zeros(m.nrows(), 0), None)
        };
        Ok(Self {
            chol,
            c: c.clone(),
            w,
            cw,
        })
    }

    /// Maximizer of `g^T d - d^T M d / 2` subject to `C d = 0`.
    pub(crate) fn solve(&self, g: &DVector<f64>) -> DVector<f64> {
        let d0 = self.chol.solve(g);
        match &self.cw {
            Some(cw) => {
                let lambda = cw.solve(&(&self.c * &d0));
                d0 - &self.w * lambda
            }
            None => d0,
        }
    }

    pub(crate) fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let mut s: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        if let Some(cw) = &self.cw {
            let lc = cw.l_dirty();
            s += (0..lc.nrows()).map(|i| lc[(i, i)].ln()).sum::<f64>() * 2.0;
        }
        s
    }

    pub(crate) fn covariance_diag(&self) -> DVector<f64> {
        let inv = self.chol.inverse();
        let mut diag = inv.diagonal();
        if let Some(cw) = &self.cw {
            let v = cw.l_dirty().solve_lower_triangular(&self.w.transpose()).expect("triangular solve");
            for i in 0..diag.len() {
                diag[i] -= v.column(i).norm_squared();
            }
        }
        diag.map(|v| v.max(0.0))
    }

    pub(crate) fn covariance(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        match &self.cw {
            Some(cw) => {
                let v = cw.l_dirty().solve_lower_triangular(&self.w.transpose()).expect("triangular solve");
                inv - v.transpose() * v
            }
            None => inv,
        }
    }
}

struct Evaluation {
    objective: f64,
    loglik: f64,
    quadratic: f64,
    gradient: DVector<f64>,
    curvature: Vec<f64>,
    curvature_clamps: usize,
    predictor_clamps: usize,
}

fn evaluate(model: &LatentGaussianModel, lik: &Likelihood, q: &DMatrix<f64>, x: &DVector<f64>) -> Evaluation {
    let groups = model.groups();
    let eta = groups.rows.mul_vec(x);
    let mut d1 = vec![0.0; groups.len()];
    let mut curvature = vec![0.0; groups.len()];
    let mut loglik = 0.0;
    let mut curvature_clamps = 0;
    let mut predictor_clamps = 0;
    for (i, &yi) in model.y().iter().enumerate() {
        let g = groups.group_of[i];
        let d = lik.derivs(yi, eta[g], groups.offsets[g]);
        loglik += d.loglik;
        d1[g] += d.d1;
        if d.d2 > 0.0 {
            curvature_clamps += 1;
        } else {
            curvature[g] -= d.d2;
        }
        if d.clamped {
            predictor_clamps += 1;
        }
    }
    let qx = q * x;
    let quadratic = x.dot(&qx);
    let gradient = groups.rows.tmul(&d1) - qx;
    Evaluation {
        objective: loglik - 0.5 * quadratic,
        loglik,
        quadratic,
        gradient,
        curvature,
        curvature_clamps,
        predictor_clamps,
    }
}

fn project(c: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    if c.nrows() == 0 {
        v.clone()
    } else {
        v - c.transpose() * (c * v)
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Damped Newton–Raphson for the mode of `pi(x | theta, y)` on `{x : C x = 0}`.
pub fn newton_mode(
    model: &LatentGaussianModel,
    theta: &[f64],
    init: Option<&DVector<f64>>,
    config: &EngineConfig,
) -> Result<GaussianApprox> {
    let structure = model.structure();
    let c = structure.constraints();
    let (lik, scales) = model.resolve(theta);
    if let Some(bad) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::domain(format!("block scale {bad} is not a positive number")));
    }
    let q = structure.precision(&scales);
    let n = structure.dim();
    let mut x = match init {
        Some(v) if v.len() == n => project(c, v),
        Some(_) => return Err(Error::domain("initial latent vector has wrong length")),
        None => DVector::zeros(n),
    };

    let mut ev = evaluate(model, &lik, &q, &x);
    let mut trace = vec![ev.objective];
    let mut pg_norm = max_abs(&project(c, &ev.gradient));
    let mut iterations = 0;
    while pg_norm >= config.newton_tol {
        if iterations >= config.newton_max_iter {
            return Err(Error::Convergence {
                message: format!(
                    "Newton iterations exceeded {} (projected gradient {pg_norm:.3e})",
                    config.newton_max_iter
                ),
                trace,
            });
        }
        if !ev.objective.is_finite() {
            return Err(Error::Convergence {
                message: "latent objective is not finite".into(),
                trace,
            });
        }
        let mut h = q.clone();
        model.groups().rows.add_weighted_gram(&ev.curvature, &mut h);
        let factor = ConstrainedFactor::new(&h, c, "latent Hessian")?;
        let step = factor.solve(&ev.gradient);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &step * t;
            let cand_ev = evaluate(model, &lik, &q, &cand);
            if cand_ev.objective.is_finite() {
                let cand_pg = max_abs(&project(c, &cand_ev.gradient));
                let tol = 1e-12 * ev.objective.abs().max(1.0);
                if cand_ev.objective >= ev.objective
                    || (cand_ev.objective >= ev.objective - tol && cand_pg < pg_norm)
                {
                    accepted = Some((cand, cand_ev, cand_pg));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((nx, nev, npg)) = accepted else {
            return Err(Error::Convergence {
                message: format!("step halving failed to improve the objective (projected gradient {pg_norm:.3e})"),
                trace,
            });
        };
        x = nx;
        ev = nev;
        pg_norm = npg;
        trace.push(ev.objective);
        iterations += 1;
    }

    let mut h = q.clone();
    model.groups().rows.add_weighted_gram(&ev.curvature, &mut h);
    let factor = ConstrainedFactor::new(&h, c, "latent Hessian at the mode")?;
    let prior_factor = ConstrainedFactor::new(&q, c, "prior precision on the constraint complement")?;
    Ok(GaussianApprox {
        marginal_var: factor.covariance_diag(),
        log_det_half: 0.5 * factor.log_det(),
        prior_log_det_half: 0.5 * prior_factor.log_det(),
        prior_quadratic: ev.quadratic,
        loglik: ev.loglik,
        precision: h,
        mode: x,
        iterations,
        trace,
        gradient_norm: pg_norm,
        curvature_clamps: ev.curvature_clamps,
        predictor_clamps: ev.predictor_clamps,
    })
}

/// Third-order correction of the mean of `pi(x | theta, y)` relative to its mode:
/// `Sigma A^T (f''' * diag(A Sigma A^T)) / 2`, zero for Gaussian likelihoods.
pub fn mean_shift(model: &LatentGaussianModel, theta: &[f64], approx: &GaussianApprox) -> Result<DVector<f64>> {
    let (lik, _) = model.resolve(theta);
    let groups = model.groups();
    let eta = groups.rows.mul_vec(&approx.mode);
    let mut third = vec![0.0; groups.len()];
    for (i, &yi) in model.y().iter().enumerate() {
        let g = groups.group_of[i];
        third[g] += lik.derivs(yi, eta[g], groups.offsets[g]).d3;
    }
    if third.iter().all(|&t| t == 0.0) {
        return Ok(DVector::zeros(approx.mode.len()));
    }
    let cov = constrained_covariance(model, approx)?;
    let weights: Vec<f64> = (0..groups.len())
        .map(|g| {
            let row: Vec<(usize, f64)> = groups.rows.row(g).collect();
            let var: f64 = row
                .iter()
                .flat_map(|&(j, a)| row.iter().map(move |&(k, b)| (j, k, a * b)))
                .map(|(j, k, ab)| ab * cov[(j, k)])
                .sum();
            0.5 * third[g] * var
        })
        .collect();
    Ok(cov * groups.rows.tmul(&weights))
}

/// Full constrained covariance of a Gaussian approximation.
pub fn constrained_covariance(model: &LatentGaussianModel, approx: &GaussianApprox) -> Result<DMatrix<f64>> {
    Ok(ConstrainedFactor::new(&approx.precision, model.structure().constraints(), "latent Hessian")?.covariance())
}
