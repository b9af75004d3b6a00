//! Nested Laplace approximation for latent Gaussian models.
//!
//! The latent field is approximated by a Gaussian at the conditional mode
//! (found by damped Newton iterations), the hyperparameter posterior by the
//! Laplace identity, and hyperparameters are integrated out on a grid in a
//! standardized parametrization centred at the posterior mode.

mod grid;
mod newton;
mod summary;

use std::collections::HashMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::distributions::{Family, Likelihood};
use crate::error::{Error, Result};
use crate::latent::{ModelStructure, SparseRows};
use crate::priors::{GammaPrior, PrecisionPrior, TailIndexPrior};

pub use grid::{explore_grid, find_mode, GridPoint, HyperGrid, HyperMode};
pub use newton::{constrained_covariance, mean_shift, newton_mode, GaussianApprox};
pub use summary::{hyper_marginals, latent_marginals, mixture_quantile, ComponentSummary, PosteriorSummary};

/// What a free hyperparameter controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum HyperTarget {
    /// The likelihood family parameter (Gamma shape, GP tail index, Gaussian noise precision).
    Likelihood,
    /// Scale multiplying the structure matrix of block `i`.
    BlockScale(usize),
}

/// Prior of a free hyperparameter, stated on its natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "prior", rename_all = "snake_case")]
pub enum HyperPrior {
    /// Log-gamma prior for a precision.
    Precision(PrecisionPrior),
    /// Gamma prior for a positive parameter.
    Gamma(GammaPrior),
    /// PC prior for a GP tail index.
    TailIndex(TailIndexPrior),
}

impl HyperPrior {
    /// Log density of `theta = log(value)`, Jacobian included.
    pub fn ln_pdf_internal(&self, theta: f64) -> f64 {
        match self {
            HyperPrior::Precision(p) => p.ln_pdf_log_precision(theta),
            HyperPrior::Gamma(p) => p.ln_pdf(theta.exp()) + theta,
            HyperPrior::TailIndex(p) => p.ln_pdf(theta.exp()) + theta,
        }
    }
}

/// A free hyperparameter; the engine works with `theta = log(value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeHyper {
    pub name: String,
    pub target: HyperTarget,
    pub prior: HyperPrior,
    /// Starting value on the natural scale.
    pub initial: f64,
}

pub fn to_internal(value: f64) -> f64 {
    value.ln()
}

pub fn to_natural(theta: f64) -> f64 {
    theta.exp()
}

/// Tuning of the inner optimizer and the hyperparameter grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Grid spacing in standard deviations of the Gaussian fit at the mode.
    pub grid_step: f64,
    /// Stop extending once the edge log density is this far below the maximum.
    pub edge_drop: f64,
    pub max_grid_points: usize,
    pub max_axis_steps: usize,
    /// Finite-difference step for the Hessian at the hyperparameter mode.
    pub hessian_step: f64,
    /// Lower bound on the eigenvalues of the negative Hessian.
    pub eigen_floor: f64,
    pub mode_max_evals: u64,
    /// Shift each conditional mode towards the mean by the third-order correction.
    pub mean_correction: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            newton_tol: 1e-8,
            newton_max_iter: 100,
            grid_step: 0.75,
            edge_drop: 6.0,
            max_grid_points: 10_000,
            max_axis_steps: 30,
            hessian_step: 0.02,
            eigen_floor: 0.25,
            mode_max_evals: 600,
            mean_correction: true,
        }
    }
}

/// Observations sharing the same row of the observation matrix and the same
/// offset share a linear predictor; the engine works on these groups.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PredictorGroups {
    pub rows: SparseRows,
    pub offsets: Vec<f64>,
    pub group_of: Vec<usize>,
}

impl PredictorGroups {
    fn build(obs: &SparseRows, offsets: &[f64]) -> Self {
        let mut rows = SparseRows::new(obs.ncols());
        let mut group_offsets = Vec::new();
        let mut group_of = Vec::with_capacity(obs.nrows());
        let mut seen: HashMap<(Vec<(usize, u64)>, u64), usize> = HashMap::new();
        for (i, &off) in offsets.iter().enumerate() {
            let entries: Vec<(usize, f64)> = obs.row(i).collect();
            let key = (entries.iter().map(|&(j, v)| (j, v.to_bits())).collect::<Vec<_>>(), off.to_bits());
            let g = *seen.entry(key).or_insert_with(|| {
                rows.push_row(&entries);
                group_offsets.push(off);
                group_offsets.len() - 1
            });
            group_of.push(g);
        }
        Self {
            rows,
            offsets: group_offsets,
            group_of,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }
}

/// Latent Gaussian model: structure, likelihood, data and hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussianModel {
    structure: ModelStructure,
    family: Family,
    y: Vec<f64>,
    offsets: Vec<f64>,
    /// Likelihood parameter when it is not free (ignored for Bernoulli).
    likelihood_param: f64,
    /// Block scales used when a block is not targeted by a free hyperparameter.
    block_scales: Vec<f64>,
    free: Vec<FreeHyper>,
    groups: PredictorGroups,
}

impl LatentGaussianModel {
    pub fn new(
        structure: ModelStructure,
        family: Family,
        y: Vec<f64>,
        offsets: Option<Vec<f64>>,
        likelihood_param: Option<f64>,
        free: Vec<FreeHyper>,
    ) -> Result<Self> {
        let n = structure.obs_matrix().nrows();
        if y.len() != n {
            return Err(Error::domain(format!("{} observations for {n} predictor rows", y.len())));
        }
        let offsets = offsets.unwrap_or_else(|| vec![0.0; n]);
        if offsets.len() != n {
            return Err(Error::domain("offset length differs from observation count"));
        }
        if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("observation {bad} is not finite")));
        }
        if let Some(bad) = offsets.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("offset {bad} is not finite")));
        }
        let frees_likelihood = free.iter().any(|h| h.target == HyperTarget::Likelihood);
        if frees_likelihood && !family.has_hyperparameter() {
            return Err(Error::domain("Bernoulli likelihood has no hyperparameter"));
        }
        let likelihood_param = match (family.has_hyperparameter(), frees_likelihood, likelihood_param) {
            (false, _, _) | (true, true, _) => likelihood_param.unwrap_or(f64::NAN),
            (true, false, Some(v)) => v,
            (true, false, None) => {
                return Err(Error::domain("likelihood parameter must be fixed or declared free"));
            }
        };
        if free.len() > 3 {
            return Err(Error::domain(format!("at most 3 free hyperparameters supported, got {}", free.len())));
        }
        for (i, h) in free.iter().enumerate() {
            if let HyperTarget::BlockScale(b) = h.target {
                if b >= structure.blocks().len() {
                    return Err(Error::domain(format!("hyperparameter `{}` targets missing block {b}", h.name)));
                }
            }
            if free[..i].iter().any(|o| o.target == h.target) {
                return Err(Error::domain(format!("hyperparameter target of `{}` declared twice", h.name)));
            }
            if !(h.initial > 0.0 && h.initial.is_finite()) {
                return Err(Error::domain(format!("initial value of `{}` must be positive", h.name)));
            }
        }
        let block_scales = structure.default_scales();
        let groups = PredictorGroups::build(structure.obs_matrix(), &offsets);
        Ok(Self {
            structure,
            family,
            y,
            offsets,
            likelihood_param,
            block_scales,
            free,
            groups,
        })
    }

    pub fn structure(&self) -> &ModelStructure {
        &self.structure
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn free_hypers(&self) -> &[FreeHyper] {
        &self.free
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub(crate) fn groups(&self) -> &PredictorGroups {
        &self.groups
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        self.free.iter().map(|h| to_internal(h.initial)).collect()
    }

    /// Likelihood and block scales at internal hyperparameters `theta`.
    pub fn resolve(&self, theta: &[f64]) -> (Likelihood, Vec<f64>) {
        assert_eq!(theta.len(), self.free.len(), "hyperparameter dimension mismatch");
        let mut param = self.likelihood_param;
        let mut scales = self.block_scales.clone();
        for (h, &t) in self.free.iter().zip(theta) {
            match h.target {
                HyperTarget::Likelihood => param = to_natural(t),
                HyperTarget::BlockScale(b) => scales[b] = to_natural(t),
            }
        }
        (self.family.with_param(param), scales)
    }

    pub fn log_prior(&self, theta: &[f64]) -> f64 {
        self.free.iter().zip(theta).map(|(h, &t)| h.prior.ln_pdf_internal(t)).sum()
    }

    /// Linear predictor `A x` (without offsets) for every observation.
    pub fn predictor(&self, x: &DVector<f64>) -> Vec<f64> {
        self.structure.obs_matrix().mul_vec(x)
    }
}

/// Unnormalized `log pi(theta | y)` by the Laplace identity, evaluated at the
/// conditional mode started from `init` (or zero).
pub fn log_post_hyper(
    model: &LatentGaussianModel,
    theta: &[f64],
    init: Option<&DVector<f64>>,
    config: &EngineConfig,
) -> Result<f64> {
    let approx = newton_mode(model, theta, init, config)?;
    Ok(model.log_prior(theta) + approx.log_marginal_likelihood())
}

/// Counters reported with every fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub mode_evaluations: usize,
    pub newton_iterations_at_mode: usize,
    pub newton_iterations_total: usize,
    pub curvature_clamps: usize,
    pub predictor_clamps: usize,
    pub grid_points: usize,
    pub failed_grid_points: usize,
    pub edge_mass: f64,
    pub axis_capped: bool,
}

/// Result of a complete inference run.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    pub grid: HyperGrid,
    pub latent: PosteriorSummary,
    pub hyper: PosteriorSummary,
    pub diagnostics: FitDiagnostics,
}

impl InferenceResult {
    /// Posterior mean of the latent vector.
    pub fn latent_mean(&self) -> DVector<f64> {
        DVector::from_iterator(self.latent.components.len(), self.latent.components.iter().map(|c| c.mean))
    }
}

/// Mode search, grid exploration and marginal summaries.
pub fn fit(model: &LatentGaussianModel, config: &EngineConfig) -> Result<InferenceResult> {
    let grid = explore_grid(model, config)?;
    let latent = latent_marginals(model, &grid);
    let hyper = hyper_marginals(model, &grid);
    let diagnostics = grid.diagnostics.clone();
    Ok(InferenceResult {
        grid,
        latent,
        hyper,
        diagnostics,
    })
}
