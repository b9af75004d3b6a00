use serde::{Deserialize, Serialize};

use super::grid::HyperGrid;
use super::{to_natural, LatentGaussianModel};
use crate::numeric::{bisect, normal_cdf};

/// Weights below this are ignored when mixing latent marginals.
const NEGLIGIBLE_WEIGHT: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// 2.5% quantile.
    pub lower: f64,
    /// 97.5% quantile.
    pub upper: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub components: Vec<ComponentSummary>,
}

impl PosteriorSummary {
    pub fn get(&self, name: &str) -> Option<&ComponentSummary> {
        self.components.iter().find(|c| c.name == name)
    }

    pub fn means(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.mean).collect()
    }
}

/// Quantile of `sum_k w_k N(m_k, s_k^2)` by bisection on the mixture CDF.
pub fn mixture_quantile(parts: &[(f64, f64, f64)], p: f64) -> f64 {
    let cdf = |x: f64| -> f64 {
        parts
            .iter()
            .map(|&(w, m, s)| {
                if s > 0.0 {
                    w * normal_cdf((x - m) / s)
                } else if x >= m {
                    w
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            - p
    };
    let lo = parts.iter().map(|&(_, m, s)| m - 12.0 * s).fold(f64::INFINITY, f64::min);
    let hi = parts.iter().map(|&(_, m, s)| m + 12.0 * s).fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return lo;
    }
    let lo = lo - 1e-12 * lo.abs().max(1.0);
    let hi = hi + 1e-12 * hi.abs().max(1.0);
    bisect(cdf, lo, hi, 1e-13, 300).unwrap_or(0.5 * (lo + hi))
}

/// Latent marginals as Gaussian mixtures over the grid.
pub fn latent_marginals(model: &LatentGaussianModel, grid: &HyperGrid) -> PosteriorSummary {
    let labels = model.structure().labels();
    let used: Vec<_> = grid
        .points
        .iter()
        .filter(|p| p.weight > NEGLIGIBLE_WEIGHT && p.mean.is_some())
        .collect();
    let total: f64 = used.iter().map(|p| p.weight).sum();
    let components = labels
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let parts: Vec<(f64, f64, f64)> = used
                .iter()
                .map(|p| {
                    let m = p.mean.as_ref().unwrap()[i];
                    let v = p.marginal_var.as_ref().unwrap()[i];
                    (p.weight / total, m, v.sqrt())
                })
                .collect();
            let (mean, var) = if parts.len() == 1 {
                (parts[0].1, parts[0].2 * parts[0].2)
            } else {
                let mean: f64 = parts.iter().map(|&(w, m, _)| w * m).sum();
                let second: f64 = parts.iter().map(|&(w, m, s)| w * (s * s + (m - mean) * (m - mean))).sum();
                (mean, second)
            };
            let sd = var.max(0.0).sqrt();
            let (lower, upper) = if parts.len() == 1 {
                (mean - 1.959_963_984_540_054 * sd, mean + 1.959_963_984_540_054 * sd)
            } else {
                (mixture_quantile(&parts, 0.025), mixture_quantile(&parts, 0.975))
            };
            ComponentSummary {
                name,
                mean,
                sd,
                lower: lower.min(mean),
                upper: upper.max(mean),
            }
        })
        .collect();
    PosteriorSummary { components }
}

/// Hyperparameter marginals on the natural scale.
///
/// Moments are grid-weighted; quantiles come from spreading each point's
/// weight uniformly over its cell along the axis in internal coordinates.
pub fn hyper_marginals(model: &LatentGaussianModel, grid: &HyperGrid) -> PosteriorSummary {
    let components = model
        .free_hypers()
        .iter()
        .enumerate()
        .map(|(k, h)| {
            let pts: Vec<(f64, f64)> = grid
                .points
                .iter()
                .filter(|p| p.weight > 0.0)
                .map(|p| (p.theta[k], p.weight))
                .collect();
            let mean: f64 = pts.iter().map(|&(t, w)| w * to_natural(t)).sum();
            let var: f64 = pts.iter().map(|&(t, w)| w * (to_natural(t) - mean).powi(2)).sum();
            let width = grid.cell_width(k);
            let (lower, upper) = if pts.len() <= 1 || width <= 0.0 {
                (mean, mean)
            } else {
                let cdf = |t: f64, p: f64| -> f64 {
                    pts.iter()
                        .map(|&(c, w)| w * ((t - (c - 0.5 * width)) / width).clamp(0.0, 1.0))
                        .sum::<f64>()
                        - p
                };
                let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min) - width;
                let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max) + width;
                let q = |p: f64| to_natural(bisect(|t| cdf(t, p), lo, hi, 1e-12, 300).unwrap_or(0.5 * (lo + hi)));
                (q(0.025), q(0.975))
            };
            ComponentSummary {
                name: h.name.clone(),
                mean,
                sd: var.max(0.0).sqrt(),
                lower: lower.min(mean),
                upper: upper.max(mean),
            }
        })
        .collect();
    PosteriorSummary { components }
}
