use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::newton::{mean_shift, newton_mode, GaussianApprox};
use super::{EngineConfig, FitDiagnostics, LatentGaussianModel};
use crate::error::{Error, Result};

/// Posterior mode of the hyperparameters with the Gaussian approximation there.
#[derive(Debug, Clone)]
pub struct HyperMode {
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub approx: GaussianApprox,
    pub evaluations: usize,
}

/// One grid point in internal (log) hyperparameter coordinates.
#[derive(Debug, Clone)]
pub struct GridPoint {
    /// Integer offsets along the standardized axes.
    pub index: Vec<i32>,
    pub theta: Vec<f64>,
    /// `-inf` if the inner fit failed.
    pub log_post: f64,
    pub weight: f64,
    pub mode: Option<DVector<f64>>,
    /// Conditional mean: the mode, shifted when mean correction is on.
    pub mean: Option<DVector<f64>>,
    pub marginal_var: Option<DVector<f64>>,
    pub newton_iterations: usize,
}

/// Weighted hyperparameter grid.
#[derive(Debug, Clone)]
pub struct HyperGrid {
    pub names: Vec<String>,
    pub theta_mode: Vec<f64>,
    /// Columns map standardized coordinates to internal coordinates.
    pub transform: DMatrix<f64>,
    pub step: f64,
    pub points: Vec<GridPoint>,
    pub diagnostics: FitDiagnostics,
}

impl HyperGrid {
    /// Width along internal axis `k` covered by one grid cell.
    pub fn cell_width(&self, k: usize) -> f64 {
        self.step * self.transform.row(k).iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn dim(&self) -> usize {
        self.theta_mode.len()
    }

    /// Weights aggregated by the value of internal coordinate `k`.
    pub fn marginal_on_axis(&self, k: usize) -> Vec<(f64, f64)> {
        let mut acc: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
        for p in &self.points {
            let key = ordered_bits(p.theta[k]);
            let e = acc.entry(key).or_insert((p.theta[k], 0.0));
            e.1 += p.weight;
        }
        acc.into_values().collect()
    }
}

fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

struct NegLogPost<'a> {
    model: &'a LatentGaussianModel,
    config: &'a EngineConfig,
    warm: Mutex<Option<DVector<f64>>>,
    evaluations: Mutex<usize>,
}

impl CostFunction for NegLogPost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        *self.evaluations.lock().unwrap() += 1;
        let init = self.warm.lock().unwrap().clone();
        Ok(match newton_mode(self.model, theta, init.as_ref(), self.config) {
            Ok(a) => {
                let lp = self.model.log_prior(theta) + a.log_marginal_likelihood();
                if lp.is_finite() {
                    *self.warm.lock().unwrap() = Some(a.mode);
                    -lp
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        })
    }
}

/// Maximize the Laplace-approximated hyperparameter posterior.
pub fn find_mode(model: &LatentGaussianModel, config: &EngineConfig) -> Result<HyperMode> {
    let theta0 = model.initial_theta();
    if theta0.is_empty() {
        let approx = newton_mode(model, &[], None, config)?;
        return Ok(HyperMode {
            log_post: approx.log_marginal_likelihood(),
            theta: theta0,
            approx,
            evaluations: 1,
        });
    }
    // a converged inner fit at the start point anchors the warm starts
    let start = newton_mode(model, &theta0, None, config)?;
    let problem = NegLogPost {
        model,
        config,
        warm: Mutex::new(Some(start.mode.clone())),
        evaluations: Mutex::new(1),
    };
    let mut simplex = vec![theta0.clone()];
    for i in 0..theta0.len() {
        let mut v = theta0.clone();
        v[i] += 0.5;
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-9)
        .map_err(|e| Error::domain(e.to_string()))?;
    let res = Executor::new(problem, solver)
        .configure(|s| s.max_iters(config.mode_max_evals))
        .run()
        .map_err(|e| Error::Convergence {
            message: format!("hyperparameter mode search failed: {e}"),
            trace: Vec::new(),
        })?;
    let best = res
        .state()
        .get_best_param()
        .cloned()
        .ok_or_else(|| Error::Convergence {
            message: "hyperparameter mode search produced no point".into(),
            trace: Vec::new(),
        })?;
    let problem = res.problem.problem.as_ref();
    let (warm, mut evaluations) = match problem {
        Some(p) => (p.warm.lock().unwrap().clone(), *p.evaluations.lock().unwrap()),
        None => (Some(start.mode.clone()), 0),
    };
    let approx = newton_mode(model, &best, warm.as_ref(), config)?;
    evaluations += 1;
    let log_post = model.log_prior(&best) + approx.log_marginal_likelihood();
    if !log_post.is_finite() {
        return Err(Error::Convergence {
            message: "hyperparameter posterior is not finite at the mode".into(),
            trace: vec![log_post],
        });
    }
    Ok(HyperMode {
        theta: best,
        log_post,
        approx,
        evaluations,
    })
}

fn conditional_mean(model: &LatentGaussianModel, theta: &[f64], approx: &GaussianApprox, config: &EngineConfig) -> Option<DVector<f64>> {
    if config.mean_correction {
        mean_shift(model, theta, approx).ok().map(|d| &approx.mode + d)
    } else {
        Some(approx.mode.clone())
    }
}

fn eval_lp(model: &LatentGaussianModel, theta: &[f64], init: &DVector<f64>, config: &EngineConfig) -> Option<(f64, GaussianApprox)> {
    let a = newton_mode(model, theta, Some(init), config).ok()?;
    let lp = model.log_prior(theta) + a.log_marginal_likelihood();
    lp.is_finite().then_some((lp, a))
}

/// Central finite-difference Hessian of the log posterior at `theta`.
fn hessian(model: &LatentGaussianModel, mode: &HyperMode, config: &EngineConfig) -> Result<DMatrix<f64>> {
    let m = mode.theta.len();
    let h = config.hessian_step;
    let f = |shift: &[(usize, f64)]| -> Result<f64> {
        let mut t = mode.theta.clone();
        for &(i, d) in shift {
            t[i] += d;
        }
        eval_lp(model, &t, &mode.approx.mode, config)
            .map(|(lp, _)| lp)
            .ok_or_else(|| Error::Convergence {
                message: format!("inner fit failed near the hyperparameter mode at {t:?}"),
                trace: Vec::new(),
            })
    };
    let f0 = mode.log_post;
    let mut hess = DMatrix::zeros(m, m);
    for i in 0..m {
        let fp = f(&[(i, h)])?;
        let fm = f(&[(i, -h)])?;
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let pp = f(&[(i, h), (j, h)])?;
            let pm = f(&[(i, h), (j, -h)])?;
            let mp = f(&[(i, -h), (j, h)])?;
            let mm = f(&[(i, -h), (j, -h)])?;
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    Ok(hess)
}

/// Mode-centred grid in standardized coordinates, extended until every face
/// of the box lies `edge_drop` log units below the maximum.
pub fn explore_grid(model: &LatentGaussianModel, config: &EngineConfig) -> Result<HyperGrid> {
    let mode = find_mode(model, config)?;
    let names: Vec<String> = model.free_hypers().iter().map(|h| h.name.clone()).collect();
    let m = mode.theta.len();
    let mut diagnostics = FitDiagnostics {
        mode_evaluations: mode.evaluations,
        newton_iterations_at_mode: mode.approx.iterations,
        newton_iterations_total: mode.approx.iterations,
        curvature_clamps: mode.approx.curvature_clamps,
        predictor_clamps: mode.approx.predictor_clamps,
        ..Default::default()
    };
    let mode_mean = conditional_mean(model, &mode.theta, &mode.approx, config).ok_or_else(|| {
        Error::domain("latent covariance at the hyperparameter mode is not positive definite")
    })?;
    if m == 0 {
        diagnostics.grid_points = 1;
        return Ok(HyperGrid {
            names,
            theta_mode: Vec::new(),
            transform: DMatrix::zeros(0, 0),
            step: config.grid_step,
            points: vec![GridPoint {
                index: Vec::new(),
                theta: Vec::new(),
                log_post: mode.log_post,
                weight: 1.0,
                mode: Some(mode.approx.mode.clone()),
                mean: Some(mode_mean.clone()),
                marginal_var: Some(mode.approx.marginal_var.clone()),
                newton_iterations: mode.approx.iterations,
            }],
            diagnostics,
        });
    }

    let neg_hess = -hessian(model, &mode, config)?;
    let eig = neg_hess.symmetric_eigen();
    let mut transform = DMatrix::zeros(m, m);
    for k in 0..m {
        let lambda = eig.eigenvalues[k].max(config.eigen_floor);
        let col = eig.eigenvectors.column(k) / lambda.sqrt();
        transform.set_column(k, &col);
    }
    let step = config.grid_step;
    let theta_of = |z: &[i32]| -> Vec<f64> {
        let zs = DVector::from_iterator(m, z.iter().map(|&v| v as f64 * step));
        let t = &transform * zs;
        mode.theta.iter().zip(t.iter()).map(|(a, b)| a + b).collect()
    };
    let init = mode.approx.mode.clone();
    let evaluate = |z: &Vec<i32>| -> GridPoint {
        let theta = theta_of(z);
        match eval_lp(model, &theta, &init, config).and_then(|(lp, a)| conditional_mean(model, &theta, &a, config).map(|m| (lp, a, m))) {
            Some((lp, a, mean)) => GridPoint {
                index: z.clone(),
                theta,
                log_post: lp,
                weight: 0.0,
                newton_iterations: a.iterations,
                mode: Some(a.mode),
                mean: Some(mean),
                marginal_var: Some(a.marginal_var),
            },
            None => GridPoint {
                index: z.clone(),
                theta,
                log_post: f64::NEG_INFINITY,
                weight: 0.0,
                mode: None,
                mean: None,
                marginal_var: None,
                newton_iterations: 0,
            },
        }
    };

    let mut cache: BTreeMap<Vec<i32>, GridPoint> = BTreeMap::new();
    let origin = vec![0; m];
    cache.insert(
        origin.clone(),
        GridPoint {
            index: origin.clone(),
            theta: mode.theta.clone(),
            log_post: mode.log_post,
            weight: 0.0,
            mode: Some(mode.approx.mode.clone()),
            mean: Some(mode_mean.clone()),
            marginal_var: Some(mode.approx.marginal_var.clone()),
            newton_iterations: mode.approx.iterations,
        },
    );
    let cap = config.max_axis_steps as i32;

    // walk each standardized axis until the density has dropped far enough
    let mut lo = vec![0i32; m];
    let mut hi = vec![0i32; m];
    for k in 0..m {
        for dir in [-1i32, 1] {
            let mut j = 0;
            loop {
                j += 1;
                let mut z = origin.clone();
                z[k] = dir * j;
                let p = evaluate(&z);
                let below = p.log_post < mode.log_post - config.edge_drop;
                cache.insert(z, p);
                if below {
                    break;
                }
                if j >= cap {
                    diagnostics.axis_capped = true;
                    break;
                }
            }
            if dir < 0 {
                lo[k] = -j;
            } else {
                hi[k] = j;
            }
        }
    }

    loop {
        let size: usize = (0..m).map(|k| (hi[k] - lo[k] + 1) as usize).product();
        if size > config.max_grid_points {
            return Err(Error::GridTooLarge {
                limit: config.max_grid_points,
            });
        }
        let missing: Vec<Vec<i32>> = box_indices(&lo, &hi).into_iter().filter(|z| !cache.contains_key(z)).collect();
        let fresh: Vec<GridPoint> = missing.par_iter().map(evaluate).collect();
        for p in fresh {
            cache.insert(p.index.clone(), p);
        }
        let max_lp = cache.values().map(|p| p.log_post).fold(f64::NEG_INFINITY, f64::max);
        let mut grew = false;
        for k in 0..m {
            for (bound, dir) in [(lo[k], -1i32), (hi[k], 1)] {
                if bound.abs() >= cap {
                    diagnostics.axis_capped = true;
                    continue;
                }
                let face_max = cache
                    .values()
                    .filter(|p| p.index[k] == bound && in_box(&p.index, &lo, &hi))
                    .map(|p| p.log_post)
                    .fold(f64::NEG_INFINITY, f64::max);
                if face_max >= max_lp - config.edge_drop {
                    if dir < 0 {
                        lo[k] -= 1;
                    } else {
                        hi[k] += 1;
                    }
                    grew = true;
                }
            }
        }
        if !grew {
            break;
        }
    }

    let mut points: Vec<GridPoint> = cache.into_values().filter(|p| in_box(&p.index, &lo, &hi)).collect();
    let max_lp = points.iter().map(|p| p.log_post).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = points.iter().map(|p| (p.log_post - max_lp).exp()).sum();
    for p in points.iter_mut() {
        p.weight = (p.log_post - max_lp).exp() / total;
    }
    diagnostics.grid_points = points.len();
    diagnostics.failed_grid_points = points.iter().filter(|p| p.log_post == f64::NEG_INFINITY).count();
    diagnostics.newton_iterations_total = points.iter().map(|p| p.newton_iterations).sum();
    diagnostics.edge_mass = points
        .iter()
        .filter(|p| (0..m).any(|k| p.index[k] == lo[k] || p.index[k] == hi[k]))
        .map(|p| p.weight)
        .sum();
    Ok(HyperGrid {
        names,
        theta_mode: mode.theta,
        transform,
        step,
        points,
        diagnostics,
    })
}

fn in_box(z: &[i32], lo: &[i32], hi: &[i32]) -> bool {
    z.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| v >= l && v <= h)
}

fn box_indices(lo: &[i32], hi: &[i32]) -> Vec<Vec<i32>> {
    let mut out: BTreeSet<Vec<i32>> = BTreeSet::new();
    let mut cur = lo.to_vec();
    loop {
        out.insert(cur.clone());
        let mut k = 0;
        loop {
            if k == cur.len() {
                return out.into_iter().collect();
            }
            if cur[k] < hi[k] {
                cur[k] += 1;
                break;
            }
            cur[k] = lo[k];
            k += 1;
        }
    }
}
