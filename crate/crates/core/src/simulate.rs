//! Forward simulation of the three-stage model with a full truth record.

use chrono::{Datelike, NaiveDate};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::distributions::{high_quantile, GammaMeanShape, GpQuantile};
use crate::error::{Error, Result};
use crate::latent::{matern_correlation_matrix, rw2_structure, week_of_date, Site, SiteSet, SPATIAL_JITTER, WEEKS_PER_YEAR};
use crate::numeric::logistic;

/// Additive predictor `intercept + spatial(s) + weekly(w)` on a link scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EffectSpec {
    pub intercept: f64,
    /// Marginal SD of the Matérn spatial field; zero switches it off.
    pub spatial_sd: f64,
    pub spatial_range_km: f64,
    /// Amplitude of the sinusoidal weekly effect.
    pub weekly_amplitude: f64,
    pub weekly_phase: f64,
    /// `sigma_t` of an extra weekly draw from the cyclic RW2 prior with precision `1 / sigma_t^2`; zero switches it off.
    pub weekly_sigma: f64,
}

impl Default for EffectSpec {
    fn default() -> Self {
        Self {
            intercept: 0.0,
            spatial_sd: 0.0,
            spatial_range_km: 50.0,
            weekly_amplitude: 0.0,
            weekly_phase: 0.0,
            weekly_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSpec {
    pub n_stations: usize,
    /// Stations are placed uniformly in a square of this side.
    pub domain_km: f64,
    pub start_year: i32,
    pub n_years: u32,
    /// Logit of the wet-day probability.
    pub wet: EffectSpec,
    /// Log of the Gamma mean intensity (inches).
    pub gamma: EffectSpec,
    pub shape: f64,
    pub p_plus: f64,
    /// Log of `kappa_q / mu`.
    pub excess: EffectSpec,
    pub xi: f64,
    pub q: f64,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            n_stations: 10,
            domain_km: 150.0,
            start_year: 1990,
            n_years: 10,
            wet: EffectSpec {
                intercept: 0.0,
                spatial_sd: 0.2,
                spatial_range_km: 60.0,
                weekly_amplitude: 0.3,
                weekly_phase: 1.0,
                weekly_sigma: 0.0,
            },
            gamma: EffectSpec {
                intercept: (0.25f64).ln(),
                spatial_sd: 0.2,
                spatial_range_km: 60.0,
                weekly_amplitude: 0.3,
                weekly_phase: 0.0,
                weekly_sigma: 0.0,
            },
            shape: 0.8,
            p_plus: 0.92,
            excess: EffectSpec {
                intercept: -0.15,
                ..Default::default()
            },
            xi: 0.1,
            q: 0.5,
            alpha: 0.998,
            seed: 1,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |n: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{n} must lie in (0, 1), got {v}")))
            }
        };
        unit("p_plus", self.p_plus)?;
        unit("q", self.q)?;
        unit("alpha", self.alpha)?;
        if self.n_stations == 0 || self.n_years == 0 {
            return Err(Error::Config("simulation needs at least one station and one year".into()));
        }
        if !(self.shape > 0.0) || !(self.xi >= 0.0 && self.xi < 1.0) || !(self.domain_km > 0.0) {
            return Err(Error::Config("shape and domain must be positive and xi in [0, 1)".into()));
        }
        for e in [&self.wet, &self.gamma, &self.excess] {
            if e.spatial_sd < 0.0 || (e.spatial_sd > 0.0 && !(e.spatial_range_km > 0.0)) {
                return Err(Error::Config("spatial effect needs nonnegative SD and positive range".into()));
            }
            if !(e.weekly_sigma >= 0.0 && e.weekly_sigma.is_finite()) {
                return Err(Error::Config("weekly_sigma must be a nonnegative number".into()));
            }
        }
        Ok(())
    }
}

/// Latent surfaces of one predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTruth {
    pub intercept: f64,
    pub spatial: Vec<f64>,
    /// Index `w - 1` for week `w`; sums to zero.
    pub weekly: Vec<f64>,
}

impl EffectTruth {
    pub fn at(&self, site: usize, week: u32) -> f64 {
        self.intercept + self.spatial[site] + self.weekly[week as usize - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTruth {
    pub station: String,
    pub week: u32,
    pub mu: f64,
    pub u: f64,
    pub p_wet: f64,
    pub p_u: f64,
    pub kappa: f64,
    /// Exact overall `alpha`-quantile; `None` when `alpha <= 1 - p_u`.
    pub quantile: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SimulationSpec,
    pub sites: Vec<Site>,
    pub wet: EffectTruth,
    pub gamma: EffectTruth,
    pub excess: EffectTruth,
    /// One entry per (station, week), station-major.
    pub cells: Vec<CellTruth>,
}

impl Truth {
    pub fn cell(&self, site: usize, week: u32) -> &CellTruth {
        &self.cells[site * WEEKS_PER_YEAR + week as usize - 1]
    }
}

fn draw_effect(spec: &EffectSpec, sites: &SiteSet, rng: &mut ChaCha8Rng) -> Result<EffectTruth> {
    let n = sites.len();
    let spatial = if spec.spatial_sd > 0.0 {
        let mut r = matern_correlation_matrix(sites, spec.spatial_range_km);
        for i in 0..n {
            r[(i, i)] += SPATIAL_JITTER;
        }
        let l = r
            .cholesky()
            .ok_or_else(|| Error::Decomposition("simulated spatial correlation not positive definite".into()))?
            .l();
        let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (l * z * spec.spatial_sd).iter().copied().collect()
    } else {
        vec![0.0; n]
    };
    let mut weekly = (1..=WEEKS_PER_YEAR)
        .map(|w| {
            let t = 2.0 * std::f64::consts::PI * (w as f64 - 0.5) / WEEKS_PER_YEAR as f64;
            spec.weekly_amplitude * (t + spec.weekly_phase).sin()
        })
        .collect::<Vec<f64>>();
    if spec.weekly_sigma > 0.0 {
        // sum over the non-null eigenvectors of the RW2 structure
        let eig = rw2_structure(WEEKS_PER_YEAR).symmetric_eigen();
        for k in 0..WEEKS_PER_YEAR {
            let lambda = eig.eigenvalues[k];
            if lambda > 1e-9 {
                let z: f64 = rng.sample(StandardNormal);
                let coef = z * spec.weekly_sigma / lambda.sqrt();
                for (w, v) in weekly.iter_mut().enumerate() {
                    *v += coef * eig.eigenvectors[(w, k)];
                }
            }
        }
    }
    let mean = weekly.iter().sum::<f64>() / WEEKS_PER_YEAR as f64;
    Ok(EffectTruth {
        intercept: spec.intercept,
        spatial,
        weekly: weekly.into_iter().map(|v| v - mean).collect(),
    })
}

fn place_sites(spec: &SimulationSpec, rng: &mut ChaCha8Rng) -> Result<SiteSet> {
    let mut sites: Vec<Site> = Vec::with_capacity(spec.n_stations);
    while sites.len() < spec.n_stations {
        let x = rng.random::<f64>() * spec.domain_km;
        let y = rng.random::<f64>() * spec.domain_km;
        if sites.iter().all(|s| (s.x_km - x).hypot(s.y_km - y) > 1.0) {
            sites.push(Site {
                id: format!("ST{:02}", sites.len() + 1),
                x_km: x,
                y_km: y,
            });
        }
    }
    SiteSet::new(sites)
}

/// Simulate daily records with wet-day occurrence, a Gamma body truncated at
/// `u` and a GP tail above it, stitched so that `Pr(Y > u) = p_u`.
pub fn simulate(spec: &SimulationSpec) -> Result<(Dataset, Truth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sites = place_sites(spec, &mut rng)?;
    let wet = draw_effect(&spec.wet, &sites, &mut rng)?;
    let gamma = draw_effect(&spec.gamma, &sites, &mut rng)?;
    let excess = draw_effect(&spec.excess, &sites, &mut rng)?;

    let mut cells = Vec::with_capacity(sites.len() * WEEKS_PER_YEAR);
    for s in 0..sites.len() {
        for w in 1..=WEEKS_PER_YEAR as u32 {
            let mu = gamma.at(s, w).exp();
            let u = GammaMeanShape::new(mu, spec.shape)?.quantile(spec.p_plus)?;
            let p_wet = logistic(wet.at(s, w));
            let p_u = p_wet * (1.0 - spec.p_plus);
            let kappa = mu * excess.at(s, w).exp();
            let gp = GpQuantile::new(kappa, spec.q, spec.xi)?;
            cells.push(CellTruth {
                station: sites.get(s).id.clone(),
                week: w,
                mu,
                u,
                p_wet,
                p_u,
                kappa,
                quantile: high_quantile(spec.alpha, u, p_u, &gp),
            });
        }
    }

    let start = NaiveDate::from_ymd_opt(spec.start_year, 1, 1).ok_or_else(|| Error::Config("invalid start year".into()))?;
    let end_year = spec.start_year + spec.n_years as i32;
    let mut records = Vec::new();
    for s in 0..sites.len() {
        for date in start.iter_days().take_while(|d| d.year() < end_year) {
            let c = &cells[s * WEEKS_PER_YEAR + week_of_date(date) as usize - 1];
            let value = if rng.random::<f64>() >= c.p_wet {
                0.0
            } else if rng.random::<f64>() < 1.0 - spec.p_plus {
                c.u + GpQuantile::new(c.kappa, spec.q, spec.xi)?.sample(&mut rng)
            } else {
                let body = GammaMeanShape::new(c.mu, spec.shape)?;
                loop {
                    let v = body.sample(&mut rng);
                    if v <= c.u && v > 0.0 {
                        break v;
                    }
                }
            };
            records.push(Record {
                station: sites.get(s).id.clone(),
                date,
                value,
            });
        }
    }
    let truth = Truth {
        spec: spec.clone(),
        sites: sites.sites().to_vec(),
        wet,
        gamma,
        excess,
        cells,
    };
    Ok((Dataset::new(sites, records)?, truth))
}
