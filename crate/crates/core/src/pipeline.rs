//! The three-stage tail model: Gamma intensities give a threshold surface,
//! a Bernoulli model gives the exceedance probability over all days, and a
//! GP model with a Gamma-mean offset describes the excesses. Extreme
//! quantiles are composed from posterior-mean plug-ins.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::distributions::{high_quantile, Family, GammaMeanShape, GpQuantile};
use crate::error::{Error, Result, StageTag};
use crate::laplace::{
    fit, EngineConfig, FitDiagnostics, FreeHyper, HyperPrior, HyperTarget, LatentGaussianModel, PosteriorSummary,
};
use crate::latent::{assemble_indexed, week_of_date, CyclicRw2Spec, MaternSpec, SiteSet, WEEKS_PER_YEAR};
use crate::numeric::logistic;
use crate::priors::{gamma_shape_prior, GammaPrior, InterceptPrior, PcPriorExp, PrecisionPrior, TailIndexPrior};

pub const SHAPE: &str = "shape";
pub const TAU_SPATIAL: &str = "tau_spatial";
pub const XI: &str = "xi";

/// Block positions in the latent vector.
const SPATIAL_BLOCK: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub xi: TailIndexPrior,
    pub shape: GammaPrior,
    pub spatial_precision: PrecisionPrior,
    pub intercept: InterceptPrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            xi: TailIndexPrior::Exp(PcPriorExp::new(15.0).expect("positive rate")),
            shape: gamma_shape_prior(),
            spatial_precision: PrecisionPrior::default(),
            intercept: InterceptPrior::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Threshold level: `u` is the `p_plus`-quantile of the fitted Gamma.
    pub p_plus: f64,
    /// Matérn range in km.
    pub psi_km: f64,
    /// Weekly effect standard deviation; the RW2 precision is `sigma_t^-2`.
    pub sigma_t: f64,
    pub alpha: f64,
    /// Quantile level of the GP parametrization.
    pub q: f64,
    pub priors: PriorConfig,
    pub engine: EngineConfig,
    pub min_exceedances: usize,
    pub warn_exceedances: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            p_plus: 0.92,
            psi_km: 50.0,
            sigma_t: 0.01,
            alpha: 0.998,
            q: 0.5,
            priors: PriorConfig::default(),
            engine: EngineConfig::default(),
            min_exceedances: 30,
            warn_exceedances: 200,
        }
    }
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        open_unit("p_plus", self.p_plus)?;
        open_unit("alpha", self.alpha)?;
        open_unit("q", self.q)?;
        if !(self.psi_km > 0.0 && self.psi_km.is_finite()) {
            return Err(Error::Config(format!("psi_km must be positive, got {}", self.psi_km)));
        }
        if !(self.sigma_t > 0.0 && self.sigma_t.is_finite()) {
            return Err(Error::Config(format!("sigma_t must be positive, got {}", self.sigma_t)));
        }
        if !(self.priors.intercept.variance > 0.0) {
            return Err(Error::Config("intercept variance must be positive".into()));
        }
        Ok(())
    }

    pub fn tau_t(&self) -> f64 {
        self.sigma_t.powi(-2)
    }
}

/// Posterior summaries of one stage with the predictor layout
/// `(intercept, spatial[site], weekly[1..=52])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFit {
    pub stage: StageTag,
    pub site_ids: Vec<String>,
    pub n_obs: usize,
    pub latent: PosteriorSummary,
    pub hyper: PosteriorSummary,
    pub diagnostics: FitDiagnostics,
    /// Where the GP offset came from.
    pub offset_source: Option<String>,
    pub warnings: Vec<String>,
}

impl StageFit {
    pub fn n_sites(&self) -> usize {
        self.site_ids.len()
    }

    pub fn intercept(&self) -> f64 {
        self.latent.components[0].mean
    }

    pub fn spatial_mean(&self, site: usize) -> f64 {
        self.latent.components[1 + site].mean
    }

    pub fn weekly_mean(&self, week: u32) -> f64 {
        self.latent.components[1 + self.n_sites() + week as usize - 1].mean
    }

    pub fn weekly_means(&self) -> Vec<f64> {
        (1..=WEEKS_PER_YEAR as u32).map(|w| self.weekly_mean(w)).collect()
    }

    /// Posterior-mean linear predictor (no offset).
    pub fn predictor(&self, site: usize, week: u32) -> f64 {
        self.intercept() + self.spatial_mean(site) + self.weekly_mean(week)
    }

    pub fn hyper_mean(&self, name: &str) -> Option<f64> {
        self.hyper.get(name).map(|c| c.mean)
    }

    pub fn site_index(&self, id: &str) -> Option<usize> {
        self.site_ids.iter().position(|s| s == id)
    }
}

/// Threshold `u(s, w)` for every station and week.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSurface {
    pub p_plus: f64,
    pub shape: f64,
    pub site_ids: Vec<String>,
    /// `u[site][week - 1]`.
    pub u: Vec<Vec<f64>>,
    pub provenance: String,
}

impl ThresholdSurface {
    pub fn at(&self, site: usize, week: u32) -> f64 {
        self.u[site][week as usize - 1]
    }
}

fn stage_model(
    sites: &SiteSet,
    cells: &[(usize, u32)],
    y: Vec<f64>,
    offsets: Option<Vec<f64>>,
    family: Family,
    free: Vec<FreeHyper>,
    config: &PipelineConfig,
) -> Result<LatentGaussianModel> {
    // the spatial precision is a free hyperparameter; the structure's scale is only a default
    let structure = assemble_indexed(
        &MaternSpec::new(config.psi_km, 1.0)?,
        &CyclicRw2Spec::weekly(config.tau_t())?,
        sites,
        cells,
        1.0 / config.priors.intercept.variance,
    )?;
    LatentGaussianModel::new(structure, family, y, offsets, None, free)
}

fn run_stage(stage: StageTag, model: &LatentGaussianModel, config: &PipelineConfig, sites: &SiteSet) -> Result<StageFit> {
    let res = fit(model, &config.engine)?;
    Ok(StageFit {
        stage,
        site_ids: sites.ids(),
        n_obs: model.y().len(),
        latent: res.latent,
        hyper: res.hyper,
        diagnostics: res.diagnostics,
        offset_source: None,
        warnings: Vec::new(),
    })
}

fn spatial_hyper(config: &PipelineConfig, initial: f64) -> FreeHyper {
    FreeHyper {
        name: TAU_SPATIAL.into(),
        target: HyperTarget::BlockScale(SPATIAL_BLOCK),
        prior: HyperPrior::Precision(config.priors.spatial_precision),
        initial,
    }
}

/// Starting value for the spatial precision from the spread of per-station means.
fn initial_spatial_precision(per_station: &BTreeMap<usize, (f64, usize)>) -> f64 {
    let means: Vec<f64> = per_station.values().filter(|v| v.1 > 0).map(|v| v.0 / v.1 as f64).collect();
    if means.len() < 2 {
        return 10.0;
    }
    let m = means.iter().sum::<f64>() / means.len() as f64;
    let v = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    (1.0 / v.max(1e-4)).clamp(0.1, 1e4)
}

fn cells_of(data: &Dataset) -> Vec<(usize, u32)> {
    data.records()
        .iter()
        .zip(data.site_indices())
        .map(|(r, s)| (s, week_of_date(r.date)))
        .collect()
}

/// Stage 1: Gamma model of positive intensities with free shape and spatial precision.
pub fn fit_stage1_gamma(data: &Dataset, config: &PipelineConfig) -> Result<StageFit> {
    let go = || -> Result<StageFit> {
        config.validate()?;
        let cells_all = cells_of(data);
        let (cells, y): (Vec<(usize, u32)>, Vec<f64>) = cells_all
            .into_iter()
            .zip(data.records())
            .filter(|(_, r)| r.value > 0.0)
            .map(|(c, r)| (c, r.value))
            .unzip();
        if y.is_empty() {
            return Err(Error::InsufficientData("no positive precipitation records".into()));
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(2.0);
        let k0 = if var > 0.0 { (mean * mean / var).clamp(0.1, 50.0) } else { 1.0 };
        let mut per_station: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (&(s, _), &v) in cells.iter().zip(&y) {
            let e = per_station.entry(s).or_insert((0.0, 0));
            e.0 += v.ln();
            e.1 += 1;
        }
        let free = vec![
            FreeHyper {
                name: SHAPE.into(),
                target: HyperTarget::Likelihood,
                prior: HyperPrior::Gamma(config.priors.shape),
                initial: k0,
            },
            spatial_hyper(config, initial_spatial_precision(&per_station)),
        ];
        let model = stage_model(data.sites(), &cells, y, None, Family::Gamma, free, config)?;
        run_stage(StageTag::Gamma, &model, config, data.sites())
    };
    go().map_err(|e| e.in_stage(StageTag::Gamma))
}

/// `u(s, w)` as the `p_plus`-quantile of the fitted Gamma at posterior-mean parameters.
pub fn compute_threshold(stage1: &StageFit, p_plus: f64) -> Result<ThresholdSurface> {
    if stage1.stage != StageTag::Gamma {
        return Err(Error::domain("thresholds derive from the Gamma stage"));
    }
    open_unit("p_plus", p_plus)?;
    let shape = stage1
        .hyper_mean(SHAPE)
        .ok_or_else(|| Error::domain("Gamma fit carries no shape posterior"))?;
    let mut u = Vec::with_capacity(stage1.n_sites());
    for s in 0..stage1.n_sites() {
        let mut row = Vec::with_capacity(WEEKS_PER_YEAR);
        for w in 1..=WEEKS_PER_YEAR as u32 {
            let g = GammaMeanShape::new(stage1.predictor(s, w).exp(), shape)?;
            row.push(g.quantile(p_plus)?);
        }
        u.push(row);
    }
    Ok(ThresholdSurface {
        p_plus,
        shape,
        site_ids: stage1.site_ids.clone(),
        u,
        provenance: format!("gamma stage fit on {} positive records", stage1.n_obs),
    })
}

fn check_coverage(data: &Dataset, thresholds: &ThresholdSurface) -> Result<()> {
    if thresholds.site_ids != data.sites().ids() || thresholds.u.iter().any(|r| r.len() != WEEKS_PER_YEAR) {
        return Err(Error::Data("threshold surface does not cover the data's stations and weeks".into()));
    }
    Ok(())
}

/// Stage 2: exceedance indicators over all days (dry days included).
pub fn fit_stage2_bernoulli(data: &Dataset, thresholds: &ThresholdSurface, config: &PipelineConfig) -> Result<StageFit> {
    let go = || -> Result<StageFit> {
        config.validate()?;
        check_coverage(data, thresholds)?;
        let cells = cells_of(data);
        if cells.is_empty() {
            return Err(Error::InsufficientData("no records".into()));
        }
        let z: Vec<f64> = cells
            .iter()
            .zip(data.records())
            .map(|(&(s, w), r)| if r.value > thresholds.at(s, w) { 1.0 } else { 0.0 })
            .collect();
        let mut per_station: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (&(s, _), &v) in cells.iter().zip(&z) {
            let e = per_station.entry(s).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        let logits: BTreeMap<usize, (f64, usize)> = per_station
            .iter()
            .map(|(&s, &(k, n))| {
                let p = (k + 0.5) / (n as f64 + 1.0);
                (s, ((p / (1.0 - p)).ln(), 1))
            })
            .collect();
        let free = vec![spatial_hyper(config, initial_spatial_precision(&logits))];
        let model = stage_model(data.sites(), &cells, z, None, Family::Bernoulli, free, config)?;
        run_stage(StageTag::Bernoulli, &model, config, data.sites())
    };
    go().map_err(|e| e.in_stage(StageTag::Bernoulli))
}

/// Stage 3: GP excesses over `u` with `log mu` from Stage 1 as offset.
pub fn fit_stage3_gp(
    data: &Dataset,
    thresholds: &ThresholdSurface,
    stage1: &StageFit,
    config: &PipelineConfig,
) -> Result<StageFit> {
    let go = || -> Result<StageFit> {
        config.validate()?;
        check_coverage(data, thresholds)?;
        if stage1.stage != StageTag::Gamma || stage1.site_ids != data.sites().ids() {
            return Err(Error::domain("GP offsets need the Gamma stage fitted on the same stations"));
        }
        let mut cells = Vec::new();
        let mut y = Vec::new();
        let mut offsets = Vec::new();
        for (&(s, w), r) in cells_of(data).iter().zip(data.records()) {
            let u = thresholds.at(s, w);
            if r.value > u {
                cells.push((s, w));
                y.push(r.value - u);
                offsets.push(stage1.predictor(s, w));
            }
        }
        if y.len() < config.min_exceedances {
            return Err(Error::InsufficientData(format!(
                "{} threshold exceedances, at least {} required",
                y.len(),
                config.min_exceedances
            )));
        }
        let mut warnings = Vec::new();
        if y.len() < config.warn_exceedances {
            warnings.push(format!("only {} threshold exceedances; tail estimates are uncertain", y.len()));
        }
        let free = vec![
            FreeHyper {
                name: XI.into(),
                target: HyperTarget::Likelihood,
                prior: HyperPrior::TailIndex(config.priors.xi),
                initial: 0.1,
            },
            spatial_hyper(config, 10.0),
        ];
        let model = stage_model(data.sites(), &cells, y, Some(offsets), Family::Gp { q: config.q }, free, config)?;
        let mut fit = run_stage(StageTag::Gp, &model, config, data.sites())?;
        fit.offset_source = Some(format!("log mean of gamma stage ({} records)", stage1.n_obs));
        fit.warnings = warnings;
        Ok(fit)
    };
    go().map_err(|e| e.in_stage(StageTag::Gp))
}

/// Plug-in parameters of one (station, week) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellParameters {
    pub u: f64,
    pub p_u: f64,
    pub kappa: f64,
    pub xi: f64,
    pub q: f64,
}

impl CellParameters {
    pub fn excess(&self) -> Result<GpQuantile> {
        GpQuantile::new(self.kappa, self.q, self.xi)
    }

    /// Overall `alpha`-quantile, `None` when `alpha <= 1 - p_u`.
    pub fn quantile(&self, alpha: f64) -> Option<f64> {
        high_quantile(alpha, self.u, self.p_u, &self.excess().ok()?)
    }
}

pub fn cell_parameters(
    stage2: &StageFit,
    stage3: &StageFit,
    stage1: &StageFit,
    thresholds: &ThresholdSurface,
    q: f64,
    site: usize,
    week: u32,
) -> Result<CellParameters> {
    let xi = stage3
        .hyper_mean(XI)
        .ok_or_else(|| Error::domain("GP fit carries no tail-index posterior"))?;
    Ok(CellParameters {
        u: thresholds.at(site, week),
        p_u: logistic(stage2.predictor(site, week)),
        kappa: (stage1.predictor(site, week) + stage3.predictor(site, week)).exp(),
        xi,
        q,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyQuantile {
    pub station: String,
    pub date: NaiveDate,
    /// `None` when `alpha` is not above `1 - p_u` for that day.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyQuantile {
    pub station: String,
    pub year: i32,
    pub month: u32,
    /// Mean of the month's daily predictions; `None` if any day is flagged.
    pub value: Option<f64>,
    pub days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantilePrediction {
    pub alpha: f64,
    pub daily: Vec<DailyQuantile>,
    pub monthly: Vec<MonthlyQuantile>,
}

/// All fitted pieces needed to predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPipeline {
    pub config: PipelineConfig,
    pub stage1: StageFit,
    pub stage2: StageFit,
    pub stage3: StageFit,
    pub thresholds: ThresholdSurface,
}

impl FittedPipeline {
    pub fn site_ids(&self) -> &[String] {
        &self.stage1.site_ids
    }

    pub fn cell(&self, site: usize, week: u32) -> Result<CellParameters> {
        cell_parameters(&self.stage2, &self.stage3, &self.stage1, &self.thresholds, self.config.q, site, week)
    }

    pub fn quantile_at(&self, alpha: f64, station: &str, date: NaiveDate) -> Result<Option<f64>> {
        let s = self
            .stage1
            .site_index(station)
            .ok_or_else(|| Error::UnknownStation(station.to_string()))?;
        Ok(self.cell(s, week_of_date(date))?.quantile(alpha))
    }

    pub fn predict(&self, alpha: f64, targets: &[(String, NaiveDate)]) -> Result<QuantilePrediction> {
        open_unit("alpha", alpha)?;
        let mut daily = Vec::with_capacity(targets.len());
        for (station, date) in targets {
            daily.push(DailyQuantile {
                station: station.clone(),
                date: *date,
                value: self.quantile_at(alpha, station, *date)?,
            });
        }
        let mut groups: BTreeMap<(usize, i32, u32), (Vec<Option<f64>>, String)> = BTreeMap::new();
        for d in &daily {
            let s = self.stage1.site_index(&d.station).unwrap();
            groups
                .entry((s, d.date.year(), d.date.month()))
                .or_insert_with(|| (Vec::new(), d.station.clone()))
                .0
                .push(d.value);
        }
        let monthly = groups
            .into_iter()
            .map(|((_, year, month), (vals, station))| {
                let value = vals
                    .iter()
                    .copied()
                    .collect::<Option<Vec<f64>>>()
                    .map(|v| v.iter().sum::<f64>() / v.len() as f64);
                MonthlyQuantile {
                    station,
                    year,
                    month,
                    value,
                    days: vals.len(),
                }
            })
            .collect();
        Ok(QuantilePrediction { alpha, daily, monthly })
    }
}

/// Free-function form of [`FittedPipeline::predict`].
pub fn predict_quantile(fitted: &FittedPipeline, alpha: f64, targets: &[(String, NaiveDate)]) -> Result<QuantilePrediction> {
    fitted.predict(alpha, targets)
}

/// Every day of the given month.
pub fn month_days(year: i32, month: u32) -> Vec<NaiveDate> {
    let first = NaiveDate::from_ymd_opt(year, month, 1).expect("valid month");
    first.iter_days().take_while(|d| d.month() == month).collect()
}

/// Every (station, day) for all stations over the full calendar months spanned by the data.
pub fn calendar_targets(data: &Dataset) -> Vec<(String, NaiveDate)> {
    let Some((start, end)) = data.date_range() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for id in data.sites().ids() {
        let mut y = start.year();
        let mut m = start.month();
        while (y, m) <= (end.year(), end.month()) {
            for d in month_days(y, m) {
                out.push((id.clone(), d));
            }
            if m == 12 {
                y += 1;
                m = 1;
            } else {
                m += 1;
            }
        }
    }
    out
}

/// Fit all three stages.
pub fn fit_pipeline(data: &Dataset, config: &PipelineConfig) -> Result<FittedPipeline> {
    config.validate()?;
    let stage1 = fit_stage1_gamma(data, config)?;
    let thresholds = compute_threshold(&stage1, config.p_plus).map_err(|e| e.in_stage(StageTag::Gamma))?;
    let stage2 = fit_stage2_bernoulli(data, &thresholds, config)?;
    let stage3 = fit_stage3_gp(data, &thresholds, &stage1, config)?;
    Ok(FittedPipeline {
        config: config.clone(),
        stage1,
        stage2,
        stage3,
        thresholds,
    })
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub fitted: FittedPipeline,
    pub prediction: QuantilePrediction,
}

/// Fit all stages and predict every station-month spanned by the data at `config.alpha`.
pub fn run_pipeline(data: &Dataset, config: &PipelineConfig) -> Result<PipelineRun> {
    let fitted = fit_pipeline(data, config)?;
    let prediction = fitted.predict(config.alpha, &calendar_targets(data))?;
    Ok(PipelineRun { fitted, prediction })
}
