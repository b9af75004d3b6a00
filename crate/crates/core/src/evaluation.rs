//! Quantile loss, hold-out cross-validation over stations and years, and
//! ranking of pipeline configurations.

use std::collections::BTreeSet;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Record};
use crate::error::{Error, Result};
use crate::pipeline::{fit_pipeline, month_days, FittedPipeline, PipelineConfig};

/// Check (pinball) loss: `alpha (y - q)` above `q`, `(1 - alpha)(q - y)` below.
pub fn quantile_loss(y: f64, q: f64, alpha: f64) -> f64 {
    let d = y - q;
    if d > 0.0 {
        alpha * d
    } else {
        -(1.0 - alpha) * d
    }
}

/// Something that can be fitted to training data.
pub trait QuantileModel: Sync {
    fn fit(&self, train: &Dataset) -> Result<Box<dyn QuantilePredictor + Send>>;
}

/// A fitted model producing the target quantile for a station and day.
pub trait QuantilePredictor {
    /// `None` when the model cannot produce a quantile at this level.
    fn predict(&self, station: &str, date: NaiveDate) -> Result<Option<f64>>;
    /// Digest of the fitted state, used to check that held-out rows never reach a fit.
    fn fingerprint(&self) -> String;
}

/// Pipeline predictor returning the calendar-month mean of daily quantiles.
pub struct MonthlyPipelinePredictor {
    pub fitted: FittedPipeline,
    pub alpha: f64,
}

impl QuantilePredictor for MonthlyPipelinePredictor {
    fn predict(&self, station: &str, date: NaiveDate) -> Result<Option<f64>> {
        let days = month_days(date.year(), date.month());
        let mut sum = 0.0;
        for d in &days {
            match self.fitted.quantile_at(self.alpha, station, *d)? {
                Some(v) => sum += v,
                None => return Ok(None),
            }
        }
        Ok(Some(sum / days.len() as f64))
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(&self.fitted).expect("fit serializes");
        crate::numeric::sha256_hex(&json)
    }
}

/// The three-stage pipeline under one configuration.
#[derive(Debug, Clone)]
pub struct PipelineModel {
    pub config: PipelineConfig,
}

impl QuantileModel for PipelineModel {
    fn fit(&self, train: &Dataset) -> Result<Box<dyn QuantilePredictor + Send>> {
        Ok(Box::new(MonthlyPipelinePredictor {
            fitted: fit_pipeline(train, &self.config)?,
            alpha: self.config.alpha,
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeFold {
    #[default]
    Year,
    Month,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvPlan {
    pub alpha: f64,
    /// Stations whose losses are scored; all stations with data when unset.
    pub evaluation_stations: Option<Vec<String>>,
    /// Inclusive year range for temporal folds; all data years when unset.
    pub years: Option<(i32, i32)>,
    pub time_fold: TimeFold,
}

impl Default for CvPlan {
    fn default() -> Self {
        Self {
            alpha: 0.998,
            evaluation_stations: None,
            years: None,
            time_fold: TimeFold::Year,
        }
    }
}

/// One hold-out unit.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Fold {
    Station(String),
    Year(i32),
    Month(i32, u32),
}

impl Fold {
    pub fn holds_out(&self, r: &Record) -> bool {
        match self {
            Fold::Station(s) => &r.station == s,
            Fold::Year(y) => r.date.year() == *y,
            Fold::Month(y, m) => r.date.year() == *y && r.date.month() == *m,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Fold::Station(s) => format!("station:{s}"),
            Fold::Year(y) => format!("year:{y}"),
            Fold::Month(y, m) => format!("month:{y}-{m:02}"),
        }
    }
}

impl CvPlan {
    pub fn evaluation_set(&self, data: &Dataset) -> Result<BTreeSet<String>> {
        let with_data = data.stations_with_data();
        match &self.evaluation_stations {
            None => Ok(with_data),
            Some(list) => {
                for s in list {
                    if data.sites().index_of(s).is_none() {
                        return Err(Error::UnknownStation(s.clone()));
                    }
                }
                Ok(list.iter().cloned().collect())
            }
        }
    }

    pub fn space_folds(&self, data: &Dataset) -> Result<Vec<Fold>> {
        Ok(self.evaluation_set(data)?.into_iter().map(Fold::Station).collect())
    }

    pub fn time_folds(&self, data: &Dataset) -> Vec<Fold> {
        let years: Vec<i32> = match self.years {
            Some((a, b)) => (a..=b).collect(),
            None => data.years().into_iter().collect(),
        };
        match self.time_fold {
            TimeFold::Year => years.into_iter().map(Fold::Year).collect(),
            TimeFold::Month => years
                .into_iter()
                .flat_map(|y| (1..=12).map(move |m| Fold::Month(y, m)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: Fold,
    /// `None` if the fold's fit failed.
    pub loss: Option<f64>,
    pub days: usize,
    /// Days skipped because the model produced no quantile.
    pub missing: usize,
    pub error: Option<String>,
    pub fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvScore {
    pub total: f64,
    pub folds: Vec<FoldOutcome>,
    /// Fraction of folds whose fit succeeded.
    pub completeness: f64,
}

impl CvScore {
    fn from_folds(folds: Vec<FoldOutcome>) -> Self {
        let ok = folds.iter().filter(|f| f.loss.is_some()).count();
        let mut total = 0.0;
        for f in &folds {
            if let Some(l) = f.loss {
                total += l;
            }
        }
        let completeness = if folds.is_empty() { 1.0 } else { ok as f64 / folds.len() as f64 };
        Self {
            total,
            folds,
            completeness,
        }
    }
}

/// Fit without the fold's rows and score the held-out evaluation-station days.
pub fn run_fold<M: QuantileModel + ?Sized>(
    model: &M,
    data: &Dataset,
    fold: &Fold,
    evaluation: &BTreeSet<String>,
    alpha: f64,
) -> FoldOutcome {
    let train = data.filter(|r| !fold.holds_out(r));
    assert!(
        train.records().iter().all(|r| !fold.holds_out(r)),
        "training data for {} contains held-out rows",
        fold.label()
    );
    let held: Vec<&Record> = data
        .records()
        .iter()
        .filter(|r| fold.holds_out(r) && evaluation.contains(&r.station))
        .collect();
    let fitted = match model.fit(&train) {
        Ok(f) => f,
        Err(e) => {
            return FoldOutcome {
                fold: fold.clone(),
                loss: None,
                days: held.len(),
                missing: 0,
                error: Some(e.to_string()),
                fingerprint: None,
            }
        }
    };
    let mut loss = 0.0;
    let mut missing = 0;
    for r in &held {
        match fitted.predict(&r.station, r.date) {
            Ok(Some(q)) => loss += quantile_loss(r.value, q, alpha),
            Ok(None) => missing += 1,
            Err(e) => {
                return FoldOutcome {
                    fold: fold.clone(),
                    loss: None,
                    days: held.len(),
                    missing,
                    error: Some(e.to_string()),
                    fingerprint: Some(fitted.fingerprint()),
                }
            }
        }
    }
    FoldOutcome {
        fold: fold.clone(),
        loss: Some(loss),
        days: held.len(),
        missing,
        error: None,
        fingerprint: Some(fitted.fingerprint()),
    }
}

/// Leave-one-station-out score summed over the evaluation stations.
pub fn cv_space<M: QuantileModel + ?Sized>(model: &M, data: &Dataset, plan: &CvPlan) -> Result<CvScore> {
    let eval = plan.evaluation_set(data)?;
    let folds = plan.space_folds(data)?;
    let outcomes = folds.par_iter().map(|f| run_fold(model, data, f, &eval, plan.alpha)).collect();
    Ok(CvScore::from_folds(outcomes))
}

/// Leave-one-year-out (or month) score over the evaluation stations.
pub fn cv_time<M: QuantileModel + ?Sized>(model: &M, data: &Dataset, plan: &CvPlan) -> Result<CvScore> {
    let eval = plan.evaluation_set(data)?;
    let folds = plan.time_folds(data);
    let outcomes = folds.par_iter().map(|f| run_fold(model, data, f, &eval, plan.alpha)).collect();
    Ok(CvScore::from_folds(outcomes))
}

/// One point of the configuration grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub id: usize,
    pub psi_km: f64,
    pub sigma_t: f64,
    pub p_plus: f64,
}

impl GridConfig {
    pub fn apply(&self, base: &PipelineConfig) -> PipelineConfig {
        PipelineConfig {
            psi_km: self.psi_km,
            sigma_t: self.sigma_t,
            p_plus: self.p_plus,
            ..base.clone()
        }
    }
}

/// The 10 x 10 x 5 grid; the identifier runs over `psi` fastest, then `p_plus`, then `sigma_t`.
pub fn full_grid() -> Vec<GridConfig> {
    let mut out = Vec::with_capacity(500);
    for i_sigma in 0..5 {
        for i_p in 0..10 {
            for i_psi in 0..10 {
                out.push(GridConfig {
                    id: 1 + i_psi + 10 * i_p + 100 * i_sigma,
                    psi_km: 25.0 * (i_psi + 1) as f64,
                    sigma_t: (i_sigma + 1) as f64 / 200.0,
                    p_plus: (90 + i_p) as f64 / 100.0,
                });
            }
        }
    }
    out
}

/// 12 configurations spanning the corners and centre of the grid.
pub fn mini_grid() -> Vec<GridConfig> {
    let full = full_grid();
    let pick = |psi: f64, sigma: f64, p: f64| {
        *full
            .iter()
            .find(|g| g.psi_km == psi && (g.sigma_t - sigma).abs() < 1e-12 && (g.p_plus - p).abs() < 1e-12)
            .unwrap()
    };
    let mut out = Vec::new();
    for &psi in &[25.0, 50.0, 250.0] {
        for &sigma in &[0.005, 0.025] {
            for &p in &[0.90, 0.95] {
                out.push(pick(psi, sigma, p));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub config: GridConfig,
    pub space: CvScore,
    pub time: CvScore,
    /// Always `space.total + time.total`.
    pub spacetime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvTable {
    /// Ascending by space-time score, ties by id.
    pub rows: Vec<CvRow>,
}

impl CvTable {
    /// Delimited text in the column layout `Model ID, psi, sigma_t, p_plus, Space, Time, Space-time`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model_id,psi_km,sigma_t,p_plus,space,time,spacetime,completeness\n");
        for r in &self.rows {
            let comp = r.space.completeness.min(r.time.completeness);
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.config.id, r.config.psi_km, r.config.sigma_t, r.config.p_plus, r.space.total, r.time.total, r.spacetime, comp
            ));
        }
        s
    }
}

/// Cross-validate every configuration; (configuration, fold) fits run in parallel.
pub fn rank_models_with<F, M>(grid: &[GridConfig], make: F, data: &Dataset, plan: &CvPlan) -> Result<CvTable>
where
    F: Fn(&GridConfig) -> M + Sync,
    M: QuantileModel,
{
    if grid.is_empty() {
        return Err(Error::Config("empty configuration grid".into()));
    }
    let eval = plan.evaluation_set(data)?;
    let space_folds = plan.space_folds(data)?;
    let time_folds = plan.time_folds(data);
    let mut tasks: Vec<(usize, bool, &Fold)> = Vec::new();
    for ci in 0..grid.len() {
        for f in &space_folds {
            tasks.push((ci, true, f));
        }
        for f in &time_folds {
            tasks.push((ci, false, f));
        }
    }
    let models: Vec<M> = grid.iter().map(&make).collect();
    let outcomes: Vec<FoldOutcome> = tasks
        .par_iter()
        .map(|&(ci, _, f)| run_fold(&models[ci], data, f, &eval, plan.alpha))
        .collect();
    let mut space: Vec<Vec<FoldOutcome>> = vec![Vec::new(); grid.len()];
    let mut time: Vec<Vec<FoldOutcome>> = vec![Vec::new(); grid.len()];
    for (&(ci, is_space, _), o) in tasks.iter().zip(outcomes) {
        if is_space {
            space[ci].push(o);
        } else {
            time[ci].push(o);
        }
    }
    let mut rows: Vec<CvRow> = grid
        .iter()
        .zip(space.into_iter().zip(time))
        .map(|(g, (s, t))| {
            let space = CvScore::from_folds(s);
            let time = CvScore::from_folds(t);
            CvRow {
                config: *g,
                spacetime: space.total + time.total,
                space,
                time,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.spacetime
            .partial_cmp(&b.spacetime)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.config.id.cmp(&b.config.id))
    });
    Ok(CvTable { rows })
}

/// Rank pipeline configurations derived from `base`.
pub fn rank_models(grid: &[GridConfig], base: &PipelineConfig, data: &Dataset, plan: &CvPlan) -> Result<CvTable> {
    let base = PipelineConfig {
        alpha: plan.alpha,
        ..base.clone()
    };
    rank_models_with(grid, |g| PipelineModel { config: g.apply(&base) }, data, plan)
}
