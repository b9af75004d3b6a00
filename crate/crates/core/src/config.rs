//! Run configuration read from TOML. Every key has a default.
//!
//! ```toml
//! seed = 1
//!
//! [data]
//! data = "data.csv"
//! sites = "sites.csv"
//! cleaning = [{ rule = "drop_constant_runs", min_run = 365 }]
//!
//! [model]
//! p_plus = 0.92
//! psi_km = 50.0
//! sigma_t = 0.01
//! alpha = 0.998
//!
//! [model.priors.xi]
//! form = "exp"
//! rate = 15.0
//!
//! [cv]
//! grid = "mini"
//! time_fold = "year"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::CleaningRule;
use crate::error::{Error, Result};
use crate::evaluation::{mini_grid, full_grid, CvPlan, GridConfig, TimeFold};
use crate::pipeline::PipelineConfig;
use crate::priors::TailIndexPrior;
use crate::simulate::SimulationSpec;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub data: Option<PathBuf>,
    pub sites: Option<PathBuf>,
    pub cleaning: Vec<CleaningRule>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridChoice {
    /// Only the model section's own configuration.
    #[default]
    Single,
    /// 12 configurations spread over the full grid.
    Mini,
    /// All 500 configurations.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub grid: GridChoice,
    pub evaluation_stations: Option<Vec<String>>,
    pub years: Option<(i32, i32)>,
    pub time_fold: TimeFold,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            grid: GridChoice::Single,
            evaluation_stations: None,
            years: None,
            time_fold: TimeFold::Year,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: PipelineConfig,
    pub cv: CvConfig,
    pub simulation: SimulationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            data: DataConfig::default(),
            model: PipelineConfig::default(),
            cv: CvConfig::default(),
            simulation: SimulationSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        match self.model.priors.xi {
            TailIndexPrior::Exact(p) if !(p.lambda() > 0.0) => {
                return Err(Error::Config("xi prior rate must be positive".into()))
            }
            TailIndexPrior::Exp(p) if !(p.rate() > 0.0) => {
                return Err(Error::Config("xi prior rate must be positive".into()))
            }
            _ => {}
        }
        let sh = self.model.priors.shape;
        let pr = self.model.priors.spatial_precision;
        if !(sh.shape > 0.0 && sh.rate > 0.0 && pr.shape > 0.0 && pr.inverse_scale > 0.0) {
            return Err(Error::Config("prior parameters must be positive".into()));
        }
        self.simulation.validate()?;
        Ok(())
    }

    pub fn cv_plan(&self) -> CvPlan {
        CvPlan {
            alpha: self.model.alpha,
            evaluation_stations: self.cv.evaluation_stations.clone(),
            years: self.cv.years,
            time_fold: self.cv.time_fold,
        }
    }

    pub fn grid(&self) -> Vec<GridConfig> {
        match self.cv.grid {
            GridChoice::Single => vec![GridConfig {
                id: 0,
                psi_km: self.model.psi_km,
                sigma_t: self.model.sigma_t,
                p_plus: self.model.p_plus,
            }],
            GridChoice::Mini => mini_grid(),
            GridChoice::Full => full_grid(),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::numeric::sha256_hex(&json)
    }
}
