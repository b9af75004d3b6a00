//! On-disk artifacts: fit files, prediction tables and report tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CleaningReport, IngestReport};
use crate::error::{Error, Result};
use crate::pipeline::{FittedPipeline, QuantilePrediction, StageFit};
use crate::priors::TailIndexPrior;

pub const CRATE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub crate_version: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
            crate_version: CRATE_VERSION.to_string(),
        }
    }

    fn comment(&self) -> String {
        format!("# config_hash={} version={}\n", self.config_hash, self.crate_version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub provenance: Provenance,
    pub fitted: FittedPipeline,
    pub ingest: Option<IngestReport>,
    pub cleaning: Option<CleaningReport>,
    /// First and last `(year, month)` of the fitted data.
    pub months: Option<((i32, u32), (i32, u32))>,
}

impl FitArtifact {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read fit artifact {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("invalid fit artifact {}: {e}", path.display())))
    }
}

fn number(v: f64) -> String {
    format!("{v}")
}

/// `station_id,year,month,alpha,quantile_inches`, with `NA` for flagged months.
pub fn predictions_csv(pred: &QuantilePrediction, prov: &Provenance) -> String {
    let mut s = prov.comment();
    s.push_str("station_id,year,month,alpha,quantile_inches\n");
    for m in &pred.monthly {
        let v = m.value.map(number).unwrap_or_else(|| "NA".into());
        let _ = writeln!(s, "{},{},{},{},{}", m.station, m.year, m.month, pred.alpha, v);
    }
    s
}

/// Posterior summaries of the latent effects of all three stages.
pub fn effects_csv(fitted: &FittedPipeline, prov: &Provenance) -> String {
    let mut s = prov.comment();
    s.push_str("stage,component,mean,sd,lower,upper\n");
    for st in [&fitted.stage1, &fitted.stage2, &fitted.stage3] {
        for c in &st.latent.components {
            let _ = writeln!(s, "{},{},{},{},{},{}", st.stage, c.name, c.mean, c.sd, c.lower, c.upper);
        }
    }
    s
}

pub fn hyperparameters_csv(fitted: &FittedPipeline, prov: &Provenance) -> String {
    let mut s = prov.comment();
    s.push_str("stage,name,mean,sd,lower,upper\n");
    for st in [&fitted.stage1, &fitted.stage2, &fitted.stage3] {
        for c in &st.hyper.components {
            let _ = writeln!(s, "{},{},{},{},{},{}", st.stage, c.name, c.mean, c.sd, c.lower, c.upper);
        }
    }
    s
}

pub fn thresholds_csv(fitted: &FittedPipeline, prov: &Provenance) -> String {
    let t = &fitted.thresholds;
    let mut s = prov.comment();
    s.push_str("station_id,week,threshold_inches\n");
    for (i, id) in t.site_ids.iter().enumerate() {
        for (w, u) in t.u[i].iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", id, w + 1, u);
        }
    }
    s
}

/// Diagnostics of one stage as `key,value` rows.
pub fn diagnostics_csv(fitted: &FittedPipeline, prov: &Provenance) -> String {
    let mut s = prov.comment();
    s.push_str("stage,key,value\n");
    let rows = |st: &StageFit, s: &mut String| {
        let d = serde_json::to_value(&st.diagnostics).unwrap_or_default();
        if let Some(map) = d.as_object() {
            for (k, v) in map {
                let _ = writeln!(s, "{},{},{}", st.stage, k, v);
            }
        }
        let _ = writeln!(s, "{},n_obs,{}", st.stage, st.n_obs);
    };
    rows(&fitted.stage1, &mut s);
    rows(&fitted.stage2, &mut s);
    rows(&fitted.stage3, &mut s);
    s
}

/// Tabulated density of a tail-index prior on `n` equally spaced points of `[0, upper]`.
pub fn prior_table(prior: &TailIndexPrior, upper: f64, n: usize) -> Result<Vec<(f64, f64)>> {
    if n < 2 || !(upper > 0.0) {
        return Err(Error::Config("prior table needs at least two points and a positive range".into()));
    }
    Ok((0..n)
        .map(|i| {
            let xi = upper * i as f64 / (n - 1) as f64;
            let d = prior.ln_pdf(xi).exp();
            (xi, if d.is_finite() { d } else { 0.0 })
        })
        .collect())
}

pub fn prior_table_csv(table: &[(f64, f64)], prov: &Provenance) -> String {
    let mut s = prov.comment();
    s.push_str("xi,density\n");
    for (x, d) in table {
        let _ = writeln!(s, "{x},{d}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{PcPriorExact, PcPriorExp};

    #[test]
    fn exact_prior_table_integrates_to_one() {
        let p = TailIndexPrior::Exact(PcPriorExact::new(10.6).unwrap());
        let t = prior_table(&p, 1.0, 20001).unwrap();
        let h = t[1].0 - t[0].0;
        let trap: f64 = t.windows(2).map(|w| 0.5 * h * (w[0].1 + w[1].1)).sum();
        assert!((trap - 1.0).abs() < 1e-6, "{trap}");
        assert_eq!(t.last().unwrap().1, 0.0);
    }

    #[test]
    fn exp_table_starts_at_rate() {
        let p = TailIndexPrior::Exp(PcPriorExp::new(15.0).unwrap());
        let t = prior_table(&p, 1.0, 11).unwrap();
        assert!((t[0].1 - 15.0).abs() < 1e-12);
        assert!(prior_table(&p, 1.0, 1).is_err());
    }

    #[test]
    fn provenance_carries_version() {
        let p = Provenance::new("abc");
        assert_eq!(p.crate_version, CRATE_VERSION);
        assert!(p.comment().contains("config_hash=abc"));
    }
}
