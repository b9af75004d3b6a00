//! `tailquant` command-line interface.
//!
//! On failure a single JSON object is written to stderr and the process exits
//! with 2 (config), 3 (data) or 4 (convergence).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{Datelike, NaiveDate};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use tailquant_core::artifact::{
    diagnostics_csv, effects_csv, hyperparameters_csv, predictions_csv, prior_table, prior_table_csv, thresholds_csv,
    FitArtifact, Provenance,
};
use tailquant_core::config::{GridChoice, RunConfig};
use tailquant_core::data::{clean, ingest, write_data, write_sites, CleaningReport, Dataset, IngestReport};
use tailquant_core::evaluation::{rank_models, CvTable};
use tailquant_core::pipeline::{fit_pipeline, month_days};
use tailquant_core::priors::{PcPriorExact, PcPriorExp, TailIndexPrior};
use tailquant_core::simulate::simulate;
use tailquant_core::{Error, Result};

#[derive(Parser)]
#[command(name = "tailquant", version, about = "Bayesian tail regression for daily precipitation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the three-stage model and write a fit artifact.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sites: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Predict monthly quantiles from a fit artifact.
    Predict {
        #[arg(long)]
        fit: PathBuf,
        /// Defaults to the level stored in the fit.
        #[arg(long)]
        alpha: Option<f64>,
        /// First month `YYYY-MM`; defaults to the first fitted month.
        #[arg(long)]
        from: Option<String>,
        /// Last month `YYYY-MM`; defaults to the last fitted month.
        #[arg(long)]
        to: Option<String>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Cross-validate a grid of configurations.
    Cv {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        sites: Option<PathBuf>,
        #[arg(long, value_enum)]
        grid: Option<GridArg>,
        /// Print the number of configurations and exit.
        #[arg(long)]
        dry_run: bool,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Simulate a synthetic data set with its truth record.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Tabulate a tail-index prior density.
    PriorTable {
        #[arg(long, value_enum)]
        form: FormArg,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        upper: f64,
        #[arg(long, default_value_t = 20001)]
        points: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write effect, hyperparameter, threshold and diagnostic tables.
    Report {
        #[arg(long)]
        fit: Option<PathBuf>,
        /// JSON written by `cv --out`; produces `cv_table.csv`.
        #[arg(long)]
        cv: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Single,
    Mini,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Exact,
    Exp,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(
    cfg: &RunConfig,
    data: Option<PathBuf>,
    sites: Option<PathBuf>,
) -> Result<(Dataset, IngestReport, CleaningReport)> {
    let data = data
        .or_else(|| cfg.data.data.clone())
        .ok_or_else(|| Error::Config("no data file given".into()))?;
    let sites = sites
        .or_else(|| cfg.data.sites.clone())
        .ok_or_else(|| Error::Config("no site file given".into()))?;
    let (raw, report) = ingest(&data, &sites)?;
    let (cleaned, cleaning) = clean(&raw, &cfg.data.cleaning);
    if cleaned.is_empty() {
        return Err(Error::Data("no records left after ingestion and cleaning".into()));
    }
    Ok((cleaned, report, cleaning))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => stdout(text)?,
    }
    Ok(())
}

fn stdout(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn parse_month(s: &str) -> Result<(i32, u32)> {
    let bad = || Error::Config(format!("month `{s}` is not YYYY-MM"));
    let (y, m) = s.split_once('-').ok_or_else(bad)?;
    let y: i32 = y.parse().map_err(|_| bad())?;
    let m: u32 = m.parse().map_err(|_| bad())?;
    NaiveDate::from_ymd_opt(y, m, 1).ok_or_else(bad)?;
    Ok((y, m))
}

fn month_span(from: (i32, u32), to: (i32, u32)) -> Vec<(i32, u32)> {
    let mut out = Vec::new();
    let (mut y, mut m) = from;
    while (y, m) <= to {
        out.push((y, m));
        if m == 12 {
            y += 1;
            m = 1;
        } else {
            m += 1;
        }
    }
    out
}

fn cmd_fit(config: Option<PathBuf>, data: Option<PathBuf>, sites: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let (data, ingest_report, cleaning) = load_data(&cfg, data, sites)?;
    let fitted = fit_pipeline(&data, &cfg.model)?;
    let months = data
        .date_range()
        .map(|(a, b)| ((a.year(), a.month()), (b.year(), b.month())));
    FitArtifact {
        provenance: Provenance::new(cfg.hash()),
        fitted,
        ingest: Some(ingest_report),
        cleaning: Some(cleaning),
        months,
    }
    .write(&out)
}

fn cmd_predict(
    fit: PathBuf,
    alpha: Option<f64>,
    from: Option<String>,
    to: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let art = FitArtifact::read(&fit)?;
    let alpha = alpha.unwrap_or(art.fitted.config.alpha);
    let from = match from {
        Some(s) => parse_month(&s)?,
        None => art.months.ok_or_else(|| Error::Config("fit has no month range; pass --from".into()))?.0,
    };
    let to = match to {
        Some(s) => parse_month(&s)?,
        None => art.months.ok_or_else(|| Error::Config("fit has no month range; pass --to".into()))?.1,
    };
    let mut targets = Vec::new();
    for id in art.fitted.site_ids() {
        for (y, m) in month_span(from, to) {
            targets.extend(month_days(y, m).into_iter().map(|d| (id.clone(), d)));
        }
    }
    let pred = art.fitted.predict(alpha, &targets)?;
    emit(out.as_deref(), &predictions_csv(&pred, &art.provenance))
}

fn cmd_cv(
    config: Option<PathBuf>,
    data: Option<PathBuf>,
    sites: Option<PathBuf>,
    grid: Option<GridArg>,
    dry_run: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(config.as_deref())?;
    if let Some(g) = grid {
        cfg.cv.grid = match g {
            GridArg::Single => GridChoice::Single,
            GridArg::Mini => GridChoice::Mini,
            GridArg::Full => GridChoice::Full,
        };
    }
    let grid = cfg.grid();
    if dry_run {
        stdout(&format!("{}\n", grid.len()))?;
        return Ok(());
    }
    let (data, _, _) = load_data(&cfg, data, sites)?;
    let table = rank_models(&grid, &cfg.model, &data, &cfg.cv_plan())?;
    let prov = Provenance::new(cfg.hash());
    match out {
        Some(p) => {
            let doc = json!({ "provenance": prov, "table": table });
            std::fs::write(&p, serde_json::to_string_pretty(&doc)? + "\n")?;
            stdout(&table.to_csv())?;
        }
        None => stdout(&table.to_csv())?,
    }
    Ok(())
}

fn cmd_simulate(config: Option<PathBuf>, seed: Option<u64>, out_dir: PathBuf) -> Result<()> {
    let cfg = load_config(config.as_deref())?;
    let mut spec = cfg.simulation.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (data, truth) = simulate(&spec)?;
    std::fs::create_dir_all(&out_dir)?;
    write_data(&data, std::fs::File::create(out_dir.join("data.csv"))?)?;
    write_sites(data.sites(), std::fs::File::create(out_dir.join("sites.csv"))?)?;
    let doc = json!({ "provenance": Provenance::new(cfg.hash()), "truth": truth });
    std::fs::write(out_dir.join("truth.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(())
}

fn cmd_prior_table(
    form: FormArg,
    lambda: Option<f64>,
    rate: Option<f64>,
    upper: f64,
    points: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let prior = match (form, lambda, rate) {
        (_, Some(_), Some(_)) => return Err(Error::Config("give either --lambda or --rate, not both".into())),
        (FormArg::Exact, Some(l), None) => TailIndexPrior::Exact(PcPriorExact::new(l)?),
        (FormArg::Exact, None, Some(r)) => TailIndexPrior::Exact(PcPriorExact::from_rate(r)?),
        (FormArg::Exp, Some(l), None) => TailIndexPrior::Exp(PcPriorExp::from_lambda(l)?),
        (FormArg::Exp, None, Some(r)) => TailIndexPrior::Exp(PcPriorExp::new(r)?),
        (_, None, None) => return Err(Error::Config("--lambda or --rate is required".into())),
    };
    let table = prior_table(&prior, upper, points)?;
    let hash = tailquant_core::numeric::sha256_hex(&serde_json::to_vec(&json!({
        "prior": prior, "upper": upper, "points": points
    }))?);
    emit(out.as_deref(), &prior_table_csv(&table, &Provenance::new(hash)))
}

fn cmd_report(fit: Option<PathBuf>, cv: Option<PathBuf>, out_dir: PathBuf) -> Result<()> {
    if fit.is_none() && cv.is_none() {
        return Err(Error::Config("report needs --fit, --cv or both".into()));
    }
    std::fs::create_dir_all(&out_dir)?;
    if let Some(f) = fit {
        let art = FitArtifact::read(&f)?;
        let p = &art.provenance;
        std::fs::write(out_dir.join("effects.csv"), effects_csv(&art.fitted, p))?;
        std::fs::write(out_dir.join("hyperparameters.csv"), hyperparameters_csv(&art.fitted, p))?;
        std::fs::write(out_dir.join("thresholds.csv"), thresholds_csv(&art.fitted, p))?;
        std::fs::write(out_dir.join("diagnostics.csv"), diagnostics_csv(&art.fitted, p))?;
    }
    if let Some(c) = cv {
        let text = std::fs::read_to_string(&c)?;
        let doc: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("invalid CV file: {e}")))?;
        let prov: Provenance = serde_json::from_value(doc["provenance"].clone())
            .map_err(|e| Error::Data(format!("invalid CV file: {e}")))?;
        let table: CvTable =
            serde_json::from_value(doc["table"].clone()).map_err(|e| Error::Data(format!("invalid CV file: {e}")))?;
        let body = format!("# config_hash={} version={}\n{}", prov.config_hash, prov.crate_version, table.to_csv());
        std::fs::write(out_dir.join("cv_table.csv"), body)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit { config, data, sites, out } => cmd_fit(config, data, sites, out),
        Command::Predict { fit, alpha, from, to, out } => cmd_predict(fit, alpha, from, to, out),
        Command::Cv { config, data, sites, grid, dry_run, out } => cmd_cv(config, data, sites, grid, dry_run, out),
        Command::Simulate { config, seed, out_dir } => cmd_simulate(config, seed, out_dir),
        Command::PriorTable { form, lambda, rate, upper, points, out } => {
            cmd_prior_table(form, lambda, rate, upper, points, out)
        }
        Command::Report { fit, cv, out_dir } => cmd_report(fit, cv, out_dir),
    }
}

fn error_record(e: &Error) -> serde_json::Value {
    let stage = match e {
        Error::Stage { stage, .. } => Some(stage.to_string()),
        _ => None,
    };
    json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
        "stage": stage,
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rec = json!({ "error": "usage", "message": e.to_string(), "exit_code": 2, "stage": null });
            eprintln!("{rec}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
