//! Daily precipitation records, CSV ingestion and cleaning rules.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Read;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Site, SiteSet};

pub const DATA_HEADER: [&str; 3] = ["station_id", "date", "value_inches"];
pub const SITE_HEADER: [&str; 3] = ["station_id", "x_km", "y_km"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub station: String,
    pub date: NaiveDate,
    /// Daily accumulation in inches; zero on dry days.
    pub value: f64,
}

/// Validated records, sorted by station then date, plus the station sites.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    records: Vec<Record>,
    sites: SiteSet,
}

impl Dataset {
    pub fn new(sites: SiteSet, mut records: Vec<Record>) -> Result<Self> {
        for r in &records {
            if sites.index_of(&r.station).is_none() {
                return Err(Error::UnknownStation(r.station.clone()));
            }
            if !(r.value.is_finite() && r.value >= 0.0) {
                return Err(Error::Data(format!(
                    "value {} for station `{}` on {} is not a nonnegative number",
                    r.value, r.station, r.date
                )));
            }
        }
        records.sort_by(|a, b| (sites.index_of(&a.station), a.date).cmp(&(sites.index_of(&b.station), b.date)));
        for w in records.windows(2) {
            if w[0].station == w[1].station && w[0].date == w[1].date {
                return Err(Error::DuplicateKey {
                    station: w[0].station.clone(),
                    date: w[0].date.to_string(),
                });
            }
        }
        Ok(Self { records, sites })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn sites(&self) -> &SiteSet {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Keeps the site set; drops records failing `keep`.
    pub fn filter<F: FnMut(&Record) -> bool>(&self, mut keep: F) -> Self {
        Self {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            sites: self.sites.clone(),
        }
    }

    pub fn years(&self) -> BTreeSet<i32> {
        self.records.iter().map(|r| r.date.year()).collect()
    }

    pub fn stations_with_data(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.station.clone()).collect()
    }

    pub fn date_range(&self) -> Option<(NaiveDate, NaiveDate)> {
        let min = self.records.iter().map(|r| r.date).min()?;
        let max = self.records.iter().map(|r| r.date).max()?;
        Some((min, max))
    }

    /// Site index of every record, in record order.
    pub fn site_indices(&self) -> Vec<usize> {
        self.records.iter().map(|r| self.sites.index_of(&r.station).unwrap()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_accepted: usize,
    pub rejected: Vec<RejectedRow>,
}

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::MalformedRow {
            line: 1,
            reason: format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(input)
}

pub fn read_sites_from<R: Read>(input: R) -> Result<SiteSet> {
    let mut rdr = reader(input);
    if rdr.headers()?.is_empty() {
        return SiteSet::new(Vec::new());
    }
    check_header(&rdr.headers()?.clone(), &SITE_HEADER)?;
    let mut sites = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        if row.len() != 3 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 3 fields, found {}", row.len()),
            });
        }
        let coord = |i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|_| Error::MalformedRow {
                line,
                reason: format!("`{}` is not a number", &row[i]),
            })
        };
        sites.push(Site {
            id: row[0].to_string(),
            x_km: coord(1)?,
            y_km: coord(2)?,
        });
    }
    SiteSet::new(sites)
}

pub fn read_sites(path: &Path) -> Result<SiteSet> {
    read_sites_from(std::fs::File::open(path)?)
}

/// Parse the data file against known sites. Negative values are rejected
/// and reported; structural problems abort with the offending line.
pub fn ingest_from<R: Read>(input: R, sites: SiteSet) -> Result<(Dataset, IngestReport)> {
    let mut rdr = reader(input);
    let mut report = IngestReport::default();
    if rdr.headers()?.is_empty() {
        return Ok((Dataset::new(sites, Vec::new())?, report));
    }
    check_header(&rdr.headers()?.clone(), &DATA_HEADER)?;
    let mut records = Vec::new();
    let mut seen: HashSet<(String, NaiveDate)> = HashSet::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line() as usize).unwrap_or(0);
        report.rows_read += 1;
        if row.len() != 3 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 3 fields, found {}", row.len()),
            });
        }
        let station = row[0].to_string();
        let date = NaiveDate::parse_from_str(&row[1], "%Y-%m-%d").map_err(|_| Error::MalformedRow {
            line,
            reason: format!("`{}` is not an ISO-8601 date", &row[1]),
        })?;
        let value: f64 = row[2].parse().map_err(|_| Error::MalformedRow {
            line,
            reason: format!("`{}` is not a number", &row[2]),
        })?;
        if !value.is_finite() {
            return Err(Error::MalformedRow {
                line,
                reason: format!("`{}` is not a finite number", &row[2]),
            });
        }
        if sites.index_of(&station).is_none() {
            return Err(Error::UnknownStation(station));
        }
        if value < 0.0 {
            report.rejected.push(RejectedRow {
                line,
                reason: "negative_value".into(),
                detail: format!("{station} {date} {value}"),
            });
            continue;
        }
        if !seen.insert((station.clone(), date)) {
            return Err(Error::DuplicateKey {
                station,
                date: date.to_string(),
            });
        }
        records.push(Record { station, date, value });
    }
    report.rows_accepted = records.len();
    Ok((Dataset::new(sites, records)?, report))
}

pub fn ingest(data_path: &Path, site_path: &Path) -> Result<(Dataset, IngestReport)> {
    let sites = read_sites(site_path)?;
    ingest_from(std::fs::File::open(data_path)?, sites)
}

pub fn write_data<W: std::io::Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DATA_HEADER)?;
    for r in data.records() {
        w.write_record([r.station.as_str(), &r.date.to_string(), &format_value(r.value)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sites<W: std::io::Write>(sites: &SiteSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SITE_HEADER)?;
    for s in sites.sites() {
        w.write_record([s.id.as_str(), &s.x_km.to_string(), &s.y_km.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

/// A row filter applied during cleaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum CleaningRule {
    DropStation {
        stations: Vec<String>,
    },
    /// Remove runs of at least `min_run` consecutive days with an identical value.
    DropConstantRuns {
        min_run: usize,
        #[serde(default)]
        stations: Option<Vec<String>>,
    },
    /// Remove records dated within `[start, end]`.
    DropRange {
        start: NaiveDate,
        end: NaiveDate,
        #[serde(default)]
        stations: Option<Vec<String>>,
    },
}

impl CleaningRule {
    pub fn tag(&self) -> &'static str {
        match self {
            CleaningRule::DropStation { .. } => "drop_station",
            CleaningRule::DropConstantRuns { .. } => "drop_constant_runs",
            CleaningRule::DropRange { .. } => "drop_range",
        }
    }

    fn applies_to(stations: &Option<Vec<String>>, id: &str) -> bool {
        stations.as_ref().is_none_or(|s| s.iter().any(|x| x == id))
    }

    /// Indices (into `records`) removed by this rule.
    fn removed(&self, records: &[Record]) -> BTreeSet<usize> {
        match self {
            CleaningRule::DropStation { stations } => records
                .iter()
                .enumerate()
                .filter(|(_, r)| stations.contains(&r.station))
                .map(|(i, _)| i)
                .collect(),
            CleaningRule::DropRange { start, end, stations } => records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.date >= *start && r.date <= *end && Self::applies_to(stations, &r.station))
                .map(|(i, _)| i)
                .collect(),
            CleaningRule::DropConstantRuns { min_run, stations } => {
                let mut out = BTreeSet::new();
                let mut i = 0;
                while i < records.len() {
                    let mut j = i + 1;
                    while j < records.len()
                        && records[j].station == records[i].station
                        && records[j].value == records[i].value
                        && records[j].date.signed_duration_since(records[j - 1].date).num_days() == 1
                    {
                        j += 1;
                    }
                    if j - i >= *min_run && Self::applies_to(stations, &records[i].station) {
                        out.extend(i..j);
                    }
                    i = j;
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    /// `(rule tag, rows removed)` in application order.
    pub removed: Vec<(String, usize)>,
}

/// Apply rules in order.
pub fn clean(data: &Dataset, rules: &[CleaningRule]) -> (Dataset, CleaningReport) {
    let mut records = data.records().to_vec();
    let mut report = CleaningReport::default();
    for rule in rules {
        let drop = rule.removed(&records);
        report.removed.push((rule.tag().to_string(), drop.len()));
        records = records
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, r)| r)
            .collect();
    }
    (
        Dataset {
            records,
            sites: data.sites().clone(),
        },
        report,
    )
}

/// Records grouped by `(station, year, month)`.
pub fn monthly_groups(data: &Dataset) -> BTreeMap<(String, i32, u32), Vec<&Record>> {
    let mut out: BTreeMap<(String, i32, u32), Vec<&Record>> = BTreeMap::new();
    for r in data.records() {
        out.entry((r.station.clone(), r.date.year(), r.date.month())).or_default().push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sites() -> SiteSet {
        read_sites_from("station_id,x_km,y_km\nA,0,0\nB,10,5\n".as_bytes()).unwrap()
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let (d, r) = ingest_from("".as_bytes(), sites()).unwrap();
        assert!(d.is_empty());
        assert_eq!(r, IngestReport::default());
        let (d, r) = ingest_from("station_id,date,value_inches\n".as_bytes(), sites()).unwrap();
        assert!(d.is_empty());
        assert_eq!(r.rows_read, 0);
    }

    #[test]
    fn golden_three_rows() {
        let text = "station_id,date,value_inches\nB,1990-01-02,0.25\nA,1990-01-01,0\nA,1990-01-02,1.5\n";
        let (d, r) = ingest_from(text.as_bytes(), sites()).unwrap();
        assert_eq!(r.rows_read, 3);
        assert_eq!(r.rows_accepted, 3);
        let date = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        assert_eq!(
            d.records(),
            &[
                Record { station: "A".into(), date: date("1990-01-01"), value: 0.0 },
                Record { station: "A".into(), date: date("1990-01-02"), value: 1.5 },
                Record { station: "B".into(), date: date("1990-01-02"), value: 0.25 },
            ]
        );
    }

    #[test]
    fn negative_value_rejected_with_reason() {
        let text = "station_id,date,value_inches\nA,1990-01-01,-0.1\nA,1990-01-02,0.3\n";
        let (d, r) = ingest_from(text.as_bytes(), sites()).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.rejected[0].reason, "negative_value");
        assert_eq!(r.rejected[0].line, 2);
    }

    #[test]
    fn structural_errors() {
        let bad_date = "station_id,date,value_inches\nA,1990-01-01,0.1\nA,1990/01/02,0.3\n";
        assert!(matches!(ingest_from(bad_date.as_bytes(), sites()), Err(Error::MalformedRow { line: 3, .. })));
        let unknown = "station_id,date,value_inches\nZ,1990-01-01,0.1\n";
        assert!(matches!(ingest_from(unknown.as_bytes(), sites()), Err(Error::UnknownStation(_))));
        let dup = "station_id,date,value_inches\nA,1990-01-01,0.1\nA,1990-01-01,0.2\n";
        assert!(matches!(ingest_from(dup.as_bytes(), sites()), Err(Error::DuplicateKey { .. })));
        let header = "id,date,value\nA,1990-01-01,0.1\n";
        assert!(matches!(ingest_from(header.as_bytes(), sites()), Err(Error::MalformedRow { line: 1, .. })));
    }

    #[test]
    fn constant_run_removed() {
        let start = NaiveDate::from_ymd_opt(1990, 1, 1).unwrap();
        let mut recs = Vec::new();
        for d in 0..100 {
            let value = if (20..60).contains(&d) { 0.0 } else { 0.1 + d as f64 * 1e-3 };
            recs.push(Record {
                station: "A".into(),
                date: start + chrono::Days::new(d),
                value,
            });
        }
        let data = Dataset::new(sites(), recs).unwrap();
        let (out, rep) = clean(&data, &[CleaningRule::DropConstantRuns { min_run: 30, stations: None }]);
        assert_eq!(out.len(), 60);
        assert_eq!(rep.removed, vec![("drop_constant_runs".to_string(), 40)]);
        let (same, rep) = clean(&data, &[]);
        assert_eq!(same, data);
        assert!(rep.removed.is_empty());
    }
}
