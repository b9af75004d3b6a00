use std::path::PathBuf;

use chrono::NaiveDate;
use proptest::prelude::*;

use tailquant_core::data::{clean, ingest, ingest_from, read_sites_from, write_data, CleaningRule, Dataset, Record};
use tailquant_core::latent::{Site, SiteSet};
use tailquant_core::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn day(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn two_sites() -> SiteSet {
    read_sites_from("station_id,x_km,y_km\nA,0,0\nB,10,5\n".as_bytes()).unwrap()
}

#[test]
fn golden_file() {
    let (d, report) = ingest(&fixture("golden_data.csv"), &fixture("golden_sites.csv")).unwrap();
    assert_eq!(report.rows_read, 3);
    assert_eq!(report.rows_accepted, 3);
    assert!(report.rejected.is_empty());
    let expected = vec![
        Record { station: "DB01".into(), date: day(2001, 3, 4), value: 1.25 },
        Record { station: "DB01".into(), date: day(2001, 3, 5), value: 0.0 },
        Record { station: "DB02".into(), date: day(2001, 3, 4), value: 0.37 },
    ];
    assert_eq!(d.records(), expected.as_slice());
    assert_eq!(d.sites().get(1).x_km, 12.5);
    assert_eq!(d.sites().get(1).y_km, -3.25);
}

#[test]
fn negative_value_is_rejected_with_reason() {
    let text = "station_id,date,value_inches\nA,2000-01-01,0.5\nA,2000-01-02,-0.1\n";
    let (d, r) = ingest_from(text.as_bytes(), two_sites()).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(r.rows_read, 2);
    assert_eq!(r.rejected.len(), 1);
    assert_eq!(r.rejected[0].reason, "negative_value");
    assert_eq!(r.rejected[0].line, 3);
}

#[test]
fn malformed_unknown_and_duplicate_rows_are_errors() {
    let bad_date = "station_id,date,value_inches\nA,2000-13-01,0.5\n";
    assert!(matches!(ingest_from(bad_date.as_bytes(), two_sites()), Err(Error::MalformedRow { line: 2, .. })));
    let unknown = "station_id,date,value_inches\nZ,2000-01-01,0.5\n";
    assert!(matches!(ingest_from(unknown.as_bytes(), two_sites()), Err(Error::UnknownStation(_))));
    let dup = "station_id,date,value_inches\nA,2000-01-01,0.5\nA,2000-01-01,0.7\n";
    assert!(matches!(ingest_from(dup.as_bytes(), two_sites()), Err(Error::DuplicateKey { .. })));
    let header = "station,date,value\nA,2000-01-01,0.5\n";
    assert!(matches!(ingest_from(header.as_bytes(), two_sites()), Err(Error::MalformedRow { line: 1, .. })));
}

#[test]
fn planted_constant_run_is_removed() {
    let start = day(1977, 1, 1);
    let mut records = Vec::new();
    for i in 0..100 {
        let date = start + chrono::Days::new(i);
        let value = if (30..70).contains(&i) { 0.0 } else { 0.1 + (i % 7) as f64 * 0.05 };
        records.push(Record { station: "A".into(), date, value });
    }
    let d = Dataset::new(two_sites(), records).unwrap();
    let (c, rep) = clean(&d, &[CleaningRule::DropConstantRuns { min_run: 30, stations: None }]);
    assert_eq!(c.len(), 60);
    assert_eq!(rep.removed, vec![("drop_constant_runs".to_string(), 40)]);
    assert!(c.records().iter().all(|r| r.value > 0.0));
}

#[test]
fn no_rules_is_identity() {
    let (d, _) = ingest(&fixture("golden_data.csv"), &fixture("golden_sites.csv")).unwrap();
    let (c, rep) = clean(&d, &[]);
    assert_eq!(c, d);
    assert!(rep.removed.is_empty());
}

#[test]
fn cleaning_rules_parse_from_toml() {
    #[derive(serde::Deserialize)]
    struct W {
        rules: Vec<CleaningRule>,
    }
    let w: W = toml::from_str(
        r#"rules = [
            { rule = "drop_station", stations = ["A"] },
            { rule = "drop_range", start = "1977-01-01", end = "1995-12-31", stations = ["B"] },
        ]"#,
    )
    .unwrap();
    assert_eq!(w.rules[1], CleaningRule::DropRange { start: day(1977, 1, 1), end: day(1995, 12, 31), stations: Some(vec!["B".into()]) });
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec((0usize..3, 0u64..60, 0u8..4), 1..120).prop_map(|rows| {
        let sites = SiteSet::new(
            ["A", "B", "C"]
                .iter()
                .enumerate()
                .map(|(i, id)| Site { id: id.to_string(), x_km: i as f64 * 3.0, y_km: 0.0 })
                .collect(),
        )
        .unwrap();
        let mut seen = std::collections::BTreeSet::new();
        let records = rows
            .into_iter()
            .filter(|(s, d, _)| seen.insert((*s, *d)))
            .map(|(s, d, v)| Record {
                station: ["A", "B", "C"][s].to_string(),
                date: day(1990, 1, 1) + chrono::Days::new(d),
                value: v as f64 * 0.25,
            })
            .collect();
        Dataset::new(sites, records).unwrap()
    })
}

proptest! {
    #[test]
    fn disjoint_rules_commute(d in arb_dataset(), lo in 0u64..60, len in 0u64..30, min_run in 2usize..6) {
        let a = CleaningRule::DropStation { stations: vec!["A".into()] };
        let b = CleaningRule::DropRange {
            start: day(1990, 1, 1) + chrono::Days::new(lo),
            end: day(1990, 1, 1) + chrono::Days::new(lo + len),
            stations: Some(vec!["B".into()]),
        };
        let c = CleaningRule::DropConstantRuns { min_run, stations: Some(vec!["C".into()]) };
        let (x, _) = clean(&d, &[a.clone(), b.clone(), c.clone()]);
        let (y, _) = clean(&d, &[c, b, a]);
        prop_assert_eq!(x, y);
    }

    #[test]
    fn write_then_ingest_round_trips(d in arb_dataset()) {
        let mut buf = Vec::new();
        write_data(&d, &mut buf).unwrap();
        let (back, rep) = ingest_from(buf.as_slice(), d.sites().clone()).unwrap();
        prop_assert_eq!(rep.rows_accepted, d.len());
        prop_assert_eq!(back, d);
    }

    #[test]
    fn cleaning_only_removes(d in arb_dataset(), min_run in 1usize..5) {
        let (c, rep) = clean(&d, &[CleaningRule::DropConstantRuns { min_run, stations: None }]);
        prop_assert_eq!(c.len() + rep.removed[0].1, d.len());
        prop_assert!(c.records().iter().all(|r| d.records().contains(r)));
    }
}
