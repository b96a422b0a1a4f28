//! Newline-delimited JSON for records, CSV for tables.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Article, PriceSeries, TradingCalendar};
use crate::error::{Error, Result};
use crate::portfolio::UniverseRow;

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn read_articles(path: &Path) -> Result<Vec<Article>> {
    read_jsonl(path)
}

pub fn write_articles(path: &Path, articles: &[Article]) -> Result<()> {
    write_jsonl(path, articles)
}

#[derive(Serialize, Deserialize)]
struct PriceRow {
    company_id: String,
    date: NaiveDate,
    close: f64,
}

pub fn read_prices(path: &Path) -> Result<BTreeMap<String, PriceSeries>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut grouped: BTreeMap<String, Vec<(NaiveDate, f64)>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: PriceRow = row?;
        grouped.entry(row.company_id).or_default().push((row.date, row.close));
    }
    grouped
        .into_iter()
        .map(|(company, mut points)| {
            points.sort_by_key(|p| p.0);
            Ok((company.clone(), PriceSeries::new(company, points)?))
        })
        .collect()
}

pub fn write_prices<'a>(path: &Path, series: impl IntoIterator<Item = &'a PriceSeries>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in series {
        for &(date, close) in s.points() {
            w.serialize(PriceRow {
                company_id: s.company_id.clone(),
                date,
                close,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_universe(path: &Path) -> Result<Vec<UniverseRow>> {
    read_csv(path)
}

/// One `YYYY-MM-DD` date per line.
pub fn read_calendar(path: &Path) -> Result<TradingCalendar> {
    let text = std::fs::read_to_string(path)?;
    let days = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            NaiveDate::parse_from_str(l, "%Y-%m-%d").map_err(|_| Error::Timestamp(l.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    TradingCalendar::new(days)
}

pub fn write_calendar(path: &Path, calendar: &TradingCalendar) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for d in calendar.days() {
        writeln!(w, "{d}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_timestamp;

    #[test]
    fn articles_round_trip_with_escaped_newlines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let a = Article {
            id: "x".into(),
            company_id: "C".into(),
            industry: "tech".into(),
            published_at: parse_timestamp("2020-01-02T09:30:00").unwrap(),
            text: "line one\n\nline two".into(),
        };
        write_articles(&p, std::slice::from_ref(&a)).unwrap();
        let raw = std::fs::read_to_string(&p).unwrap();
        assert_eq!(raw.lines().count(), 1);
        assert_eq!(read_articles(&p).unwrap(), vec![a]);
    }

    #[test]
    fn prices_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let d = |s| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        let s = PriceSeries::new("C", vec![(d("2020-01-02"), 10.1), (d("2020-01-03"), 1.0 / 3.0)]).unwrap();
        write_prices(&p, [&s]).unwrap();
        let back = read_prices(&p).unwrap();
        assert_eq!(back["C"], s);
    }

    #[test]
    fn bad_json_line_names_its_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        std::fs::write(&p, "{}\n").unwrap();
        let err = read_articles(&p).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
    }
}
