//! News articles, price series, labeled samples and their file formats.

mod calendar;
mod filter;
pub mod io;
mod label;
pub mod synth;

use std::collections::{BTreeMap, HashSet};

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use calendar::TradingCalendar;
pub use filter::{filter_articles, jaccard, numeric_ratio, FilterConfig, FilterOutcome, Rejection, RejectReason};
pub use label::{
    balance_classes, build_samples, label, split_samples, DateRange, DropReason, Horizon, SampleDrop, SplitSpec,
    Splits,
};

/// Hours east of UTC of the exchange clock that timestamps are normalized to.
pub const EXCHANGE_UTC_OFFSET_HOURS: i32 = -5;

/// One news item about a single company.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub company_id: String,
    pub industry: String,
    /// Exchange-local publication time, minute resolution.
    #[serde(with = "timestamp")]
    pub published_at: NaiveDateTime,
    pub text: String,
}

/// Parses ISO-8601 with or without an offset; offset-bearing stamps are
/// converted to exchange-local time and truncated to the minute.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    use chrono::{FixedOffset, Timelike};
    let local = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        let tz = FixedOffset::east_opt(EXCHANGE_UTC_OFFSET_HOURS * 3600).expect("valid offset");
        dt.with_timezone(&tz).naive_local()
    } else {
        ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
            .iter()
            .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
            .ok_or_else(|| Error::Timestamp(s.to_string()))?
    };
    Ok(local
        .with_second(0)
        .and_then(|t| t.with_nanosecond(0))
        .expect("zero seconds are valid"))
}

mod timestamp {
    use super::*;

    pub fn serialize<S: Serializer>(t: &NaiveDateTime, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&t.format("%Y-%m-%dT%H:%M:%S").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<NaiveDateTime, D::Error> {
        let s = String::deserialize(d)?;
        parse_timestamp(&s).map_err(serde::de::Error::custom)
    }
}

/// Articles sorted by `(published_at, id)` with a per-company index.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    articles: Vec<Article>,
    by_company: BTreeMap<String, Vec<usize>>,
    by_id: BTreeMap<String, usize>,
}

impl Corpus {
    pub fn new(mut articles: Vec<Article>) -> Result<Self> {
        articles.sort_by(|a, b| {
            a.published_at
                .cmp(&b.published_at)
                .then_with(|| a.id.cmp(&b.id))
        });
        let mut by_company: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_id = BTreeMap::new();
        for (i, a) in articles.iter().enumerate() {
            if by_id.insert(a.id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate article id `{}`", a.id)));
            }
            by_company.entry(a.company_id.clone()).or_default().push(i);
        }
        Ok(Self {
            articles,
            by_company,
            by_id,
        })
    }

    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Article {
        &self.articles[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Article> {
        self.index_of(id).map(|i| &self.articles[i])
    }

    /// Indices of a company's articles in ascending publication order.
    pub fn company_articles(&self, company_id: &str) -> &[usize] {
        self.by_company.get(company_id).map_or(&[], Vec::as_slice)
    }

    pub fn companies(&self) -> impl Iterator<Item = &str> {
        self.by_company.keys().map(String::as_str)
    }

    /// Company → industry, taken from the articles.
    pub fn industries(&self) -> BTreeMap<String, String> {
        self.articles
            .iter()
            .map(|a| (a.company_id.clone(), a.industry.clone()))
            .collect()
    }

    /// Indices of same-company articles published strictly before `idx`
    /// and no more than `window_days` earlier (unbounded when `None`), ascending.
    pub fn prior_articles(&self, idx: usize, window_days: Option<i64>) -> Vec<usize> {
        let main = &self.articles[idx];
        self.company_articles(&main.company_id)
            .iter()
            .copied()
            .filter(|&j| {
                let c = &self.articles[j];
                c.published_at < main.published_at
                    && window_days.is_none_or(|w| (main.published_at - c.published_at).num_minutes() <= w * 24 * 60)
            })
            .collect()
    }

    pub fn retain_ids(&self, keep: &HashSet<String>) -> Result<Corpus> {
        Corpus::new(
            self.articles
                .iter()
                .filter(|a| keep.contains(&a.id))
                .cloned()
                .collect(),
        )
    }
}

/// Daily closing prices for one company.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub company_id: String,
    points: Vec<(NaiveDate, f64)>,
}

impl PriceSeries {
    pub fn new(company_id: impl Into<String>, points: Vec<(NaiveDate, f64)>) -> Result<Self> {
        let company_id = company_id.into();
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Data(format!(
                    "{company_id}: price dates not strictly increasing at {}",
                    w[1].0
                )));
            }
        }
        if let Some((d, p)) = points.iter().find(|(_, p)| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::Data(format!("{company_id}: non-positive price {p} on {d}")));
        }
        Ok(Self { company_id, points })
    }

    pub fn points(&self) -> &[(NaiveDate, f64)] {
        &self.points
    }

    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.points.binary_search_by_key(&date, |(d, _)| *d).ok()
    }

    pub fn close_on(&self, date: NaiveDate) -> Option<f64> {
        self.position(date).map(|i| self.points[i].1)
    }

    /// Last close on or before `date`.
    pub fn close_at_or_before(&self, date: NaiveDate) -> Option<f64> {
        let k = self.points.partition_point(|(d, _)| *d <= date);
        (k > 0).then(|| self.points[k - 1].1)
    }
}

/// Sign of a forward price change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn sign(self) -> i8 {
        match self {
            Direction::Up => 1,
            Direction::Down => -1,
        }
    }

    /// Binary-classification target: 1 for up, 0 for down.
    pub fn target(self) -> f64 {
        match self {
            Direction::Up => 1.0,
            Direction::Down => 0.0,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Direction::Up
    }

    pub fn from_sign(s: i8) -> Option<Self> {
        match s {
            1 => Some(Direction::Up),
            -1 => Some(Direction::Down),
            _ => None,
        }
    }
}

impl Serialize for Horizon {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u32(self.days())
    }
}

impl<'de> Deserialize<'de> for Horizon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u32::deserialize(d)?;
        Horizon::from_days(v).map_err(serde::de::Error::custom)
    }
}

/// A main article with its label and the ids of its context articles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub id: String,
    pub main_id: String,
    pub company_id: String,
    pub trading_date: NaiveDate,
    /// Date of the closing price the label is measured against.
    pub label_date: NaiveDate,
    pub horizon: Horizon,
    pub label: Direction,
    /// Context article ids, ascending publication time.
    pub contexts: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn article(id: &str, company: &str, ts: &str, text: &str) -> Article {
        Article {
            id: id.into(),
            company_id: company.into(),
            industry: "tech".into(),
            published_at: parse_timestamp(ts).unwrap(),
            text: text.into(),
        }
    }

    #[test]
    fn timestamps_normalize_to_exchange_time() {
        let a = parse_timestamp("2021-03-02T14:15:00Z").unwrap();
        assert_eq!(a.to_string(), "2021-03-02 09:15:00");
        let b = parse_timestamp("2021-03-02T09:15:42").unwrap();
        assert_eq!(b.to_string(), "2021-03-02 09:15:00");
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn corpus_rejects_duplicate_ids_and_sorts() {
        let a = article("b", "X", "2021-01-02T10:00", "t");
        let b = article("a", "X", "2021-01-01T10:00", "t");
        let c = Corpus::new(vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(c.get(0).id, "a");
        assert!(Corpus::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn prior_window_is_365_days() {
        let arts = vec![
            article("old", "X", "2020-01-01T10:00", "t"),
            article("in", "X", "2020-06-01T10:00", "t"),
            article("other", "Y", "2020-12-01T10:00", "t"),
            article("main", "X", "2021-01-01T10:00", "t"),
        ];
        let c = Corpus::new(arts).unwrap();
        let m = c.index_of("main").unwrap();
        let prior: Vec<_> = c
            .prior_articles(m, Some(365))
            .into_iter()
            .map(|i| c.get(i).id.clone())
            .collect();
        assert_eq!(prior, ["in"]);
        assert_eq!(c.prior_articles(m, None).len(), 2);
    }

    #[test]
    fn price_series_validates() {
        let d = |s: &str| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        assert!(PriceSeries::new("X", vec![(d("2020-01-02"), 1.0), (d("2020-01-01"), 1.0)]).is_err());
        assert!(PriceSeries::new("X", vec![(d("2020-01-01"), 0.0)]).is_err());
        let p = PriceSeries::new("X", vec![(d("2020-01-01"), 1.0), (d("2020-01-03"), 2.0)]).unwrap();
        assert_eq!(p.close_at_or_before(d("2020-01-02")), Some(1.0));
        assert_eq!(p.close_on(d("2020-01-02")), None);
    }
}
