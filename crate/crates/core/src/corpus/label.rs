use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, Direction, LabeledSample, PriceSeries, TradingCalendar};
use crate::error::{Error, Result};

/// Forecast horizon in trading days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Horizon {
    Days7,
    Days30,
}

impl Horizon {
    pub const ALL: [Horizon; 2] = [Horizon::Days7, Horizon::Days30];

    pub fn days(self) -> u32 {
        match self {
            Horizon::Days7 => 7,
            Horizon::Days30 => 30,
        }
    }

    pub fn from_days(d: u32) -> Result<Self> {
        match d {
            7 => Ok(Horizon::Days7),
            30 => Ok(Horizon::Days30),
            _ => Err(Error::config("horizon", format!("{d} is not one of 7, 30"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    MissingPrice { date: NaiveDate },
    PriceWindowTooShort,
    ZeroChange,
    OutsideCalendar,
    /// The label window of a training or validation sample reaches into the next split.
    LabelWindowLeak { label_date: NaiveDate },
    OutsideSplits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDrop {
    pub id: String,
    #[serde(flatten)]
    pub reason: DropReason,
}

/// Direction of the close `h` trading days after `trading_date`.
///
/// Returns the label and the date of the later close. A zero change has no
/// sign and is dropped.
pub fn label(
    trading_date: NaiveDate,
    prices: &PriceSeries,
    h: Horizon,
) -> std::result::Result<(Direction, NaiveDate), DropReason> {
    let start = prices
        .position(trading_date)
        .ok_or(DropReason::MissingPrice { date: trading_date })?;
    let end = start + h.days() as usize;
    let points = prices.points();
    let (later, p_later) = *points.get(end).ok_or(DropReason::PriceWindowTooShort)?;
    let p_now = points[start].1;
    if p_later > p_now {
        Ok((Direction::Up, later))
    } else if p_later < p_now {
        Ok((Direction::Down, later))
    } else {
        Err(DropReason::ZeroChange)
    }
}

/// Labels every eligible main article for each horizon and attaches its
/// `n_contexts` most recent same-company predecessors within the history window.
pub fn build_samples(
    corpus: &Corpus,
    eligible: &BTreeSet<String>,
    calendar: &TradingCalendar,
    prices: &BTreeMap<String, PriceSeries>,
    horizons: &[Horizon],
    n_contexts: usize,
    window_days: i64,
) -> (Vec<LabeledSample>, Vec<SampleDrop>) {
    let mut samples = Vec::new();
    let mut drops = Vec::new();
    for (idx, a) in corpus.articles().iter().enumerate() {
        if !eligible.contains(&a.id) {
            continue;
        }
        let contexts: Vec<String> = {
            let prior = corpus.prior_articles(idx, Some(window_days));
            let skip = prior.len().saturating_sub(n_contexts);
            prior[skip..].iter().map(|&j| corpus.get(j).id.clone()).collect()
        };
        for &h in horizons {
            let id = format!("{}@{}", a.id, h.days());
            let Ok(trading_date) = calendar.assign_trading_date(a.published_at) else {
                drops.push(SampleDrop {
                    id,
                    reason: DropReason::OutsideCalendar,
                });
                continue;
            };
            let Some(series) = prices.get(&a.company_id) else {
                drops.push(SampleDrop {
                    id,
                    reason: DropReason::MissingPrice { date: trading_date },
                });
                continue;
            };
            match label(trading_date, series, h) {
                Ok((label, label_date)) => samples.push(LabeledSample {
                    id,
                    main_id: a.id.clone(),
                    company_id: a.company_id.clone(),
                    trading_date,
                    label_date,
                    horizon: h,
                    label,
                    contexts: contexts.clone(),
                }),
                Err(reason) => drops.push(SampleDrop { id, reason }),
            }
        }
    }
    (samples, drops)
}

/// Randomly removes majority-class samples until both classes are equally
/// frequent. Survivors keep their original order.
pub fn balance_classes(samples: Vec<LabeledSample>, seed: u64) -> Result<Vec<LabeledSample>> {
    let pos: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].label.is_positive())
        .collect();
    let neg: Vec<usize> = (0..samples.len())
        .filter(|&i| !samples[i].label.is_positive())
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Balance(format!(
            "need both classes, have {} up and {} down",
            pos.len(),
            neg.len()
        )));
    }
    let (mut major, minor) = if pos.len() >= neg.len() { (pos, neg) } else { (neg, pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    major.shuffle(&mut rng);
    let keep: HashSet<usize> = major[..minor.len()].iter().chain(&minor).copied().collect();
    Ok(samples
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, s)| s)
        .collect())
}

/// Inclusive date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: DateRange,
    pub validation: DateRange,
    pub test: DateRange,
}

impl SplitSpec {
    pub fn new(train: DateRange, validation: DateRange, test: DateRange) -> Result<Self> {
        let s = Self {
            train,
            validation,
            test,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train", self.train), ("validation", self.validation), ("test", self.test)] {
            if r.start > r.end {
                return Err(Error::config(format!("split.{name}"), "start after end"));
            }
        }
        if self.train.end >= self.validation.start || self.validation.end >= self.test.start {
            return Err(Error::config("split", "ranges must be disjoint and ordered train < validation < test"));
        }
        Ok(())
    }

    /// Splits `[first, last]` by calendar-day fractions.
    pub fn by_fractions(first: NaiveDate, last: NaiveDate, train: f64, validation: f64) -> Result<Self> {
        let span = (last - first).num_days();
        if span < 3 || !(train > 0.0 && validation > 0.0 && train + validation < 1.0) {
            return Err(Error::config("split", "fractions must be positive and sum below 1"));
        }
        let t_end = first + chrono::Days::new((span as f64 * train) as u64);
        let v_end = first + chrono::Days::new((span as f64 * (train + validation)) as u64);
        Self::new(
            DateRange { start: first, end: t_end },
            DateRange {
                start: t_end.succ_opt().expect("date in range"),
                end: v_end,
            },
            DateRange {
                start: v_end.succ_opt().expect("date in range"),
                end: last,
            },
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<LabeledSample>,
    pub validation: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub dropped: Vec<SampleDrop>,
}

/// Assigns samples to splits by trading date. Training and validation samples
/// whose label window reaches the next split are dropped.
pub fn split_samples(samples: Vec<LabeledSample>, split: &SplitSpec) -> Splits {
    let mut out = Splits::default();
    for s in samples {
        let d = s.trading_date;
        let leak = |limit: NaiveDate| s.label_date >= limit;
        if split.train.contains(d) {
            if leak(split.validation.start) {
                out.dropped.push(SampleDrop {
                    id: s.id.clone(),
                    reason: DropReason::LabelWindowLeak { label_date: s.label_date },
                });
            } else {
                out.train.push(s);
            }
        } else if split.validation.contains(d) {
            if leak(split.test.start) {
                out.dropped.push(SampleDrop {
                    id: s.id.clone(),
                    reason: DropReason::LabelWindowLeak { label_date: s.label_date },
                });
            } else {
                out.validation.push(s);
            }
        } else if split.test.contains(d) {
            out.test.push(s);
        } else {
            out.dropped.push(SampleDrop {
                id: s.id.clone(),
                reason: DropReason::OutsideSplits,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn series(closes: &[f64]) -> PriceSeries {
        let start = d("2024-01-01");
        let pts = closes
            .iter()
            .enumerate()
            .map(|(i, &p)| (start + chrono::Days::new(i as u64), p))
            .collect();
        PriceSeries::new("X", pts).unwrap()
    }

    fn closes_with(at7: f64) -> Vec<f64> {
        let mut c = vec![10.0; 40];
        c[7] = at7;
        c
    }

    #[test]
    fn labels_follow_price_sign() {
        let h = Horizon::Days7;
        assert_eq!(label(d("2024-01-01"), &series(&closes_with(10.5)), h).unwrap().0, Direction::Up);
        assert_eq!(label(d("2024-01-01"), &series(&closes_with(9.9)), h).unwrap().0, Direction::Down);
        assert_eq!(label(d("2024-01-01"), &series(&closes_with(10.0)), h), Err(DropReason::ZeroChange));
        assert_eq!(label(d("2024-01-01"), &series(&closes_with(10.5)), h).unwrap().1, d("2024-01-08"));
    }

    #[test]
    fn missing_prices_drop() {
        let s = series(&[10.0; 10]);
        assert!(matches!(label(d("2023-01-01"), &s, Horizon::Days7), Err(DropReason::MissingPrice { .. })));
        assert_eq!(label(d("2024-01-05"), &s, Horizon::Days7), Err(DropReason::PriceWindowTooShort));
    }

    fn sample(i: usize, up: bool) -> LabeledSample {
        LabeledSample {
            id: format!("s{i}"),
            main_id: format!("a{i}"),
            company_id: "X".into(),
            trading_date: d("2024-01-01"),
            label_date: d("2024-01-08"),
            horizon: Horizon::Days7,
            label: if up { Direction::Up } else { Direction::Down },
            contexts: vec![],
        }
    }

    #[test]
    fn balancing() {
        let s: Vec<_> = (0..100).map(|i| sample(i, i < 60)).collect();
        let b = balance_classes(s.clone(), 1).unwrap();
        assert_eq!(b.iter().filter(|x| x.label.is_positive()).count(), 40);
        assert_eq!(b.len(), 80);
        let again = balance_classes(s, 1).unwrap();
        assert_eq!(b, again);

        let even: Vec<_> = (0..100).map(|i| sample(i, i % 2 == 0)).collect();
        assert_eq!(balance_classes(even.clone(), 5).unwrap(), even);

        let one: Vec<_> = (0..5).map(|i| sample(i, true)).collect();
        assert!(matches!(balance_classes(one, 0), Err(Error::Balance(_))));
    }

    #[test]
    fn splits_are_ordered_and_block_leaks() {
        let split = SplitSpec::by_fractions(d("2024-01-01"), d("2024-12-31"), 0.6, 0.2).unwrap();
        assert!(split.train.end < split.validation.start && split.validation.end < split.test.start);
        let mut near_boundary = sample(1, true);
        near_boundary.trading_date = split.train.end;
        near_boundary.label_date = split.validation.start + chrono::Days::new(3);
        let mut safe = sample(2, true);
        safe.trading_date = split.train.start;
        let mut test = sample(3, false);
        test.trading_date = split.test.start;
        test.label_date = split.test.end + chrono::Days::new(30);
        let out = split_samples(vec![near_boundary, safe, test], &split);
        assert_eq!(out.train.len(), 1);
        assert_eq!(out.test.len(), 1);
        assert!(matches!(out.dropped[0].reason, DropReason::LabelWindowLeak { .. }));

        let bad = SplitSpec {
            train: split.validation,
            validation: split.train,
            test: split.test,
        };
        assert!(bad.validate().is_err());
    }
}
