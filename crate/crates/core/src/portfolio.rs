//! Monthly long-short quintile portfolios, turnover costs and performance.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::PriceSeries;
use crate::error::{Error, Result};
use crate::evaluation::Prediction;

/// Annual cost per unit of annual one-way turnover.
pub const DEFAULT_COST_RATE: f64 = 0.01;
pub const MIN_NAMES: usize = 5;
pub const SCORE_HORIZON_DAYS: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Month {
    pub year: i32,
    pub month: u32,
}

impl Month {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Data(format!("invalid month {month}")));
        }
        Ok(Self { year, month })
    }

    pub fn of(d: NaiveDate) -> Self {
        Self {
            year: d.year(),
            month: d.month(),
        }
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            Self { year: self.year + 1, month: 1 }
        } else {
            Self { month: self.month + 1, ..self }
        }
    }

    pub fn prev(self) -> Self {
        if self.month == 1 {
            Self { year: self.year - 1, month: 12 }
        } else {
            Self { month: self.month - 1, ..self }
        }
    }

    /// `self` moved back `k` months.
    pub fn minus(self, k: u32) -> Self {
        (0..k).fold(self, |m, _| m.prev())
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for Month {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Data(format!("invalid month `{s}`, expected YYYY-MM"));
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        Month::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?)
    }
}

impl Serialize for Month {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Month {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Per company and month: size, liquidity and industry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniverseRow {
    pub company_id: String,
    pub month: Month,
    pub market_cap: f64,
    pub avg_daily_value: f64,
    pub industry: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniverseFilter {
    pub min_market_cap: f64,
    pub min_avg_daily_value: f64,
}

impl Default for UniverseFilter {
    fn default() -> Self {
        Self {
            min_market_cap: 250_000_000.0,
            min_avg_daily_value: 1_000_000.0,
        }
    }
}

impl UniverseFilter {
    pub fn admits(&self, row: &UniverseRow) -> bool {
        row.market_cap >= self.min_market_cap && row.avg_daily_value >= self.min_avg_daily_value
    }
}

/// Mean 30-day probability per company over predictions traded in `month`.
pub fn monthly_scores(preds: &[Prediction], month: Month) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for p in preds
        .iter()
        .filter(|p| p.horizon == SCORE_HORIZON_DAYS && Month::of(p.trading_date) == month)
    {
        let e = acc.entry(p.company_id.clone()).or_default();
        e.0 += p.probability;
        e.1 += 1;
    }
    if acc.is_empty() {
        log::info!("{month}: no 30D predictions");
    }
    acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
}

/// Subtracts each industry's mean score.
pub fn industry_demean(
    scores: &BTreeMap<String, f64>,
    industries: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (c, s) in scores {
        let ind = industries
            .get(c)
            .ok_or_else(|| Error::Data(format!("no industry for company {c}")))?;
        let e = sums.entry(ind).or_default();
        e.0 += s;
        e.1 += 1;
    }
    Ok(scores
        .iter()
        .map(|(c, s)| {
            let (sum, n) = sums[industries[c].as_str()];
            (c.clone(), s - sum / n as f64)
        })
        .collect())
}

/// Equal-weight long top quintile, short bottom quintile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyPortfolio {
    /// The month the book is held (returns are earned in this month).
    pub month: Month,
    pub long: Vec<String>,
    pub short: Vec<String>,
}

impl MonthlyPortfolio {
    pub fn weights(&self) -> BTreeMap<String, f64> {
        let mut w = BTreeMap::new();
        for c in &self.long {
            w.insert(c.clone(), 1.0 / self.long.len() as f64);
        }
        for c in &self.short {
            w.insert(c.clone(), -1.0 / self.short.len() as f64);
        }
        w
    }
}

/// Quintile size `⌊n/5⌋`; ranking by score, ties by id. `None` (logged) when
/// fewer than five names are scored.
pub fn form_quintiles(scores: &BTreeMap<String, f64>, month: Month) -> Option<MonthlyPortfolio> {
    if scores.len() < MIN_NAMES {
        log::info!("{month}: {} scored names, month skipped", scores.len());
        return None;
    }
    let mut ranked: Vec<(&String, f64)> = scores.iter().map(|(c, s)| (c, *s)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let q = ranked.len() / 5;
    Some(MonthlyPortfolio {
        month,
        long: ranked[..q].iter().map(|(c, _)| (*c).clone()).collect(),
        short: ranked[ranked.len() - q..].iter().map(|(c, _)| (*c).clone()).collect(),
    })
}

/// Month-over-month close-to-close returns from the last close of each month.
pub fn monthly_returns(prices: &PriceSeries) -> BTreeMap<Month, f64> {
    let closes = month_end_closes(prices);
    closes
        .iter()
        .filter_map(|(m, c)| closes.get(&m.prev()).map(|p| (*m, c / p - 1.0)))
        .collect()
}

pub fn month_end_closes(prices: &PriceSeries) -> BTreeMap<Month, f64> {
    let mut out = BTreeMap::new();
    for &(d, p) in prices.points() {
        out.insert(Month::of(d), p);
    }
    out
}

/// 12-1 momentum at the end of `month`: `P(m−1) / P(m−12) − 1` on month-end
/// closes. Companies without closes for months m−12 through m are skipped.
pub fn momentum_scores(prices: &BTreeMap<String, PriceSeries>, month: Month) -> BTreeMap<String, f64> {
    prices
        .iter()
        .filter_map(|(c, s)| {
            let closes = month_end_closes(s);
            let covered = (0..=12).all(|k| closes.contains_key(&month.minus(k)));
            covered.then(|| (c.clone(), closes[&month.prev()] / closes[&month.minus(12)] - 1.0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthRow {
    pub month: Month,
    pub n_long: usize,
    pub n_short: usize,
    pub net_weight: f64,
    pub gross_return: f64,
    pub turnover: f64,
    pub cost: f64,
    pub net_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioReport {
    pub months: Vec<MonthRow>,
    /// Mean monthly one-way turnover × 12.
    pub annual_turnover: f64,
    pub annual_cost: f64,
    pub annualized_gross_return: f64,
    pub annualized_net_return: f64,
    pub annualized_volatility: f64,
    pub gross_sharpe: f64,
    pub net_sharpe: f64,
}

/// Runs the books in sequence. Turnover compares each book with the previous
/// one in the list (the first against an empty book, i.e. full deployment);
/// costs are `cost_rate × annual turnover`, spread evenly over the months.
pub fn simulate(
    portfolios: &[MonthlyPortfolio],
    returns: &BTreeMap<String, BTreeMap<Month, f64>>,
    cost_rate: f64,
) -> Result<PortfolioReport> {
    if portfolios.len() < 2 {
        return Err(Error::Simulation(format!(
            "{} portfolio months; at least 2 are needed for volatility",
            portfolios.len()
        )));
    }
    let mut rows = Vec::with_capacity(portfolios.len());
    let mut prev: BTreeMap<String, f64> = BTreeMap::new();
    let mut any_return = false;
    for p in portfolios {
        let w = p.weights();
        let mut gross = 0.0;
        for (c, wi) in &w {
            match returns.get(c).and_then(|r| r.get(&p.month)) {
                Some(r) => {
                    any_return = true;
                    gross += wi * r;
                }
                None => log::warn!("{}: no return for {c}, treated as 0", p.month),
            }
        }
        let mut names: Vec<&String> = w.keys().chain(prev.keys()).collect();
        names.sort();
        names.dedup();
        let turnover = names
            .iter()
            .map(|c| (w.get(*c).unwrap_or(&0.0) - prev.get(*c).unwrap_or(&0.0)).abs())
            .sum::<f64>()
            / 2.0;
        rows.push(MonthRow {
            month: p.month,
            n_long: p.long.len(),
            n_short: p.short.len(),
            net_weight: w.values().sum(),
            gross_return: gross,
            turnover,
            cost: 0.0,
            net_return: 0.0,
        });
        prev = w;
    }
    if !any_return {
        return Err(Error::Simulation("no realized returns overlap the portfolio months".into()));
    }
    let n = rows.len() as f64;
    let annual_turnover = rows.iter().map(|r| r.turnover).sum::<f64>() / n * 12.0;
    let annual_cost = cost_rate * annual_turnover;
    for r in &mut rows {
        r.cost = annual_cost / 12.0;
        r.net_return = r.gross_return - r.cost;
    }
    let (gross_mean, gross_sd) = crate::evaluation::mean_std(&rows.iter().map(|r| r.gross_return).collect::<Vec<_>>());
    let (net_mean, net_sd) = crate::evaluation::mean_std(&rows.iter().map(|r| r.net_return).collect::<Vec<_>>());
    let vol = net_sd * 12f64.sqrt();
    let gross_vol = gross_sd * 12f64.sqrt();
    Ok(PortfolioReport {
        annual_turnover,
        annual_cost,
        annualized_gross_return: gross_mean * 12.0,
        annualized_net_return: net_mean * 12.0,
        annualized_volatility: vol,
        gross_sharpe: gross_mean * 12.0 / gross_vol,
        net_sharpe: net_mean * 12.0 / vol,
        months: rows,
    })
}

/// Forms one book per scored month and holds it through the following month.
pub fn backtest(
    scores_by_month: &BTreeMap<Month, BTreeMap<String, f64>>,
    universe: &[UniverseRow],
    filter: &UniverseFilter,
    returns: &BTreeMap<String, BTreeMap<Month, f64>>,
    cost_rate: f64,
) -> Result<PortfolioReport> {
    let mut by_month: BTreeMap<Month, BTreeMap<&str, &UniverseRow>> = BTreeMap::new();
    for r in universe {
        by_month.entry(r.month).or_default().insert(&r.company_id, r);
    }
    let mut books = Vec::new();
    for (&m, scores) in scores_by_month {
        let Some(meta) = by_month.get(&m) else {
            log::warn!("{m}: no universe metadata, month skipped");
            continue;
        };
        let admitted: BTreeMap<String, f64> = scores
            .iter()
            .filter(|(c, _)| meta.get(c.as_str()).is_some_and(|r| filter.admits(r)))
            .map(|(c, s)| (c.clone(), *s))
            .collect();
        let industries: BTreeMap<String, String> = admitted
            .keys()
            .map(|c| (c.clone(), meta[c.as_str()].industry.clone()))
            .collect();
        let adjusted = industry_demean(&admitted, &industries)?;
        if let Some(mut book) = form_quintiles(&adjusted, m) {
            book.month = m.next();
            books.push(book);
        }
    }
    simulate(&books, returns, cost_rate)
}

/// Model-score backtest from a predictions file.
pub fn backtest_predictions(
    preds: &[Prediction],
    prices: &BTreeMap<String, PriceSeries>,
    universe: &[UniverseRow],
    filter: &UniverseFilter,
    cost_rate: f64,
) -> Result<PortfolioReport> {
    let mut months: Vec<Month> = preds.iter().map(|p| Month::of(p.trading_date)).collect();
    months.sort();
    months.dedup();
    let scores = months.iter().map(|&m| (m, monthly_scores(preds, m))).collect();
    let returns = prices.iter().map(|(c, s)| (c.clone(), monthly_returns(s))).collect();
    backtest(&scores, universe, filter, &returns, cost_rate)
}

/// 12-1 momentum backtest over the same formation months as `months`.
pub fn backtest_momentum(
    months: &[Month],
    prices: &BTreeMap<String, PriceSeries>,
    universe: &[UniverseRow],
    filter: &UniverseFilter,
    cost_rate: f64,
) -> Result<PortfolioReport> {
    let scores = months.iter().map(|&m| (m, momentum_scores(prices, m))).collect();
    let returns = prices.iter().map(|(c, s)| (c.clone(), monthly_returns(s))).collect();
    backtest(&scores, universe, filter, &returns, cost_rate)
}

impl PortfolioReport {
    pub fn summary_line(&self, name: &str) -> String {
        format!(
            "{name:<12} {:>10.2} {:>10.2} {:>10.2}",
            100.0 * self.annualized_net_return,
            100.0 * self.annualized_volatility,
            self.net_sharpe
        )
    }

    pub fn to_text(&self, name: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10} {:>10} {:>10}", "strategy", "Net Ret %", "Vol %", "Net Sharpe");
        let _ = writeln!(s, "{}", self.summary_line(name));
        let _ = writeln!(
            s,
            "annual one-way turnover {:.3}, annual cost {:.4}%",
            self.annual_turnover,
            100.0 * self.annual_cost
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(s: &str) -> Month {
        s.parse().unwrap()
    }

    #[test]
    fn month_arithmetic() {
        assert_eq!(m("2020-01").prev(), m("2019-12"));
        assert_eq!(m("2020-12").next(), m("2021-01"));
        assert_eq!(m("2021-03").minus(12), m("2020-03"));
        assert_eq!(m("2021-03").to_string(), "2021-03");
        assert!("2021-13".parse::<Month>().is_err());
    }

    #[test]
    fn demean_examples() {
        let scores: BTreeMap<String, f64> = [("a".into(), 0.6), ("b".into(), 0.8), ("c".into(), 0.3)].into();
        let ind: BTreeMap<String, String> =
            [("a".into(), "x".into()), ("b".into(), "x".into()), ("c".into(), "y".into())].into();
        let d = industry_demean(&scores, &ind).unwrap();
        assert!((d["a"] + 0.1).abs() < 1e-12 && (d["b"] - 0.1).abs() < 1e-12);
        assert_eq!(d["c"], 0.0);
        let mut bad = ind.clone();
        bad.remove("c");
        assert!(industry_demean(&scores, &bad).is_err());
    }

    #[test]
    fn quintile_sizes() {
        let ten: BTreeMap<String, f64> = (0..10).map(|i| (format!("c{i}"), i as f64)).collect();
        let p = form_quintiles(&ten, m("2020-01")).unwrap();
        assert_eq!(p.long, ["c9", "c8"]);
        assert_eq!(p.short, ["c1", "c0"]);
        assert!(p.weights().values().all(|w| (w.abs() - 0.5).abs() < 1e-15));
        let five: BTreeMap<String, f64> = (0..5).map(|i| (format!("c{i}"), 0.3)).collect();
        let p = form_quintiles(&five, m("2020-01")).unwrap();
        assert_eq!((p.long.as_slice(), p.short.as_slice()), (&["c0".to_string()][..], &["c4".to_string()][..]));
        let four: BTreeMap<String, f64> = (0..4).map(|i| (format!("c{i}"), 0.3)).collect();
        assert!(form_quintiles(&four, m("2020-01")).is_none());
    }

    #[test]
    fn five_times_turnover_costs_five_percent() {
        // Alternate between disjoint books: each rebalance after the first moves the full
        // book (turnover 2 per month), the first deploys it (turnover 1).
        let books: Vec<MonthlyPortfolio> = (0..12)
            .map(|k| MonthlyPortfolio {
                month: Month::new(2020, k + 1).unwrap(),
                long: vec![if k % 2 == 0 { "a" } else { "c" }.into()],
                short: vec![if k % 2 == 0 { "b" } else { "d" }.into()],
            })
            .collect();
        let rets = BTreeMap::from([("a".to_string(), BTreeMap::from([(m("2020-01"), 0.01)]))]);
        let r = simulate(&books, &rets, 0.01).unwrap();
        assert!((r.annual_turnover - 23.0).abs() < 1e-12);
        assert!((r.annual_cost - 0.23).abs() < 1e-12);
    }
}
