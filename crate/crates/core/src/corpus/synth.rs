//! Seeded synthetic news and price generator.
//!
//! Each company emits a chain of templated corporate events. The forward
//! return of an article depends on its own event type and on the type of its
//! antecedent: the most recent event among the company's previous `memory`
//! articles that changes the reading of news, or else the previous article.
//!
//! ```text
//! r = base(e) · ((1 − w) + w · reading(p)) + σ · ε   if base(e) < 0
//! r = base(e) + σ · ε                                 otherwise,   ε ~ N(0, 1)
//! ```
//!
//! `reading(p)` is −1 for events that change how later bad news should be
//! read (a sale of a business makes a later filing delay benign) and +1
//! otherwise; good news is read the same way whatever came before. The antecedent's event type never appears in the main article's
//! text, so only the history reveals it. Prices integrate `r` over the three
//! trading days after the article, plus idiosyncratic daily noise.

use std::collections::BTreeSet;

use chrono::{Datelike, Days, NaiveDate, NaiveDateTime, NaiveTime};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use super::{Article, Direction, PriceSeries, TradingCalendar};
use crate::error::Result;
use crate::portfolio::{Month, UniverseRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub companies: usize,
    pub articles_per_company: usize,
    pub industries: usize,
    pub start_date: NaiveDate,
    pub span_days: i64,
    /// Weight `w` of the antecedent's reading in the latent return.
    pub context_dependence: f64,
    /// Number of previous articles searched for a reading-changing antecedent.
    pub memory: usize,
    /// Standard deviation `σ` of the latent return noise.
    pub noise: f64,
    /// Price move, as a log return, for a latent return of 1.
    pub impact: f64,
    pub daily_volatility: f64,
    /// Extra near-verbatim reposts, rejected by the duplicate filter.
    pub duplicate_rate: f64,
    /// Extra one-line items, rejected by the length filter.
    pub short_rate: f64,
    /// Extra data dumps, rejected by the digit-ratio filter.
    pub numeric_rate: f64,
    /// Fraction of companies whose market capitalization sits below the universe floor.
    pub small_cap_fraction: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            companies: 40,
            articles_per_company: 60,
            industries: 5,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date"),
            span_days: 1095,
            context_dependence: 0.8,
            memory: 3,
            noise: 0.25,
            impact: 0.04,
            daily_volatility: 0.002,
            duplicate_rate: 0.02,
            short_rate: 0.01,
            numeric_rate: 0.01,
            small_cap_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    EarningsBeat,
    EarningsMiss,
    ProductLaunch,
    Lawsuit,
    FilingDelay,
    GuidanceRaise,
    Divestiture,
    Restructuring,
}

impl EventKind {
    pub const ALL: [EventKind; 8] = [
        EventKind::EarningsBeat,
        EventKind::EarningsMiss,
        EventKind::ProductLaunch,
        EventKind::Lawsuit,
        EventKind::FilingDelay,
        EventKind::GuidanceRaise,
        EventKind::Divestiture,
        EventKind::Restructuring,
    ];

    /// Sign of the event's stand-alone market reaction.
    pub fn base(self) -> f64 {
        use EventKind::*;
        match self {
            EarningsBeat | ProductLaunch | GuidanceRaise | Divestiture => 1.0,
            EarningsMiss | Lawsuit | FilingDelay | Restructuring => -1.0,
        }
    }

    /// How this event, as an antecedent, changes the reading of the next one.
    pub fn reading(self) -> f64 {
        match self {
            EventKind::Divestiture | EventKind::Restructuring => -1.0,
            _ => 1.0,
        }
    }

    fn headlines(self) -> [&'static str; 3] {
        use EventKind::*;
        match self {
            EarningsBeat => [
                "{name} reported quarterly earnings above analyst expectations",
                "{name} beat consensus estimates for the quarter",
                "{name} posted stronger than expected quarterly profit",
            ],
            EarningsMiss => [
                "{name} reported quarterly earnings below analyst expectations",
                "{name} missed consensus estimates for the quarter",
                "{name} posted weaker than expected quarterly profit",
            ],
            ProductLaunch => [
                "{name} announced the launch of a new product line",
                "{name} unveiled a new flagship product",
                "{name} introduced a new service offering",
            ],
            Lawsuit => [
                "{name} was named as defendant in a class action lawsuit",
                "{name} faces a lawsuit from a group of former customers",
                "{name} was sued over alleged contract violations",
            ],
            FilingDelay => [
                "{name} announced a delay in filing its annual report",
                "{name} said it will postpone its annual filing",
                "{name} notified regulators of a late periodic filing",
            ],
            GuidanceRaise => [
                "{name} raised its full year revenue guidance",
                "{name} lifted its outlook for the fiscal year",
                "{name} increased its annual profit forecast",
            ],
            Divestiture => [
                "{name} agreed to sell its {unit} business",
                "{name} completed the sale of the {unit} division",
                "{name} announced the divestiture of its {unit} unit",
            ],
            Restructuring => [
                "{name} announced a broad restructuring program",
                "{name} unveiled plans to reorganize its operations",
                "{name} said it will cut costs through a restructuring",
            ],
        }
    }

    fn detail(self) -> &'static str {
        use EventKind::*;
        match self {
            EarningsBeat => "earnings per share exceeded the consensus forecast by {n} percent",
            EarningsMiss => "earnings per share fell short of the consensus forecast by {n} percent",
            ProductLaunch => "management expects the launch to reach {n} markets",
            Lawsuit => "plaintiffs are seeking damages of {n} million dollars",
            FilingDelay => "the company expects to complete the filing within {n} days",
            GuidanceRaise => "the new outlook implies growth of {n} percent",
            Divestiture => "the transaction is valued at {n} million dollars",
            Restructuring => "the plan affects about {n} percent of the workforce",
        }
    }
}

const UNIT_SENTENCES: [&str; 3] = [
    "the {unit} segment was mentioned in the announcement",
    "executives discussed the {unit} business with investors",
    "the update also covered the {unit} operations",
];

const FILLER: [&str; 8] = [
    "shares traded in line with the broader market",
    "analysts are expected to revise their models",
    "the company did not respond to a request for comment",
    "investors will watch the next quarterly call closely",
    "industry peers reported mixed results this season",
    "the board is scheduled to meet later this month",
    "a spokesperson confirmed the details in a statement",
    "trading volume was above its recent average",
];

const INDUSTRIES: [&str; 8] = [
    "technology",
    "healthcare",
    "energy",
    "financials",
    "industrials",
    "consumer",
    "utilities",
    "materials",
];

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["", "n", "r", "x", "l", "s"];

/// Hidden generator state for one event-chain article.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTruth {
    pub article_id: String,
    pub company_id: String,
    pub event: EventKind,
    pub antecedent: Option<String>,
    pub antecedent_event: Option<EventKind>,
    pub latent_return: f64,
    pub direction: Direction,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub articles: Vec<Article>,
    pub prices: Vec<PriceSeries>,
    pub universe: Vec<UniverseRow>,
    pub truth: Vec<EventTruth>,
    pub calendar: TradingCalendar,
}

fn pseudo_word<R: Rng>(rng: &mut R, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).expect("non-empty"));
        w.push_str(VOWELS.choose(rng).expect("non-empty"));
    }
    w.push_str(CODAS.choose(rng).expect("non-empty"));
    w
}

fn unique_word<R: Rng>(rng: &mut R, syllables: usize, used: &mut BTreeSet<String>) -> String {
    loop {
        let w = pseudo_word(rng, syllables);
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Mean of the latent return given the event and its antecedent.
pub fn latent_mean(cfg: &SyntheticConfig, event: EventKind, antecedent: Option<EventKind>) -> f64 {
    let base = event.base();
    if base > 0.0 {
        return base;
    }
    let reading = antecedent.map_or(1.0, EventKind::reading);
    base * ((1.0 - cfg.context_dependence) + cfg.context_dependence * reading)
}

/// P(latent return > 0 | event, antecedent).
pub fn posterior_contextual(cfg: &SyntheticConfig, event: EventKind, antecedent: Option<EventKind>) -> f64 {
    let mu = latent_mean(cfg, event, antecedent);
    if cfg.noise == 0.0 {
        return match mu.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => 0.0,
            _ => 0.5,
        };
    }
    StdNormal::new(0.0, 1.0).expect("standard normal").cdf(mu / cfg.noise)
}

/// P(latent return > 0 | event) with the antecedent marginalized out, for an
/// article with at least `memory` predecessors. Events are drawn uniformly, so
/// the lookback holds a reading-changing event with probability `1 − (1 − ρ)^k`.
pub fn posterior_single(cfg: &SyntheticConfig, event: EventKind) -> f64 {
    let changing: Vec<EventKind> = EventKind::ALL.into_iter().filter(|e| e.reading() < 0.0).collect();
    let plain: Vec<EventKind> = EventKind::ALL.into_iter().filter(|e| e.reading() > 0.0).collect();
    let rho = changing.len() as f64 / EventKind::ALL.len() as f64;
    let q = 1.0 - (1.0 - rho).powi(cfg.memory.max(1) as i32);
    let mean = |set: &[EventKind]| {
        set.iter().map(|&p| posterior_contextual(cfg, event, Some(p))).sum::<f64>() / set.len() as f64
    };
    q * mean(&changing) + (1.0 - q) * mean(&plain)
}

fn fill(template: &str, name: &str, unit: &str, n: u32) -> String {
    template
        .replace("{name}", name)
        .replace("{unit}", unit)
        .replace("{n}", &n.to_string())
}

pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<SyntheticCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("standard normal");
    let last_day = cfg.start_date + Days::new(cfg.span_days as u64 + 120);
    let calendar = TradingCalendar::weekdays(cfg.start_date, last_day)?;
    let days = calendar.days();

    let mut used = BTreeSet::new();
    let mut articles = Vec::new();
    let mut prices = Vec::new();
    let mut universe = Vec::new();
    let mut truth = Vec::new();
    let n_industries = cfg.industries.clamp(1, INDUSTRIES.len());

    for c in 0..cfg.companies {
        let company_id = format!("C{c:03}");
        let industry = INDUSTRIES[c % n_industries].to_string();
        let name = capitalize(&unique_word(&mut rng, 2, &mut used));
        let units: Vec<String> = (0..3).map(|_| unique_word(&mut rng, 2, &mut used)).collect();

        let mut stamps: Vec<NaiveDateTime> = (0..cfg.articles_per_company)
            .map(|_| {
                let day = cfg.start_date + Days::new(rng.random_range(0..cfg.span_days) as u64);
                let minute = rng.random_range(6 * 60..20 * 60);
                day.and_time(NaiveTime::from_hms_opt(minute / 60, minute % 60, 0).expect("valid time"))
            })
            .collect();
        stamps.sort();
        for k in 1..stamps.len() {
            if stamps[k] <= stamps[k - 1] {
                stamps[k] = stamps[k - 1] + chrono::Duration::minutes(1);
            }
        }

        let mut impacts = vec![0.0; days.len()];
        let mut prev: Option<(String, EventKind, String)> = None;
        let mut history: Vec<(String, EventKind)> = Vec::new();
        let mut company_articles = Vec::new();
        for (k, &ts) in stamps.iter().enumerate() {
            let event = *EventKind::ALL.choose(&mut rng).expect("non-empty");
            let unit = match &prev {
                Some((_, _, u)) if rng.random_bool(0.7) => u.clone(),
                _ => units.choose(&mut rng).expect("non-empty").clone(),
            };
            let mut sentences = vec![
                fill(event.headlines().choose(&mut rng).expect("non-empty"), &name, &unit, 0),
                fill(event.detail(), &name, &unit, rng.random_range(2..40)),
                fill(UNIT_SENTENCES.choose(&mut rng).expect("non-empty"), &name, &unit, 0),
            ];
            let n_filler = rng.random_range(2..=3);
            sentences.extend(FILLER.choose_multiple(&mut rng, n_filler).map(|s| s.to_string()));
            let text = sentences
                .iter()
                .map(|s| format!("{} .", capitalize(s)))
                .collect::<Vec<_>>()
                .join(" ");

            let lookback = &history[history.len().saturating_sub(cfg.memory.max(1))..];
            let antecedent = lookback
                .iter()
                .rev()
                .find(|(_, e)| e.reading() < 0.0)
                .or(history.last())
                .cloned();
            let antecedent_event = antecedent.as_ref().map(|p| p.1);
            let latent = latent_mean(cfg, event, antecedent_event) + cfg.noise * noise.sample(&mut rng);
            let id = format!("{company_id}-{k:04}");
            truth.push(EventTruth {
                article_id: id.clone(),
                company_id: company_id.clone(),
                event,
                antecedent: antecedent.map(|p| p.0),
                antecedent_event,
                latent_return: latent,
                direction: if latent >= 0.0 { Direction::Up } else { Direction::Down },
            });
            if let Ok(td) = calendar.assign_trading_date(ts) {
                let t = days.binary_search(&td).expect("calendar day");
                for step in 1..=3 {
                    if let Some(slot) = impacts.get_mut(t + step) {
                        *slot += latent * cfg.impact / 3.0;
                    }
                }
            }
            company_articles.push(Article {
                id: id.clone(),
                company_id: company_id.clone(),
                industry: industry.clone(),
                published_at: ts,
                text,
            });
            history.push((id.clone(), event));
            prev = Some((id, event, unit));
        }

        let mut extras = Vec::new();
        for (k, a) in company_articles.iter().enumerate() {
            if rng.random_bool(cfg.duplicate_rate) {
                extras.push(Article {
                    id: format!("{company_id}-d{k:04}"),
                    published_at: a.published_at + chrono::Duration::minutes(rng.random_range(30..300)),
                    ..a.clone()
                });
            }
            if rng.random_bool(cfg.short_rate) {
                extras.push(Article {
                    id: format!("{company_id}-s{k:04}"),
                    published_at: a.published_at + chrono::Duration::minutes(rng.random_range(30..300)),
                    text: format!("{name} shares moved in early trading ."),
                    ..a.clone()
                });
            }
            if rng.random_bool(cfg.numeric_rate) {
                let figures: Vec<String> = (0..40).map(|_| rng.random_range(1000..99999).to_string()).collect();
                extras.push(Article {
                    id: format!("{company_id}-n{k:04}"),
                    published_at: a.published_at + chrono::Duration::minutes(rng.random_range(30..300)),
                    text: format!("{name} data table : {}", figures.join(" ")),
                    ..a.clone()
                });
            }
        }
        articles.extend(company_articles);
        articles.extend(extras);

        let mut log_p: f64 = rng.random_range(20.0f64..200.0).ln();
        let mut points = Vec::with_capacity(days.len());
        for (i, &d) in days.iter().enumerate() {
            if i > 0 {
                log_p += cfg.daily_volatility * noise.sample(&mut rng) + impacts[i];
            }
            let close = (log_p.exp() * 100.0).round() / 100.0;
            points.push((d, close.max(0.01)));
        }

        let small = (c as f64) < cfg.small_cap_fraction * cfg.companies as f64;
        let shares: f64 = if small {
            rng.random_range(1.0e6..3.0e6)
        } else {
            rng.random_range(2.0e7..5.0e8)
        };
        let turnover: f64 = rng.random_range(0.002..0.01);
        let mut month = NaiveDate::from_ymd_opt(days[0].year(), days[0].month(), 1).expect("valid");
        while month <= *days.last().expect("non-empty") {
            let next = month.checked_add_months(chrono::Months::new(1)).expect("valid");
            let month_end = next.pred_opt().expect("valid");
            let k = points.partition_point(|(d, _)| *d <= month_end);
            if k > 0 {
                let cap = points[k - 1].1 * shares;
                universe.push(UniverseRow {
                    company_id: company_id.clone(),
                    month: Month::of(month),
                    market_cap: cap,
                    avg_daily_value: cap * turnover,
                    industry: industry.clone(),
                });
            }
            month = next;
        }
        prices.push(PriceSeries::new(company_id, points)?);
    }

    Ok(SyntheticCorpus {
        articles,
        prices,
        universe,
        truth,
        calendar,
    })
}
