//! Same-company context retrieval, time-decayed similarity and staleness.

mod embed;

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Article, Corpus};
use crate::error::{order_error, Error, Result};

pub use embed::{features, fnv1a, DocEmbedding, Embedder, HashedTfIdf};

pub const DEFAULT_HALF_LIFE_DAYS: f64 = 180.0;
pub const RETRIEVAL_WINDOW_DAYS: i64 = 365;
pub const STALENESS_HISTORY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RetrieverKind {
    MostRecent,
    FinSim,
    TimeFinSim { half_life_days: f64 },
}

impl RetrieverKind {
    pub fn validate(self) -> Result<Self> {
        if let RetrieverKind::TimeFinSim { half_life_days } = self {
            if !(half_life_days > 0.0) {
                return Err(Error::config("half_life_days", "must be positive"));
            }
        }
        Ok(self)
    }

    /// Parses `recent`, `finsim` or `timefinsim`.
    pub fn parse(s: &str, half_life_days: f64) -> Result<Self> {
        match s {
            "recent" | "most_recent" => Ok(RetrieverKind::MostRecent),
            "finsim" => Ok(RetrieverKind::FinSim),
            "timefinsim" => RetrieverKind::TimeFinSim { half_life_days }.validate(),
            _ => Err(Error::config("kind", format!("unknown retriever `{s}`"))),
        }
    }
}

impl fmt::Display for RetrieverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RetrieverKind::MostRecent => f.write_str("recent"),
            RetrieverKind::FinSim => f.write_str("finsim"),
            RetrieverKind::TimeFinSim { half_life_days } => write!(f, "timefinsim(H={half_life_days})"),
        }
    }
}

impl FromStr for RetrieverKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s, DEFAULT_HALF_LIFE_DAYS)
    }
}

/// `finsim · exp(−ln2 · t / H)` for `t` elapsed days.
pub fn decay(finsim: f64, elapsed_days: f64, half_life_days: f64) -> Result<f64> {
    if elapsed_days < 0.0 {
        return Err(Error::TemporalOrder(format!("negative elapsed time {elapsed_days} days")));
    }
    Ok(finsim * (-std::f64::consts::LN_2 * elapsed_days / half_life_days).exp())
}

pub fn elapsed_days(earlier: NaiveDateTime, later: NaiveDateTime) -> f64 {
    (later - earlier).num_minutes() as f64 / (24.0 * 60.0)
}

/// Time-decayed similarity of context `c` to main article `a`; `c` must be strictly earlier.
pub fn time_fin_sim(
    a: &Article,
    ea: &DocEmbedding,
    c: &Article,
    ec: &DocEmbedding,
    half_life_days: f64,
) -> Result<f64> {
    if c.published_at >= a.published_at {
        return Err(order_error("context article", c.published_at, a.published_at));
    }
    decay(ea.cosine(ec), elapsed_days(c.published_at, a.published_at), half_life_days)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<'a> {
    pub article: &'a Article,
    /// Cosine similarity to the main article.
    pub finsim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub main_id: String,
    /// Ascending publication time.
    pub contexts: Vec<String>,
    pub scores: Vec<f64>,
}

/// Ranks `pool` for `main` and keeps the best `n`, returned oldest first.
///
/// Ordering is by score (descending), then later publication, then id. For
/// `MostRecent` the score is ignored and recency decides.
pub fn select_top_n(
    main: &Article,
    pool: &[Candidate<'_>],
    n: usize,
    kind: RetrieverKind,
) -> Result<RetrievalResult> {
    kind.validate()?;
    let mut scored = Vec::with_capacity(pool.len());
    for c in pool {
        if c.article.company_id != main.company_id {
            return Err(Error::Contract(format!(
                "candidate {} belongs to {}, not {}",
                c.article.id, c.article.company_id, main.company_id
            )));
        }
        if c.article.published_at >= main.published_at {
            return Err(order_error("candidate", c.article.published_at, main.published_at));
        }
        let score = match kind {
            RetrieverKind::MostRecent | RetrieverKind::FinSim => c.finsim,
            RetrieverKind::TimeFinSim { half_life_days } => decay(
                c.finsim,
                elapsed_days(c.article.published_at, main.published_at),
                half_life_days,
            )?,
        };
        scored.push((c.article, score));
    }
    if scored.len() < n {
        return Err(Error::InsufficientHistory {
            id: main.id.clone(),
            needed: n,
            found: scored.len(),
        });
    }
    let later_then_id = |a: &Article, b: &Article| {
        b.published_at
            .cmp(&a.published_at)
            .then_with(|| a.id.cmp(&b.id))
    };
    scored.sort_by(|(a, sa), (b, sb)| match kind {
        RetrieverKind::MostRecent => later_then_id(a, b),
        _ => sb.partial_cmp(sa).unwrap_or(Ordering::Equal).then_with(|| later_then_id(a, b)),
    });
    scored.truncate(n);
    scored.sort_by(|(a, _), (b, _)| a.published_at.cmp(&b.published_at).then_with(|| a.id.cmp(&b.id)));
    Ok(RetrievalResult {
        main_id: main.id.clone(),
        contexts: scored.iter().map(|(a, _)| a.id.clone()).collect(),
        scores: scored.iter().map(|(_, s)| *s).collect(),
    })
}

/// Mean cosine of `a` to its five most recent predecessors.
/// `history` must be in ascending time; only its last five entries are used.
pub fn staleness(a: &DocEmbedding, history: &[DocEmbedding]) -> Result<f64> {
    if history.len() < STALENESS_HISTORY {
        return Err(Error::InsufficientHistory {
            id: "staleness".into(),
            needed: STALENESS_HISTORY,
            found: history.len(),
        });
    }
    let recent = &history[history.len() - STALENESS_HISTORY..];
    Ok(recent.iter().map(|h| a.cosine(h)).sum::<f64>() / STALENESS_HISTORY as f64)
}

/// Splits ids into staleness terciles (low, mid, high) by sorted score,
/// ties broken by id, boundaries at `⌊k·n/3⌋`.
pub fn staleness_buckets(scores: &[(String, f64)]) -> [Vec<String>; 3] {
    let mut sorted: Vec<&(String, f64)> = scores.iter().collect();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| a.0.cmp(&b.0)));
    let n = sorted.len();
    let cut = |k: usize| k * n / 3;
    let ids = |lo: usize, hi: usize| sorted[lo..hi].iter().map(|(id, _)| id.clone()).collect();
    [ids(0, cut(1)), ids(cut(1), cut(2)), ids(cut(2), n)]
}

/// Per-article embeddings for one corpus, computed once and shared read-only.
pub struct Retriever<'c> {
    corpus: &'c Corpus,
    embeddings: Vec<DocEmbedding>,
    window_days: i64,
}

impl<'c> Retriever<'c> {
    pub fn new(corpus: &'c Corpus, embedder: &dyn Embedder) -> Result<Self> {
        let embeddings = corpus
            .articles()
            .par_iter()
            .map(|a| embedder.embed(&a.text))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            corpus,
            embeddings,
            window_days: RETRIEVAL_WINDOW_DAYS,
        })
    }

    pub fn corpus(&self) -> &'c Corpus {
        self.corpus
    }

    pub fn embedding(&self, idx: usize) -> &DocEmbedding {
        &self.embeddings[idx]
    }

    pub fn candidates(&self, idx: usize) -> Vec<Candidate<'c>> {
        let e = &self.embeddings[idx];
        self.corpus
            .prior_articles(idx, Some(self.window_days))
            .into_iter()
            .map(|j| Candidate {
                article: self.corpus.get(j),
                finsim: e.cosine(&self.embeddings[j]),
            })
            .collect()
    }

    pub fn retrieve(&self, idx: usize, n: usize, kind: RetrieverKind) -> Result<RetrievalResult> {
        select_top_n(self.corpus.get(idx), &self.candidates(idx), n, kind)
    }

    pub fn retrieve_id(&self, id: &str, n: usize, kind: RetrieverKind) -> Result<RetrievalResult> {
        let idx = self
            .corpus
            .index_of(id)
            .ok_or_else(|| Error::Data(format!("unknown article `{id}`")))?;
        self.retrieve(idx, n, kind)
    }

    pub fn staleness(&self, idx: usize) -> Result<f64> {
        let history: Vec<DocEmbedding> = self
            .corpus
            .prior_articles(idx, None)
            .into_iter()
            .map(|j| self.embeddings[j].clone())
            .collect();
        staleness(&self.embeddings[idx], &history).map_err(|e| match e {
            Error::InsufficientHistory { needed, found, .. } => Error::InsufficientHistory {
                id: self.corpus.get(idx).id.clone(),
                needed,
                found,
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_timestamp;

    fn art(id: &str, ts: &str) -> Article {
        Article {
            id: id.into(),
            company_id: "C".into(),
            industry: "x".into(),
            published_at: parse_timestamp(ts).unwrap(),
            text: id.into(),
        }
    }

    #[test]
    fn half_life_examples() {
        assert_eq!(decay(0.8, 0.0, 180.0).unwrap(), 0.8);
        assert!((decay(0.8, 180.0, 180.0).unwrap() - 0.4).abs() < 1e-12);
        assert!((decay(0.8, 360.0, 180.0).unwrap() - 0.2).abs() < 1e-12);
        assert!(decay(0.8, -1.0, 180.0).is_err());
    }

    #[test]
    fn later_context_is_a_temporal_order_error() {
        let e = HashedTfIdf::new(16).unwrap();
        let a = art("a", "2020-01-01T10:00");
        let c = art("c", "2020-01-02T10:00");
        let (ea, ec) = (e.embed("x y").unwrap(), e.embed("x z").unwrap());
        assert!(matches!(time_fin_sim(&a, &ea, &c, &ec, 180.0), Err(Error::TemporalOrder(_))));
        assert!(time_fin_sim(&c, &ec, &a, &ea, 180.0).is_ok());
    }

    #[test]
    fn most_recent_returns_latest_ascending() {
        let main = art("m", "2020-12-01T10:00");
        let arts: Vec<Article> = (1..=8).map(|k| art(&format!("a{k}"), &format!("2020-0{k}-01T10:00"))).collect();
        let pool: Vec<Candidate> = arts.iter().rev().map(|a| Candidate { article: a, finsim: 0.1 }).collect();
        let r = select_top_n(&main, &pool, 5, RetrieverKind::MostRecent).unwrap();
        assert_eq!(r.contexts, ["a4", "a5", "a6", "a7", "a8"]);
        let err = select_top_n(&main, &pool, 9, RetrieverKind::MostRecent).unwrap_err();
        assert!(matches!(err, Error::InsufficientHistory { found: 8, .. }));
    }

    #[test]
    fn terciles_of_nine() {
        let s: Vec<(String, f64)> = (0..9).map(|i| (format!("s{i}"), (9 - i) as f64)).collect();
        let b = staleness_buckets(&s);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 3]);
        assert_eq!(b[0], ["s8", "s7", "s6"]);
        let eq: Vec<(String, f64)> = (0..10).map(|i| (format!("s{i}"), 0.5)).collect();
        let b = staleness_buckets(&eq);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), [3, 3, 4]);
    }
}
