use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{Article, Corpus};
use crate::error::Result;
use crate::text::words;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Articles must be strictly longer than this many characters.
    pub min_chars: usize,
    /// ... and strictly shorter than this many.
    pub max_chars: usize,
    /// Digit characters must make up strictly less than this fraction.
    pub max_numeric_ratio: f64,
    /// Jaccard similarity to any earlier same-company article must stay below this.
    pub max_jaccard: f64,
    /// Prior same-company articles a main article needs within the window.
    pub min_history: usize,
    pub history_window_days: i64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_chars: 100,
            max_chars: 10_000,
            max_numeric_ratio: 0.10,
            max_jaccard: 0.90,
            min_history: 5,
            history_window_days: 365,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    TooShort { chars: usize },
    TooLong { chars: usize },
    NumericRatio { ratio: f64 },
    NearDuplicate { of: String, similarity: f64 },
    /// Kept in the corpus as context, but not usable as a main article.
    InsufficientHistory { found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub corpus: Corpus,
    pub rejections: Vec<Rejection>,
    /// Retained articles that also meet the history requirement.
    pub eligible_mains: BTreeSet<String>,
}

pub fn numeric_ratio(text: &str) -> f64 {
    let (mut digits, mut total) = (0usize, 0usize);
    for c in text.chars() {
        total += 1;
        if c.is_ascii_digit() {
            digits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        digits as f64 / total as f64
    }
}

/// Jaccard similarity of lowercase word sets.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Applies the content filters (length, digit ratio, near-duplicates) and
/// determines which survivors qualify as main articles.
///
/// Near-duplicates are resolved in favor of the earlier publication, and only
/// against articles that were themselves retained, so applying the filter to
/// its own output changes nothing.
pub fn filter_articles(corpus: &Corpus, cfg: &FilterConfig) -> Result<FilterOutcome> {
    let mut rejections = Vec::new();
    let mut keep: HashSet<String> = HashSet::new();

    for company in corpus.companies() {
        let mut kept: Vec<(&Article, HashSet<String>)> = Vec::new();
        for &idx in corpus.company_articles(company) {
            let a = corpus.get(idx);
            let chars = a.text.chars().count();
            let reason = if chars <= cfg.min_chars {
                Some(RejectReason::TooShort { chars })
            } else if chars >= cfg.max_chars {
                Some(RejectReason::TooLong { chars })
            } else {
                let ratio = numeric_ratio(&a.text);
                if ratio >= cfg.max_numeric_ratio {
                    Some(RejectReason::NumericRatio { ratio })
                } else {
                    None
                }
            };
            if let Some(reason) = reason {
                rejections.push(Rejection {
                    id: a.id.clone(),
                    reason,
                });
                continue;
            }
            let set: HashSet<String> = words(&a.text).into_iter().collect();
            let dup = kept
                .iter()
                .map(|(b, s)| (b, jaccard(&set, s)))
                .find(|(_, sim)| *sim >= cfg.max_jaccard);
            if let Some((b, similarity)) = dup {
                rejections.push(Rejection {
                    id: a.id.clone(),
                    reason: RejectReason::NearDuplicate {
                        of: b.id.clone(),
                        similarity,
                    },
                });
                continue;
            }
            keep.insert(a.id.clone());
            kept.push((a, set));
        }
    }

    let retained = corpus.retain_ids(&keep)?;
    let mut eligible_mains = BTreeSet::new();
    for (i, a) in retained.articles().iter().enumerate() {
        let found = retained.prior_articles(i, Some(cfg.history_window_days)).len();
        if found >= cfg.min_history {
            eligible_mains.insert(a.id.clone());
        } else {
            rejections.push(Rejection {
                id: a.id.clone(),
                reason: RejectReason::InsufficientHistory { found },
            });
        }
    }
    rejections.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(FilterOutcome {
        corpus: retained,
        rejections,
        eligible_mains,
    })
}
