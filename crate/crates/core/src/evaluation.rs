//! AUC, paired significance, staleness buckets and evaluation reports.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 1000;
/// Largest sample size for which Wilcoxon p-values are enumerated exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

/// One row of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub company_id: String,
    pub trading_date: NaiveDate,
    pub horizon: u32,
    pub probability: f64,
    /// +1 / −1 realized direction.
    pub label: i8,
    pub staleness: Option<f64>,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC: P(score of a random positive > score of a random negative), ties count ½.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc(format!("{pos} positives and {neg} negatives")));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Nonzero differences used.
    pub n: usize,
    pub w_plus: f64,
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

fn signed_ranks(diffs: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::DegenerateTest("all differences are zero".into()));
    }
    if nz.iter().any(|d| !d.is_finite()) {
        return Err(Error::DegenerateTest("non-finite difference".into()));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    Ok((average_ranks(&abs), nz.iter().map(|d| *d > 0.0).collect()))
}

/// Two-sided exact p-value by enumerating the null distribution of W⁺ over
/// all 2ⁿ sign assignments (dynamic programming over doubled ranks, so
/// tied half-integer ranks are handled exactly).
pub fn wilcoxon_exact_p(diffs: &[f64]) -> Result<f64> {
    let (ranks, positive) = signed_ranks(diffs)?;
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w: usize = doubled.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let all = 2f64.powi(doubled.len() as i32);
    let lower: f64 = counts[..=w].iter().sum::<f64>() / all;
    let upper: f64 = counts[w..].iter().sum::<f64>() / all;
    Ok((2.0 * lower.min(upper)).min(1.0))
}

/// Two-sided normal approximation with tie and continuity correction.
pub fn wilcoxon_normal_p(diffs: &[f64]) -> Result<f64> {
    let (ranks, positive) = signed_ranks(diffs)?;
    let n = ranks.len() as f64;
    let w: f64 = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let mean = n * (n + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Err(Error::DegenerateTest("zero variance".into()));
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((2.0 * (1.0 - phi.cdf(z))).min(1.0))
}

/// Wilcoxon signed-rank test on paired differences; zeros are discarded.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    let (ranks, positive) = signed_ranks(diffs)?;
    let n = ranks.len();
    if n < 5 {
        return Err(Error::DegenerateTest(format!("{n} nonzero differences, need at least 5")));
    }
    let w_plus = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let (p_value, method) = if n <= WILCOXON_EXACT_MAX_N {
        (wilcoxon_exact_p(diffs)?, WilcoxonMethod::Exact)
    } else {
        (wilcoxon_normal_p(diffs)?, WilcoxonMethod::Normal)
    };
    Ok(WilcoxonResult {
        n,
        w_plus,
        p_value,
        method,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub replicates: usize,
    /// Mean of AUC(a) − AUC(b) over replicates, in AUC units.
    pub mean_difference: f64,
    pub wilcoxon: WilcoxonResult,
}

/// Per-replicate AUC(a) − AUC(b) on sample-level bootstrap resamples.
///
/// Replicate `r` draws from its own ChaCha stream of the master seed, so the
/// result does not depend on thread scheduling. Resamples missing a class are
/// redrawn from the same stream.
pub fn bootstrap_auc_differences(
    a: &[f64],
    b: &[f64],
    labels: &[bool],
    replicates: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if a.len() != b.len() || a.len() != labels.len() {
        return Err(Error::Data("paired predictions differ in length".into()));
    }
    auc(a, labels)?;
    let n = labels.len();
    (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            loop {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                if l.iter().all(|&x| x) || l.iter().all(|&x| !x) {
                    continue;
                }
                let sa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
                let sb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
                return Ok(auc(&sa, &l)? - auc(&sb, &l)?);
            }
        })
        .collect()
}

pub fn significance(a: &[f64], b: &[f64], labels: &[bool], replicates: usize, seed: u64) -> Result<Significance> {
    let diffs = bootstrap_auc_differences(a, b, labels, replicates, seed)?;
    Ok(Significance {
        replicates,
        mean_difference: diffs.iter().sum::<f64>() / diffs.len().max(1) as f64,
        wilcoxon: wilcoxon_signed_rank(&diffs)?,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn labels_of(preds: &[&Prediction]) -> Vec<bool> {
    preds.iter().map(|p| p.label > 0).collect()
}

fn probs_of(preds: &[&Prediction]) -> Vec<f64> {
    preds.iter().map(|p| p.probability).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    /// 1 = least stale, 3 = most stale.
    pub level: usize,
    pub count: usize,
    /// AUC in percent; `None` when the bucket holds a single class.
    pub auc: Option<f64>,
    pub reference_auc: Option<f64>,
    /// `auc − reference_auc` in percentage points.
    pub delta: Option<f64>,
}

/// Per-tercile AUC of `preds` and, optionally, `reference`. Bucket
/// membership comes from `buckets` (computed once from the articles), so both
/// models are scored on identical sample sets.
pub fn staleness_report(
    preds: &[Prediction],
    reference: Option<&[Prediction]>,
    buckets: &[Vec<String>; 3],
) -> Result<Vec<BucketRow>> {
    let index = |ps: &[Prediction]| -> BTreeMap<String, Prediction> {
        ps.iter().map(|p| (p.sample_id.clone(), p.clone())).collect()
    };
    let a = index(preds);
    let b = reference.map(index);
    if let Some(b) = &b {
        let ka: BTreeSet<_> = a.keys().collect();
        let kb: BTreeSet<_> = b.keys().collect();
        if ka != kb {
            return Err(Error::Data("prediction sets cover different samples".into()));
        }
    }
    let bucket_auc = |m: &BTreeMap<String, Prediction>, ids: &[String]| -> Result<Option<f64>> {
        let ps: Vec<&Prediction> = ids
            .iter()
            .map(|id| m.get(id).ok_or_else(|| Error::Data(format!("no prediction for {id}"))))
            .collect::<Result<_>>()?;
        Ok(auc(&probs_of(&ps), &labels_of(&ps)).ok().map(|x| 100.0 * x))
    };
    buckets
        .iter()
        .enumerate()
        .map(|(k, ids)| {
            let auc_a = bucket_auc(&a, ids)?;
            let auc_b = match &b {
                Some(b) => bucket_auc(b, ids)?,
                None => None,
            };
            Ok(BucketRow {
                level: k + 1,
                count: ids.len(),
                auc: auc_a,
                reference_auc: auc_b,
                delta: auc_a.zip(auc_b).map(|(x, y)| x - y),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: u32,
    pub count: usize,
    pub auc: f64,
    pub reference_auc: Option<f64>,
    pub significance: Option<Significance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub horizons: Vec<HorizonRow>,
    pub staleness: Vec<BucketRow>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub bootstrap_replicates: usize,
    pub seed: u64,
    pub staleness_buckets: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            bootstrap_replicates: DEFAULT_BOOTSTRAP_REPLICATES,
            seed: 0,
            staleness_buckets: true,
        }
    }
}

/// Scores a predictions file, optionally against a reference on the same samples.
pub fn evaluate(preds: &[Prediction], reference: Option<&[Prediction]>, opts: &EvalOptions) -> Result<EvalReport> {
    let horizons: BTreeSet<u32> = preds.iter().map(|p| p.horizon).collect();
    let ref_map: Option<BTreeMap<&str, &Prediction>> =
        reference.map(|r| r.iter().map(|p| (p.sample_id.as_str(), p)).collect());
    let mut rows = Vec::new();
    for h in horizons {
        let ps: Vec<&Prediction> = preds.iter().filter(|p| p.horizon == h).collect();
        let labels = labels_of(&ps);
        let a = probs_of(&ps);
        let row_auc = 100.0 * auc(&a, &labels)?;
        let (reference_auc, significance) = match &ref_map {
            Some(m) => {
                let b: Vec<f64> = ps
                    .iter()
                    .map(|p| {
                        m.get(p.sample_id.as_str())
                            .map(|q| q.probability)
                            .ok_or_else(|| Error::Data(format!("reference lacks {}", p.sample_id)))
                    })
                    .collect::<Result<_>>()?;
                let sig = significance(&a, &b, &labels, opts.bootstrap_replicates, opts.seed)
                    .map_err(|e| log::warn!("significance for {h}D skipped: {e}"))
                    .ok();
                (Some(100.0 * auc(&b, &labels)?), sig)
            }
            None => (None, None),
        };
        rows.push(HorizonRow {
            horizon: h,
            count: ps.len(),
            auc: row_auc,
            reference_auc,
            significance,
        });
    }

    let mut staleness = Vec::new();
    if opts.staleness_buckets {
        let scored: Vec<(String, f64)> = preds
            .iter()
            .filter_map(|p| p.staleness.map(|s| (p.sample_id.clone(), s)))
            .collect();
        if scored.len() == preds.len() && !scored.is_empty() {
            let buckets = crate::retrieval::staleness_buckets(&scored);
            staleness = staleness_report(preds, reference, &buckets)?;
        } else {
            log::warn!("staleness missing on some predictions; bucketed analysis skipped");
        }
    }
    Ok(EvalReport {
        horizons: rows,
        staleness,
    })
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.2}"));
        let mut s = String::new();
        let _ = writeln!(s, "horizon  n       AUC     ref AUC   Δ(pp)   p(Wilcoxon)");
        for r in &self.horizons {
            let delta = r.reference_auc.map(|b| r.auc - b);
            let p = r
                .significance
                .as_ref()
                .map_or("-".into(), |s| format!("{:.3e}", s.wilcoxon.p_value));
            let _ = writeln!(
                s,
                "{:>3}D     {:<7} {:<7.2} {:<9} {:<7} {}",
                r.horizon,
                r.count,
                r.auc,
                pct(r.reference_auc),
                pct(delta),
                p
            );
        }
        if !self.staleness.is_empty() {
            let _ = writeln!(s, "\nstaleness  n       AUC       ref AUC   Δ(pp)");
            for b in &self.staleness {
                let _ = writeln!(
                    s,
                    "level {}    {:<7} {:<9} {:<9} {}",
                    b.level,
                    b.count,
                    pct(b.auc),
                    pct(b.reference_auc),
                    pct(b.delta)
                );
            }
        }
        s
    }

    /// Flat table: one row per horizon and one per staleness bucket.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["section", "key", "count", "auc", "reference_auc", "delta", "p_value"])?;
        let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
        for r in &self.horizons {
            w.write_record([
                "horizon".to_string(),
                r.horizon.to_string(),
                r.count.to_string(),
                format!("{}", r.auc),
                f(r.reference_auc),
                f(r.reference_auc.map(|b| r.auc - b)),
                f(r.significance.as_ref().map(|s| s.wilcoxon.p_value)),
            ])?;
        }
        for b in &self.staleness {
            w.write_record([
                "staleness".to_string(),
                b.level.to_string(),
                b.count.to_string(),
                f(b.auc),
                f(b.reference_auc),
                f(b.delta),
                String::new(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}
