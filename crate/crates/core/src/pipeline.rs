//! End-to-end experiment steps shared by the command-line tool and the tests:
//! load or generate data, filter and label it, train, predict and sweep.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::synth::generate;
use crate::corpus::{
    balance_classes, build_samples, filter_articles, io, split_samples, Article, Corpus, Horizon, LabeledSample,
    PriceSeries, Rejection, SampleDrop, SplitSpec, Splits, TradingCalendar,
};
use crate::error::{Error, Result};
use crate::evaluation::{auc, Prediction};
use crate::model::{ContextModel, EncodedArticle, ModelInput, ModelKind};
use crate::portfolio::UniverseRow;
use crate::retrieval::{HashedTfIdf, Retriever, RetrieverKind, RETRIEVAL_WINDOW_DAYS};
use crate::text::Vocab;
use crate::training::{finetune, pretrain_calm, CalmReport, Example, FinetuneReport};

pub const ARTICLES_FILE: &str = "articles.jsonl";
pub const PRICES_FILE: &str = "prices.csv";
pub const CALENDAR_FILE: &str = "calendar.txt";
pub const UNIVERSE_FILE: &str = "universe.csv";

#[derive(Debug, Clone)]
pub struct RawData {
    pub articles: Vec<Article>,
    pub prices: BTreeMap<String, PriceSeries>,
    pub calendar: TradingCalendar,
    pub universe: Vec<UniverseRow>,
}

/// Reads the configured files, or generates the synthetic corpus from `seed`
/// when no articles file is given.
pub fn load_data(cfg: &ExperimentConfig) -> Result<RawData> {
    let d = &cfg.data;
    let Some(articles_path) = &d.articles else {
        let s = generate(&d.synthetic, cfg.seed)?;
        return Ok(RawData {
            articles: s.articles,
            prices: s.prices.into_iter().map(|p| (p.company_id.clone(), p)).collect(),
            calendar: s.calendar,
            universe: s.universe,
        });
    };
    let prices_path = d
        .prices
        .as_ref()
        .ok_or_else(|| Error::config("data.prices", "required with data.articles"))?;
    let articles = io::read_articles(articles_path)?;
    let prices = io::read_prices(prices_path)?;
    let calendar = match &d.calendar {
        Some(p) => io::read_calendar(p)?,
        None => weekday_calendar(&prices)?,
    };
    let universe = match &d.universe {
        Some(p) => io::read_universe(p)?,
        None => Vec::new(),
    };
    Ok(RawData {
        articles,
        prices,
        calendar,
        universe,
    })
}

/// Writes `raw` in the layout read back by [`use_data_dir`].
pub fn write_data_dir(dir: &Path, raw: &RawData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_articles(&dir.join(ARTICLES_FILE), &raw.articles)?;
    io::write_prices(&dir.join(PRICES_FILE), raw.prices.values())?;
    io::write_calendar(&dir.join(CALENDAR_FILE), &raw.calendar)?;
    if !raw.universe.is_empty() {
        io::write_csv(&dir.join(UNIVERSE_FILE), &raw.universe)?;
    }
    Ok(())
}

/// Points the data section of `cfg` at the files of a data directory.
pub fn use_data_dir(cfg: &mut ExperimentConfig, dir: &Path) -> Result<()> {
    let articles = dir.join(ARTICLES_FILE);
    if !articles.is_file() {
        return Err(Error::Data(format!("{} not found", articles.display())));
    }
    let optional = |name: &str| Some(dir.join(name)).filter(|p| p.is_file());
    cfg.data.articles = Some(articles);
    cfg.data.prices = Some(dir.join(PRICES_FILE));
    cfg.data.calendar = optional(CALENDAR_FILE);
    cfg.data.universe = optional(UNIVERSE_FILE);
    Ok(())
}

/// Weekdays spanning every price date.
pub fn weekday_calendar(prices: &BTreeMap<String, PriceSeries>) -> Result<TradingCalendar> {
    let dates = prices.values().flat_map(|s| s.points().iter().map(|p| p.0));
    let (first, last) = dates.fold((None, None), |(lo, hi), d| {
        (Some(lo.map_or(d, |x: chrono::NaiveDate| x.min(d))), Some(hi.map_or(d, |x: chrono::NaiveDate| x.max(d))))
    });
    match (first, last) {
        (Some(a), Some(b)) => TradingCalendar::weekdays(a, b),
        _ => Err(Error::Data("price file is empty".into())),
    }
}

/// Filtered corpus and labeled, split samples.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Corpus,
    pub rejections: Vec<Rejection>,
    pub drops: Vec<SampleDrop>,
    pub split: SplitSpec,
    pub splits: Splits,
}

pub fn split_spec(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<SplitSpec> {
    let first = corpus
        .articles()
        .first()
        .ok_or_else(|| Error::Data("no articles survive filtering".into()))?
        .published_at
        .date();
    let last = corpus.articles().last().expect("non-empty").published_at.date();
    let s = &cfg.split;
    match (s.train_end, s.validation_end) {
        (Some(t), Some(v)) => {
            let next = |d: chrono::NaiveDate| d.succ_opt().expect("date in range");
            SplitSpec::new(
                crate::corpus::DateRange { start: first, end: t },
                crate::corpus::DateRange { start: next(t), end: v },
                crate::corpus::DateRange {
                    start: next(v),
                    end: last.max(next(next(v))),
                },
            )
        }
        (None, None) => SplitSpec::by_fractions(first, last, s.train_fraction, s.validation_fraction),
        _ => Err(Error::config("split", "set both train_end and validation_end, or neither")),
    }
}

/// Filters, labels, splits, and balances each horizon of the training split.
pub fn prepare(cfg: &ExperimentConfig, raw: &RawData) -> Result<Prepared> {
    let corpus = Corpus::new(raw.articles.clone())?;
    let outcome = filter_articles(&corpus, &cfg.filter)?;
    log::info!(
        "filter: kept {} of {} articles, {} eligible main articles",
        outcome.corpus.len(),
        corpus.len(),
        outcome.eligible_mains.len()
    );
    let horizons = cfg.horizons()?;
    let (samples, mut drops) = build_samples(
        &outcome.corpus,
        &outcome.eligible_mains,
        &raw.calendar,
        &raw.prices,
        &horizons,
        cfg.max_history,
        cfg.filter.history_window_days,
    );
    let split = split_spec(cfg, &outcome.corpus)?;
    let mut splits = split_samples(samples, &split);
    drops.append(&mut splits.dropped);
    let mut train = Vec::new();
    for h in horizons {
        let part: Vec<LabeledSample> = splits.train.iter().filter(|s| s.horizon == h).cloned().collect();
        if part.is_empty() {
            continue;
        }
        train.extend(balance_classes(part, cfg.seed)?);
    }
    splits.train = train;
    log::info!(
        "samples: {} train (balanced), {} validation, {} test, {} dropped",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        drops.len()
    );
    Ok(Prepared {
        corpus: outcome.corpus,
        rejections: outcome.rejections,
        drops,
        split,
        splits,
    })
}

/// Vocabulary from the articles published up to the end of the training range.
pub fn build_vocab(prepared: &Prepared, size: usize) -> Vocab {
    let end = prepared.split.train.end;
    Vocab::build(
        prepared
            .corpus
            .articles()
            .iter()
            .filter(|a| a.published_at.date() <= end)
            .map(|a| a.text.as_str()),
        size,
    )
}

/// TF-IDF embedder with document frequencies from the training period.
pub fn fit_embedder(prepared: &Prepared, dim: usize) -> Result<HashedTfIdf> {
    let end = prepared.split.train.end;
    HashedTfIdf::fit(
        dim,
        prepared
            .corpus
            .articles()
            .iter()
            .filter(|a| a.published_at.date() <= end)
            .map(|a| a.text.as_str()),
    )
}

/// Replaces every sample's contexts with the top `max_history` articles under `kind`.
pub fn apply_retrieval(
    prepared: &mut Prepared,
    kind: RetrieverKind,
    embed_dim: usize,
    max_history: usize,
) -> Result<()> {
    if kind == RetrieverKind::MostRecent {
        return Ok(());
    }
    let embedder = fit_embedder(prepared, embed_dim)?;
    let retriever = Retriever::new(&prepared.corpus, &embedder)?;
    let mains: BTreeSet<&str> = [&prepared.splits.train, &prepared.splits.validation, &prepared.splits.test]
        .into_iter()
        .flatten()
        .map(|s| s.main_id.as_str())
        .collect();
    let retrieved: HashMap<String, Vec<String>> = mains
        .par_iter()
        .map(|id| {
            let idx = prepared.corpus.index_of(id).expect("main article in corpus");
            let available = retriever.candidates(idx).len();
            let r = retriever.retrieve(idx, available.min(max_history), kind)?;
            Ok((id.to_string(), r.contexts))
        })
        .collect::<Result<_>>()?;
    for s in prepared
        .splits
        .train
        .iter_mut()
        .chain(&mut prepared.splits.validation)
        .chain(&mut prepared.splits.test)
    {
        s.contexts = retrieved[&s.main_id].clone();
    }
    Ok(())
}

/// Staleness of each main article in `samples`, keyed by article id. Articles
/// with fewer than five predecessors are left out.
pub fn staleness_by_article(prepared: &Prepared, samples: &[LabeledSample], embed_dim: usize) -> Result<HashMap<String, f64>> {
    let embedder = fit_embedder(prepared, embed_dim)?;
    let retriever = Retriever::new(&prepared.corpus, &embedder)?;
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.main_id.as_str()).collect();
    Ok(ids
        .into_iter()
        .filter_map(|id| {
            let idx = prepared.corpus.index_of(id)?;
            retriever.staleness(idx).ok().map(|v| (id.to_string(), v))
        })
        .collect())
}

/// Token ids of every corpus article.
pub fn encode_corpus(vocab: &Vocab, corpus: &Corpus) -> HashMap<String, EncodedArticle> {
    corpus
        .articles()
        .par_iter()
        .map(|a| (a.id.clone(), EncodedArticle::new(vocab, a)))
        .collect()
}

pub fn model_input(sample: &LabeledSample, encoded: &HashMap<String, EncodedArticle>) -> Result<ModelInput> {
    let get = |id: &str| {
        encoded
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("article `{id}` missing from corpus")))
    };
    Ok(ModelInput {
        main: get(&sample.main_id)?,
        contexts: sample.contexts.iter().map(|c| get(c)).collect::<Result<_>>()?,
    })
}

pub fn examples(samples: &[LabeledSample], encoded: &HashMap<String, EncodedArticle>) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            Ok(Example {
                id: s.id.clone(),
                input: model_input(s, encoded)?,
                target: s.label.target(),
            })
        })
        .collect()
}

pub fn of_horizon(samples: &[LabeledSample], h: Horizon) -> Vec<LabeledSample> {
    samples.iter().filter(|s| s.horizon == h).cloned().collect()
}

/// One input per distinct main article, in sample order.
pub fn unique_mains(samples: &[LabeledSample], encoded: &HashMap<String, EncodedArticle>) -> Result<Vec<ModelInput>> {
    let mut seen = BTreeSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.main_id.clone()))
        .map(|s| model_input(s, encoded))
        .collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainSummary {
    pub kind: String,
    pub seed: u64,
    pub calm: Option<CalmReport>,
    pub finetune: Option<FinetuneReport>,
}

/// A freshly initialized model of `kind` under the experiment's model config.
pub fn new_model(cfg: &ExperimentConfig, vocab: Vocab, kind: ModelKind, seed: u64) -> Result<ContextModel> {
    let mut mc = cfg.model.clone();
    mc.kind = kind;
    ContextModel::new(mc, vocab, seed)
}

/// Context-aligned pretraining on the training split's main articles.
pub fn pretrain(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    encoded: &HashMap<String, EncodedArticle>,
    model: &mut ContextModel,
    seed: u64,
) -> Result<CalmReport> {
    let inputs = unique_mains(&prepared.splits.train, encoded)?;
    pretrain_calm(model, &inputs, cfg.model.n_contexts, &cfg.pretrain, seed)
}

/// Classification finetuning at the configured horizon.
pub fn finetune_model(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    encoded: &HashMap<String, EncodedArticle>,
    model: &mut ContextModel,
    seed: u64,
) -> Result<FinetuneReport> {
    let h = Horizon::from_days(cfg.horizon)?;
    let train = examples(&of_horizon(&prepared.splits.train, h), encoded)?;
    let validation = examples(&of_horizon(&prepared.splits.validation, h), encoded)?;
    finetune(model, &train, &validation, cfg.model.n_contexts, &cfg.finetune, seed)
}

/// Pretraining (PSC only) followed by finetuning.
pub fn train(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    encoded: &HashMap<String, EncodedArticle>,
    vocab: Vocab,
    kind: ModelKind,
    seed: u64,
) -> Result<(ContextModel, TrainSummary)> {
    let mut model = new_model(cfg, vocab, kind, seed)?;
    let calm = if kind == ModelKind::Psc {
        Some(pretrain(cfg, prepared, encoded, &mut model, seed)?)
    } else {
        None
    };
    let ft = finetune_model(cfg, prepared, encoded, &mut model, seed)?;
    Ok((
        model,
        TrainSummary {
            kind: kind.to_string(),
            seed,
            calm,
            finetune: Some(ft),
        },
    ))
}

/// Predictions for `samples` using the last `n` contexts of each.
pub fn predict_samples(
    model: &ContextModel,
    samples: &[LabeledSample],
    encoded: &HashMap<String, EncodedArticle>,
    n: usize,
    staleness: Option<&HashMap<String, f64>>,
) -> Result<Vec<Prediction>> {
    let inputs: Vec<ModelInput> = samples.iter().map(|s| model_input(s, encoded)).collect::<Result<_>>()?;
    let probs = model.predict_batch(&inputs, n)?;
    Ok(samples
        .iter()
        .zip(probs)
        .map(|(s, p)| Prediction {
            sample_id: s.id.clone(),
            company_id: s.company_id.clone(),
            trading_date: s.trading_date,
            horizon: s.horizon.days(),
            probability: p,
            label: s.label.sign(),
            staleness: staleness.and_then(|m| m.get(&s.main_id).copied()),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    /// Mean next-token loss over distinct main articles (PSC and single only).
    pub lm_loss: Option<f64>,
    /// Horizon (days) → AUC in percent.
    pub auc: BTreeMap<u32, Option<f64>>,
    pub evaluated: usize,
    /// Samples without `n` stored contexts.
    pub skipped: usize,
}

/// Evaluates one trained model at several context counts without retraining.
pub fn context_sweep(
    model: &ContextModel,
    samples: &[LabeledSample],
    encoded: &HashMap<String, EncodedArticle>,
    ns: &[usize],
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let need = model.cfg.effective_contexts(n);
        let (usable, skipped): (Vec<&LabeledSample>, Vec<&LabeledSample>) =
            samples.iter().partition(|s| s.contexts.len() >= need);
        if !skipped.is_empty() {
            log::info!("N={n}: {} samples lack history and are skipped", skipped.len());
        }
        let usable: Vec<LabeledSample> = usable.into_iter().cloned().collect();
        let lm_loss = if matches!(model.kind(), ModelKind::Psc | ModelKind::Single) && !usable.is_empty() {
            let mains = unique_mains(&usable, encoded)?;
            let losses: Vec<f64> = mains
                .par_iter()
                .map(|m| model.lm_loss_value(m, n))
                .collect::<Result<_>>()?;
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        } else {
            None
        };
        let preds = predict_samples(model, &usable, encoded, n, None)?;
        let mut by_h: BTreeMap<u32, Option<f64>> = BTreeMap::new();
        let horizons: BTreeSet<u32> = preds.iter().map(|p| p.horizon).collect();
        for h in horizons {
            let (scores, labels): (Vec<f64>, Vec<bool>) = preds
                .iter()
                .filter(|p| p.horizon == h)
                .map(|p| (p.probability, p.label > 0))
                .unzip();
            by_h.insert(h, auc(&scores, &labels).ok().map(|a| 100.0 * a));
        }
        rows.push(SweepRow {
            n,
            lm_loss,
            auc: by_h,
            evaluated: usable.len(),
            skipped: skipped.len(),
        });
    }
    Ok(rows)
}

pub fn sweep_to_text(rows: &[SweepRow]) -> String {
    use std::fmt::Write as _;
    let horizons: BTreeSet<u32> = rows.iter().flat_map(|r| r.auc.keys().copied()).collect();
    let mut s = format!("{:>10} {:>8}", "# Contexts", "LM Loss");
    for h in &horizons {
        let _ = write!(s, " {:>8}", format!("{h}D"));
    }
    let _ = writeln!(s, " {:>9} {:>8}", "evaluated", "skipped");
    for r in rows {
        let loss = r.lm_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        let _ = write!(s, "{:>10} {:>8}", r.n, loss);
        for h in &horizons {
            let a = r.auc.get(h).copied().flatten().map_or("-".to_string(), |a| format!("{a:.2}"));
            let _ = write!(s, " {a:>8}");
        }
        let _ = writeln!(s, " {:>9} {:>8}", r.evaluated, r.skipped);
    }
    s
}

/// Writes predictions as CSV, one row per sample.
pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    io::write_csv(path, preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    io::read_csv(path)
}

/// Retrieval window used when attaching contexts.
pub const HISTORY_WINDOW_DAYS: i64 = RETRIEVAL_WINDOW_DAYS;
