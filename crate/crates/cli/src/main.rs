//! `psc`: data generation, ingestion, retrieval, training, evaluation and
//! backtesting for historical-context news forecasting experiments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use psc_core::config::ExperimentConfig;
use psc_core::corpus::synth::generate;
use psc_core::corpus::{io, Horizon, LabeledSample};
use psc_core::evaluation::{evaluate, EvalOptions};
use psc_core::model::{AlignmentKind, ContextModel, ModelKind};
use psc_core::pipeline::{self, Prepared, RawData};
use psc_core::portfolio::{backtest_momentum, backtest_predictions, Month};
use psc_core::retrieval::{Retriever, RetrievalResult};
use psc_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "psc", version, about = "Historical-context news forecasting experiments")]
struct Cli {
    /// Experiment configuration (TOML); flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed: data generation, initialization, batch order, bootstrap.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Data directory written by `gen-data` or `ingest`; without it the
    /// configured files (or a synthetic corpus) are used.
    #[arg(long, alias = "corpus")]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    horizon: Option<u32>,
    #[arg(long)]
    n_contexts: Option<usize>,
    #[arg(long)]
    lora_rank: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    micro_batch: Option<usize>,
    /// Gradient accumulation steps; the effective batch is micro-batch × steps.
    #[arg(long)]
    accumulation: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Buckets {
    Staleness,
    None,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus, prices, calendar and universe.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate and filter an article/price corpus into a data directory.
    Ingest {
        #[arg(long)]
        articles: PathBuf,
        #[arg(long)]
        prices: PathBuf,
        #[arg(long)]
        calendar: Option<PathBuf>,
        #[arg(long)]
        universe: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve context articles for every labeled main article.
    Retrieve {
        #[command(flatten)]
        data: DataArgs,
        /// recent, finsim or timefinsim.
        #[arg(long, default_value = "recent")]
        kind: String,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        half_life: Option<f64>,
        /// Output file (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Context-aligned language-model pretraining of a prefix-summary model.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Direction classification finetuning; writes a checkpoint and test predictions.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = parse_kind)]
        model: Option<ModelKind>,
        #[command(flatten)]
        train: TrainArgs,
        /// Start from a pretrained checkpoint instead of a fresh model.
        #[arg(long, alias = "init")]
        checkpoint: Option<PathBuf>,
        /// Skip the pretraining stage of a fresh prefix-summary model.
        #[arg(long)]
        no_pretrain: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score samples with a trained checkpoint.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_contexts: Option<usize>,
        /// Horizon in days; every configured horizon when absent.
        #[arg(long)]
        horizon: Option<u32>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Output file (CSV).
        #[arg(long)]
        out: PathBuf,
    },
    /// AUC per horizon, paired significance against a reference, staleness buckets.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "staleness")]
        buckets: Buckets,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one checkpoint at several context counts.
    SweepContexts {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 1, 2, 5, 10])]
        n: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train prefix-summary models that differ only in the alignment module.
    AblateAlignment {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = ["linear".to_string(), "mlp".into(), "cma".into()])]
        kinds: Vec<String>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monthly long-short quintile backtest of 30-day scores, with a momentum baseline.
    Backtest {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        prices: PathBuf,
        #[arg(long)]
        universe: PathBuf,
        #[arg(long)]
        cost_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::Ingest {
            articles,
            prices,
            calendar,
            universe,
            out,
        } => {
            cfg.data.articles = Some(articles);
            cfg.data.prices = Some(prices);
            cfg.data.calendar = calendar;
            cfg.data.universe = universe;
            ingest(&cfg, &out)
        }
        Command::Retrieve {
            data,
            kind,
            n,
            half_life,
            out,
        } => {
            apply_data(&mut cfg, &data)?;
            cfg.retrieval.kind = kind;
            if let Some(h) = half_life {
                cfg.retrieval.half_life_days = h;
            }
            cfg.validate()?;
            retrieve(&cfg, n, &out)
        }
        Command::Pretrain { data, train, out } => {
            apply_data(&mut cfg, &data)?;
            apply_train(&mut cfg, &train, true)?;
            cfg.model.kind = ModelKind::Psc;
            pretrain(&cfg, &out)
        }
        Command::Finetune {
            data,
            model,
            train,
            checkpoint,
            no_pretrain,
            out,
        } => {
            apply_data(&mut cfg, &data)?;
            apply_train(&mut cfg, &train, false)?;
            if let Some(k) = model {
                cfg.model.kind = k;
            }
            finetune(&cfg, checkpoint.as_deref(), no_pretrain, &out)
        }
        Command::Predict {
            data,
            checkpoint,
            n_contexts,
            horizon,
            split,
            out,
        } => {
            apply_data(&mut cfg, &data)?;
            if let Some(n) = n_contexts {
                cfg.model.n_contexts = n;
                cfg.max_history = cfg.max_history.max(n);
            }
            if let Some(h) = horizon {
                cfg.horizon = h;
                cfg.horizons = vec![h];
            }
            cfg.validate()?;
            predict(&cfg, &checkpoint, n_contexts, split, &out)
        }
        Command::Evaluate {
            pred,
            reference,
            buckets,
            out,
        } => {
            cfg.eval.staleness_buckets = buckets == Buckets::Staleness;
            evaluate_cmd(&cfg, &pred, reference.as_deref(), &out)
        }
        Command::SweepContexts {
            data,
            checkpoint,
            n,
            out,
        } => {
            apply_data(&mut cfg, &data)?;
            let most = n.iter().copied().max().unwrap_or(0);
            cfg.max_history = cfg.max_history.max(most);
            cfg.validate()?;
            sweep(&cfg, &checkpoint, &n, &out)
        }
        Command::AblateAlignment {
            data,
            kinds,
            train,
            out,
        } => {
            apply_data(&mut cfg, &data)?;
            apply_train(&mut cfg, &train, false)?;
            ablate(&cfg, &kinds, &out)
        }
        Command::Backtest {
            pred,
            prices,
            universe,
            cost_rate,
            out,
        } => {
            if let Some(c) = cost_rate {
                cfg.portfolio.cost_rate = c;
            }
            cfg.data.prices = Some(prices);
            cfg.data.universe = Some(universe);
            backtest(&cfg, &pred, &out)
        }
    }
}

fn apply_data(cfg: &mut ExperimentConfig, data: &DataArgs) -> Result<()> {
    if let Some(dir) = &data.data {
        pipeline::use_data_dir(cfg, dir)?;
    }
    Ok(())
}

fn apply_train(cfg: &mut ExperimentConfig, a: &TrainArgs, pretraining: bool) -> Result<()> {
    if let Some(h) = a.horizon {
        cfg.horizon = h;
    }
    if let Some(n) = a.n_contexts {
        cfg.model.n_contexts = n;
        cfg.max_history = cfg.max_history.max(n);
    }
    if let Some(r) = a.lora_rank {
        cfg.model.lora_rank = r;
    }
    let t = if pretraining { &mut cfg.pretrain } else { &mut cfg.finetune };
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(lr) = a.lr {
        t.lr = lr;
    }
    if let Some(m) = a.micro_batch {
        t.micro_batch = m;
    }
    if let Some(k) = a.accumulation {
        t.accumulation = k;
    }
    cfg.validate()
}

/// Output directory of a file-valued `--out`.
fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_prepared(cfg: &ExperimentConfig) -> Result<(RawData, Prepared)> {
    let raw = pipeline::load_data(cfg)?;
    let mut prep = pipeline::prepare(cfg, &raw)?;
    let kind = cfg.retrieval.retriever()?;
    pipeline::apply_retrieval(&mut prep, kind, cfg.retrieval.embed_dim, cfg.max_history)?;
    Ok((raw, prep))
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let synth = generate(&cfg.data.synthetic, cfg.seed)?;
    let raw = RawData {
        articles: synth.articles,
        prices: synth.prices.into_iter().map(|p| (p.company_id.clone(), p)).collect(),
        calendar: synth.calendar,
        universe: synth.universe,
    };
    pipeline::write_data_dir(out, &raw)?;
    io::write_jsonl(&out.join("truth.jsonl"), &synth.truth)?;
    let mut snapshot = cfg.clone();
    pipeline::use_data_dir(&mut snapshot, out)?;
    snapshot.write_snapshot(out)?;
    log::info!(
        "generated {} articles for {} companies in {}",
        raw.articles.len(),
        raw.prices.len(),
        out.display()
    );
    Ok(())
}

fn ingest(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let raw = pipeline::load_data(cfg)?;
    let prep = pipeline::prepare(cfg, &raw)?;
    let kept = RawData {
        articles: prep.corpus.articles().to_vec(),
        ..raw
    };
    pipeline::write_data_dir(out, &kept)?;
    io::write_jsonl(&out.join("rejections.jsonl"), &prep.rejections)?;
    io::write_jsonl(&out.join("drops.jsonl"), &prep.drops)?;
    for (name, part) in [
        ("train", &prep.splits.train),
        ("validation", &prep.splits.validation),
        ("test", &prep.splits.test),
    ] {
        io::write_jsonl(&out.join(format!("samples_{name}.jsonl")), part)?;
    }
    write_json(&out.join("split.json"), &prep.split)?;
    let mut snapshot = cfg.clone();
    pipeline::use_data_dir(&mut snapshot, out)?;
    snapshot.write_snapshot(out)?;
    Ok(())
}

fn all_samples(prep: &Prepared) -> impl Iterator<Item = &LabeledSample> {
    prep.splits
        .train
        .iter()
        .chain(&prep.splits.validation)
        .chain(&prep.splits.test)
}

fn retrieve(cfg: &ExperimentConfig, n: usize, out: &Path) -> Result<()> {
    let kind = cfg.retrieval.retriever()?;
    let raw = pipeline::load_data(cfg)?;
    let prep = pipeline::prepare(cfg, &raw)?;
    let embedder = pipeline::fit_embedder(&prep, cfg.retrieval.embed_dim)?;
    let retriever = Retriever::new(&prep.corpus, &embedder)?;
    let mains: BTreeSet<&str> = all_samples(&prep).map(|s| s.main_id.as_str()).collect();
    let records: Vec<RetrievalResult> = mains
        .into_iter()
        .map(|id| {
            let idx = prep.corpus.index_of(id).expect("sample mains are in the corpus");
            let available = retriever.candidates(idx).len();
            retriever.retrieve(idx, n.min(available), kind)
        })
        .collect::<Result<_>>()?;
    let dir = parent_dir(out);
    fs::create_dir_all(&dir)?;
    io::write_jsonl(out, &records)?;
    cfg.write_snapshot(&dir)?;
    log::info!("{} retrieval records ({kind}) written to {}", records.len(), out.display());
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (_, prep) = load_prepared(cfg)?;
    let vocab = pipeline::build_vocab(&prep, cfg.vocab_size);
    let enc = pipeline::encode_corpus(&vocab, &prep.corpus);
    let mut model = pipeline::new_model(cfg, vocab, ModelKind::Psc, cfg.seed)?;
    let report = pipeline::pretrain(cfg, &prep, &enc, &mut model, cfg.seed)?;
    fs::create_dir_all(out)?;
    model.save(&out.join("pretrained.ckpt"))?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    cfg.write_snapshot(out)?;
    Ok(())
}

fn finetune(cfg: &ExperimentConfig, init: Option<&Path>, no_pretrain: bool, out: &Path) -> Result<()> {
    let (_, prep) = load_prepared(cfg)?;
    let (mut model, calm) = match init {
        Some(p) => {
            let m = ContextModel::load(p)?;
            if m.kind() != cfg.model.kind {
                return Err(Error::config(
                    "model",
                    format!("checkpoint holds a {} model, not {}", m.kind(), cfg.model.kind),
                ));
            }
            (m, None)
        }
        None => {
            let vocab = pipeline::build_vocab(&prep, cfg.vocab_size);
            let mut m = pipeline::new_model(cfg, vocab, cfg.model.kind, cfg.seed)?;
            let calm = if cfg.model.kind == ModelKind::Psc && !no_pretrain {
                let enc = pipeline::encode_corpus(&m.vocab, &prep.corpus);
                Some(pipeline::pretrain(cfg, &prep, &enc, &mut m, cfg.seed)?)
            } else {
                None
            };
            (m, calm)
        }
    };
    let enc = pipeline::encode_corpus(&model.vocab, &prep.corpus);
    let report = pipeline::finetune_model(cfg, &prep, &enc, &mut model, cfg.seed)?;
    fs::create_dir_all(out)?;
    model.save(&out.join("model.ckpt"))?;
    let summary = pipeline::TrainSummary {
        kind: cfg.model.kind.to_string(),
        seed: cfg.seed,
        calm,
        finetune: Some(report),
    };
    write_json(&out.join("train_report.json"), &summary)?;

    let test = pipeline::of_horizon(&prep.splits.test, Horizon::from_days(cfg.horizon)?);
    let staleness = pipeline::staleness_by_article(&prep, &test, cfg.retrieval.embed_dim)?;
    let preds = pipeline::predict_samples(&model, &test, &enc, cfg.model.n_contexts, Some(&staleness))?;
    pipeline::write_predictions(&out.join("predictions.csv"), &preds)?;
    log::info!("{} test predictions written", preds.len());
    cfg.write_snapshot(out)?;
    Ok(())
}

fn predict(cfg: &ExperimentConfig, ckpt: &Path, n_contexts: Option<usize>, split: SplitName, out: &Path) -> Result<()> {
    let model = ContextModel::load(ckpt)?;
    let n = n_contexts.unwrap_or(model.cfg.n_contexts);
    let mut cfg = cfg.clone();
    cfg.max_history = cfg.max_history.max(n);
    let (_, prep) = load_prepared(&cfg)?;
    let part = match split {
        SplitName::Train => &prep.splits.train,
        SplitName::Validation => &prep.splits.validation,
        SplitName::Test => &prep.splits.test,
    };
    let horizons = cfg.horizons()?;
    let samples: Vec<LabeledSample> = part.iter().filter(|s| horizons.contains(&s.horizon)).cloned().collect();
    let need = model.cfg.effective_contexts(n);
    let (usable, short): (Vec<LabeledSample>, Vec<LabeledSample>) =
        samples.into_iter().partition(|s| s.contexts.len() >= need);
    if !short.is_empty() {
        log::warn!("{} samples have fewer than {need} contexts and are not scored", short.len());
    }
    let enc = pipeline::encode_corpus(&model.vocab, &prep.corpus);
    let staleness = pipeline::staleness_by_article(&prep, &usable, cfg.retrieval.embed_dim)?;
    let preds = pipeline::predict_samples(&model, &usable, &enc, n, Some(&staleness))?;
    let dir = parent_dir(out);
    fs::create_dir_all(&dir)?;
    pipeline::write_predictions(out, &preds)?;
    cfg.write_snapshot(&dir)?;
    log::info!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}

fn evaluate_cmd(cfg: &ExperimentConfig, pred: &Path, reference: Option<&Path>, out: &Path) -> Result<()> {
    let preds = pipeline::read_predictions(pred)?;
    let reference = reference.map(pipeline::read_predictions).transpose()?;
    let opts = EvalOptions {
        bootstrap_replicates: cfg.eval.bootstrap_replicates,
        seed: cfg.seed,
        staleness_buckets: cfg.eval.staleness_buckets,
    };
    let report = evaluate(&preds, reference.as_deref(), &opts)?;
    fs::create_dir_all(out)?;
    let text = report.to_text();
    eprint!("{text}");
    write_text(&out.join("report.txt"), &text)?;
    write_text(&out.join("report.csv"), &report.to_csv()?)?;
    cfg.write_snapshot(out)?;
    Ok(())
}

fn sweep(cfg: &ExperimentConfig, ckpt: &Path, ns: &[usize], out: &Path) -> Result<()> {
    let model = ContextModel::load(ckpt)?;
    let (_, prep) = load_prepared(cfg)?;
    let enc = pipeline::encode_corpus(&model.vocab, &prep.corpus);
    let rows = pipeline::context_sweep(&model, &prep.splits.test, &enc, ns)?;
    fs::create_dir_all(out)?;
    let text = pipeline::sweep_to_text(&rows);
    eprint!("{text}");
    write_text(&out.join("sweep.txt"), &text)?;
    write_json(&out.join("sweep.json"), &rows)?;
    cfg.write_snapshot(out)?;
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, kinds: &[String], out: &Path) -> Result<()> {
    let (_, prep) = load_prepared(cfg)?;
    let vocab = pipeline::build_vocab(&prep, cfg.vocab_size);
    let enc = pipeline::encode_corpus(&vocab, &prep.corpus);
    let test = pipeline::of_horizon(&prep.splits.test, Horizon::from_days(cfg.horizon)?);
    let heads = match cfg.model.alignment {
        AlignmentKind::Cma { heads, .. } => heads,
        _ => 2,
    };
    let n = cfg.model.n_contexts;
    let mut table = format!("{:<14} {:>8} {:>8}\n", "alignment", "LM Loss", format!("{}D AUC", cfg.horizon));
    for name in kinds {
        let mut trial = cfg.clone();
        trial.model.kind = ModelKind::Psc;
        trial.model.alignment = AlignmentKind::parse(name, heads, 2 * cfg.model.decoder.d)?;
        trial.validate()?;
        let dir = out.join(name);
        let (model, summary) = pipeline::train(&trial, &prep, &enc, vocab.clone(), ModelKind::Psc, trial.seed)?;
        let row = pipeline::context_sweep(&model, &test, &enc, &[n])?.remove(0);
        fs::create_dir_all(&dir)?;
        model.save(&dir.join("model.ckpt"))?;
        write_json(&dir.join("train_report.json"), &summary)?;
        trial.write_snapshot(&dir)?;
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
        let auc = row.auc.get(&cfg.horizon).copied().flatten();
        let _ = writeln!(table, "{name:<14} {:>8} {:>8}", fmt(row.lm_loss), auc.map_or("-".into(), |a| format!("{a:.2}")));
    }
    eprint!("{table}");
    write_text(&out.join("ablation.txt"), &table)?;
    cfg.write_snapshot(out)?;
    Ok(())
}

fn backtest(cfg: &ExperimentConfig, pred: &Path, out: &Path) -> Result<()> {
    let preds = pipeline::read_predictions(pred)?;
    let prices_path = cfg.data.prices.as_deref().expect("set from flags");
    let universe_path = cfg.data.universe.as_deref().expect("set from flags");
    let prices = io::read_prices(prices_path)?;
    let universe = io::read_universe(universe_path)?;
    let filter = &cfg.portfolio.universe;
    let rate = cfg.portfolio.cost_rate;
    let model = backtest_predictions(&preds, &prices, &universe, filter, rate)?;
    let months: BTreeSet<Month> = preds.iter().map(|p| Month::of(p.trading_date)).collect();
    let months: Vec<Month> = months.into_iter().collect();
    let momentum = backtest_momentum(&months, &prices, &universe, filter, rate)
        .map_err(|e| log::warn!("momentum baseline unavailable: {e}"))
        .ok();

    let mut text = model.to_text("model");
    if let Some(m) = &momentum {
        let _ = writeln!(text, "{}", m.summary_line("momentum"));
    }
    fs::create_dir_all(out)?;
    eprint!("{text}");
    write_text(&out.join("backtest.txt"), &text)?;
    io::write_csv(&out.join("backtest_months.csv"), &model.months)?;
    write_json(&out.join("backtest.json"), &(&model, &momentum))?;
    cfg.write_snapshot(out)?;
    Ok(())
}
