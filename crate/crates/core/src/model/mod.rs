//! The prefix-summary-context model and its baselines. All kinds share one
//! decoder, LoRA adapters and a mean-pooled classifier head, so they consume
//! the same inputs and differ only in how history reaches the decoder.

pub mod alignment;
pub mod baselines;
pub mod decoder;
pub mod nn;
pub mod summarizer;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDateTime;
use psc_autodiff::{sigmoid, Checkpoint, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use alignment::{Aligner, AlignmentKind, Projections};
pub use baselines::{build_concat_input, first_paragraph};
pub use decoder::{build_positions, prefix_mask, Decoder, DecoderConfig};
pub use nn::{causal_mask, BlockDims, Linear, Stack};
pub use summarizer::{
    chunk_bounds, interleave_summary_tokens, time_bucket, ContextTokens, Placement, Summarizer, SummarizerConfig,
    SummaryContext, TIME_BUCKETS,
};

use crate::corpus::Article;
use crate::error::{Error, Result};
use crate::text::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Psc,
    Single,
    ConcatFull,
    ConcatPrefix,
    Hierarchical,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Psc,
        ModelKind::Single,
        ModelKind::ConcatFull,
        ModelKind::ConcatPrefix,
        ModelKind::Hierarchical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Psc => "psc",
            ModelKind::Single => "single",
            ModelKind::ConcatFull => "concat-full",
            ModelKind::ConcatPrefix => "concat-prefix",
            ModelKind::Hierarchical => "hierarchical",
        }
    }

    pub fn uses_contexts(self) -> bool {
        self != ModelKind::Single
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("model", format!("unknown model `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchicalConfig {
    pub layers: usize,
    pub heads: usize,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub summarizer: SummarizerConfig,
    pub decoder: DecoderConfig,
    pub alignment: AlignmentKind,
    pub hierarchical: HierarchicalConfig,
    pub lora_rank: usize,
    /// Context articles used in training.
    pub n_contexts: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Psc,
            summarizer: SummarizerConfig::default(),
            decoder: DecoderConfig::default(),
            alignment: AlignmentKind::default(),
            hierarchical: HierarchicalConfig::default(),
            lora_rank: 8,
            n_contexts: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.kind == ModelKind::Psc {
            self.summarizer.validate()?;
        }
        if self.lora_rank == 0 {
            return Err(Error::config("lora_rank", "must be positive"));
        }
        if self.kind == ModelKind::Hierarchical {
            let h = self.hierarchical.heads;
            if h == 0 || self.decoder.d % h != 0 || (self.decoder.d / h) % 2 != 0 {
                return Err(Error::config(
                    "hierarchical.heads",
                    "must divide decoder.d into even head widths",
                ));
            }
        }
        Ok(())
    }

    /// Contexts the model actually reads for a requested count.
    pub fn effective_contexts(&self, n: usize) -> usize {
        if self.kind.uses_contexts() {
            n
        } else {
            0
        }
    }
}

/// Token ids of an article, of its first paragraph, and its timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedArticle {
    pub tokens: Vec<usize>,
    pub lead: Vec<usize>,
    pub published_at: NaiveDateTime,
}

impl EncodedArticle {
    pub fn new(vocab: &Vocab, article: &Article) -> Self {
        Self {
            tokens: vocab.encode(&article.text),
            lead: vocab.encode(first_paragraph(&article.text)),
            published_at: article.published_at,
        }
    }
}

/// A main article and its available history, oldest first. Models read the
/// most recent `n` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub main: EncodedArticle,
    pub contexts: Vec<EncodedArticle>,
}

impl ModelInput {
    pub fn last(&self, n: usize) -> Result<&[EncodedArticle]> {
        if self.contexts.len() < n {
            return Err(Error::Contract(format!(
                "model expects {n} context articles, input has {}",
                self.contexts.len()
            )));
        }
        Ok(&self.contexts[self.contexts.len() - n..])
    }
}

/// Which parameters train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Decoder and adapters frozen; summarizer, time embeddings and alignment train.
    Calm,
    /// Base decoder frozen; everything else, including adapters, trains.
    Finetune,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
}

#[derive(Debug, Clone)]
pub struct ContextModel {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub decoder: Decoder,
    pub summarizer: Option<Summarizer>,
    pub aligner: Option<Aligner>,
    pub global: Option<Stack>,
    pub cls: Linear,
}

/// Each component draws from its own stream so that, under one seed, kinds
/// share identical decoder, adapter and classifier initializations.
fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

impl ContextModel {
    pub fn new(cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let v = vocab.len();
        let mut decoder = Decoder::new(&mut store, &cfg.decoder, v, &mut stream(seed, 0))?;
        decoder.attach_lora(&mut store, cfg.lora_rank, &mut stream(seed, 1))?;
        let (summarizer, aligner) = if cfg.kind == ModelKind::Psc {
            let s = Summarizer::new(&mut store, &cfg.summarizer, v, &mut stream(seed, 2))?;
            let a = Aligner::new(
                &mut store,
                cfg.alignment,
                cfg.summarizer.d,
                cfg.decoder.d,
                &mut stream(seed, 3),
            )?;
            (Some(s), Some(a))
        } else {
            (None, None)
        };
        let global = if cfg.kind == ModelKind::Hierarchical {
            let dims = BlockDims {
                d: cfg.decoder.d,
                heads: cfg.hierarchical.heads,
                ff: cfg.decoder.ff,
            };
            let layers = cfg.hierarchical.layers;
            Some(Stack::new(&mut store, "hier", layers, dims, layers > 0, &mut stream(seed, 4))?)
        } else {
            None
        };
        let cls = Linear::new(&mut store, "cls", cfg.decoder.d, 1, true, &mut stream(seed, 5))?;
        Ok(Self {
            cfg,
            vocab,
            store,
            decoder,
            summarizer,
            aligner,
            global,
            cls,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.cfg.kind
    }

    pub fn set_stage(&mut self, stage: Stage) {
        match stage {
            Stage::Calm => {
                self.store.set_all_trainable(false);
                for p in ["hcs.", "summary_tokens.", "te.", "align."] {
                    self.store.set_trainable_prefix(p, true);
                }
            }
            Stage::Finetune => {
                self.store.set_all_trainable(true);
                self.store.set_trainable_prefix("dec.", false);
            }
        }
    }

    fn require_psc(&self) -> Result<(&Summarizer, &Aligner)> {
        match (&self.summarizer, &self.aligner) {
            (Some(s), Some(a)) => Ok((s, a)),
            _ => Err(Error::Contract(format!(
                "a {} model has no summary-context prefix",
                self.cfg.kind
            ))),
        }
    }

    pub fn summary_context(
        &self,
        t: &mut Tape,
        contexts: &[EncodedArticle],
        main_at: NaiveDateTime,
    ) -> Result<SummaryContext> {
        let (summ, _) = self.require_psc()?;
        let ctx: Vec<ContextTokens> = contexts
            .iter()
            .map(|c| ContextTokens {
                tokens: c.tokens.clone(),
                published_at: c.published_at,
            })
            .collect();
        summ.build_summary_context(t, &self.store, &ctx, main_at)
    }

    /// The aligned `[N·M, d_LLM]` prefix, or `None` with no contexts.
    pub fn prefix(&self, t: &mut Tape, contexts: &[EncodedArticle], main_at: NaiveDateTime) -> Result<Option<Var>> {
        let (_, aligner) = self.require_psc()?;
        let sc = self.summary_context(t, contexts, main_at)?;
        let Some(m) = sc.matrix else {
            return Ok(None);
        };
        let e = self.decoder.embed_var(t, &self.store)?;
        Ok(Some(aligner.align(t, &self.store, m, e)?))
    }

    fn main_tokens<'a>(&self, a: &'a EncodedArticle) -> &'a [usize] {
        &a.tokens[..a.tokens.len().min(self.cfg.decoder.max_main_len())]
    }

    /// Mean-pooled `[1, d]` main-article representation using the last `n` contexts.
    pub fn pooled(&self, t: &mut Tape, input: &ModelInput, n: usize) -> Result<Var> {
        let n = self.cfg.effective_contexts(n);
        let contexts = input.last(n)?;
        let s = &self.store;
        match self.cfg.kind {
            ModelKind::Single | ModelKind::Psc => {
                let prefix = if n > 0 {
                    self.prefix(t, contexts, input.main.published_at)?
                } else {
                    None
                };
                let p_l = prefix.map_or(0, |p| t.value(p).rows());
                let tokens = self.main_tokens(&input.main);
                let h = self.decoder.forward(t, s, prefix, tokens)?;
                Ok(t.mean_rows(h, p_l, p_l + tokens.len())?)
            }
            ModelKind::ConcatFull | ModelKind::ConcatPrefix => {
                let parts: Vec<&[usize]> = contexts
                    .iter()
                    .map(|c| {
                        if self.cfg.kind == ModelKind::ConcatFull {
                            c.tokens.as_slice()
                        } else {
                            c.lead.as_slice()
                        }
                    })
                    .collect();
                let (seq, span) = build_concat_input(&parts, &input.main.tokens, self.cfg.decoder.max_main_len());
                let h = self.decoder.forward(t, s, None, &seq)?;
                Ok(t.mean_rows(h, span.start, span.end)?)
            }
            ModelKind::Hierarchical => {
                let global = self
                    .global
                    .as_ref()
                    .ok_or_else(|| Error::Contract("hierarchical model without a global stage".into()))?;
                let mut parts = Vec::with_capacity(n + 1);
                for a in contexts.iter().chain(std::iter::once(&input.main)) {
                    parts.push(self.decoder.forward(t, s, None, self.main_tokens(a))?);
                }
                let main_len = self.main_tokens(&input.main).len();
                let x = if parts.len() == 1 { parts[0] } else { t.concat_rows(&parts)? };
                let total = t.value(x).rows();
                let positions: Vec<usize> = (1..=total).collect();
                let mask = causal_mask(total);
                let h = global.forward(
                    t,
                    s,
                    x,
                    Some(&mask),
                    Some(nn::Rotary {
                        positions: &positions,
                        base: self.cfg.decoder.rotary_base,
                    }),
                )?;
                Ok(t.mean_rows(h, total - main_len, total)?)
            }
        }
    }

    /// Classifier logit, `[1, 1]`.
    pub fn logit(&self, t: &mut Tape, input: &ModelInput, n: usize) -> Result<Var> {
        let pooled = self.pooled(t, input, n)?;
        self.cls.forward(t, &self.store, pooled)
    }

    /// Binary cross-entropy against an up (1) / down (0) target.
    pub fn bce_loss(&self, t: &mut Tape, input: &ModelInput, n: usize, target: f64) -> Result<Var> {
        let z = self.logit(t, input, n)?;
        Ok(t.bce_with_logits(z, &[target])?)
    }

    pub fn predict(&self, input: &ModelInput, n: usize) -> Result<f64> {
        let mut t = Tape::new();
        let z = self.logit(&mut t, input, n)?;
        Ok(sigmoid(t.value(z).item()?))
    }

    /// Per-sample predictions computed in parallel; identical to calling
    /// [`ContextModel::predict`] on each input.
    pub fn predict_batch(&self, inputs: &[ModelInput], n: usize) -> Result<Vec<f64>> {
        inputs.par_iter().map(|x| self.predict(x, n)).collect()
    }

    /// Next-token loss of the main article given `n` contexts as a prefix.
    pub fn lm_loss(&self, t: &mut Tape, input: &ModelInput, n: usize) -> Result<Var> {
        let n = self.cfg.effective_contexts(n);
        if !matches!(self.cfg.kind, ModelKind::Psc | ModelKind::Single) {
            return Err(Error::Contract(format!(
                "language-model loss is defined for psc and single, not {}",
                self.cfg.kind
            )));
        }
        let contexts = input.last(n)?;
        let prefix = if n > 0 {
            self.prefix(t, contexts, input.main.published_at)?
        } else {
            None
        };
        self.decoder
            .calm_loss(t, &self.store, prefix, self.main_tokens(&input.main))
    }

    pub fn lm_loss_value(&self, input: &ModelInput, n: usize) -> Result<f64> {
        let mut t = Tape::new();
        let l = self.lm_loss(&mut t, input, n)?;
        Ok(t.value(l).item()?)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = serde_json::to_string(&Header {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
        })?;
        Ok(Checkpoint::from_store(header, &self.store))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut h: Header = serde_json::from_str(&ckpt.header)?;
        h.vocab.reindex();
        let mut m = Self::new(h.config, h.vocab, 0)?;
        ckpt.load_into(&mut m.store)?;
        for e in &ckpt.entries {
            let id = m.store.id(&e.name)?;
            m.store.get_mut(id).trainable = e.trainable;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
