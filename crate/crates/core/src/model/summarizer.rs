//! Historical context summarizer: a bidirectional encoder that reads a
//! context article with `M` interleaved summary tokens and returns their final
//! hidden states, plus the day-distance time embedding.

use chrono::NaiveDateTime;
use psc_autodiff::{ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{param, BlockDims, Stack};
use crate::error::{order_error, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Summary token after its chunk.
    Trailing,
    /// Summary token before its chunk.
    Leading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SummarizerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ff: usize,
    /// Maximum augmented length (article tokens plus `m` summary tokens).
    pub max_len: usize,
    pub m: usize,
    pub placement: Placement,
}

impl Default for SummarizerConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d: 32,
            ff: 64,
            max_len: 96,
            m: 2,
            placement: Placement::Trailing,
        }
    }
}

impl SummarizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::config("summarizer.m", "need at least one summary token"));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config("summarizer.heads", "must divide summarizer.d"));
        }
        if self.max_len <= self.m {
            return Err(Error::config("summarizer.max_len", "must exceed m"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// Index into the original token sequence.
    Token(usize),
    /// The k-th summary token.
    Summary(usize),
}

/// Chunk boundaries `⌈k·L/M⌉`, k = 0..=M: M non-empty chunks whose sizes
/// differ by at most one, the larger ones first.
pub fn chunk_bounds(len: usize, m: usize) -> Vec<usize> {
    (0..=m).map(|k| (k * len).div_ceil(m)).collect()
}

/// Lays out `len` tokens with `m` summary tokens, returning the layout and
/// the positions of the summary tokens in it.
pub fn interleave_summary_tokens(len: usize, m: usize, placement: Placement) -> Result<(Vec<Slot>, Vec<usize>)> {
    if m == 0 || len == 0 {
        return Err(Error::config("m", "need at least one token and one summary token"));
    }
    if m > len {
        return Err(Error::config("m", format!("{m} summary tokens for {len} tokens")));
    }
    let bounds = chunk_bounds(len, m);
    let mut layout = Vec::with_capacity(len + m);
    let mut positions = Vec::with_capacity(m);
    for k in 0..m {
        if placement == Placement::Leading {
            positions.push(layout.len());
            layout.push(Slot::Summary(k));
        }
        layout.extend((bounds[k]..bounds[k + 1]).map(Slot::Token));
        if placement == Placement::Trailing {
            positions.push(layout.len());
            layout.push(Slot::Summary(k));
        }
    }
    Ok((layout, positions))
}

/// Number of time buckets: 0..=30 individually, then 31–60, 61–90, 91–180,
/// 181–365 and > 365.
pub const TIME_BUCKETS: usize = 36;

pub fn time_bucket(delta_days: i64) -> Result<usize> {
    Ok(match delta_days {
        d if d < 0 => {
            return Err(Error::TemporalOrder(format!("negative day distance {d}")));
        }
        d @ 0..=30 => d as usize,
        31..=60 => 31,
        61..=90 => 32,
        91..=180 => 33,
        181..=365 => 34,
        _ => 35,
    })
}

/// A context article ready for summarization.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTokens {
    pub tokens: Vec<usize>,
    pub published_at: NaiveDateTime,
}

/// Where each summary-context row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowSource {
    pub article: usize,
    pub summary: usize,
    pub delta_days: i64,
}

#[derive(Debug, Clone)]
pub struct SummaryContext {
    /// `[N·M, d]`, oldest article first; `None` when there are no contexts.
    pub matrix: Option<Var>,
    pub rows: Vec<RowSource>,
}

#[derive(Debug, Clone)]
pub struct Summarizer {
    pub cfg: SummarizerConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub summary_tokens: ParamId,
    pub te: ParamId,
    pub stack: Stack,
}

impl Summarizer {
    pub fn new<R: Rng>(s: &mut ParamStore, cfg: &SummarizerConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        Ok(Self {
            cfg: cfg.clone(),
            embed: s.add_normal("hcs.embed", &[vocab_size, d], 1.0, rng)?,
            pos: s.add_normal("hcs.pos", &[cfg.max_len, d], 0.1, rng)?,
            summary_tokens: s.add_normal("summary_tokens.emb", &[cfg.m, d], 1.0, rng)?,
            te: s.add_zeros("te.table", &[TIME_BUCKETS, d])?,
            stack: Stack::new(
                s,
                "hcs",
                cfg.layers,
                BlockDims {
                    d,
                    heads: cfg.heads,
                    ff: cfg.ff,
                },
                true,
                rng,
            )?,
        })
    }

    /// `[M, d]` summary embeddings of one article (truncated to fit `max_len`).
    pub fn encode_article(&self, t: &mut Tape, s: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Encoding("empty context article".into()));
        }
        let keep = tokens.len().min(self.cfg.max_len - self.cfg.m).max(self.cfg.m);
        let tokens = &tokens[..keep.min(tokens.len())];
        let (layout, positions) = interleave_summary_tokens(tokens.len(), self.cfg.m, self.cfg.placement)?;
        let embed = param(t, s, self.embed)?;
        let summ = param(t, s, self.summary_tokens)?;
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for slot in &layout {
            match *slot {
                Slot::Token(i) => run.push(tokens[i]),
                Slot::Summary(k) => {
                    if !run.is_empty() {
                        parts.push(t.gather_rows(embed, &run)?);
                        run.clear();
                    }
                    parts.push(t.gather_rows(summ, &[k])?);
                }
            }
        }
        if !run.is_empty() {
            parts.push(t.gather_rows(embed, &run)?);
        }
        let x = t.concat_rows(&parts)?;
        let pos = param(t, s, self.pos)?;
        let p = t.slice_rows(pos, 0, layout.len())?;
        let x = t.add(x, p)?;
        let h = self.stack.forward(t, s, x, None, None)?;
        Ok(t.gather_rows(h, &positions)?)
    }

    /// The learned time-embedding row for a day distance, `[1, d]`.
    pub fn time_embedding(&self, t: &mut Tape, s: &ParamStore, delta_days: i64) -> Result<Var> {
        let te = param(t, s, self.te)?;
        Ok(t.gather_rows(te, &[time_bucket(delta_days)?])?)
    }

    /// Summary embeddings plus time embeddings, concatenated oldest first.
    pub fn build_summary_context(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        contexts: &[ContextTokens],
        main_published_at: NaiveDateTime,
    ) -> Result<SummaryContext> {
        for w in contexts.windows(2) {
            if w[1].published_at < w[0].published_at {
                return Err(order_error("contexts out of order", w[0].published_at, w[1].published_at));
            }
        }
        let mut blocks = Vec::with_capacity(contexts.len());
        let mut rows = Vec::with_capacity(contexts.len() * self.cfg.m);
        for (i, c) in contexts.iter().enumerate() {
            if c.published_at >= main_published_at {
                return Err(order_error("context article", c.published_at, main_published_at));
            }
            let delta = (main_published_at.date() - c.published_at.date()).num_days();
            let se = self.encode_article(t, s, &c.tokens)?;
            let te = self.time_embedding(t, s, delta)?;
            blocks.push(t.add_row(se, te)?);
            rows.extend((0..self.cfg.m).map(|k| RowSource {
                article: i,
                summary: k,
                delta_days: delta,
            }));
        }
        let matrix = match blocks.len() {
            0 => None,
            1 => Some(blocks[0]),
            _ => Some(t.concat_rows(&blocks)?),
        };
        Ok(SummaryContext { matrix, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_layout_six_two() {
        let (layout, pos) = interleave_summary_tokens(6, 2, Placement::Trailing).unwrap();
        use Slot::*;
        assert_eq!(
            layout,
            [Token(0), Token(1), Token(2), Summary(0), Token(3), Token(4), Token(5), Summary(1)]
        );
        assert_eq!(pos, [3, 7]);
    }

    #[test]
    fn ceiling_chunks() {
        let (layout, pos) = interleave_summary_tokens(5, 2, Placement::Trailing).unwrap();
        assert_eq!(layout.len(), 7);
        assert_eq!(pos, [3, 6]);
        assert_eq!(chunk_bounds(5, 4), [0, 2, 3, 4, 5]);
        let (_, pos) = interleave_summary_tokens(4, 1, Placement::Trailing).unwrap();
        assert_eq!(pos, [4]);
        assert!(interleave_summary_tokens(2, 3, Placement::Trailing).is_err());
    }

    #[test]
    fn leading_layout() {
        let (layout, pos) = interleave_summary_tokens(4, 2, Placement::Leading).unwrap();
        assert_eq!(layout[0], Slot::Summary(0));
        assert_eq!(pos, [0, 3]);
    }

    #[test]
    fn buckets() {
        assert_eq!(time_bucket(0).unwrap(), 0);
        assert_eq!(time_bucket(30).unwrap(), 30);
        assert_eq!(time_bucket(45).unwrap(), time_bucket(59).unwrap());
        assert_eq!(time_bucket(400).unwrap(), TIME_BUCKETS - 1);
        assert!(matches!(time_bucket(-1), Err(Error::TemporalOrder(_))));
    }
}
