//! Decoder-only language model with rotary positions and an optional prefix
//! of aligned summary rows.

use psc_autodiff::{ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{causal_mask, param, BlockDims, Linear, Rotary, Stack};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub ff: usize,
    pub rotary_base: f64,
    /// Largest position index plus one; bounds main-sequence length.
    pub max_positions: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d: 32,
            ff: 64,
            rotary_base: 10_000.0,
            max_positions: 256,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::config("decoder.heads", "must divide decoder.d"));
        }
        if (self.d / self.heads) % 2 != 0 {
            return Err(Error::config("decoder.heads", "head width must be even for rotary embeddings"));
        }
        if self.max_positions < 2 {
            return Err(Error::config("decoder.max_positions", "must be at least 2"));
        }
        Ok(())
    }

    /// Longest main sequence that fits the position range.
    pub fn max_main_len(&self) -> usize {
        self.max_positions - 1
    }
}

/// Every prefix row sits at position 0; main tokens count up from 1.
pub fn build_positions(prefix_len: usize, main_len: usize) -> Vec<usize> {
    std::iter::repeat_n(0, prefix_len).chain(1..=main_len).collect()
}

/// Prefix rows see the whole prefix; main tokens see the whole prefix and
/// the main tokens up to themselves.
pub fn prefix_mask(prefix_len: usize, main_len: usize) -> Vec<bool> {
    let n = prefix_len + main_len;
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            m[i * n + j] = j < prefix_len || (i >= prefix_len && j <= i);
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    /// Token embedding table `E_vocab`, `[|V|, d]`.
    pub embed: ParamId,
    pub stack: Stack,
    /// Untied output projection.
    pub lm_head: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(s: &mut ParamStore, cfg: &DecoderConfig, vocab_size: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let embed = s.add_normal("dec.embed", &[vocab_size, d], 1.0, rng)?;
        let stack = Stack::new(
            s,
            "dec",
            cfg.layers,
            BlockDims {
                d,
                heads: cfg.heads,
                ff: cfg.ff,
            },
            true,
            rng,
        )?;
        let lm_head = Linear::with_std(s, "dec.lm_head", d, vocab_size, false, 0.5 / (d as f64).sqrt(), rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            stack,
            lm_head,
        })
    }

    /// Adds LoRA adapters to every linear layer inside the transformer blocks.
    pub fn attach_lora<R: Rng>(&mut self, s: &mut ParamStore, rank: usize, rng: &mut R) -> Result<()> {
        for b in &mut self.stack.blocks {
            for lin in b.linears_mut() {
                lin.attach_lora(s, rank, rng)?;
            }
        }
        Ok(())
    }

    pub fn embed_var(&self, t: &mut Tape, s: &ParamStore) -> Result<Var> {
        param(t, s, self.embed)
    }

    /// Final hidden states `[P_L + T, d]` for `[prefix; E_vocab[tokens]]`.
    pub fn forward(&self, t: &mut Tape, s: &ParamStore, prefix: Option<Var>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Encoding("empty main sequence".into()));
        }
        if tokens.len() > self.cfg.max_main_len() {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.cfg.max_main_len(),
            });
        }
        let p_l = prefix.map_or(0, |p| t.value(p).rows());
        let e = self.embed_var(t, s)?;
        let x = t.gather_rows(e, tokens)?;
        let x = match prefix {
            Some(p) => t.concat_rows(&[p, x])?,
            None => x,
        };
        let positions = build_positions(p_l, tokens.len());
        let mask = if p_l == 0 {
            causal_mask(tokens.len())
        } else {
            prefix_mask(p_l, tokens.len())
        };
        self.stack.forward(
            t,
            s,
            x,
            Some(&mask),
            Some(Rotary {
                positions: &positions,
                base: self.cfg.rotary_base,
            }),
        )
    }

    /// Next-token logits for rows `start..end` of `hidden`.
    pub fn logits(&self, t: &mut Tape, s: &ParamStore, hidden: Var, start: usize, end: usize) -> Result<Var> {
        let h = t.slice_rows(hidden, start, end)?;
        self.lm_head.forward(t, s, h)
    }

    /// Mean next-token cross-entropy over main tokens 2..T given the prefix.
    pub fn calm_loss(&self, t: &mut Tape, s: &ParamStore, prefix: Option<Var>, tokens: &[usize]) -> Result<Var> {
        if tokens.len() < 2 {
            return Err(Error::Contract(format!(
                "language-model loss needs at least 2 main tokens, got {}",
                tokens.len()
            )));
        }
        let p_l = prefix.map_or(0, |p| t.value(p).rows());
        let h = self.forward(t, s, prefix, tokens)?;
        let logits = self.logits(t, s, h, p_l, p_l + tokens.len() - 1)?;
        Ok(t.cross_entropy(logits, &tokens[1..])?)
    }
}
