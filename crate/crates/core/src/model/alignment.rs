//! Maps summary-context rows into the decoder's token-embedding space.

use psc_autodiff::{ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::Linear;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projections {
    Learned,
    /// No value/output projections: each output row is a convex combination
    /// of vocabulary embeddings (per head slice).
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlignmentKind {
    Linear,
    Mlp { hidden: usize },
    Cma { heads: usize, projections: Projections },
}

impl Default for AlignmentKind {
    fn default() -> Self {
        AlignmentKind::Cma {
            heads: 2,
            projections: Projections::Learned,
        }
    }
}

impl AlignmentKind {
    /// Parses `linear`, `mlp`, `cma` or `cma-identity`.
    pub fn parse(s: &str, heads: usize, hidden: usize) -> Result<Self> {
        match s {
            "linear" => Ok(AlignmentKind::Linear),
            "mlp" => Ok(AlignmentKind::Mlp { hidden }),
            "cma" => Ok(AlignmentKind::Cma {
                heads,
                projections: Projections::Learned,
            }),
            "cma-identity" => Ok(AlignmentKind::Cma {
                heads,
                projections: Projections::Identity,
            }),
            _ => Err(Error::config("alignment", format!("unknown alignment `{s}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            AlignmentKind::Linear => "linear".into(),
            AlignmentKind::Mlp { .. } => "mlp".into(),
            AlignmentKind::Cma {
                projections: Projections::Learned,
                ..
            } => "cma".into(),
            AlignmentKind::Cma {
                projections: Projections::Identity,
                ..
            } => "cma-identity".into(),
        }
    }
}

#[derive(Debug, Clone)]
enum Inner {
    Linear(Linear),
    Mlp(Linear, Linear),
    Cma {
        heads: usize,
        wq: Linear,
        wv: Option<Linear>,
        wo: Option<Linear>,
    },
}

#[derive(Debug, Clone)]
pub struct Aligner {
    pub kind: AlignmentKind,
    pub d_ce: usize,
    pub d_llm: usize,
    inner: Inner,
}

impl Aligner {
    pub fn new<R: Rng>(
        s: &mut ParamStore,
        kind: AlignmentKind,
        d_ce: usize,
        d_llm: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let inner = match kind {
            AlignmentKind::Linear => Inner::Linear(Linear::new(s, "align.linear", d_ce, d_llm, false, rng)?),
            AlignmentKind::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::AlignmentConfig("MLP hidden width must be positive".into()));
                }
                Inner::Mlp(
                    Linear::new(s, "align.mlp1", d_ce, hidden, true, rng)?,
                    Linear::new(s, "align.mlp2", hidden, d_llm, true, rng)?,
                )
            }
            AlignmentKind::Cma { heads, projections } => {
                if heads == 0 || d_llm % heads != 0 {
                    return Err(Error::AlignmentConfig(format!(
                        "{heads} heads do not divide decoder width {d_llm}"
                    )));
                }
                let learned = projections == Projections::Learned;
                Inner::Cma {
                    heads,
                    wq: Linear::new(s, "align.cma.q", d_ce, d_llm, false, rng)?,
                    wv: if learned {
                        Some(Linear::new(s, "align.cma.v", d_llm, d_llm, false, rng)?)
                    } else {
                        None
                    },
                    wo: if learned {
                        Some(Linear::new(s, "align.cma.o", d_llm, d_llm, false, rng)?)
                    } else {
                        None
                    },
                }
            }
        };
        Ok(Self {
            kind,
            d_ce,
            d_llm,
            inner,
        })
    }

    fn check(&self, t: &Tape, sc: Var, e_vocab: Option<Var>) -> Result<()> {
        let sc_cols = t.value(sc).cols();
        if sc_cols != self.d_ce {
            return Err(Error::AlignmentConfig(format!(
                "summary context width {sc_cols}, aligner expects {}",
                self.d_ce
            )));
        }
        if let Some(e) = e_vocab {
            let e_cols = t.value(e).cols();
            if e_cols != self.d_llm {
                return Err(Error::AlignmentConfig(format!(
                    "vocabulary embedding width {e_cols}, aligner expects {}",
                    self.d_llm
                )));
            }
        }
        Ok(())
    }

    /// Per-head `[P_L, |V|]` attention over the vocabulary, plus the per-head value slices.
    fn attend(&self, t: &mut Tape, s: &ParamStore, sc: Var, e_vocab: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let Inner::Cma { heads, wq, wv, .. } = &self.inner else {
            return Err(Error::UnsupportedIntrospection("attention_weights"));
        };
        let q = wq.forward(t, s, sc)?;
        let v = match wv {
            Some(wv) => wv.forward(t, s, e_vocab)?,
            None => e_vocab,
        };
        let dh = self.d_llm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (mut probs, mut values) = (Vec::new(), Vec::new());
        for h in 0..*heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh) = if *heads == 1 {
                (q, e_vocab)
            } else {
                (t.slice_cols(q, lo, hi)?, t.slice_cols(e_vocab, lo, hi)?)
            };
            let scores = t.matmul_nt(qh, kh)?;
            let scores = t.scale(scores, scale)?;
            probs.push(t.softmax(scores)?);
            values.push(if *heads == 1 { v } else { t.slice_cols(v, lo, hi)? });
        }
        Ok((probs, values))
    }

    /// Attention distributions over the vocabulary, one `[P_L, |V|]` matrix per head.
    pub fn attention_weights(&self, t: &mut Tape, s: &ParamStore, sc: Var, e_vocab: Var) -> Result<Vec<Var>> {
        self.check(t, sc, Some(e_vocab))?;
        Ok(self.attend(t, s, sc, e_vocab)?.0)
    }

    /// `[P_L, d_LLM]` prefix from a `[P_L, d_CE]` summary context.
    pub fn align(&self, t: &mut Tape, s: &ParamStore, sc: Var, e_vocab: Var) -> Result<Var> {
        self.check(t, sc, Some(e_vocab))?;
        match &self.inner {
            Inner::Linear(w) => w.forward(t, s, sc),
            Inner::Mlp(a, b) => {
                let h = a.forward(t, s, sc)?;
                let h = t.gelu(h)?;
                b.forward(t, s, h)
            }
            Inner::Cma { wo, .. } => {
                let (probs, values) = self.attend(t, s, sc, e_vocab)?;
                let outs: Vec<Var> = probs
                    .iter()
                    .zip(&values)
                    .map(|(&p, &v)| t.matmul(p, v))
                    .collect::<std::result::Result<_, _>>()?;
                let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs)? };
                match wo {
                    Some(wo) => wo.forward(t, s, cat),
                    None => Ok(cat),
                }
            }
        }
    }
}
