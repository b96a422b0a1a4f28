//! Linear (with optional LoRA), layer norm, multi-head attention and
//! pre-norm transformer blocks on the autodiff tape.

use psc_autodiff::{ParamId, ParamStore, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn param(t: &mut Tape, s: &ParamStore, id: ParamId) -> Result<Var> {
    Ok(t.param(id, s.get(id))?)
}

/// Low-rank additive adapter: effective weight `W + (alpha / r) · A · B`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    /// Weight `N(0, 1/d_in)`, zero bias.
    pub fn new<R: Rng>(
        s: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_std(s, name, d_in, d_out, bias, 1.0 / (d_in as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng>(
        s: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = s.add_normal(format!("{name}.w"), &[d_in, d_out], std, rng)?;
        let b = if bias {
            Some(s.add_zeros(format!("{name}.b"), &[d_out])?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            d_in,
            d_out,
            lora: None,
        })
    }

    /// Attaches a rank-`rank` adapter with `alpha = 2 · rank`; `B` starts at zero
    /// so the adapted layer initially equals the base layer.
    pub fn attach_lora<R: Rng>(&mut self, s: &mut ParamStore, rank: usize, rng: &mut R) -> Result<()> {
        let a = s.add_normal(
            format!("lora.{}.a", self.name),
            &[self.d_in, rank],
            1.0 / (self.d_in as f64).sqrt(),
            rng,
        )?;
        let b = s.add_zeros(format!("lora.{}.b", self.name), &[rank, self.d_out])?;
        self.lora = Some(LoraAdapter {
            a,
            b,
            rank,
            alpha: 2.0 * rank as f64,
        });
        Ok(())
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let w = param(t, s, self.w)?;
        let mut y = t.matmul(x, w)?;
        if let Some(l) = &self.lora {
            let (a, b) = (param(t, s, l.a)?, param(t, s, l.b)?);
            let xa = t.matmul(x, a)?;
            let xab = t.matmul(xa, b)?;
            let scaled = t.scale(xab, l.scale())?;
            y = t.add(y, scaled)?;
        }
        if let Some(b) = self.b {
            let b = param(t, s, b)?;
            y = t.add_row(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(s: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            g: s.add_ones(format!("{name}.g"), &[d])?,
            b: s.add_zeros(format!("{name}.b"), &[d])?,
        })
    }

    pub fn forward(&self, t: &mut Tape, s: &ParamStore, x: Var) -> Result<Var> {
        let (g, b) = (param(t, s, self.g)?, param(t, s, self.b)?);
        Ok(t.layer_norm(x, g, b, LN_EPS)?)
    }
}

/// Row-major `[n, n]` attention mask, `true` where attending is allowed.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Rotary<'a> {
    pub positions: &'a [usize],
    pub base: f64,
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub heads: usize,
    pub d: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    pub fn new<R: Rng>(s: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(
                format!("{name}.heads"),
                format!("{heads} heads do not divide width {d}"),
            ));
        }
        Ok(Self {
            heads,
            d,
            q: Linear::new(s, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(s, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(s, &format!("{name}.v"), d, d, true, rng)?,
            o: Linear::new(s, &format!("{name}.o"), d, d, true, rng)?,
        })
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        x: Var,
        mask: Option<&[bool]>,
        rotary: Option<Rotary<'_>>,
    ) -> Result<Var> {
        let q = self.q.forward(t, s, x)?;
        let k = self.k.forward(t, s, x)?;
        let v = self.v.forward(t, s, x)?;
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let mut qh = t.slice_cols(q, h * dh, (h + 1) * dh)?;
            let mut kh = t.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = t.slice_cols(v, h * dh, (h + 1) * dh)?;
            if let Some(r) = rotary {
                qh = t.rotary(qh, r.positions, r.base)?;
                kh = t.rotary(kh, r.positions, r.base)?;
            }
            let scores = t.matmul_nt(qh, kh)?;
            let scores = t.scale(scores, scale)?;
            let p = t.softmax_masked(scores, mask)?;
            outs.push(t.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { t.concat_cols(&outs)? };
        self.o.forward(t, s, cat)
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FF(LN(x))` with GELU.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new<R: Rng>(s: &mut ParamStore, name: &str, dims: BlockDims, rng: &mut R) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(s, &format!("{name}.ln1"), dims.d)?,
            attn: Attention::new(s, &format!("{name}.attn"), dims.d, dims.heads, rng)?,
            ln2: LayerNorm::new(s, &format!("{name}.ln2"), dims.d)?,
            ff1: Linear::new(s, &format!("{name}.ff1"), dims.d, dims.ff, true, rng)?,
            ff2: Linear::new(s, &format!("{name}.ff2"), dims.ff, dims.d, true, rng)?,
        })
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        x: Var,
        mask: Option<&[bool]>,
        rotary: Option<Rotary<'_>>,
    ) -> Result<Var> {
        let h = self.ln1.forward(t, s, x)?;
        let a = self.attn.forward(t, s, h, mask, rotary)?;
        let x = t.add(x, a)?;
        let h = self.ln2.forward(t, s, x)?;
        let f = self.ff1.forward(t, s, h)?;
        let f = t.gelu(f)?;
        let f = self.ff2.forward(t, s, f)?;
        Ok(t.add(x, f)?)
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let [q, k, v, o] = self.attn.linears_mut();
        vec![q, k, v, o, &mut self.ff1, &mut self.ff2]
    }
}

/// A stack of blocks with an optional final layer norm.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub ln_f: Option<LayerNorm>,
}

impl Stack {
    pub fn new<R: Rng>(
        s: &mut ParamStore,
        name: &str,
        layers: usize,
        dims: BlockDims,
        final_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|i| Block::new(s, &format!("{name}.blocks.{i}"), dims, rng))
            .collect::<Result<_>>()?;
        let ln_f = if final_norm {
            Some(LayerNorm::new(s, &format!("{name}.ln_f"), dims.d)?)
        } else {
            None
        };
        Ok(Self { blocks, ln_f })
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        s: &ParamStore,
        mut x: Var,
        mask: Option<&[bool]>,
        rotary: Option<Rotary<'_>>,
    ) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(t, s, x, mask, rotary)?;
        }
        match &self.ln_f {
            Some(ln) => ln.forward(t, s, x),
            None => Ok(x),
        }
    }
}
