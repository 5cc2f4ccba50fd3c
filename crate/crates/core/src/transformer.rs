//! Encoder-only transformer machinery: scaled dot-product attention,
//! multi-head attention, pre-norm encoder blocks, positional encodings and
//! `[CLS]` handling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Ctx, Graph, ParamId, ParamStore, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Token embedding width `d`.
    pub token_dim: usize,
    /// Total query/key/value width `d′`, split evenly across heads.
    pub qkv_dim: usize,
    pub heads: usize,
    /// Number of encoder blocks `L`.
    pub blocks: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl EncoderConfig {
    /// Width `d` with `d′ = d` and the conventional `4·d` feed-forward width.
    pub fn new(token_dim: usize, heads: usize, blocks: usize, max_seq_len: usize) -> Self {
        Self {
            token_dim,
            qkv_dim: token_dim,
            heads,
            blocks,
            ffn_dim: 4 * token_dim,
            max_seq_len,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.token_dim == 0 || self.qkv_dim == 0 || self.ffn_dim == 0 {
            return bad("encoder widths must be positive".into());
        }
        if self.heads == 0 || !self.qkv_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "qkv_dim {} must be divisible by heads {}",
                self.qkv_dim, self.heads
            ));
        }
        if self.blocks == 0 {
            return bad("an encoder needs at least one block".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.qkv_dim / self.heads
    }
}

/// `softmax(Q·Kᵀ/√d′)·V` where `d′` is the width of `Q`.
///
/// `keep` masks key positions: masked keys receive zero attention weight.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, keep: Option<&[bool]>) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || qs != ks || ks[0] != vs[0] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let scores = g.matmul_bt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (qs[1] as f64).sqrt())?;
    let weights = g.softmax_rows(scaled, keep)?;
    g.matmul(weights, v)
}

/// A dense layer `x·W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w: ps.normal(format!("{name}.w"), &[fan_in, fan_out], std, rng)?,
            b: ps.zeros(format!("{name}.b"), &[fan_out])?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = cx.p(self.b);
        let h = cx.g.matmul(x, w)?;
        cx.g.add_row(h, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(ps: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.ones(format!("{name}.gamma"), &[width])?,
            beta: ps.zeros(format!("{name}.beta"), &[width])?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let g = cx.p(self.gamma);
        let b = cx.p(self.beta);
        cx.g.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadWeights {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadWeights {
    pub fn init<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, dq) = (cfg.token_dim, cfg.qkv_dim);
        Ok(Self {
            query: Linear::init(ps, &format!("{name}.q"), d, dq, std, rng)?,
            key: Linear::init(ps, &format!("{name}.k"), d, dq, std, rng)?,
            value: Linear::init(ps, &format!("{name}.v"), d, dq, std, rng)?,
            out: Linear::init(ps, &format!("{name}.o"), dq, d, std, rng)?,
        })
    }
}

/// Per-head projections, attention per head, concatenation, output projection.
pub fn multi_head(
    cx: &mut Ctx,
    tokens: Var,
    cfg: &EncoderConfig,
    w: &MultiHeadWeights,
    keep: Option<&[bool]>,
) -> Result<Var> {
    let width = cx.g.shape(tokens).get(1).copied().unwrap_or(0);
    if width != cfg.token_dim {
        return Err(Error::shape("multi_head", cx.g.shape(tokens), &[0, cfg.token_dim]));
    }
    let q = w.query.forward(cx, tokens)?;
    let k = w.key.forward(cx, tokens)?;
    let v = w.value.forward(cx, tokens)?;
    let hd = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let (qh, kh, vh) = if cfg.heads == 1 {
            (q, k, v)
        } else {
            (
                cx.g.slice_cols(q, lo, hi)?,
                cx.g.slice_cols(k, lo, hi)?,
                cx.g.slice_cols(v, lo, hi)?,
            )
        };
        heads.push(attention(cx.g, qh, kh, vh, keep)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        cx.g.concat_cols(&heads)?
    };
    w.out.forward(cx, joined)
}

#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadWeights,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl BlockWeights {
    pub fn init<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.token_dim;
        Ok(Self {
            ln_attn: LayerNorm::init(ps, &format!("{name}.ln1"), d)?,
            attn: MultiHeadWeights::init(ps, &format!("{name}.attn"), cfg, std, rng)?,
            ln_ffn: LayerNorm::init(ps, &format!("{name}.ln2"), d)?,
            ffn_in: Linear::init(ps, &format!("{name}.ffn1"), d, cfg.ffn_dim, std, rng)?,
            ffn_out: Linear::init(ps, &format!("{name}.ffn2"), cfg.ffn_dim, d, std, rng)?,
        })
    }

    /// Parameters whose zeroing turns the block into the identity map.
    pub fn sublayer_outputs(&self) -> [ParamId; 4] {
        [self.attn.out.w, self.attn.out.b, self.ffn_out.w, self.ffn_out.b]
    }
}

/// Pre-norm block: `x + MH(LN(x))`, then `+ FFN(LN(·))` with a GELU FFN.
pub fn encoder_block(
    cx: &mut Ctx,
    tokens: Var,
    cfg: &EncoderConfig,
    w: &BlockWeights,
    keep: Option<&[bool]>,
) -> Result<Var> {
    let normed = w.ln_attn.forward(cx, tokens)?;
    let attended = multi_head(cx, normed, cfg, &w.attn, keep)?;
    let attended = cx.g.dropout(attended, cfg.dropout)?;
    let x = cx.g.add(tokens, attended)?;
    let normed = w.ln_ffn.forward(cx, x)?;
    let hidden = w.ffn_in.forward(cx, normed)?;
    let hidden = cx.g.gelu(hidden)?;
    let out = w.ffn_out.forward(cx, hidden)?;
    let out = cx.g.dropout(out, cfg.dropout)?;
    cx.g.add(x, out)
}

/// `L` stacked encoder blocks.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub cfg: EncoderConfig,
    pub blocks: Vec<BlockWeights>,
}

impl EncoderStack {
    pub fn init<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.blocks)
            .map(|i| BlockWeights::init(ps, &format!("{name}.block{i}"), cfg, std, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, tokens: Var, keep: Option<&[bool]>) -> Result<Var> {
        self.blocks
            .iter()
            .try_fold(tokens, |x, b| encoder_block(cx, x, &self.cfg, b, keep))
    }
}

/// Prepends the `[CLS]` row at position 0. `tokens == None` is the empty sequence.
pub fn with_cls(g: &mut Graph, tokens: Option<Var>, cls: Var) -> Result<Var> {
    let d = g.value(cls).numel();
    let cls_row = if g.shape(cls) == [1, d] {
        cls
    } else {
        g.reshape(cls, &[1, d])?
    };
    match tokens {
        None => Ok(cls_row),
        Some(t) => {
            if g.shape(t).get(1) != Some(&d) {
                return Err(Error::shape("with_cls", g.shape(t), &[1, d]));
            }
            g.concat_rows(&[cls_row, t])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionKind {
    Learned,
    Sinusoidal,
}

/// Sinusoidal table: `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(·)`.
pub fn sinusoidal_table(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    let data = t.data_mut();
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    t
}

#[derive(Clone, Debug)]
pub enum PositionalEncoding {
    Learned(ParamId),
    Fixed(Tensor),
}

impl PositionalEncoding {
    pub fn init<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        kind: PositionKind,
        len: usize,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            PositionKind::Learned => Self::Learned(ps.normal(name, &[len, d], std, rng)?),
            PositionKind::Sinusoidal => Self::Fixed(sinusoidal_table(len, d)),
        })
    }

    pub fn kind(&self) -> PositionKind {
        match self {
            Self::Learned(_) => PositionKind::Learned,
            Self::Fixed(_) => PositionKind::Sinusoidal,
        }
    }

    /// Adds positions `0..T` to a `T × d` token matrix.
    pub fn add_to(&self, cx: &mut Ctx, tokens: Var) -> Result<Var> {
        let t = cx.g.shape(tokens)[0];
        let table = match self {
            Self::Learned(id) => cx.p(*id),
            Self::Fixed(tab) => {
                let d = tab.shape()[1];
                if t > tab.shape()[0] {
                    return Err(Error::shape("positional encoding", &[t, d], tab.shape()));
                }
                let rows = Tensor::new(vec![t, d], tab.data()[..t * d].to_vec())?;
                let rows = cx.g.constant(rows);
                return cx.g.add(tokens, rows);
            }
        };
        let len = cx.g.shape(table)[0];
        if t > len {
            return Err(Error::shape("positional encoding", cx.g.shape(tokens), &[len]));
        }
        let rows = if t == len {
            table
        } else {
            cx.g.slice_rows(table, 0, t)?
        };
        cx.g.add(tokens, rows)
    }
}
