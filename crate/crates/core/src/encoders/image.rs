use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModalityEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, ParamStore, Tensor};
use crate::transformer::{
    with_cls, EncoderConfig, EncoderStack, Linear, PositionKind, PositionalEncoding,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEncoderConfig {
    pub height: usize,
    pub width: usize,
    /// Patch side `P`.
    pub patch: usize,
    pub encoder: EncoderConfig,
}

impl ImageEncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.height, self.width, self.patch, self.patch
            )));
        }
        Ok(())
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, 3] => Ok((*h, *w)),
        other => Err(Error::Input(format!("expected an H x W x 3 image, got {other:?}"))),
    }
}

/// Splits an `H × W × 3` image into `(H/P)·(W/P)` patches of length `3P²`.
///
/// Patches are ordered left-to-right, top-to-bottom; each is flattened
/// channel-last (row, column, channel).
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {p}x{p} patches"
        )));
    }
    let (ph, pw) = (h / p, w / p);
    let len = 3 * p * p;
    let src = image.data();
    let mut out = Vec::with_capacity(ph * pw * len);
    for a in 0..ph {
        for b in 0..pw {
            for dy in 0..p {
                let start = ((a * p + dy) * w + b * p) * 3;
                out.extend_from_slice(&src[start..start + 3 * p]);
            }
        }
    }
    Tensor::new(vec![ph * pw, len], out)
}

/// Inverse of [`patchify`].
pub fn reassemble(patches: &Tensor, height: usize, width: usize, p: usize) -> Result<Tensor> {
    let (ph, pw) = (height / p, width / p);
    if patches.shape() != [ph * pw, 3 * p * p] {
        return Err(Error::shape("reassemble", patches.shape(), &[ph * pw, 3 * p * p]));
    }
    let mut out = vec![0.0; height * width * 3];
    for a in 0..ph {
        for b in 0..pw {
            let patch = patches.row(a * pw + b);
            for dy in 0..p {
                let start = ((a * p + dy) * width + b * p) * 3;
                out[start..start + 3 * p].copy_from_slice(&patch[dy * 3 * p..(dy + 1) * 3 * p]);
            }
        }
    }
    Tensor::new(vec![height, width, 3], out)
}

/// Patch embedding, learned 2-D positions, `[CLS]`, then `L` blocks.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    pub patch_embed: Linear,
    pub positions: PositionalEncoding,
    pub cls: ParamId,
    pub stack: EncoderStack,
}

impl ImageEncoder {
    pub fn init<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &ImageEncoderConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.encoder.token_dim;
        let patch_len = 3 * cfg.patch * cfg.patch;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed: Linear::init(ps, &format!("{name}.patch"), patch_len, d, std, rng)?,
            positions: PositionalEncoding::init(
                ps,
                &format!("{name}.pos"),
                PositionKind::Learned,
                cfg.num_patches(),
                d,
                std,
                rng,
            )?,
            cls: ps.normal(format!("{name}.cls"), &[d], std, rng)?,
            stack: EncoderStack::init(ps, &format!("{name}.enc"), &cfg.encoder, std, rng)?,
        })
    }

    fn encode_one(&self, cx: &mut Ctx, image: &Tensor) -> Result<ModalityEmbedding> {
        let (h, w) = image_dims(image)?;
        if (h, w) != (self.cfg.height, self.cfg.width) {
            return Err(Error::Input(format!(
                "image is {h}x{w}, encoder expects {}x{}",
                self.cfg.height, self.cfg.width
            )));
        }
        let patches = patchify(image, self.cfg.patch)?;
        let patches = cx.g.constant(patches);
        let tokens = self.patch_embed.forward(cx, patches)?;
        let tokens = self.positions.add_to(cx, tokens)?;
        let cls = cx.p(self.cls);
        let seq = with_cls(cx.g, Some(tokens), cls)?;
        let out = self.stack.forward(cx, seq, None)?;
        let aggregated = cx.g.slice_rows(out, 0, 1)?;
        Ok(ModalityEmbedding {
            aggregated,
            tokens: out,
            keep: None,
        })
    }

    /// Encodes an `H × W × 3` image, or `N × H × W × 3` images whose `[CLS]`
    /// outputs are averaged and whose token sequences are concatenated.
    pub fn encode(&self, cx: &mut Ctx, image: &Tensor) -> Result<ModalityEmbedding> {
        match image.shape() {
            [_, _, 3] => self.encode_one(cx, image),
            [n, h, w, 3] if *n >= 1 => {
                let per = h * w * 3;
                let mut outs = Vec::with_capacity(*n);
                for i in 0..*n {
                    let one = Tensor::new(vec![*h, *w, 3], image.data()[i * per..(i + 1) * per].to_vec())?;
                    outs.push(self.encode_one(cx, &one)?);
                }
                if outs.len() == 1 {
                    return Ok(outs.swap_remove(0));
                }
                let cls_rows: Vec<_> = outs.iter().map(|o| o.aggregated).collect();
                let stacked = cx.g.concat_rows(&cls_rows)?;
                let aggregated = cx.g.mean_rows(stacked)?;
                let all: Vec<_> = outs.iter().map(|o| o.tokens).collect();
                let tokens = cx.g.concat_rows(&all)?;
                Ok(ModalityEmbedding {
                    aggregated,
                    tokens,
                    keep: None,
                })
            }
            other => Err(Error::Input(format!("unsupported image shape {other:?}"))),
        }
    }
}
