use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ImageEncoder, ImageEncoderConfig, ModalityEmbedding};
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, ParamStore, Tensor};
use crate::transformer::{with_cls, EncoderConfig, EncoderStack, PositionKind, PositionalEncoding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEncoderConfig {
    pub frame: ImageEncoderConfig,
    pub temporal: EncoderConfig,
    /// Frames per clip `F`.
    pub clip_len: usize,
}

impl VideoEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.frame.validate()?;
        self.temporal.validate()?;
        if self.clip_len == 0 {
            return Err(Error::Config("clip_len must be at least 1".into()));
        }
        if self.temporal.token_dim != self.frame.encoder.token_dim {
            return Err(Error::Config("temporal and frame encoders must share d".into()));
        }
        Ok(())
    }
}

fn frame_count(video: &Tensor) -> Result<usize> {
    match video.shape() {
        [t, _, _, 3] => Ok(*t),
        other => Err(Error::Input(format!("expected a T x H x W x 3 video, got {other:?}"))),
    }
}

/// `clip_len` consecutive frames from `start`, wrapping cyclically past the end.
pub fn clip_at(video: &Tensor, start: usize, clip_len: usize) -> Result<Tensor> {
    let t = frame_count(video)?;
    if t == 0 {
        return Err(Error::Input("empty video".into()));
    }
    let s = video.shape();
    let per = s[1] * s[2] * 3;
    let mut out = Vec::with_capacity(clip_len * per);
    for f in 0..clip_len {
        let src = (start + f) % t;
        out.extend_from_slice(&video.data()[src * per..(src + 1) * per]);
    }
    Tensor::new(vec![clip_len, s[1], s[2], 3], out)
}

/// Draws a clip start uniformly from `0..=T-F`; when `T < F` the video is
/// repeated cyclically from frame 0 and no draw is made.
pub fn sample_clip<R: Rng>(video: &Tensor, clip_len: usize, rng: &mut R) -> Result<(usize, Tensor)> {
    if clip_len == 0 {
        return Err(Error::Config("clip_len must be at least 1".into()));
    }
    let t = frame_count(video)?;
    if t == 0 {
        return Err(Error::Input("empty video".into()));
    }
    let start = if t > clip_len {
        rng.gen_range(0..=t - clip_len)
    } else {
        0
    };
    Ok((start, clip_at(video, start, clip_len)?))
}

/// Two-stage video encoder: per-frame image encoder with `[CLS]`, then a
/// temporal encoder over the frame embeddings with its own `[CLS]`.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub cfg: VideoEncoderConfig,
    pub frame: ImageEncoder,
    pub temporal_positions: PositionalEncoding,
    pub cls: ParamId,
    pub stack: EncoderStack,
}

impl VideoEncoder {
    pub fn init<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &VideoEncoderConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.temporal.token_dim;
        Ok(Self {
            cfg: cfg.clone(),
            frame: ImageEncoder::init(ps, &format!("{name}.frame"), &cfg.frame, std, rng)?,
            temporal_positions: PositionalEncoding::init(
                ps,
                &format!("{name}.tpos"),
                PositionKind::Learned,
                cfg.clip_len,
                d,
                std,
                rng,
            )?,
            cls: ps.normal(format!("{name}.cls"), &[d], std, rng)?,
            stack: EncoderStack::init(ps, &format!("{name}.temporal"), &cfg.temporal, std, rng)?,
        })
    }

    /// Frame-level `[CLS]` embeddings of a clip, `F × d`.
    pub fn frame_embeddings(&self, cx: &mut Ctx, clip: &Tensor) -> Result<crate::tensor::Var> {
        let f = frame_count(clip)?;
        if f != self.cfg.clip_len {
            return Err(Error::Input(format!(
                "clip has {f} frames, encoder expects {}",
                self.cfg.clip_len
            )));
        }
        let s = clip.shape();
        let per = s[1] * s[2] * 3;
        let mut rows = Vec::with_capacity(f);
        for i in 0..f {
            let frame = Tensor::new(vec![s[1], s[2], 3], clip.data()[i * per..(i + 1) * per].to_vec())?;
            rows.push(self.frame.encode(cx, &frame)?.aggregated);
        }
        cx.g.concat_rows(&rows)
    }

    /// Temporal stage over precomputed frame embeddings (`F × d`).
    pub fn encode_frames(&self, cx: &mut Ctx, frames: crate::tensor::Var) -> Result<ModalityEmbedding> {
        let tokens = self.temporal_positions.add_to(cx, frames)?;
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

    /// Encodes an already-sampled clip of exactly `F` frames.
    pub fn encode_clip(&self, cx: &mut Ctx, clip: &Tensor) -> Result<ModalityEmbedding> {
        let frames = self.frame_embeddings(cx, clip)?;
        self.encode_frames(cx, frames)
    }

    /// Samples one clip from `video` and encodes it.
    pub fn encode<R: Rng>(&self, cx: &mut Ctx, video: &Tensor, rng: &mut R) -> Result<ModalityEmbedding> {
        let (_, clip) = sample_clip(video, self.cfg.clip_len, rng)?;
        self.encode_clip(cx, &clip)
    }
}
