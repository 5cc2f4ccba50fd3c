//! Modality-specific encoders mapping raw content to token sequences and an
//! aggregated `[CLS]` embedding of width `d`.

mod image;
mod text;
mod video;

pub use image::{patchify, reassemble, ImageEncoder, ImageEncoderConfig};
pub use text::{split_words, tokenize, TextEncoder, TextEncoderConfig, Vocabulary};
pub use video::{clip_at, sample_clip, VideoEncoder, VideoEncoderConfig};

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Video,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Video => "video",
            Modality::Text => "text",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "video" => Ok(Modality::Video),
            "text" => Ok(Modality::Text),
            other => Err(crate::Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Model-ready content of one attribute.
///
/// Images are `H × W × 3` in `[0, 1]` (or `N × H × W × 3` for several images),
/// videos `T × H × W × 3`, text a token-id sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Image(Tensor),
    Video(Tensor),
    Text(Vec<usize>),
}

impl Payload {
    pub fn modality(&self) -> Modality {
        match self {
            Payload::Image(_) => Modality::Image,
            Payload::Video(_) => Modality::Video,
            Payload::Text(_) => Modality::Text,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContentAttribute {
    pub item_id: String,
    pub payload: Payload,
}

/// Encoder output for one attribute of one item, recorded on a graph.
#[derive(Clone, Debug)]
pub struct ModalityEmbedding {
    /// `1 × d`: the final-block `[CLS]` row.
    pub aggregated: Var,
    /// `(T + 1) × d`: the full final-block sequence, `[CLS]` first.
    pub tokens: Var,
    /// Key mask over `tokens` (`false` for padding); `None` keeps every row.
    pub keep: Option<Vec<bool>>,
}
