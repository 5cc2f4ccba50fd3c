//! The two-tower recommender: a user embedding table against a content
//! item tower (per-attribute encoders + fusion), scored by dot product.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{
    sample_clip, ImageEncoder, ImageEncoderConfig, Modality, ModalityEmbedding, Payload, TextEncoder,
    TextEncoderConfig, VideoEncoder, VideoEncoderConfig, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{rank, RankedList};
use crate::fusion::{Fusion, FusionConfig};
use crate::tensor::io::{read_tensor, write_tensor, Precision};
use crate::tensor::{Ctx, Graph, ParamId, ParamStore, Tensor, Var};
use crate::transformer::{EncoderConfig, PositionKind};

/// Segments sampled per video item at inference.
pub const DEFAULT_SEGMENTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeConfig {
    Image(ImageEncoderConfig),
    Video(VideoEncoderConfig),
    Text(TextEncoderConfig),
}

impl AttributeConfig {
    pub fn modality(&self) -> Modality {
        match self {
            AttributeConfig::Image(_) => Modality::Image,
            AttributeConfig::Video(_) => Modality::Video,
            AttributeConfig::Text(_) => Modality::Text,
        }
    }

    pub fn token_dim(&self) -> usize {
        match self {
            AttributeConfig::Image(c) => c.encoder.token_dim,
            AttributeConfig::Video(c) => c.temporal.token_dim,
            AttributeConfig::Text(c) => c.encoder.token_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Content attributes in their fixed order `c = 1..C`.
    pub attributes: Vec<AttributeConfig>,
    pub fusion: FusionConfig,
    /// Standard deviation of the normal weight initialization.
    pub init_std: f64,
}

impl ModelConfig {
    pub fn token_dim(&self) -> usize {
        self.attributes.first().map_or(0, AttributeConfig::token_dim)
    }

    pub fn item_dim(&self) -> usize {
        self.fusion.item_dim
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.attributes.iter().map(AttributeConfig::modality).collect()
    }

    pub fn has_video(&self) -> bool {
        self.modalities().contains(&Modality::Video)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(Error::Config("model needs at least one content attribute".into()));
        }
        let d = self.token_dim();
        if self.attributes.iter().any(|a| a.token_dim() != d) {
            return Err(Error::Config("all attribute encoders must share the token width d".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        self.fusion.validate(self.attributes.len(), d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub blocks: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 8,
            blocks: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoSpec {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub frame_blocks: usize,
    pub temporal_blocks: usize,
    /// Frames per clip `F`.
    pub clip_len: usize,
}

impl Default for VideoSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 8,
            frame_blocks: 2,
            temporal_blocks: 2,
            clip_len: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSpec {
    pub max_len: usize,
    pub blocks: usize,
    pub positions: PositionKind,
}

impl Default for TextSpec {
    fn default() -> Self {
        Self {
            max_len: 32,
            blocks: 2,
            positions: PositionKind::Sinusoidal,
        }
    }
}

/// Compact model description; [`ModelSpec::resolve`] expands it into a full
/// [`ModelConfig`] once the dataset's attributes and vocabulary are known.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Token width `d` shared by every encoder.
    pub token_dim: usize,
    pub heads: usize,
    pub image: ImageSpec,
    pub video: VideoSpec,
    pub text: TextSpec,
    pub fusion: FusionConfig,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            token_dim: 32,
            heads: 2,
            image: ImageSpec::default(),
            video: VideoSpec::default(),
            text: TextSpec::default(),
            fusion: FusionConfig::default(),
            dropout: 0.0,
            init_std: 0.02,
        }
    }
}

impl ModelSpec {
    pub fn resolve(&self, modalities: &[Modality], vocab_size: Option<usize>) -> Result<ModelConfig> {
        let d = self.token_dim;
        let enc = |blocks: usize, max_len: usize| {
            let mut e = EncoderConfig::new(d, self.heads, blocks, max_len);
            e.dropout = self.dropout;
            e
        };
        let image_cfg = |h: usize, w: usize, p: usize, blocks: usize| ImageEncoderConfig {
            height: h,
            width: w,
            patch: p,
            encoder: enc(blocks, if p == 0 { 1 } else { (h / p) * (w / p) + 1 }),
        };
        let attributes = modalities
            .iter()
            .map(|m| {
                Ok(match m {
                    Modality::Image => AttributeConfig::Image(image_cfg(
                        self.image.height,
                        self.image.width,
                        self.image.patch,
                        self.image.blocks,
                    )),
                    Modality::Video => AttributeConfig::Video(VideoEncoderConfig {
                        frame: image_cfg(
                            self.video.height,
                            self.video.width,
                            self.video.patch,
                            self.video.frame_blocks,
                        ),
                        temporal: enc(self.video.temporal_blocks, self.video.clip_len + 1),
                        clip_len: self.video.clip_len,
                    }),
                    Modality::Text => AttributeConfig::Text(TextEncoderConfig {
                        vocab_size: vocab_size
                            .ok_or_else(|| Error::Config("text attribute without a vocabulary".into()))?,
                        max_len: self.text.max_len,
                        positions: self.text.positions,
                        encoder: enc(self.text.blocks, self.text.max_len + 1),
                    }),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = ModelConfig {
            attributes,
            fusion: self.fusion.clone(),
            init_std: self.init_std,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub enum AttributeEncoder {
    Image(ImageEncoder),
    Video(VideoEncoder),
    Text(TextEncoder),
}

/// An item's content, one payload per configured attribute, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub attributes: Vec<Payload>,
}

/// Per-item inference vectors: one row per sampled segment (a single row
/// for items without video). An item's score is the max over its rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemTable {
    pub ids: Vec<String>,
    pub segments: Vec<Tensor>,
}

impl ItemTable {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// A plain `N × D` table, one vector per item.
    pub fn from_matrix(ids: Vec<String>, matrix: &Tensor) -> Result<Self> {
        if matrix.shape().len() != 2 || matrix.rows() != ids.len() {
            return Err(Error::shape("ItemTable::from_matrix", matrix.shape(), &[ids.len()]));
        }
        let segments = (0..ids.len())
            .map(|j| Tensor::new(vec![1, matrix.cols()], matrix.row(j).to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self { ids, segments })
    }

    /// First segment of every item as an `N × D` matrix.
    pub fn first_segments(&self) -> Result<Tensor> {
        let d = self.segments.first().map_or(0, Tensor::cols);
        let mut data = Vec::with_capacity(self.len() * d);
        for s in &self.segments {
            data.extend_from_slice(s.row(0));
        }
        Tensor::new(vec![self.len(), d], data)
    }

    /// `max_s u·v_{j,s}` for every item.
    pub fn scores(&self, user: &[f64]) -> Result<Vec<f64>> {
        self.segments
            .iter()
            .map(|seg| {
                (0..seg.rows())
                    .map(|s| score(user, seg.row(s)))
                    .try_fold(f64::NEG_INFINITY, |m, x| x.map(|x| m.max(x)))
            })
            .collect()
    }
}

/// `u·v`.
pub fn score(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Contract(format!("score of lengths {} and {}", u.len(), v.len())));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum())
}

/// Deterministic per-item stream so inference does not depend on item order.
pub fn item_rng(seed: u64, item_id: &str) -> ChaCha8Rng {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(item_id.as_bytes()).finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Forward pass of one item through the item tower.
#[derive(Clone, Debug)]
pub struct ItemForward {
    /// `1 × D`.
    pub v: Var,
    pub modalities: Vec<ModalityEmbedding>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub users: Vec<String>,
    user_index: HashMap<String, usize>,
    pub user_table: ParamId,
    pub encoders: Vec<AttributeEncoder>,
    pub fusion: Fusion,
    pub vocabulary: Option<Vocabulary>,
}

const CHECKPOINT_FORMAT: &str = "coldrec-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    users: Vec<String>,
    vocabulary: Option<Vec<String>>,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Model {
    /// Fresh model; all weights drawn from `seed` in a fixed order
    /// (user table, then attributes in order, then fusion).
    pub fn new(cfg: ModelConfig, users: Vec<String>, vocabulary: Option<Vocabulary>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if users.is_empty() {
            return Err(Error::Data("no training users".into()));
        }
        let mut user_index = HashMap::with_capacity(users.len());
        for (i, u) in users.iter().enumerate() {
            if user_index.insert(u.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate user id `{u}`")));
            }
        }
        for a in &cfg.attributes {
            if let AttributeConfig::Text(t) = a {
                let v = vocabulary
                    .as_ref()
                    .ok_or_else(|| Error::Config("a text attribute needs a vocabulary".into()))?;
                if v.len() != t.vocab_size {
                    return Err(Error::schema(
                        "vocab_size",
                        format!("config says {}, vocabulary has {}", t.vocab_size, v.len()),
                    ));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let std = cfg.init_std;
        let user_table = params.normal("users", &[users.len(), cfg.item_dim()], std, &mut rng)?;
        let mut encoders = Vec::with_capacity(cfg.attributes.len());
        for (c, a) in cfg.attributes.iter().enumerate() {
            let name = format!("attr{c}");
            encoders.push(match a {
                AttributeConfig::Image(ic) => {
                    AttributeEncoder::Image(ImageEncoder::init(&mut params, &name, ic, std, &mut rng)?)
                }
                AttributeConfig::Video(vc) => {
                    AttributeEncoder::Video(VideoEncoder::init(&mut params, &name, vc, std, &mut rng)?)
                }
                AttributeConfig::Text(tc) => {
                    AttributeEncoder::Text(TextEncoder::init(&mut params, &name, tc, std, &mut rng)?)
                }
            });
        }
        let fusion = Fusion::init(
            &mut params,
            "fusion",
            &cfg.fusion,
            cfg.attributes.len(),
            cfg.token_dim(),
            std,
            &mut rng,
        )?;
        Ok(Self {
            cfg,
            params,
            users,
            user_index,
            user_table,
            encoders,
            fusion,
            vocabulary,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    /// Row `u_i` of the user table.
    pub fn user_vector(&self, i: usize) -> &[f64] {
        self.params.get(self.user_table).row(i)
    }

    /// Parameters of the item tower (everything but the user table).
    pub fn item_tower_params(&self) -> Vec<ParamId> {
        self.params.ids().filter(|&id| id != self.user_table).collect()
    }

    fn check_item(&self, item: &Item) -> Result<()> {
        let want = self.cfg.modalities();
        let got: Vec<Modality> = item.attributes.iter().map(Payload::modality).collect();
        if want != got {
            return Err(Error::Data(format!(
                "item `{}` has attributes {:?}, model expects {:?}",
                item.id, got, want
            )));
        }
        Ok(())
    }

    fn encode_static(&self, cx: &mut Ctx, c: usize, payload: &Payload) -> Result<ModalityEmbedding> {
        match (&self.encoders[c], payload) {
            (AttributeEncoder::Image(e), Payload::Image(t)) => e.encode(cx, t),
            (AttributeEncoder::Text(e), Payload::Text(ids)) => e.encode(cx, ids),
            _ => Err(Error::Contract(format!("attribute {c} is not static"))),
        }
    }

    fn video_encoder(&self, c: usize) -> Result<&VideoEncoder> {
        match &self.encoders[c] {
            AttributeEncoder::Video(v) => Ok(v),
            _ => Err(Error::Contract(format!("attribute {c} is not a video"))),
        }
    }

    /// Item tower with explicitly given clips, one per video attribute in
    /// attribute order.
    pub fn forward_item_clips(&self, cx: &mut Ctx, item: &Item, clips: &[Tensor]) -> Result<ItemForward> {
        self.check_item(item)?;
        let mut clips = clips.iter();
        let mut modalities = Vec::with_capacity(item.attributes.len());
        for (c, p) in item.attributes.iter().enumerate() {
            modalities.push(match p {
                Payload::Video(_) => {
                    let clip = clips
                        .next()
                        .ok_or_else(|| Error::Contract(format!("no clip given for video attribute {c}")))?;
                    self.video_encoder(c)?.encode_clip(cx, clip)?
                }
                other => self.encode_static(cx, c, other)?,
            });
        }
        let v = self.fusion.fuse(cx, &modalities)?;
        Ok(ItemForward { v, modalities })
    }

    /// Draws one clip per video attribute, in attribute order.
    pub fn sample_clips<R: Rng>(&self, item: &Item, rng: &mut R) -> Result<Vec<Tensor>> {
        let mut clips = Vec::new();
        for (c, p) in item.attributes.iter().enumerate() {
            if let Payload::Video(v) = p {
                let f = self.video_encoder(c)?.cfg.clip_len;
                clips.push(sample_clip(v, f, rng)?.1);
            }
        }
        Ok(clips)
    }

    /// Item tower with one freshly sampled clip per video attribute.
    pub fn forward_item<R: Rng>(&self, cx: &mut Ctx, item: &Item, rng: &mut R) -> Result<ItemForward> {
        let clips = self.sample_clips(item, rng)?;
        self.forward_item_clips(cx, item, &clips)
    }

    /// `S × D` segment embeddings of an item: static attributes are encoded
    /// once; each segment draws fresh clips. Items without video yield one row.
    pub fn item_segments<R: Rng>(&self, item: &Item, segments: usize, rng: &mut R) -> Result<Tensor> {
        if segments == 0 {
            return Err(Error::Config("at least one segment is required".into()));
        }
        self.check_item(item)?;
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.params);
        let mut fixed: Vec<Option<ModalityEmbedding>> = Vec::with_capacity(item.attributes.len());
        for (c, p) in item.attributes.iter().enumerate() {
            fixed.push(match p {
                Payload::Video(_) => None,
                other => Some(self.encode_static(&mut cx, c, other)?),
            });
        }
        let has_video = fixed.iter().any(Option::is_none);
        let s = if has_video { segments } else { 1 };
        let d = self.cfg.item_dim();
        let mut out = Vec::with_capacity(s * d);
        for _ in 0..s {
            let mut clips = self.sample_clips(item, rng)?.into_iter();
            let mut mods = Vec::with_capacity(fixed.len());
            for (c, f) in fixed.iter().enumerate() {
                mods.push(match f {
                    Some(e) => e.clone(),
                    None => self.video_encoder(c)?.encode_clip(&mut cx, &clips.next().expect("one clip per video"))?,
                });
            }
            let v = self.fusion.fuse(&mut cx, &mods)?;
            out.extend_from_slice(cx.g.value(v).data());
        }
        let t = Tensor::new(vec![s, d], out)?;
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("embedding of item `{}`", item.id)));
        }
        Ok(t)
    }

    /// Aggregated `[CLS]` embedding of every attribute, with one sampled
    /// clip per video attribute.
    pub fn modality_embeddings<R: Rng>(&self, item: &Item, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let mut cx = Ctx::new(&mut g, &self.params);
        let f = self.forward_item(&mut cx, item, rng)?;
        Ok(f.modalities.iter().map(|m| cx.g.value(m.aggregated).data().to_vec()).collect())
    }

    /// Segment-max score: `max_s u·v_{j_s}` over `segments` sampled clips.
    pub fn infer_item_video<R: Rng>(&self, item: &Item, user: &[f64], segments: usize, rng: &mut R) -> Result<f64> {
        if !item.attributes.iter().any(|p| matches!(p, Payload::Video(_))) {
            return Err(Error::Data(format!("item `{}` has no video attribute", item.id)));
        }
        let seg = self.item_segments(item, segments, rng)?;
        (0..seg.rows())
            .map(|s| score(user, seg.row(s)))
            .try_fold(f64::NEG_INFINITY, |m, x| x.map(|x| m.max(x)))
    }

    /// Single forward pass over full payloads: `u·v_j`.
    pub fn infer_item_static(&self, item: &Item, user: &[f64]) -> Result<f64> {
        if item.attributes.iter().any(|p| matches!(p, Payload::Video(_))) {
            return Err(Error::Data(format!("item `{}` has a video attribute", item.id)));
        }
        let v = self.item_segments(item, 1, &mut ChaCha8Rng::seed_from_u64(0))?;
        score(user, v.row(0))
    }

    /// Inference vectors for a set of items, encoded in parallel. Clip
    /// sampling is keyed on `(seed, item id)`, so results do not depend on
    /// the order of `items`.
    pub fn item_table(&self, items: &[&Item], segments: usize, seed: u64) -> Result<ItemTable> {
        let segs = items
            .par_iter()
            .map(|it| self.item_segments(it, segments, &mut item_rng(seed, &it.id)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ItemTable {
            ids: items.iter().map(|it| it.id.clone()).collect(),
            segments: segs,
        })
    }

    /// Top-`K` items of `table` for a user vector.
    pub fn recommend_topk(&self, user_id: &str, user: &[f64], table: &ItemTable, k: usize) -> Result<RankedList> {
        recommend_topk(user_id, user, table, k)
    }

    /// All learnable tensors in declaration order.
    fn tensor_list(&self) -> Vec<(String, ParamId)> {
        self.params.ids().map(|id| (self.params.name(id).to_string(), id)).collect()
    }

    /// JSON header line followed by the parameters as f64 tensor records,
    /// so a reload is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            config: self.cfg.clone(),
            users: self.users.clone(),
            vocabulary: self.vocabulary.as_ref().map(|v| v.tokens().to_vec()),
            tensors: self
                .tensor_list()
                .into_iter()
                .map(|(n, id)| (n, self.params.get(id).shape().to_vec()))
                .collect(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (_, id) in self.tensor_list() {
            write_tensor(w, self.params.get(id), Precision::F64)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(std::fs::File::open(path)?))
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != 1 {
            return Err(Error::Format(format!(
                "not a version-1 checkpoint ({} v{})",
                header.format, header.version
            )));
        }
        let vocab = header.vocabulary.map(Vocabulary::from_tokens).transpose()?;
        let mut model = Model::new(header.config, header.users, vocab, 0)?;
        let expected = model.tensor_list();
        if expected.len() != header.tensors.len() {
            return Err(Error::schema(
                "tensors",
                format!("checkpoint has {}, config implies {}", header.tensors.len(), expected.len()),
            ));
        }
        for ((name, id), (hname, hshape)) in expected.into_iter().zip(header.tensors) {
            if name != hname || model.params.get(id).shape() != hshape.as_slice() {
                return Err(Error::schema(name, format!("stored as `{hname}` {hshape:?}")));
            }
            let (t, _) = read_tensor(r)?;
            if t.shape() != hshape.as_slice() {
                return Err(Error::schema(name, format!("record shape {:?}", t.shape())));
            }
            model.params.set_value(id, t.data())?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(model)
    }
}

/// Sorted by score descending, ties by ascending item id, truncated to `K`.
pub fn recommend_topk(user_id: &str, user: &[f64], table: &ItemTable, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::Usage("K must be at least 1".into()));
    }
    if table.is_empty() {
        return Err(Error::Data("no candidate items".into()));
    }
    let scores = table.scores(user)?;
    rank(user_id, &table.ids, &scores, k)
}
