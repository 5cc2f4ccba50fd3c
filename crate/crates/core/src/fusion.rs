//! Combines per-attribute embeddings into one item vector of width `D`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::ModalityEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, ParamStore, Var};
use crate::transformer::{with_cls, EncoderConfig, EncoderStack, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Concatenate aggregated embeddings, then an MLP.
    Late,
    /// Joint attention over all attributes' tokens.
    Early,
    /// `early_attributes` go through joint attention; the rest are
    /// concatenated after it.
    Mixed,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "late" => Ok(FusionKind::Late),
            "early" => Ok(FusionKind::Early),
            "mixed" => Ok(FusionKind::Mixed),
            other => Err(Error::Config(format!("unknown fusion kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Fully-connected layers after pooling/concatenation: 0, 1 or 2.
    pub mlp_layers: usize,
    /// Item embedding width `D`.
    pub item_dim: usize,
    /// Early path: aggregate via a fusion `[CLS]` (else mean of tokens).
    pub early_use_cls: bool,
    pub early_blocks: usize,
    pub early_heads: usize,
    /// Attribute indices routed to the early path when `kind == mixed`.
    pub early_attributes: Vec<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kind: FusionKind::Late,
            mlp_layers: 1,
            item_dim: 32,
            early_use_cls: true,
            early_blocks: 1,
            early_heads: 2,
            early_attributes: Vec::new(),
        }
    }
}

impl FusionConfig {
    /// Attribute indices taking the early path, in attribute order.
    pub fn early_set(&self, num_attrs: usize) -> Vec<usize> {
        match self.kind {
            FusionKind::Late => Vec::new(),
            FusionKind::Early => (0..num_attrs).collect(),
            FusionKind::Mixed => {
                let mut v = self.early_attributes.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }

    /// Width of the vector entering the MLP head.
    pub fn head_input_width(&self, num_attrs: usize, d: usize) -> usize {
        let early = self.early_set(num_attrs).len();
        let late = num_attrs - early;
        (usize::from(early > 0) + late) * d
    }

    pub fn validate(&self, num_attrs: usize, d: usize) -> Result<()> {
        if num_attrs == 0 {
            return Err(Error::Config("an item needs at least one attribute".into()));
        }
        if self.item_dim == 0 {
            return Err(Error::Config("item_dim must be positive".into()));
        }
        if self.mlp_layers > 2 {
            return Err(Error::Config(format!("mlp_layers must be 0, 1 or 2, got {}", self.mlp_layers)));
        }
        if self.kind == FusionKind::Mixed {
            if self.early_attributes.is_empty() {
                return Err(Error::Config("mixed fusion needs early_attributes".into()));
            }
            if let Some(bad) = self.early_attributes.iter().find(|&&c| c >= num_attrs) {
                return Err(Error::Config(format!("early attribute {bad} out of range")));
            }
        }
        if self.kind != FusionKind::Late && (self.early_blocks == 0 || self.early_heads == 0 || !d.is_multiple_of(self.early_heads)) {
            return Err(Error::Config(format!(
                "early fusion needs blocks >= 1 and heads dividing d={d}"
            )));
        }
        let width = self.head_input_width(num_attrs, d);
        if self.mlp_layers == 0 && self.item_dim != width {
            return Err(Error::Config(format!(
                "without MLP layers item_dim must equal the fused width {width}, got {}",
                self.item_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EarlyHead {
    pub attributes: Vec<usize>,
    /// Learned per-attribute offsets added to that attribute's tokens.
    pub type_embeddings: Vec<ParamId>,
    pub cls: Option<ParamId>,
    pub stack: EncoderStack,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub num_attrs: usize,
    pub token_dim: usize,
    pub early: Option<EarlyHead>,
    pub mlp: Vec<Linear>,
}

impl Fusion {
    pub fn init<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &FusionConfig,
        num_attrs: usize,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(num_attrs, d)?;
        let attrs = cfg.early_set(num_attrs);
        let early = if attrs.is_empty() {
            None
        } else {
            let enc = EncoderConfig::new(d, cfg.early_heads, cfg.early_blocks, usize::MAX);
            let type_embeddings = attrs
                .iter()
                .map(|c| ps.normal(format!("{name}.type{c}"), &[d], std, rng))
                .collect::<Result<_>>()?;
            let cls = if cfg.early_use_cls {
                Some(ps.normal(format!("{name}.cls"), &[d], std, rng)?)
            } else {
                None
            };
            Some(EarlyHead {
                attributes: attrs,
                type_embeddings,
                cls,
                stack: EncoderStack::init(ps, &format!("{name}.joint"), &enc, std, rng)?,
            })
        };
        let mut width = cfg.head_input_width(num_attrs, d);
        let mut mlp = Vec::with_capacity(cfg.mlp_layers);
        for l in 0..cfg.mlp_layers {
            mlp.push(Linear::init(ps, &format!("{name}.mlp{l}"), width, cfg.item_dim, std, rng)?);
            width = cfg.item_dim;
        }
        Ok(Self {
            cfg: cfg.clone(),
            num_attrs,
            token_dim: d,
            early,
            mlp,
        })
    }

    fn check(&self, cx: &Ctx, embs: &[ModalityEmbedding]) -> Result<()> {
        if embs.len() != self.num_attrs {
            return Err(Error::Contract(format!(
                "fusion expects {} attributes, got {}",
                self.num_attrs,
                embs.len()
            )));
        }
        for (c, e) in embs.iter().enumerate() {
            if cx.g.shape(e.aggregated) != [1, self.token_dim] {
                return Err(Error::Contract(format!(
                    "attribute {c} embedding has shape {:?}, expected [1, {}]",
                    cx.g.shape(e.aggregated),
                    self.token_dim
                )));
            }
        }
        Ok(())
    }

    fn early_head(&self) -> Result<&EarlyHead> {
        self.early
            .as_ref()
            .ok_or_else(|| Error::Contract("no early-fusion head configured".into()))
    }

    /// The joint token sequence of the early attributes (type offsets added,
    /// fusion `[CLS]` prepended when configured) and its key mask.
    pub fn joint_sequence(&self, cx: &mut Ctx, embs: &[ModalityEmbedding]) -> Result<(Var, Vec<bool>)> {
        let head = self.early_head()?;
        let mut parts = Vec::with_capacity(head.attributes.len());
        let mut keep = Vec::new();
        for (&c, &ty) in head.attributes.iter().zip(&head.type_embeddings) {
            let e = &embs[c];
            let t = cx.p(ty);
            parts.push(cx.g.add_row(e.tokens, t)?);
            let n = cx.g.shape(e.tokens)[0];
            match &e.keep {
                Some(k) => keep.extend_from_slice(k),
                None => keep.extend(std::iter::repeat_n(true, n)),
            }
        }
        if keep.is_empty() {
            return Err(Error::Input("early fusion over an empty joint sequence".into()));
        }
        let joint = cx.g.concat_rows(&parts)?;
        match head.cls {
            Some(cls) => {
                keep.insert(0, true);
                let cls = cx.p(cls);
                Ok((with_cls(cx.g, Some(joint), cls)?, keep))
            }
            None => Ok((joint, keep)),
        }
    }

    /// Joint encoding of the early attributes' tokens, pooled to `1 × d`.
    pub fn early_pool(&self, cx: &mut Ctx, embs: &[ModalityEmbedding]) -> Result<Var> {
        let (seq, keep) = self.joint_sequence(cx, embs)?;
        let head = self.early_head()?;
        let all = keep.iter().all(|&k| k);
        let out = head.stack.forward(cx, seq, if all { None } else { Some(&keep) })?;
        if head.cls.is_some() {
            cx.g.slice_rows(out, 0, 1)
        } else if all {
            cx.g.mean_rows(out)
        } else {
            let rows: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
            let kept = cx.g.gather_rows(out, &rows)?;
            cx.g.mean_rows(kept)
        }
    }

    /// The pre-MLP vector: the early-path pool (if any) followed by the
    /// remaining attributes' aggregated embeddings in attribute order.
    pub fn head_input(&self, cx: &mut Ctx, embs: &[ModalityEmbedding]) -> Result<Var> {
        self.check(cx, embs)?;
        let mut parts = Vec::with_capacity(self.num_attrs);
        let early = self.early.as_ref().map(|h| h.attributes.clone()).unwrap_or_default();
        if !early.is_empty() {
            parts.push(self.early_pool(cx, embs)?);
        }
        for (c, e) in embs.iter().enumerate() {
            if !early.contains(&c) {
                parts.push(e.aggregated);
            }
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            cx.g.concat_cols(&parts)
        }
    }

    /// MLP head over a `rows × width` input; GELU between layers, none after the last.
    pub fn head(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, layer) in self.mlp.iter().enumerate() {
            if l > 0 {
                h = cx.g.gelu(h)?;
            }
            h = layer.forward(cx, h)?;
        }
        Ok(h)
    }

    /// Item representation `v_j`, `1 × D`.
    pub fn fuse(&self, cx: &mut Ctx, embs: &[ModalityEmbedding]) -> Result<Var> {
        let x = self.head_input(cx, embs)?;
        self.head(cx, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Fake encoder output: token rows with row 0 doubling as the aggregate.
    fn emb(g: &mut Graph, tokens: Tensor) -> ModalityEmbedding {
        let t = g.constant(tokens);
        let a = g.slice_rows(t, 0, 1).unwrap();
        ModalityEmbedding {
            aggregated: a,
            tokens: t,
            keep: None,
        }
    }

    fn cfg(kind: FusionKind, mlp_layers: usize, item_dim: usize, cls: bool) -> FusionConfig {
        FusionConfig {
            kind,
            mlp_layers,
            item_dim,
            early_use_cls: cls,
            ..FusionConfig::default()
        }
    }

    #[test]
    fn late_identity_configuration() {
        let mut ps = ParamStore::new();
        let f = Fusion::init(&mut ps, "f", &cfg(FusionKind::Late, 0, 4, true), 1, 4, 0.1, &mut rng()).unwrap();
        let mut g = Graph::new();
        let z = Tensor::from_rows(&[vec![1.0, -2.0, 3.0, 0.5]]).unwrap();
        let e = emb(&mut g, z.clone());
        let mut cx = Ctx::new(&mut g, &ps);
        let v = f.fuse(&mut cx, &[e]).unwrap();
        assert_eq!(cx.g.value(v).data(), z.data());
    }

    #[test]
    fn late_concatenation_order() {
        let mut ps = ParamStore::new();
        let f = Fusion::init(&mut ps, "f", &cfg(FusionKind::Late, 1, 5, true), 2, 3, 0.1, &mut rng()).unwrap();
        let mut g = Graph::new();
        let a = emb(&mut g, Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let b = emb(&mut g, Tensor::from_rows(&[vec![4.0, 5.0, 6.0]]).unwrap());
        let mut cx = Ctx::new(&mut g, &ps);
        let x = f.head_input(&mut cx, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(cx.g.value(x).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let swapped = f.head_input(&mut cx, &[b, a]).unwrap();
        assert_ne!(cx.g.value(swapped).data(), cx.g.value(x).data());
    }

    #[test]
    fn late_single_layer_matches_manual() {
        let mut ps = ParamStore::new();
        let f = Fusion::init(&mut ps, "f", &cfg(FusionKind::Late, 1, 4, true), 2, 3, 0.3, &mut rng()).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let (za, zb) = (random(&mut r, 1, 3), random(&mut r, 1, 3));
        let mut g = Graph::new();
        let a = emb(&mut g, za.clone());
        let b = emb(&mut g, zb.clone());
        let mut cx = Ctx::new(&mut g, &ps);
        let v = f.fuse(&mut cx, &[a, b]).unwrap();
        let x: Vec<f64> = za.data().iter().chain(zb.data()).copied().collect();
        let (w, bias) = (ps.get(f.mlp[0].w), ps.get(f.mlp[0].b));
        for o in 0..4 {
            let manual: f64 = (0..6).map(|i| x[i] * w.at(i, o)).sum::<f64>() + bias.data()[o];
            assert!((cx.g.value(v).data()[o] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_sequence_length() {
        let mut ps = ParamStore::new();
        let f = Fusion::init(&mut ps, "f", &cfg(FusionKind::Early, 0, 4, true), 2, 4, 0.1, &mut rng()).unwrap();
        let mut r = rng();
        let mut g = Graph::new();
        let a = emb(&mut g, random(&mut r, 3, 4));
        let b = emb(&mut g, random(&mut r, 5, 4));
        let mut cx = Ctx::new(&mut g, &ps);
        let (seq, keep) = f.joint_sequence(&mut cx, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(cx.g.shape(seq), &[9, 4]);
        assert_eq!(keep.len(), 9);
        let v = f.fuse(&mut cx, &[a, b]).unwrap();
        assert_eq!(cx.g.shape(v), &[1, 4]);
    }

    #[test]
    fn zeroed_joint_block_returns_cls() {
        let mut ps = ParamStore::new();
        let f = Fusion::init(&mut ps, "f", &cfg(FusionKind::Early, 0, 4, true), 2, 4, 0.1, &mut rng()).unwrap();
        for b in &f.early.as_ref().unwrap().stack.blocks {
            for id in b.sublayer_outputs() {
                let n = ps.get(id).numel();
                ps.set_value(id, &vec![0.0; n]).unwrap();
            }
        }
        let mut r = rng();
        let mut g = Graph::new();
        let a = emb(&mut g, random(&mut r, 3, 4));
        let b = emb(&mut g, random(&mut r, 2, 4));
        let mut cx = Ctx::new(&mut g, &ps);
        let v = f.fuse(&mut cx, &[a, b]).unwrap();
        let cls = ps.get(f.early.as_ref().unwrap().cls.unwrap());
        for (x, y) in cx.g.value(v).data().iter().zip(cls.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_modality_reduces_to_one_extra_block() {
        let mut ps = ParamStore::new();
        let f = Fusion::init(&mut ps, "f", &cfg(FusionKind::Early, 0, 4, true), 1, 4, 0.2, &mut rng()).unwrap();
        let head = f.early.clone().unwrap();
        ps.set_value(head.type_embeddings[0], &[0.0; 4]).unwrap();
        let tokens = random(&mut rng(), 3, 4);
        let mut g = Graph::new();
        let e = emb(&mut g, tokens);
        let mut cx = Ctx::new(&mut g, &ps);
        let v = f.fuse(&mut cx, std::slice::from_ref(&e)).unwrap();
        let cls = cx.p(head.cls.unwrap());
        let seq = with_cls(cx.g, Some(e.tokens), cls).unwrap();
        let out = head.stack.forward(&mut cx, seq, None).unwrap();
        let manual = cx.g.slice_rows(out, 0, 1).unwrap();
        assert_eq!(cx.g.value(v), cx.g.value(manual));
    }

    #[test]
    fn mean_pooling_matches_explicit_average() {
        let mut ps = ParamStore::new();
        let f = Fusion::init(&mut ps, "f", &cfg(FusionKind::Early, 0, 4, false), 2, 4, 0.2, &mut rng()).unwrap();
        let head = f.early.clone().unwrap();
        let mut r = rng();
        let mut g = Graph::new();
        let a = emb(&mut g, random(&mut r, 2, 4));
        let b = emb(&mut g, random(&mut r, 3, 4));
        let mut cx = Ctx::new(&mut g, &ps);
        let v = f.fuse(&mut cx, &[a.clone(), b.clone()]).unwrap();
        let ta = cx.p(head.type_embeddings[0]);
        let tb = cx.p(head.type_embeddings[1]);
        let xa = cx.g.add_row(a.tokens, ta).unwrap();
        let xb = cx.g.add_row(b.tokens, tb).unwrap();
        let joint = cx.g.concat_rows(&[xa, xb]).unwrap();
        let out = head.stack.forward(&mut cx, joint, None).unwrap();
        let out = cx.g.value(out).clone();
        for c in 0..4 {
            let avg = (0..5).map(|t| out.at(t, c)).sum::<f64>() / 5.0;
            assert!((cx.g.value(v).data()[c] - avg).abs() < 1e-12);
        }
    }

    #[test]
    fn output_width_is_item_dim_across_the_lattice() {
        for kind in [FusionKind::Late, FusionKind::Early, FusionKind::Mixed] {
            for layers in 0..=2 {
                for cls in [true, false] {
                    let d = 4;
                    let mut c = cfg(kind, layers, 6, cls);
                    c.early_attributes = vec![1];
                    if layers == 0 {
                        c.item_dim = c.head_input_width(2, d);
                    }
                    let mut ps = ParamStore::new();
                    let f = Fusion::init(&mut ps, "f", &c, 2, d, 0.1, &mut rng()).unwrap();
                    let mut r = rng();
                    let mut g = Graph::new();
                    let a = emb(&mut g, random(&mut r, 2, d));
                    let b = emb(&mut g, random(&mut r, 3, d));
                    let mut cx = Ctx::new(&mut g, &ps);
                    let v = f.fuse(&mut cx, &[a, b]).unwrap();
                    assert_eq!(cx.g.shape(v), &[1, c.item_dim], "{kind:?} {layers} {cls}");
                    assert!(cx.g.value(v).is_finite());
                }
            }
        }
    }

    #[test]
    fn inconsistent_dimensions_are_rejected() {
        let mut ps = ParamStore::new();
        assert!(Fusion::init(&mut ps, "a", &cfg(FusionKind::Late, 0, 5, true), 2, 3, 0.1, &mut rng()).is_err());
        assert!(Fusion::init(&mut ps, "b", &cfg(FusionKind::Early, 0, 6, true), 2, 3, 0.1, &mut rng()).is_err());
        assert!(Fusion::init(&mut ps, "c", &cfg(FusionKind::Late, 3, 6, true), 2, 3, 0.1, &mut rng()).is_err());
        let f = Fusion::init(&mut ps, "d", &cfg(FusionKind::Late, 1, 6, true), 2, 3, 0.1, &mut rng()).unwrap();
        let mut g = Graph::new();
        let a = emb(&mut g, Tensor::zeros(&[1, 4]));
        let mut cx = Ctx::new(&mut g, &ps);
        assert!(matches!(f.fuse(&mut cx, &[a.clone(), a]), Err(Error::Contract(_))));
    }
}
