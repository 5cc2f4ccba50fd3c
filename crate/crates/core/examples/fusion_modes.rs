//! Builds late, early and mixed fusion over the same three attributes and
//! encodes one item with each.

use coldrec::encoders::{tokenize, Modality, Payload, Vocabulary};
use coldrec::fusion::{FusionConfig, FusionKind};
use coldrec::model::{ImageSpec, Item, Model, ModelSpec, TextSpec, VideoSpec};
use coldrec::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> coldrec::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pixels = |shape: Vec<usize>| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>()).collect())
    };
    let vocab = Vocabulary::build(["a quiet drama about two brothers"], 1, None);
    let item = Item {
        id: "movie".into(),
        attributes: vec![
            Payload::Video(pixels(vec![12, 8, 8, 3])?),
            Payload::Image(pixels(vec![8, 8, 3])?),
            Payload::Text(tokenize("a quiet drama about two brothers", &vocab, 8)),
        ],
    };
    let modalities = [Modality::Video, Modality::Image, Modality::Text];
    for (kind, early) in [
        (FusionKind::Late, vec![]),
        (FusionKind::Early, vec![]),
        (FusionKind::Mixed, vec![0, 2]),
    ] {
        let spec = ModelSpec {
            token_dim: 8,
            image: ImageSpec {
                height: 8,
                width: 8,
                patch: 4,
                blocks: 1,
            },
            video: VideoSpec {
                height: 8,
                width: 8,
                patch: 4,
                frame_blocks: 1,
                temporal_blocks: 1,
                clip_len: 4,
            },
            text: TextSpec {
                max_len: 8,
                blocks: 1,
                ..TextSpec::default()
            },
            fusion: FusionConfig {
                kind,
                item_dim: 6,
                early_attributes: early,
                ..FusionConfig::default()
            },
            ..ModelSpec::default()
        };
        let cfg = spec.resolve(&modalities, Some(vocab.len()))?;
        let model = Model::new(cfg, vec!["u".into()], Some(vocab.clone()), 0)?;
        let v = model.item_segments(&item, 3, &mut ChaCha8Rng::seed_from_u64(2))?;
        println!(
            "{kind:?}: {} parameters, {} segment vectors of width {}",
            model.params.num_scalars(),
            v.rows(),
            v.cols()
        );
    }
    Ok(())
}
