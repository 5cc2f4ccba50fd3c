//! Scores a video item by the max over several sampled clips and shows the
//! per-clip scores it came from.

use coldrec::encoders::{Modality, Payload};
use coldrec::fusion::FusionConfig;
use coldrec::model::{score, Item, Model, ModelSpec, VideoSpec};
use coldrec::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> coldrec::Result<()> {
    let spec = ModelSpec {
        token_dim: 8,
        video: VideoSpec {
            height: 8,
            width: 8,
            patch: 4,
            frame_blocks: 1,
            temporal_blocks: 1,
            clip_len: 3,
        },
        fusion: FusionConfig {
            item_dim: 4,
            ..FusionConfig::default()
        },
        init_std: 0.3,
        ..ModelSpec::default()
    };
    let model = Model::new(spec.resolve(&[Modality::Video], None)?, vec!["u".into()], None, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames = Tensor::new(vec![20, 8, 8, 3], (0..20 * 192).map(|_| rng.gen::<f64>()).collect())?;
    let item = Item {
        id: "trailer".into(),
        attributes: vec![Payload::Video(frames)],
    };
    let user = [0.5, -1.0, 0.25, 2.0];
    let segments = model.item_segments(&item, 5, &mut ChaCha8Rng::seed_from_u64(9))?;
    for s in 0..segments.rows() {
        println!("clip {s}: score {:+.5}", score(&user, segments.row(s))?);
    }
    let best = model.infer_item_video(&item, &user, 5, &mut ChaCha8Rng::seed_from_u64(9))?;
    println!("segment-max score {best:+.5}");
    Ok(())
}
