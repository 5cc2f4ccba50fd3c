//! Trains briefly, saves a checkpoint, reloads it and confirms the reloaded
//! model ranks validation items identically.

use coldrec::data::{synth_generate, InteractionSet, SplitName, SynthConfig, RATING_THRESHOLD};
use coldrec::eval::Metric;
use coldrec::fusion::FusionConfig;
use coldrec::model::{ImageSpec, Model, ModelSpec, TextSpec};
use coldrec::pipeline::{Prepared, SplitConfig};
use coldrec::train::{evaluate_split, train_loop, TrainConfig};

fn main() -> coldrec::Result<()> {
    let data = synth_generate(&SynthConfig {
        users: 60,
        items: 80,
        density: 0.08,
        image_size: 8,
        vocab_size: 16,
        text_len: 6,
        ..SynthConfig::default()
    })?;
    let xs = InteractionSet::ingest(&data.ratings, RATING_THRESHOLD);
    let spec = ModelSpec {
        token_dim: 8,
        image: ImageSpec {
            height: 8,
            width: 8,
            patch: 4,
            blocks: 1,
        },
        text: TextSpec {
            max_len: 6,
            blocks: 1,
            ..TextSpec::default()
        },
        fusion: FusionConfig {
            item_dim: 8,
            ..FusionConfig::default()
        },
        ..ModelSpec::default()
    };
    let split = SplitConfig {
        ratios: (0.7, 0.15, 0.15),
        ..SplitConfig::default()
    };
    let prep = Prepared::new(&xs, &data.content, &spec, &split)?;
    let cfg = TrainConfig {
        epochs: 3,
        warmup_epochs: 1.0,
        segments: 1,
        ..TrainConfig::default()
    };
    let out = train_loop(prep.model(0)?, prep.data(), &cfg)?;
    let path = std::env::temp_dir().join("coldrec-example.ckpt");
    out.model.save(&path)?;
    let loaded = Model::load(&path)?;
    let ndcg = |m: &Model| -> coldrec::Result<f64> {
        Ok(evaluate_split(m, prep.data(), SplitName::Val, &[10], 1, 0)?
            .get(Metric::Ndcg, 10)
            .unwrap())
    };
    println!(
        "{} bytes; val ndcg@10 in memory {:.9}, reloaded {:.9}",
        std::fs::metadata(&path)?.len(),
        ndcg(&out.model)?,
        ndcg(&loaded)?
    );
    std::fs::remove_file(path)?;
    Ok(())
}
