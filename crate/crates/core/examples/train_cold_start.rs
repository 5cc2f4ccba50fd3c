//! Trains the two-tower model on a synthetic dataset and ranks cold test
//! items it never saw during training.
//!
//! cargo run --release --example train_cold_start

use coldrec::data::{synth_generate, InteractionSet, SplitName, SynthConfig, RATING_THRESHOLD};
use coldrec::eval::Metric;
use coldrec::model::{ImageSpec, ModelSpec, TextSpec};
use coldrec::pipeline::{Prepared, SplitConfig};
use coldrec::train::{evaluate_split, train_loop_with, TrainConfig};

fn main() -> coldrec::Result<()> {
    let data = synth_generate(&SynthConfig {
        image_size: 16,
        ..SynthConfig::default()
    })?;
    let xs = InteractionSet::ingest(&data.ratings, RATING_THRESHOLD);
    let spec = ModelSpec {
        token_dim: 16,
        image: ImageSpec {
            height: 16,
            width: 16,
            patch: 8,
            blocks: 1,
        },
        text: TextSpec {
            max_len: 12,
            blocks: 1,
            ..TextSpec::default()
        },
        init_std: 0.1,
        ..ModelSpec::default()
    };
    let prep = Prepared::new(&xs, &data.content, &spec, &SplitConfig::default())?;
    println!(
        "{} users; items train/val/test {}/{}/{}",
        prep.split.users.len(),
        prep.split.train_items.len(),
        prep.split.val_items.len(),
        prep.split.test_items.len()
    );
    let cfg = TrainConfig {
        lr_peak: 1e-2,
        epochs: 20,
        segments: 1,
        ..TrainConfig::default()
    };
    let untrained = prep.model(cfg.seed)?;
    let before = evaluate_split(&untrained, prep.data(), SplitName::Test, &[10], 1, 0)?;
    let out = train_loop_with(untrained, prep.data(), &cfg, &mut |r| {
        println!(
            "epoch {:>2}  loss {:.4}  val ndcg@10 {:.4}",
            r.epoch,
            r.loss,
            r.val_ndcg10.unwrap_or(f64::NAN)
        )
    })?;
    let after = evaluate_split(&out.model, prep.data(), SplitName::Test, &[10], 1, 0)?;
    println!(
        "cold test recall@10: untrained {:.3} → trained {:.3} (best epoch {:?})",
        before.get(Metric::Recall, 10).unwrap(),
        after.get(Metric::Recall, 10).unwrap(),
        out.best_epoch
    );
    Ok(())
}
