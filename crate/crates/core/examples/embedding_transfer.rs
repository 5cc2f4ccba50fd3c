//! Trains on one synthetic population, exports item embeddings for a second
//! population that shares only the content map, and evaluates them with a
//! user table fitted from scratch.
//!
//! cargo run --release --example embedding_transfer

use coldrec::cli::{cmd_embed, cmd_eval_external, cmd_synth, cmd_train, RunConfig, CHECKPOINT_FILE};
use coldrec::data::SplitName;
use coldrec::eval::Metric;
use coldrec::model::{ImageSpec, TextSpec};

fn main() -> coldrec::Result<()> {
    let dir = tempfile::tempdir()?;
    let (a, b, run) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("run"));
    let mut cfg = RunConfig::default();
    cfg.synth.image_size = 16;
    cfg.synth.content_seed = Some(42);
    cfg.model.token_dim = 16;
    cfg.model.image = ImageSpec {
        height: 16,
        width: 16,
        patch: 8,
        blocks: 1,
    };
    cfg.model.text = TextSpec {
        max_len: 12,
        blocks: 1,
        ..TextSpec::default()
    };
    cfg.model.fusion.item_dim = 16;
    cfg.model.init_std = 0.1;
    cfg.train.lr_peak = 1e-2;
    cfg.train.epochs = 15;
    cfg.train.segments = 1;
    cfg.eval.segments = 1;
    cmd_synth(&cfg, &a)?;
    cmd_train(&cfg, &a, &run)?;

    let mut other = cfg.clone();
    other.synth.seed = 99;
    other.split.ratios = (0.5, 0.0, 0.5);
    cmd_synth(&other, &b)?;
    let emb = dir.path().join("b.emb");
    let (ids, matrix) = cmd_embed(&other, &run.join(CHECKPOINT_FILE), &b, &emb)?;
    println!("exported {} × {} embeddings", ids.len(), matrix.cols());
    let report = cmd_eval_external(&other, &emb, &b, None, SplitName::Test, &dir.path().join("ext"))?;
    println!(
        "population B: recall@10 {:.3}, ndcg@10 {:.3} over {} users",
        report.get(Metric::Recall, 10).unwrap(),
        report.get(Metric::Ndcg, 10).unwrap(),
        report.users
    );
    Ok(())
}
