//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! output. Pass criterion numbers as arguments to run a subset. The process
//! fails if any criterion's asserted level is not met; a criterion that is
//! unattainable as stated prints FAIL with the reason and asserts the
//! attainable part instead.

use std::collections::{BTreeSet, HashSet};
use std::time::Instant;

use coldrec::cli::{cmd_embed, cmd_eval_external, cmd_synth, cmd_train, RunConfig, CHECKPOINT_FILE};
use coldrec::data::{
    cold_split, filter_users, load_dataset, read_manifest, read_ratings_tsv, synth_generate, write_manifest,
    write_ratings_tsv, write_synth, InteractionSet, RawContent, SplitName, SynthConfig, INTERACTIONS_FILE,
    MANIFEST_FILE,
};
use coldrec::encoders::{Modality, Payload, Vocabulary};
use coldrec::eval::{ndcg_at_k, precision_at_k, rank, recall_at_k, Metric};
use coldrec::fusion::{FusionConfig, FusionKind};
use coldrec::model::{score, ImageSpec, Item, Model, ModelSpec, TextSpec, VideoSpec};
use coldrec::objective::{multimodal_alignment_loss, rating_ranking_loss, LossConfig, Minibatch, Positives};
use coldrec::pipeline::{Prepared, SplitConfig};
use coldrec::tensor::io::{load_crt1, save_crt1};
use coldrec::tensor::{Ctx, Graph, Tensor};
use coldrec::train::{batch_objective, evaluate_split, train_loop, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

struct Verdict {
    /// The criterion as stated holds.
    pass: bool,
    /// The asserted level holds (equals `pass` unless documented otherwise).
    ok: bool,
    detail: String,
}

impl Verdict {
    fn strict(pass: bool, detail: String) -> Self {
        Self { pass, ok: pass, detail }
    }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Res<Verdict>); 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "loss identities", c2_loss_identities),
        (3, "metric oracle equivalence", c3_metric_oracles),
        (4, "synthetic cold-start", c4_cold_start),
        (5, "modality ablation direction", c5_ablation),
        (6, "alignment effect", c6_alignment),
        (7, "segment-max contract", c7_segment_max),
        (8, "false-negative filter neutrality", c8_filter_neutrality),
        (9, "transfer protocol", c9_transfer),
        (10, "determinism and round trips", c10_determinism),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let v = f().unwrap_or_else(|e| Verdict::strict(false, format!("error: {e}")));
        let secs = t0.elapsed().as_secs_f64();
        println!(
            "{} criterion {n:>2} ({name}): {} [{secs:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.ok {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        eprintln!("acceptance: asserted level not met for criteria {failed:?}");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- fixtures

fn small_spec(kind: FusionKind) -> ModelSpec {
    ModelSpec {
        token_dim: 16,
        heads: 2,
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
        fusion: FusionConfig {
            kind,
            item_dim: 16,
            ..FusionConfig::default()
        },
        init_std: 0.1,
        ..ModelSpec::default()
    }
}

fn small_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        image_size: 16,
        seed,
        ..SynthConfig::default()
    }
}

fn small_train(seed: u64, lambda: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        lr_peak: 1e-2,
        epochs: 30,
        segments: 1,
        seed,
        ..TrainConfig::default()
    };
    cfg.loss.lambda = lambda;
    cfg
}

fn interactions(synth: &SynthConfig) -> Res<(InteractionSet, RawContent)> {
    let data = synth_generate(synth)?;
    Ok((InteractionSet::ingest(&data.ratings, 3.5), data.content))
}

fn fit(prep: &Prepared, train: &TrainConfig) -> Res<TrainOutcome> {
    Ok(train_loop(prep.model(train.seed)?, prep.data(), train)?)
}

fn recall10(model: &Model, prep: &Prepared) -> Res<f64> {
    let r = evaluate_split(model, prep.data(), SplitName::Test, &[10], 1, 0)?;
    Ok(r.get(Metric::Recall, 10).unwrap_or(0.0))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal(rng)).collect()).unwrap()
}

fn unit_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![h, w, 3], (0..h * w * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

// --------------------------------------------------------------------- 1

fn tiny_model(kind: FusionKind) -> Res<(Model, Vec<Item>)> {
    let spec = ModelSpec {
        token_dim: 8,
        heads: 2,
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
            kind,
            item_dim: 8,
            ..FusionConfig::default()
        },
        init_std: 0.3,
        ..ModelSpec::default()
    };
    let vocab = Vocabulary::build(["a b c d e f g h"], 1, None);
    let cfg = spec.resolve(&[Modality::Image, Modality::Text], Some(vocab.len()))?;
    let users = (0..3).map(|u| format!("u{u}")).collect();
    let model = Model::new(cfg, users, Some(vocab.clone()), 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let texts = ["a b c d e f", "h g f e", "b d f h a c"];
    let items = texts
        .iter()
        .enumerate()
        .map(|(j, t)| Item {
            id: format!("i{j}"),
            attributes: vec![
                Payload::Image(unit_image(8, 8, &mut rng)),
                Payload::Text(coldrec::encoders::tokenize(t, &vocab, 6)),
            ],
        })
        .collect();
    Ok((model, items))
}

fn objective(model: &Model, items: &[&Item], batch: &[(usize, usize)], loss: &LossConfig) -> Res<f64> {
    let mut g = Graph::new();
    let terms = {
        let mut cx = Ctx::new(&mut g, &model.params);
        batch_objective(&mut cx, model, batch, items, None, loss, 0)?
    };
    Ok(g.value(terms.total).item())
}

/// Largest elementwise `|a − n| / max(|a|, |n|, 1e-6)` over all parameters.
fn gradient_error(kind: FusionKind) -> Res<(f64, usize)> {
    let (mut model, items) = tiny_model(kind)?;
    let refs: Vec<&Item> = items.iter().collect();
    let batch = [(0, 0), (1, 1), (2, 2)];
    let loss = LossConfig {
        lambda: 0.5,
        ..LossConfig::default()
    };
    let mut g = Graph::new();
    let terms = {
        let mut cx = Ctx::new(&mut g, &model.params);
        batch_objective(&mut cx, &model, &batch, &refs, None, &loss, 0)?
    };
    g.backward(terms.total)?;
    let mut analytic = model.params.clone();
    analytic.zero_grad();
    g.accumulate_into(&mut analytic);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let n = model.params.get(id).numel();
        let grads = analytic.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for (i, &a) in grads.iter().enumerate() {
            let orig = model.params.get(id).data()[i];
            model.params.get_mut(id).data_mut()[i] = orig + h;
            let up = objective(&model, &refs, &batch, &loss)?;
            model.params.get_mut(id).data_mut()[i] = orig - h;
            let down = objective(&model, &refs, &batch, &loss)?;
            model.params.get_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn c1_gradients() -> Res<Verdict> {
    let t0 = Instant::now();
    let (late, n_late) = gradient_error(FusionKind::Late)?;
    let (early, n_early) = gradient_error(FusionKind::Early)?;
    let secs = t0.elapsed().as_secs_f64();
    let pass = late < 1e-3 && early < 1e-3 && secs < 60.0;
    Ok(Verdict::strict(
        pass,
        format!(
            "max rel err late {late:.2e} ({n_late} params), early {early:.2e} ({n_early} params); {secs:.1}s < 60s"
        ),
    ))
}

// --------------------------------------------------------------------- 2

fn c2_loss_identities() -> Res<Verdict> {
    let cfg = LossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut g = Graph::new();
    let u = g.constant(random_tensor(&[1, 8], &mut rng));
    let v = g.constant(random_tensor(&[1, 8], &mut rng));
    let single = Minibatch {
        pairs: vec![(0, 0)],
        users: u,
        items: v,
        modalities: vec![],
        positives: None,
    };
    let l1 = rating_ranking_loss(&mut g, &single, &cfg)?;
    let l1 = g.value(l1).item();

    let mut worst_uniform: f64 = 0.0;
    for b in [2usize, 3, 7, 16] {
        let mut g = Graph::new();
        let row = random_tensor(&[1, 8], &mut rng).into_data();
        let same = Tensor::new(vec![b, 8], row.iter().cycle().take(b * 8).copied().collect())?;
        let u = g.constant(same.clone());
        let v = g.constant(same);
        let mb = Minibatch {
            pairs: (0..b).map(|k| (k, k)).collect(),
            users: u,
            items: v,
            modalities: vec![],
            positives: None,
        };
        let l = rating_ranking_loss(&mut g, &mb, &cfg)?;
        worst_uniform = worst_uniform.max((g.value(l).item() - 2.0 * (b as f64).ln()).abs());
    }

    let mut g = Graph::new();
    let u = g.constant(Tensor::zeros(&[1, 8]));
    let v = g.constant(Tensor::zeros(&[1, 8]));
    let m0 = g.constant(Tensor::zeros(&[1, 8]));
    let m1 = g.constant(Tensor::zeros(&[1, 8]));
    let mb = Minibatch {
        pairs: vec![(0, 0)],
        users: u,
        items: v,
        modalities: vec![m0, m1],
        positives: None,
    };
    let (lm, _) = multimodal_alignment_loss(&mut g, &mb, &cfg)?;
    let lm_err = (g.value(lm).item() - 4f64.ln()).abs();

    let pass = l1 == 0.0 && worst_uniform <= 1e-9 && lm_err <= 1e-9;
    Ok(Verdict::strict(
        pass,
        format!("B=1 L_R={l1:e}; uniform |L_R − 2lnB| ≤ {worst_uniform:.1e}; |L_M − ln4| = {lm_err:.1e}"),
    ))
}

// --------------------------------------------------------------------- 3

/// Position of every candidate counted directly: the items ahead of `i` are
/// those with a higher score, or an equal score and a smaller id.
fn oracle_positions(ids: &[String], scores: &[f64]) -> Vec<usize> {
    (0..ids.len())
        .map(|i| {
            (0..ids.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && ids[j] < ids[i]))
                .count()
        })
        .collect()
}

fn c3_metric_oracles() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ks = [1usize, 5, 10, 20];
    let mut mismatches = 0;
    let mut checks = 0;
    for case in 0..200 {
        let n = rng.gen_range(1..=40);
        let ids: Vec<String> = (0..n).map(|j| format!("i{:02}", (j * 7 + case) % 97)).collect();
        let ids: Vec<String> = ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let n = ids.len();
        // Few distinct values so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 * 0.5).collect();
        let positives: HashSet<String> = ids.iter().filter(|_| rng.gen_bool(0.3)).cloned().collect();
        let positions = oracle_positions(&ids, &scores);
        let ranked = rank("u", &ids, &scores, 20)?;
        let ranked: Vec<&str> = ranked.ids().collect();
        let mut hit_positions: Vec<usize> = (0..n).filter(|&i| positives.contains(&ids[i])).map(|i| positions[i]).collect();
        hit_positions.sort_unstable();
        for &k in &ks {
            let hits: Vec<usize> = hit_positions.iter().copied().filter(|&p| p < k).collect();
            let p = hits.len() as f64 / k as f64;
            let (r, nd) = if positives.is_empty() {
                (None, None)
            } else {
                let dcg = hits.iter().fold(0.0, |acc, &q| acc + 1.0 / ((q + 2) as f64).log2());
                let idcg = (0..k.min(positives.len())).fold(0.0, |acc, q| acc + 1.0 / ((q + 2) as f64).log2());
                (Some(hits.len() as f64 / positives.len() as f64), Some(dcg / idcg))
            };
            checks += 3;
            mismatches += usize::from(precision_at_k(&ranked, &positives, k) != p);
            mismatches += usize::from(recall_at_k(&ranked, &positives, k) != r);
            mismatches += usize::from(ndcg_at_k(&ranked, &positives, k) != nd);
        }
    }
    Ok(Verdict::strict(
        mismatches == 0,
        format!("{mismatches} mismatches in {checks} exact comparisons over 200 instances"),
    ))
}

// --------------------------------------------------------------------- 4

fn c4_cold_start() -> Res<Verdict> {
    let spec = small_spec(FusionKind::Late);
    let split = SplitConfig::default();
    let mut trained = Vec::new();
    let mut untrained = Vec::new();
    let mut chance = Vec::new();
    let mut epochs = 0;
    for seed in SEEDS {
        let (xs, content) = interactions(&small_synth(seed))?;
        let prep = Prepared::new(&xs, &content, &spec, &SplitConfig { seed, ..split.clone() })?;
        let train = small_train(seed, 0.5);
        epochs = train.epochs;
        untrained.push(recall10(&prep.model(seed)?, &prep)?);
        trained.push(recall10(&fit(&prep, &train)?.model, &prep)?);
        chance.push(10.0 / prep.split.test_items.len() as f64);
    }
    let wins = |factor: f64| trained.iter().zip(&chance).filter(|(r, c)| **r >= factor * **c).count();
    let pass = wins(5.0) >= 4;
    let attainable = chance.iter().filter(|c| 5.0 * **c <= 1.0).count() >= 4;
    let detail = format!(
        "{epochs} epochs; recall@10 trained [{}] untrained [{}] chance [{}]; ≥5× chance on {}/5, ≥1.5× on {}/5",
        fmt_list(&trained),
        fmt_list(&untrained),
        fmt_list(&chance),
        wins(5.0),
        wins(1.5)
    );
    if attainable {
        return Ok(Verdict::strict(pass, detail));
    }
    // With ~22 cold test items the chance level is ~0.45, so 5× chance
    // exceeds the maximum recall of 1. Assert a clear margin instead.
    let ok = pass || wins(1.5) >= 4;
    Ok(Verdict {
        pass,
        ok,
        detail: format!("{detail}; 5× chance > 1 on {}/5 seeds, unattainable", 5 - chance.iter().filter(|c| 5.0 * **c <= 1.0).count()),
    })
}

// --------------------------------------------------------------------- 5

fn subset(content: &RawContent, keep: usize) -> RawContent {
    content.iter().map(|(id, ps)| (id.clone(), vec![ps[keep].clone()])).collect()
}

fn c5_ablation() -> Res<Verdict> {
    let spec = small_spec(FusionKind::Late);
    let mut rows = Vec::new();
    let mut wins = 0;
    for seed in SEEDS {
        let (xs, content) = interactions(&SynthConfig {
            factor_split: true,
            ..small_synth(seed)
        })?;
        let split = SplitConfig {
            ratios: (0.6, 0.1, 0.3),
            seed,
            ..SplitConfig::default()
        };
        let train = small_train(seed, 0.5);
        let mut r = Vec::new();
        for c in [content.clone(), subset(&content, 0), subset(&content, 1)] {
            let prep = Prepared::new(&xs, &c, &spec, &split)?;
            r.push(recall10(&fit(&prep, &train)?.model, &prep)?);
        }
        wins += usize::from(r[0] > r[1] && r[0] > r[2]);
        rows.push(format!("{:.3}/{:.3}/{:.3}", r[0], r[1], r[2]));
    }
    Ok(Verdict::strict(
        wins >= 4,
        format!("recall@10 image+text/image/text per seed [{}]; two-modality best on {wins}/5", rows.join(" ")),
    ))
}

// --------------------------------------------------------------------- 6

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Mean own-item cosine between the two attributes' embeddings minus the
/// mean cross-item cosine, over the training items.
fn alignment_gap(model: &Model, prep: &Prepared) -> Res<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let embs = prep
        .split
        .train_items
        .iter()
        .map(|id| model.modality_embeddings(&prep.items[id], &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let n = embs.len();
    let (mut own, mut cross) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let c = cosine(&embs[i][0], &embs[j][1]);
            if i == j {
                own += c;
            } else {
                cross += c;
            }
        }
    }
    Ok(own / n as f64 - cross / (n * (n - 1)) as f64)
}

fn c6_alignment() -> Res<Verdict> {
    let spec = small_spec(FusionKind::Late);
    let mut rows = Vec::new();
    let mut pass = true;
    for seed in [0u64, 1] {
        let (xs, content) = interactions(&small_synth(seed))?;
        let prep = Prepared::new(&xs, &content, &spec, &SplitConfig { seed, ..SplitConfig::default() })?;
        let with = alignment_gap(&fit(&prep, &small_train(seed, 0.5))?.model, &prep)?;
        let without = alignment_gap(&fit(&prep, &small_train(seed, 0.0))?.model, &prep)?;
        pass &= with >= 0.2 && without < with;
        rows.push(format!("seed {seed}: λ=0.5 {with:.3}, λ=0 {without:.3}"));
    }
    Ok(Verdict::strict(pass, format!("own − cross cosine gap; {}", rows.join("; "))))
}

// --------------------------------------------------------------------- 7

fn c7_segment_max() -> Res<Verdict> {
    let spec = ModelSpec {
        token_dim: 8,
        heads: 2,
        video: VideoSpec {
            height: 8,
            width: 8,
            patch: 4,
            frame_blocks: 1,
            temporal_blocks: 1,
            clip_len: 3,
        },
        fusion: FusionConfig {
            item_dim: 8,
            ..FusionConfig::default()
        },
        init_std: 0.3,
        ..ModelSpec::default()
    };
    let cfg = spec.resolve(&[Modality::Video, Modality::Image], None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let model = Model::new(cfg.clone(), vec!["u".into()], None, case % 4)?;
        let frames = rng.gen_range(3..10);
        let item = Item {
            id: format!("i{case}"),
            attributes: vec![
                Payload::Video(Tensor::new(
                    vec![frames, 8, 8, 3],
                    (0..frames * 192).map(|_| rng.gen::<f64>()).collect(),
                )?),
                Payload::Image(unit_image(32, 32, &mut rng)),
            ],
        };
        let user: Vec<f64> = (0..8).map(|_| normal(&mut rng)).collect();
        let segments = rng.gen_range(1..6);
        let seed = rng.gen::<u64>();
        let got = model.infer_item_video(&item, &user, segments, &mut ChaCha8Rng::seed_from_u64(seed))?;
        // Same clips, one full forward pass each.
        let mut clip_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut exact = f64::NEG_INFINITY;
        for _ in 0..segments {
            let clips = model.sample_clips(&item, &mut clip_rng)?;
            let mut g = Graph::inference();
            let v = {
                let mut cx = Ctx::new(&mut g, &model.params);
                model.forward_item_clips(&mut cx, &item, &clips)?.v
            };
            exact = exact.max(score(&user, g.value(v).data())?);
        }
        worst = worst.max((got - exact).abs());
    }
    Ok(Verdict::strict(
        worst <= 1e-12,
        format!("max |segment-max − exact max| = {worst:.1e} over 100 cases"),
    ))
}

// --------------------------------------------------------------------- 8

fn rating_loss(pairs: &[(usize, usize)], u: &Tensor, v: &Tensor, filter: bool, positives: Option<&Positives>) -> Res<f64> {
    let mut g = Graph::new();
    let users = g.constant(u.clone());
    let items = g.constant(v.clone());
    let mb = Minibatch {
        pairs: pairs.to_vec(),
        users,
        items,
        modalities: vec![],
        positives,
    };
    let cfg = LossConfig {
        filter_false_negatives: filter,
        ..LossConfig::default()
    };
    let l = rating_ranking_loss(&mut g, &mb, &cfg)?;
    Ok(g.value(l).item())
}

fn c8_filter_neutrality() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_distinct: f64 = 0.0;
    let mut min_dup_gap = f64::INFINITY;
    for _ in 0..100 {
        let b = rng.gen_range(2..12);
        let u = random_tensor(&[b, 6], &mut rng);
        let v = random_tensor(&[b, 6], &mut rng);
        // Distinct users and items; the known positives are the batch pairs.
        let offset = rng.gen_range(0..50);
        let pairs: Vec<(usize, usize)> = (0..b).map(|k| (k + offset, 3 * k + 1)).collect();
        let known: Positives = pairs.iter().copied().collect();
        let plain = rating_loss(&pairs, &u, &v, false, None)?;
        worst_distinct = worst_distinct
            .max((plain - rating_loss(&pairs, &u, &v, true, None)?).abs())
            .max((plain - rating_loss(&pairs, &u, &v, true, Some(&known))?).abs());
        // A repeated user makes another row's item a known positive.
        let mut dup = pairs.clone();
        dup[1].0 = dup[0].0;
        let gap = (rating_loss(&dup, &u, &v, false, None)? - rating_loss(&dup, &u, &v, true, None)?).abs();
        min_dup_gap = min_dup_gap.min(gap);
    }
    Ok(Verdict::strict(
        worst_distinct <= 1e-12 && min_dup_gap > 0.0,
        format!("distinct batches max |Δ| = {worst_distinct:.1e}; with duplicates min |Δ| = {min_dup_gap:.2e}"),
    ))
}

// --------------------------------------------------------------------- 9

fn c9_transfer() -> Res<Verdict> {
    let mut rows = Vec::new();
    let mut wins = 0;
    for seed in SEEDS {
        let dir = tempfile::tempdir()?;
        let (a, b, run) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("run"));
        let mut cfg = RunConfig {
            model: small_spec(FusionKind::Late),
            train: small_train(seed, 0.5),
            ..RunConfig::default()
        };
        cfg.synth = SynthConfig {
            content_seed: Some(1000 + seed),
            ..small_synth(seed)
        };
        cfg.split.seed = seed;
        cmd_synth(&cfg, &a)?;
        cmd_train(&cfg, &a, &run)?;

        let mut cfg_b = cfg.clone();
        cfg_b.synth.seed = 500 + seed;
        cfg_b.split.ratios = (0.5, 0.0, 0.5);
        cmd_synth(&cfg_b, &b)?;
        let emb = dir.path().join("b.emb");
        cmd_embed(&cfg_b, &run.join(CHECKPOINT_FILE), &b, &emb)?;
        let report = cmd_eval_external(&cfg_b, &emb, &b, None, SplitName::Test, &dir.path().join("ext"))?;
        let recall = report.get(Metric::Recall, 10).unwrap_or(0.0);

        let ds = load_dataset(&b, cfg_b.data.threshold, 0, cfg_b.data.header)?;
        let split = cold_split(&filter_users(&ds.interactions, cfg_b.split.min_ratings), cfg_b.split.ratios, seed)?;
        let chance = 10.0 / split.test_items.len() as f64;
        wins += usize::from(recall >= 3.0 * chance);
        rows.push(format!("{recall:.3}/{chance:.3}"));
    }
    Ok(Verdict::strict(
        wins >= 4,
        format!("population B recall@10/chance per seed [{}]; ≥3× chance on {wins}/5", rows.join(" ")),
    ))
}

// -------------------------------------------------------------------- 10

fn params_bits(model: &Model) -> Vec<u64> {
    model
        .params
        .ids()
        .flat_map(|id| model.params.get(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
        .collect()
}

fn c10_determinism() -> Res<Verdict> {
    let synth = SynthConfig {
        users: 60,
        items: 80,
        density: 0.08,
        image_size: 8,
        vocab_size: 16,
        text_len: 6,
        seed: 10,
        ..SynthConfig::default()
    };
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
        init_std: 0.1,
        ..ModelSpec::default()
    };
    let (xs, content) = interactions(&synth)?;
    let prep = Prepared::new(
        &xs,
        &content,
        &spec,
        &SplitConfig {
            ratios: (0.7, 0.15, 0.15),
            seed: 10,
            ..SplitConfig::default()
        },
    )?;
    let train = TrainConfig {
        epochs: 4,
        warmup_epochs: 1.0,
        batch_size: 16,
        ..small_train(10, 0.5)
    };
    let first = fit(&prep, &train)?;
    let second = fit(&prep, &train)?;
    let reproducible = params_bits(&first.model) == params_bits(&second.model) && first.history == second.history;

    let dir = tempfile::tempdir()?;
    let ckpt = dir.path().join("model.ckpt");
    first.model.save(&ckpt)?;
    let loaded = Model::load(&ckpt)?;
    let val = |m: &Model| -> Res<f64> {
        let r = evaluate_split(m, prep.data(), SplitName::Val, &[10], train.segments, train.eval_seed)?;
        Ok(r.get(Metric::Ndcg, 10).unwrap_or(f64::NAN))
    };
    let (before, after) = (val(&first.model)?, val(&loaded)?);
    let best = first.best_val_ndcg10.unwrap_or(before);
    let ckpt_ok = (before - after).abs() <= 1e-9 && (best - after).abs() <= 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let image = Tensor::new(
        vec![4, 5, 3],
        (0..60).map(|_| f64::from(rng.gen::<f32>())).collect(),
    )?;
    let crt = dir.path().join("x.crt");
    let crt2 = dir.path().join("y.crt");
    save_crt1(&crt, &image)?;
    let back = load_crt1(&crt)?;
    save_crt1(&crt2, &back)?;
    let crt_ok = back == image && std::fs::read(&crt)? == std::fs::read(&crt2)?;

    let data_dir = dir.path().join("synth");
    write_synth(&data_dir, &synth_generate(&synth)?)?;
    let tsv = data_dir.join(INTERACTIONS_FILE);
    let tsv2 = dir.path().join("again.tsv");
    write_ratings_tsv(&tsv2, &read_ratings_tsv(&tsv, false)?, false)?;
    let tsv_ok = std::fs::read(&tsv)? == std::fs::read(&tsv2)?;
    let nd = data_dir.join(MANIFEST_FILE);
    let nd2 = dir.path().join("again.ndjson");
    write_manifest(&nd2, &read_manifest(&nd)?)?;
    let nd_ok = std::fs::read(&nd)? == std::fs::read(&nd2)?;

    let pass = reproducible && ckpt_ok && crt_ok && tsv_ok && nd_ok;
    Ok(Verdict::strict(
        pass,
        format!(
            "bit-reproducible {reproducible}; val ndcg@10 {before:.6} → reloaded {after:.6} (best {best:.6}); \
             CRT1 {crt_ok}, TSV {tsv_ok}, NDJSON {nd_ok} byte-exact"
        ),
    ))
}
