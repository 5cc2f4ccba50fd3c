use std::collections::{BTreeMap, HashSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoders::Modality;
use crate::tensor::Tensor;

fn r(user: &str, item: &str, rating: f64, timestamp: i64) -> Rating {
    Rating {
        user: user.into(),
        item: item.into(),
        rating,
        timestamp,
    }
}

fn random_ratings(seed: u64, n: usize, users: usize, items: usize) -> Vec<Rating> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            r(
                &format!("u{}", rng.gen_range(0..users)),
                &format!("i{}", rng.gen_range(0..items)),
                rng.gen_range(1..=10) as f64 / 2.0,
                rng.gen_range(0..100),
            )
        })
        .collect()
}

#[test]
fn binarize_threshold_examples() {
    let out = binarize(&[r("u", "a", 4.0, 0), r("u", "b", 3.0, 0), r("u", "c", 3.5, 0)], RATING_THRESHOLD);
    let items: Vec<&str> = out.iter().map(|x| x.item.as_str()).collect();
    assert_eq!(items, ["a", "c"]);
}

#[test]
fn latest_timestamp_wins() {
    let xs = [r("u", "a", 5.0, 1), r("u", "a", 2.0, 7), r("v", "a", 2.0, 3), r("v", "a", 5.0, 3)];
    let out = binarize(&xs, RATING_THRESHOLD);
    assert_eq!(out, vec![r("v", "a", 5.0, 3)]);
    let set = InteractionSet::ingest(&xs, RATING_THRESHOLD);
    assert_eq!(set.users, ["v"]);
    assert_eq!(set.len(), 1);
}

#[test]
fn filter_users_examples() {
    let mut xs: Vec<Rating> = (0..19).map(|j| r("a", &format!("i{j}"), 5.0, 0)).collect();
    xs.extend((0..20).map(|j| r("b", &format!("i{j}"), 5.0, 0)));
    let set = InteractionSet::ingest(&xs, RATING_THRESHOLD);
    assert_eq!(filter_users(&set, 0), set);
    let kept = filter_users(&set, 20);
    assert_eq!(kept.users, ["b"]);
    assert_eq!(kept.items.len(), 20);
}

#[test]
fn split_name_parses() {
    assert_eq!("validation".parse::<SplitName>().unwrap(), SplitName::Val);
    assert!(matches!("dev".parse::<SplitName>(), Err(Error::Usage(_))));
}

#[test]
fn apportion_examples() {
    assert_eq!(apportion(20, &[0.85, 0.075, 0.075]), vec![17, 2, 1]);
    assert_eq!(apportion(20, &[1.0, 0.0, 0.0]), vec![20, 0, 0]);
    assert_eq!(apportion(300, &[0.85, 0.075, 0.075]).iter().sum::<usize>(), 300);
}

fn items_set(n: usize) -> InteractionSet {
    let xs: Vec<Rating> = (0..n)
        .flat_map(|j| (0..3).map(move |u| r(&format!("u{u}"), &format!("i{j:02}"), 5.0, j as i64)))
        .collect();
    InteractionSet::ingest(&xs, RATING_THRESHOLD)
}

#[test]
fn cold_split_examples() {
    let set = items_set(20);
    let s = cold_split(&set, (0.85, 0.075, 0.075), 3).unwrap();
    assert_eq!(
        (s.train_items.len(), s.val_items.len(), s.test_items.len()),
        (17, 2, 1)
    );
    assert_eq!(s, cold_split(&set, (0.85, 0.075, 0.075), 3).unwrap());
    assert_ne!(s.train_items, cold_split(&set, (0.85, 0.075, 0.075), 4).unwrap().train_items);
    let all = cold_split(&set, (1.0, 0.0, 0.0), 3).unwrap();
    assert_eq!(all.train_items, set.items);
    assert!(all.val.is_empty() && all.test.is_empty());
}

#[test]
fn cold_split_errors() {
    assert!(matches!(cold_split(&items_set(2), (0.8, 0.1, 0.1), 0), Err(Error::Input(_))));
    assert!(matches!(cold_split(&items_set(9), (0.8, 0.1, 0.2), 0), Err(Error::Config(_))));
    assert!(matches!(cold_split(&items_set(9), (1.2, -0.1, -0.1), 0), Err(Error::Config(_))));
}

#[test]
fn cold_split_drops_users_without_training() {
    let xs = vec![r("a", "i0", 5.0, 0), r("a", "i1", 5.0, 0), r("a", "i2", 5.0, 0), r("b", "i2", 5.0, 0)];
    let set = InteractionSet::ingest(&xs, RATING_THRESHOLD);
    for seed in 0..20 {
        let s = cold_split(&set, (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0), seed).unwrap();
        if s.train_items != ["i2"] {
            assert_eq!(s.users, ["a"]);
            assert!(s.val.iter().chain(&s.test).all(|x| x.user == "a"));
        }
    }
}

#[test]
fn temporal_split_examples() {
    let xs = vec![
        r("a", "x", 5.0, 1),
        r("a", "y", 5.0, 15),
        r("b", "y", 5.0, 25),
        r("b", "x", 5.0, 2),
        r("a", "z", 5.0, 30),
    ];
    let set = InteractionSet::ingest(&xs, RATING_THRESHOLD);
    let s = temporal_split(&set, (10, 20)).unwrap();
    assert_eq!(s.train_items, ["x"]);
    assert_eq!(s.val_items, ["y"]);
    assert_eq!(s.test_items, ["z"]);
    assert_eq!(s.val.len(), 1, "period-3 interaction on a period-2 item is dropped");
    assert_eq!(s.test.len(), 1);
    let all = temporal_split(&set, (100, 200)).unwrap();
    assert_eq!(all.train.len(), set.len());
    assert!(matches!(temporal_split(&set, (5, 1)), Err(Error::Config(_))));
}

#[test]
fn frame_transforms() {
    let video = Tensor::new(vec![20, 1, 1, 3], (0..60).map(|x| x as f64).collect()).unwrap();
    let trimmed = trim_frames(&video, 0.1).unwrap();
    assert_eq!(trimmed.shape(), [16, 1, 1, 3]);
    assert_eq!(trimmed.data()[0], 6.0);
    let sub = subsample_frames(&video, 10.0, 2.0).unwrap();
    assert_eq!(sub.shape(), [4, 1, 1, 3]);
    assert_eq!(sub.data()[3], 15.0);
    assert!(trim_frames(&video, 0.5).is_err());
}

fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        users: 30,
        items: 40,
        density: 0.1,
        image_size: 4,
        vocab_size: 16,
        text_len: 5,
        modalities: vec![Modality::Image, Modality::Text, Modality::Video],
        video_frames: 3,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn synth_all_positive_when_threshold_is_unbounded() {
    let cfg = SynthConfig {
        noise: 0.0,
        density: 1.0,
        ..tiny_synth(1)
    };
    let d = synth_generate(&cfg).unwrap();
    assert_eq!(d.provenance.threshold, None);
    assert_eq!(d.provenance.positives, 30 * 40);
    assert_eq!(InteractionSet::ingest(&d.ratings, RATING_THRESHOLD).len(), 30 * 40);
}

#[test]
fn synth_is_deterministic() {
    let a = synth_generate(&tiny_synth(5)).unwrap();
    let b = synth_generate(&tiny_synth(5)).unwrap();
    assert_eq!(a.ratings, b.ratings);
    assert_eq!(a.content, b.content);
    assert_eq!(a.provenance, b.provenance);
    let c = synth_generate(&tiny_synth(6)).unwrap();
    assert_ne!(a.ratings, c.ratings);
}

#[test]
fn synth_density_tracks_target() {
    for seed in 0..5 {
        let cfg = SynthConfig {
            users: 60,
            items: 50,
            density: 0.05,
            ..tiny_synth(seed)
        };
        let d = synth_generate(&cfg).unwrap();
        let recount = InteractionSet::ingest(&d.ratings, RATING_THRESHOLD).len() as f64 / 3000.0;
        assert!((recount - 0.05).abs() <= 0.005, "seed {seed}: {recount}");
        assert_eq!(recount, d.provenance.density);
        assert!(d.ratings.iter().any(|x| x.rating < RATING_THRESHOLD));
    }
}

#[test]
fn synth_manifest_covers_items() {
    let d = synth_generate(&tiny_synth(2)).unwrap();
    let ids: HashSet<&str> = d.manifest.iter().map(|m| m.item_id.as_str()).collect();
    assert_eq!(ids.len(), 40);
    assert!(d.ratings.iter().all(|x| ids.contains(x.item.as_str())));
    assert!(d.content.keys().all(|k| ids.contains(k.as_str())));
    for p in d.content.values().flatten() {
        if let RawPayload::Image(t) | RawPayload::Video(t) = p {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v) && *v == *v as f32 as f64));
        }
    }
}

#[test]
fn synth_rejects_infeasible_config() {
    for density in [0.0, 1.5, 1e-6, f64::NAN] {
        let cfg = SynthConfig { density, ..tiny_synth(0) };
        assert!(matches!(synth_generate(&cfg), Err(Error::Config(_))), "{density}");
    }
    assert!(synth_generate(&SynthConfig { users: 0, ..tiny_synth(0) }).is_err());
}

#[test]
fn synth_shared_content_seed_shares_the_map() {
    let base = SynthConfig {
        noise: 0.0,
        pixel_noise: 0.0,
        modalities: vec![Modality::Image],
        content_seed: Some(9),
        ..tiny_synth(0)
    };
    let a = synth_generate(&base).unwrap();
    let b = synth_generate(&SynthConfig { seed: 1, ..base.clone() }).unwrap();
    let c = synth_generate(&SynthConfig { content_seed: Some(10), ..base }).unwrap();
    // Same factors under a different map give different content.
    assert_eq!(a.item_factors, c.item_factors);
    assert_ne!(a.content["i00"], c.content["i00"]);
    assert_ne!(a.item_factors, b.item_factors);
}

#[test]
fn dataset_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth_generate(&tiny_synth(3)).unwrap();
    write_synth(dir.path(), &d).unwrap();
    let tsv = std::fs::read(dir.path().join("interactions.tsv")).unwrap();
    let back = read_ratings_tsv(&dir.path().join("interactions.tsv"), false).unwrap();
    assert_eq!(back, d.ratings);
    let again = dir.path().join("again.tsv");
    write_ratings_tsv(&again, &back, false).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), tsv);

    let manifest = read_manifest(&dir.path().join("manifest.ndjson")).unwrap();
    assert_eq!(manifest, d.manifest);

    let ds = load_dataset(dir.path(), RATING_THRESHOLD, 0, false).unwrap();
    assert_eq!(ds.modalities, [Modality::Image, Modality::Text, Modality::Video]);
    // Content covers every manifest record, rated or not.
    assert_eq!(ds.content.len(), d.manifest.len());
    for (id, payloads) in &ds.content {
        assert_eq!(payloads, &d.content[id]);
    }
    let vocab = ds.vocabulary(&ds.interactions.items, None);
    let items = ds.items(Some(&vocab), 8).unwrap();
    assert_eq!(items.len(), d.manifest.len());
}

#[test]
fn load_dataset_reports_missing_content() {
    let dir = tempfile::tempdir().unwrap();
    let d = synth_generate(&tiny_synth(4)).unwrap();
    write_synth(dir.path(), &d).unwrap();
    let manifest: Vec<ManifestRecord> = d.manifest.iter().filter(|m| m.item_id != "i07").cloned().collect();
    write_manifest(&dir.path().join("manifest.ndjson"), &manifest).unwrap();
    let err = load_dataset(dir.path(), RATING_THRESHOLD, 0, false).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("i07")), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn bad_tsv_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.tsv");
    std::fs::write(&p, "u\ti\t4\t1\nu\tj\tfour\t2\n").unwrap();
    let err = read_ratings_tsv(&p, false).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains(":2:")), "{err}");
}

fn oracle_filter(xs: &InteractionSet, min: usize) -> Vec<Interaction> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for x in &xs.interactions {
        *counts.entry(&x.user).or_default() += 1;
    }
    xs.interactions.iter().filter(|x| counts[x.user.as_str()] >= min).cloned().collect()
}

fn oracle_temporal(xs: &InteractionSet, b0: i64, b1: i64) -> [Vec<Interaction>; 3] {
    let period = |t: i64| usize::from(t >= b0) + usize::from(t >= b1);
    let mut out: [Vec<Interaction>; 3] = Default::default();
    for x in &xs.interactions {
        let first = xs.interactions.iter().filter(|y| y.item == x.item).map(|y| y.timestamp).min().unwrap();
        if period(first) == period(x.timestamp) {
            out[period(first)].push(x.clone());
        }
    }
    let train_users: HashSet<String> = out[0].iter().map(|x| x.user.clone()).collect();
    out[1].retain(|x| train_users.contains(&x.user));
    out[2].retain(|x| train_users.contains(&x.user));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binarize_is_idempotent(seed in any::<u64>(), n in 0usize..80) {
        let xs = random_ratings(seed, n, 6, 10);
        let once = binarize(&xs, RATING_THRESHOLD);
        prop_assert_eq!(binarize(&once, RATING_THRESHOLD), once.clone());
        prop_assert!(once.iter().all(|x| x.rating >= RATING_THRESHOLD));
    }

    #[test]
    fn filter_users_matches_counting_oracle(seed in any::<u64>(), n in 0usize..120, min in 0usize..8) {
        let set = InteractionSet::ingest(&random_ratings(seed, n, 8, 20), RATING_THRESHOLD);
        let kept = filter_users(&set, min);
        prop_assert_eq!(kept.interactions, oracle_filter(&set, min));
    }

    #[test]
    fn cold_split_partitions_items(seed in any::<u64>(), n in 60usize..200) {
        let set = InteractionSet::ingest(&random_ratings(seed, n, 8, 30), RATING_THRESHOLD);
        prop_assume!(set.items.len() >= 3);
        let s = cold_split(&set, (0.85, 0.075, 0.075), seed).unwrap();
        let tr: HashSet<&String> = s.train_items.iter().collect();
        let va: HashSet<&String> = s.val_items.iter().collect();
        let te: HashSet<&String> = s.test_items.iter().collect();
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        prop_assert_eq!(tr.len() + va.len() + te.len(), set.items.len());
        prop_assert!(s.train.iter().all(|x| tr.contains(&x.item)));
        prop_assert!(s.val.iter().all(|x| va.contains(&x.item)));
        prop_assert!(s.test.iter().all(|x| te.contains(&x.item)));
        let users: HashSet<&String> = s.users.iter().collect();
        prop_assert!(s.val.iter().chain(&s.test).all(|x| users.contains(&x.user)));
    }

    #[test]
    fn temporal_split_matches_scan_oracle(seed in any::<u64>(), n in 0usize..100, b0 in 0i64..60, w in 0i64..60) {
        let set = InteractionSet::ingest(&random_ratings(seed, n, 6, 15), RATING_THRESHOLD);
        let s = temporal_split(&set, (b0, b0 + w)).unwrap();
        let [train, val, test] = oracle_temporal(&set, b0, b0 + w);
        prop_assert_eq!(&s.train, &train);
        prop_assert_eq!(&s.val, &val);
        prop_assert_eq!(&s.test, &test);
    }
}
