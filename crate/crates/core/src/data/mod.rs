//! Interaction ingestion, binarization, user filtering and cold-item splits.

mod io;
mod synth;

pub use io::{
    content_items, content_vocabulary, load_dataset, read_manifest, read_ratings_tsv, subsample_frames, trim_frames, write_manifest,
    write_ratings_tsv, Dataset, INTERACTIONS_FILE, MANIFEST_FILE, ManifestAttribute, ManifestRecord, RawContent, RawPayload,
};
pub use synth::{synth_generate, write_synth, SynthConfig, SynthData, SynthProvenance, PROVENANCE_FILE};

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ratings at or above this are positives.
pub const RATING_THRESHOLD: f64 = 3.5;

/// One raw feedback record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: i64,
}

/// Keeps the latest record per `(user, item)`; on equal timestamps the later
/// record wins. Output is sorted by `(user, item)`.
pub fn dedup_latest(ratings: &[Rating]) -> Vec<Rating> {
    let mut latest: BTreeMap<(&str, &str), &Rating> = BTreeMap::new();
    for r in ratings {
        let key = (r.user.as_str(), r.item.as_str());
        match latest.get(&key) {
            Some(prev) if prev.timestamp > r.timestamp => {}
            _ => {
                latest.insert(key, r);
            }
        }
    }
    latest.into_values().cloned().collect()
}

/// Deduplicates, then keeps ratings `>= threshold` (everything below is an
/// unknown, not a negative).
pub fn binarize(ratings: &[Rating], threshold: f64) -> Vec<Rating> {
    dedup_latest(ratings)
        .into_iter()
        .filter(|r| r.rating >= threshold)
        .collect()
}

/// A positive `(user, item)` observation.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Binary implicit feedback: every listed pair is a positive.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct InteractionSet {
    /// Sorted by `(user, item)`, no duplicate pairs.
    pub interactions: Vec<Interaction>,
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl InteractionSet {
    /// From already-binarized positives; duplicates keep the latest record.
    pub fn from_positives(positives: &[Rating]) -> Self {
        let interactions: Vec<Interaction> = dedup_latest(positives)
            .into_iter()
            .map(|r| Interaction {
                user: r.user,
                item: r.item,
                timestamp: r.timestamp,
            })
            .collect();
        Self::from_interactions(interactions)
    }

    /// Raw ratings → deduplicated, thresholded positives.
    pub fn ingest(ratings: &[Rating], threshold: f64) -> Self {
        Self::from_positives(&binarize(ratings, threshold))
    }

    fn from_interactions(mut interactions: Vec<Interaction>) -> Self {
        interactions.sort();
        interactions.dedup_by(|a, b| a.user == b.user && a.item == b.item);
        let users: BTreeSet<&String> = interactions.iter().map(|x| &x.user).collect();
        let items: BTreeSet<&String> = interactions.iter().map(|x| &x.item).collect();
        Self {
            users: users.into_iter().cloned().collect(),
            items: items.into_iter().cloned().collect(),
            interactions,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.users.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect()
    }

    pub fn item_index(&self) -> HashMap<&str, usize> {
        self.items.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect()
    }

    /// Fraction of the `users × items` matrix that is positive.
    pub fn density(&self) -> f64 {
        if self.users.is_empty() || self.items.is_empty() {
            return 0.0;
        }
        self.len() as f64 / (self.users.len() * self.items.len()) as f64
    }
}

/// Removes users with fewer than `min_ratings` positives; the user and item
/// sets are recomputed from what remains.
pub fn filter_users(xs: &InteractionSet, min_ratings: usize) -> InteractionSet {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for x in &xs.interactions {
        *counts.entry(&x.user).or_default() += 1;
    }
    InteractionSet::from_interactions(
        xs.interactions
            .iter()
            .filter(|x| counts[x.user.as_str()] >= min_ratings)
            .cloned()
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Usage(format!("unknown split `{other}` (train, val, test)"))),
        }
    }
}

/// Item-level partition: validation and test items never occur in training
/// interactions. Every interaction's user is a training user.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ColdSplit {
    pub train_items: Vec<String>,
    pub val_items: Vec<String>,
    pub test_items: Vec<String>,
    pub train: Vec<Interaction>,
    pub val: Vec<Interaction>,
    pub test: Vec<Interaction>,
    /// Users with at least one training interaction, sorted.
    pub users: Vec<String>,
}

impl ColdSplit {
    pub fn items(&self, which: SplitName) -> &[String] {
        match which {
            SplitName::Train => &self.train_items,
            SplitName::Val => &self.val_items,
            SplitName::Test => &self.test_items,
        }
    }

    pub fn interactions(&self, which: SplitName) -> &[Interaction] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// `user → positive items` for one split.
    pub fn positives(&self, which: SplitName) -> BTreeMap<String, HashSet<String>> {
        let mut out: BTreeMap<String, HashSet<String>> = BTreeMap::new();
        for x in self.interactions(which) {
            out.entry(x.user.clone()).or_default().insert(x.item.clone());
        }
        out
    }

    /// Routes interactions by their item's split and drops users that have
    /// no training interaction.
    fn assemble(
        train_items: Vec<String>,
        val_items: Vec<String>,
        test_items: Vec<String>,
        route: impl Fn(&Interaction) -> Option<SplitName>,
        interactions: &[Interaction],
    ) -> Self {
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for x in interactions {
            match route(x) {
                Some(SplitName::Train) => train.push(x.clone()),
                Some(SplitName::Val) => val.push(x.clone()),
                Some(SplitName::Test) => test.push(x.clone()),
                None => {}
            }
        }
        let users: BTreeSet<String> = train.iter().map(|x| x.user.clone()).collect();
        val.retain(|x| users.contains(&x.user));
        test.retain(|x| users.contains(&x.user));
        let sorted = |mut v: Vec<String>| {
            v.sort();
            v
        };
        Self {
            train_items: sorted(train_items),
            val_items: sorted(val_items),
            test_items: sorted(test_items),
            train,
            val,
            test,
            users: users.into_iter().collect(),
        }
    }
}

/// Largest-remainder apportionment of `n` into parts proportional to
/// `ratios`; remainder ties go to the earlier part.
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Shuffles the items with `seed` and cuts them train/val/test by `ratios`.
pub fn cold_split(xs: &InteractionSet, ratios: (f64, f64, f64), seed: u64) -> Result<ColdSplit> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|x| !x.is_finite() || *x < 0.0) || ((r.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {r:?} must be non-negative and sum to 1")));
    }
    if xs.items.len() < 3 {
        return Err(Error::Input(format!("cold split needs at least 3 items, got {}", xs.items.len())));
    }
    let mut items = xs.items.clone();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let sizes = apportion(items.len(), &r);
    let test = items.split_off(sizes[0] + sizes[1]);
    let val = items.split_off(sizes[0]);
    let which: HashMap<String, SplitName> = items
        .iter()
        .map(|i| (i.clone(), SplitName::Train))
        .chain(val.iter().map(|i| (i.clone(), SplitName::Val)))
        .chain(test.iter().map(|i| (i.clone(), SplitName::Test)))
        .collect();
    Ok(ColdSplit::assemble(
        items,
        val,
        test,
        |x| which.get(&x.item).copied(),
        &xs.interactions,
    ))
}

/// Periods `[.., b0)`, `[b0, b1)`, `[b1, ..)`. An item belongs to the period
/// of its first interaction; interactions from any other period are dropped.
pub fn temporal_split(xs: &InteractionSet, boundaries: (i64, i64)) -> Result<ColdSplit> {
    let (b0, b1) = boundaries;
    if b0 > b1 {
        return Err(Error::Config(format!("temporal boundaries {b0} > {b1}")));
    }
    let period = |t: i64| {
        if t < b0 {
            SplitName::Train
        } else if t < b1 {
            SplitName::Val
        } else {
            SplitName::Test
        }
    };
    let mut first: BTreeMap<&str, i64> = BTreeMap::new();
    for x in &xs.interactions {
        let e = first.entry(&x.item).or_insert(x.timestamp);
        *e = (*e).min(x.timestamp);
    }
    let item_period: HashMap<String, SplitName> =
        first.iter().map(|(i, &t)| (i.to_string(), period(t))).collect();
    let pick = |s: SplitName| -> Vec<String> {
        item_period.iter().filter(|(_, &p)| p == s).map(|(i, _)| i.clone()).collect()
    };
    Ok(ColdSplit::assemble(
        pick(SplitName::Train),
        pick(SplitName::Val),
        pick(SplitName::Test),
        |x| {
            let p = item_period[&x.item];
            (period(x.timestamp) == p).then_some(p)
        },
        &xs.interactions,
    ))
}

#[cfg(test)]
mod tests;
