//! Ranking metrics with per-user (macro) averaging.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

/// A user's ranked predictions: descending score, ascending id on ties.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user_id: String,
    pub items: Vec<(String, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(id, _)| id.as_str())
    }
}

/// Sorts candidates by score (descending, ties by ascending id) and keeps
/// the first `k`.
pub fn rank(user_id: &str, ids: &[String], scores: &[f64], k: usize) -> Result<RankedList> {
    if ids.len() != scores.len() {
        return Err(Error::Contract(format!(
            "{} candidate ids but {} scores",
            ids.len(),
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score of item `{}` for user `{user_id}`", ids[i])));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order.truncate(k);
    Ok(RankedList {
        user_id: user_id.to_string(),
        items: order.into_iter().map(|i| (ids[i].clone(), scores[i])).collect(),
    })
}

fn hits(ranked: &[&str], positives: &HashSet<String>, k: usize) -> usize {
    ranked.iter().take(k).filter(|id| positives.contains(**id)).count()
}

/// `|top-K ∩ positives| / K`.
pub fn precision_at_k(ranked: &[&str], positives: &HashSet<String>, k: usize) -> f64 {
    assert!(k >= 1, "K must be at least 1");
    hits(ranked, positives, k) as f64 / k as f64
}

/// `|top-K ∩ positives| / |positives|`; `None` for a user without positives.
pub fn recall_at_k(ranked: &[&str], positives: &HashSet<String>, k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if positives.is_empty() {
        return None;
    }
    Some(hits(ranked, positives, k) as f64 / positives.len() as f64)
}

/// Binary-relevance NDCG with the ideal ranking placing
/// `min(K, |positives|)` hits first; `None` without positives.
pub fn ndcg_at_k(ranked: &[&str], positives: &HashSet<String>, k: usize) -> Option<f64> {
    assert!(k >= 1, "K must be at least 1");
    if positives.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| positives.contains(**id))
        .fold(0.0, |acc, (r, _)| acc + 1.0 / ((r + 2) as f64).log2());
    let idcg = (0..k.min(positives.len())).fold(0.0, |acc, r| acc + 1.0 / ((r + 2) as f64).log2());
    Some(dcg / idcg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Precision,
    Recall,
    Ndcg,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Precision, Metric::Recall, Metric::Ndcg];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::Ndcg => "ndcg",
        }
    }
}

/// Per-user metrics at each K.
#[derive(Clone, Debug, PartialEq)]
pub struct UserMetrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
}

pub fn user_metrics(ranked: &[&str], positives: &HashSet<String>, ks: &[usize]) -> Option<UserMetrics> {
    if positives.is_empty() {
        return None;
    }
    Some(UserMetrics {
        precision: ks.iter().map(|&k| precision_at_k(ranked, positives, k)).collect(),
        recall: ks.iter().map(|&k| recall_at_k(ranked, positives, k).unwrap()).collect(),
        ndcg: ks.iter().map(|&k| ndcg_at_k(ranked, positives, k).unwrap()).collect(),
    })
}

/// Macro-averaged metrics: `values[metric][K]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub users: usize,
    pub ks: Vec<usize>,
    pub values: BTreeMap<Metric, BTreeMap<usize, f64>>,
}

impl MetricReport {
    /// Unweighted mean over users, reduced in the given order.
    pub fn from_users(per_user: &[UserMetrics], ks: &[usize]) -> Result<Self> {
        if per_user.is_empty() {
            return Err(Error::Data("no evaluable users (none has a positive among the candidates)".into()));
        }
        let n = per_user.len() as f64;
        let mut values = BTreeMap::new();
        for metric in Metric::ALL {
            let mut at = BTreeMap::new();
            for (ki, &k) in ks.iter().enumerate() {
                let sum = per_user.iter().fold(0.0, |acc, u| {
                    acc + match metric {
                        Metric::Precision => u.precision[ki],
                        Metric::Recall => u.recall[ki],
                        Metric::Ndcg => u.ndcg[ki],
                    }
                });
                at.insert(k, sum / n);
            }
            values.insert(metric, at);
        }
        Ok(Self {
            users: per_user.len(),
            ks: ks.to_vec(),
            values,
        })
    }

    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.values.get(&metric)?.get(&k).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `metric<TAB>K<TAB>value` rows with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tk\tvalue\n");
        for (m, at) in &self.values {
            for (k, v) in at {
                let _ = writeln!(out, "{}\t{k}\t{v}", m.as_str());
            }
        }
        out
    }
}

pub fn validate_ks(ks: &[usize]) -> Result<Vec<usize>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Usage("K values must be positive and at least one is required".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

/// Ranks every candidate for each user with `scorer(user)` (one score per
/// candidate, aligned with `candidates`) and macro-averages the metrics over
/// users with at least one positive among the candidates.
pub fn evaluate_with<F>(
    candidates: &[String],
    positives: &BTreeMap<String, HashSet<String>>,
    ks: &[usize],
    scorer: F,
) -> Result<MetricReport>
where
    F: Fn(&str) -> Result<Vec<f64>> + Sync,
{
    let ks = validate_ks(ks)?;
    if candidates.is_empty() {
        return Err(Error::Data("empty candidate set".into()));
    }
    let cand: HashSet<&str> = candidates.iter().map(String::as_str).collect();
    let max_k = *ks.last().unwrap();
    let users: Vec<(&String, HashSet<String>)> = positives
        .iter()
        .map(|(u, p)| (u, p.iter().filter(|i| cand.contains(i.as_str())).cloned().collect()))
        .filter(|(_, p): &(_, HashSet<String>)| !p.is_empty())
        .collect();
    let per_user: Vec<UserMetrics> = users
        .par_iter()
        .map(|(u, p)| {
            let scores = scorer(u)?;
            let ranked = rank(u, candidates, &scores, max_k)?;
            let ids: Vec<&str> = ranked.ids().collect();
            Ok(user_metrics(&ids, p, &ks).expect("non-empty positives"))
        })
        .collect::<Result<_>>()?;
    MetricReport::from_users(&per_user, &ks)
}
