//! Contrastive training losses over an in-batch set of positive pairs.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Known positive `(user, item)` index pairs, consulted when filtering
/// in-batch false negatives.
#[derive(Clone, Debug, Default)]
pub struct Positives(HashSet<(usize, usize)>);

impl Positives {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, user: usize, item: usize) {
        self.0.insert((user, item));
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.0.contains(&(user, item))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl FromIterator<(usize, usize)> for Positives {
    fn from_iter<I: IntoIterator<Item = (usize, usize)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// One training batch as recorded on a graph.
#[derive(Clone, Debug)]
pub struct Minibatch<'a> {
    /// `(user, item)` of each row.
    pub pairs: Vec<(usize, usize)>,
    /// `B × D`, row `k` is the user of `pairs[k]`.
    pub users: Var,
    /// `B × D`, row `k` is the item of `pairs[k]`.
    pub items: Var,
    /// One `B × d` matrix per content attribute.
    pub modalities: Vec<Var>,
    /// Extra known positives beyond the batch itself.
    pub positives: Option<&'a Positives>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub filter_false_negatives: bool,
    /// Scores are divided by this; 1 means raw dot products.
    pub temperature: f64,
    /// Drop each embedding's similarity with itself from the alignment
    /// normalizer.
    pub exclude_self: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            filter_false_negatives: false,
            temperature: 1.0,
            exclude_self: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Graph handles of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rating: Var,
    pub alignment: Var,
    pub lambda: f64,
    /// Set when only one attribute exists and the alignment term is 0.
    pub alignment_degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub rating_part: f64,
    pub alignment_part: f64,
    pub lambda: f64,
}

impl LossTerms {
    pub fn value(&self, g: &Graph) -> LossValue {
        LossValue {
            total: g.value(self.total).item(),
            rating_part: g.value(self.rating).item(),
            alignment_part: g.value(self.alignment).item(),
            lambda: self.lambda,
        }
    }
}

fn is_positive(batch: &Minibatch, user: usize, item: usize) -> bool {
    batch.pairs.contains(&(user, item)) || batch.positives.is_some_and(|p| p.contains(user, item))
}

/// Keep-masks for the two denominators: `rows[k·B + k']` keeps item `k'` as
/// a negative for pair `k`; `cols[k·B + k']` keeps user `k'` for pair `k`.
pub fn false_negative_masks(batch: &Minibatch) -> (Vec<bool>, Vec<bool>) {
    let b = batch.pairs.len();
    let mut rows = vec![true; b * b];
    let mut cols = vec![true; b * b];
    for (k, &(i, j)) in batch.pairs.iter().enumerate() {
        for (k2, &(i2, j2)) in batch.pairs.iter().enumerate() {
            if k2 == k {
                continue;
            }
            rows[k * b + k2] = !is_positive(batch, i, j2);
            cols[k * b + k2] = !is_positive(batch, i2, j);
        }
    }
    (rows, cols)
}

/// Mean over pairs of the bidirectional in-batch contrastive loss:
/// `−log softmax` of the positive among the batch's items, plus the same
/// among the batch's users.
pub fn rating_ranking_loss(g: &mut Graph, batch: &Minibatch, cfg: &LossConfig) -> Result<Var> {
    let b = batch.pairs.len();
    if b == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    for v in [batch.users, batch.items] {
        if g.shape(v).first() != Some(&b) {
            return Err(Error::shape("rating_ranking_loss", g.shape(v), &[b]));
        }
    }
    let mut scores = g.matmul_bt(batch.users, batch.items)?;
    if cfg.temperature != 1.0 {
        scores = g.scale(scores, 1.0 / cfg.temperature)?;
    }
    let (rows, cols) = if cfg.filter_false_negatives {
        let (r, c) = false_negative_masks(batch);
        (Some(r), Some(c))
    } else {
        (None, None)
    };
    let item_side = g.logsumexp_rows(scores, rows.as_deref())?;
    let st = g.transpose(scores)?;
    let user_side = g.logsumexp_rows(st, cols.as_deref())?;
    let diag = g.diag(scores)?;
    let a = g.sum(item_side)?;
    let c = g.sum(user_side)?;
    let d = g.sum(diag)?;
    let d2 = g.scale(d, 2.0)?;
    let ac = g.add(a, c)?;
    let total = g.sub(ac, d2)?;
    g.scale(total, 1.0 / b as f64)
}

/// Mean over items of `−log(Σ_{c<c'} exp(z^c·z^c') / Z)` with `Z` summing
/// `exp(z_j^c·z_j'^c')` over every batch item `j'` and every attribute pair
/// `(c, c')`, diagonal included. Returns `(loss, degenerate)`; with one
/// attribute the loss is the constant 0.
pub fn multimodal_alignment_loss(g: &mut Graph, batch: &Minibatch, cfg: &LossConfig) -> Result<(Var, bool)> {
    let c = batch.modalities.len();
    let b = batch.pairs.len();
    if b == 0 {
        return Err(Error::Contract("empty minibatch".into()));
    }
    if c < 2 {
        return Ok((g.constant(Tensor::scalar(0.0)), true));
    }
    let d = g.shape(batch.modalities[0]).get(1).copied().unwrap_or(0);
    for &m in &batch.modalities {
        if g.shape(m) != [b, d] {
            return Err(Error::shape("multimodal_alignment_loss", g.shape(m), &[b, d]));
        }
    }
    // Row c·B + j of the stack is z_j^(c).
    let z = g.concat_rows(&batch.modalities)?;
    let mut sims = g.matmul_bt(z, z)?;
    if cfg.temperature != 1.0 {
        sims = g.scale(sims, 1.0 / cfg.temperature)?;
    }
    let n = c * b;
    let mut per_item = Vec::with_capacity(b);
    for j in 0..b {
        let mut den = vec![false; n * n];
        let mut num = vec![false; n * n];
        for ca in 0..c {
            let r = ca * b + j;
            den[r * n..(r + 1) * n].fill(true);
            if cfg.exclude_self {
                den[r * n + r] = false;
            }
            for cb in ca + 1..c {
                num[r * n + cb * b + j] = true;
            }
        }
        let log_z = g.logsumexp_masked(sims, &den)?;
        let log_num = g.logsumexp_masked(sims, &num)?;
        per_item.push(g.sub(log_z, log_num)?);
    }
    let mut acc = per_item[0];
    for &t in &per_item[1..] {
        acc = g.add(acc, t)?;
    }
    Ok((g.scale(acc, 1.0 / b as f64)?, false))
}

/// `L = L_R + λ·L_M`.
pub fn combined_loss(g: &mut Graph, batch: &Minibatch, cfg: &LossConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let rating = rating_ranking_loss(g, batch, cfg)?;
    let (alignment, degenerate) = if cfg.lambda == 0.0 {
        (g.constant(Tensor::scalar(0.0)), batch.modalities.len() < 2)
    } else {
        multimodal_alignment_loss(g, batch, cfg)?
    };
    let total = if cfg.lambda == 0.0 || degenerate {
        rating
    } else {
        let weighted = g.scale(alignment, cfg.lambda)?;
        g.add(rating, weighted)?
    };
    Ok(LossTerms {
        total,
        rating,
        alignment,
        lambda: cfg.lambda,
        alignment_degenerate: degenerate,
    })
}
