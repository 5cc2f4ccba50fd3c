//! Optimization: Adam, the warmup/plateau/decay schedule, batch assembly and
//! validation-based model selection.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ColdSplit, SplitName};
use crate::error::{Error, Result};
use crate::eval::{evaluate_with, Metric, MetricReport};
use crate::model::{item_rng, Item, ItemTable, Model};
use crate::objective::{combined_loss, LossConfig, LossTerms, LossValue, Minibatch, Positives};
use crate::tensor::{Ctx, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: f64,
    /// Fraction of training after which the rate drops.
    pub decay_point: f64,
    pub decay_factor: f64,
    pub loss: LossConfig,
    pub adam: AdamConfig,
    /// Drives batch order and clip sampling.
    pub seed: u64,
    /// Segments per video item at validation time.
    pub segments: usize,
    /// Clip seed for validation inference.
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-3,
            batch_size: 48,
            epochs: 50,
            warmup_epochs: 3.0,
            decay_point: 0.7,
            decay_factor: 0.2,
            loss: LossConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            segments: crate::model::DEFAULT_SEGMENTS,
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("lr_peak must be positive, got {}", self.lr_peak));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.decay_point > 0.0 && self.decay_point < 1.0) {
            return bad(format!("decay_point must lie in (0, 1), got {}", self.decay_point));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs.is_finite()) {
            return bad(format!("warmup_epochs must be >= 0, got {}", self.warmup_epochs));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs as f64 {
            return bad(format!(
                "warmup_epochs ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            ));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid Adam settings {a:?}"));
        }
        if self.segments == 0 {
            return bad("segments must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate at `progress ∈ [0, 1]` of training: linear warmup from 0
/// over `warmup_epochs`, the peak until `decay_point`, then
/// `decay_factor · lr_peak`.
pub fn lr_at(progress: f64, cfg: &TrainConfig) -> f64 {
    let warmup = if cfg.epochs == 0 {
        0.0
    } else {
        cfg.warmup_epochs / cfg.epochs as f64
    };
    if progress < warmup {
        cfg.lr_peak * progress / warmup
    } else if progress < cfg.decay_point {
        cfg.lr_peak
    } else {
        cfg.decay_factor * cfg.lr_peak
    }
}

/// Adam moments, one buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(ps: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = ps.ids().map(|id| vec![0.0; ps.get(id).numel()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `ps`.
/// Frozen parameters are left alone. Nothing is written if any gradient is
/// non-finite.
pub fn adam_step(ps: &mut ParamStore, state: &mut OptimizerState, lr: f64, adam: &AdamConfig) -> Result<()> {
    if state.m.len() != ps.len() {
        return Err(Error::Contract(format!(
            "optimizer state tracks {} parameters, store has {}",
            state.m.len(),
            ps.len()
        )));
    }
    for id in ps.ids() {
        if let Some(g) = ps.get(id).grad() {
            if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}` at element {k}", ps.name(id))));
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        if ps.is_frozen(id) {
            continue;
        }
        let i = id.index();
        let p = ps.get_mut(id);
        let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for ((x, g), (m, v)) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut().zip(v.iter_mut())) {
            *m = adam.beta1 * *m + (1.0 - adam.beta1) * g;
            *v = adam.beta2 * *v + (1.0 - adam.beta2) * g * g;
            *x -= lr * (*m / c1) / ((*v / c2).sqrt() + adam.eps);
        }
    }
    Ok(())
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean combined loss over the epoch's batches.
    pub loss: f64,
    pub rating_loss: f64,
    /// Unweighted alignment loss; 0 when disabled.
    pub alignment_loss: f64,
    /// `None` when the split has no validation interactions.
    pub val_ndcg10: Option<f64>,
    /// Rate used by the epoch's last step.
    pub lr: f64,
}

pub const HISTORY_HEADER: &str = "epoch\tloss\trating_loss\talignment_loss\tval_ndcg10\tlr";

pub fn history_tsv(history: &[EpochRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let val = r.val_ndcg10.map_or(String::new(), |v| v.to_string());
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            r.epoch, r.loss, r.rating_loss, r.alignment_loss, val, r.lr
        ));
    }
    s
}

/// What training needs beyond the model: the split and the content of its items.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub split: &'a ColdSplit,
    pub items: &'a HashMap<String, Item>,
}

impl<'a> TrainData<'a> {
    fn lookup(&self, ids: &[String]) -> Result<Vec<&'a Item>> {
        ids.iter()
            .map(|id| {
                self.items
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("item `{id}` has no content")))
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation NDCG@10 (the last
    /// epoch when there is no validation signal).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_ndcg10: Option<f64>,
}

fn clip_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1)
}

/// Records the combined objective of a batch of `(user index, item index)`
/// pairs on `cx`. Each distinct item is encoded once; its clips come from
/// `item_rng(clip_seed, id)`, so the result does not depend on the order of
/// `batch`.
pub fn batch_objective(
    cx: &mut Ctx,
    model: &Model,
    batch: &[(usize, usize)],
    items: &[&Item],
    positives: Option<&Positives>,
    loss: &LossConfig,
    clip_seed: u64,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut slot: HashMap<usize, usize> = HashMap::new();
    let mut distinct = Vec::new();
    for &(_, j) in batch {
        slot.entry(j).or_insert_with(|| {
            distinct.push(j);
            distinct.len() - 1
        });
    }
    let attrs = model.cfg.attributes.len();
    let mut vs = Vec::with_capacity(distinct.len());
    let mut mods: Vec<Vec<Var>> = vec![Vec::with_capacity(distinct.len()); attrs];
    for &j in &distinct {
        let item = items
            .get(j)
            .ok_or_else(|| Error::Contract(format!("item index {j} out of range")))?;
        let f = model.forward_item(cx, item, &mut item_rng(clip_seed, &item.id))?;
        vs.push(f.v);
        for (c, m) in f.modalities.iter().enumerate() {
            mods[c].push(m.aggregated);
        }
    }
    let rows: Vec<usize> = batch.iter().map(|(_, j)| slot[j]).collect();
    let users: Vec<usize> = batch.iter().map(|&(u, _)| u).collect();
    let table = cx.p(model.user_table);
    let u = cx.g.gather_rows(table, &users)?;
    let stacked = cx.g.concat_rows(&vs)?;
    let v = cx.g.gather_rows(stacked, &rows)?;
    let mut modalities = Vec::with_capacity(attrs);
    for per_item in &mods {
        let stacked = cx.g.concat_rows(per_item)?;
        modalities.push(cx.g.gather_rows(stacked, &rows)?);
    }
    let mb = Minibatch {
        pairs: batch.to_vec(),
        users: u,
        items: v,
        modalities,
        positives,
    };
    combined_loss(cx.g, &mb, loss)
}

/// Forward, loss, backward and one Adam update; see [`batch_objective`].
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    state: &mut OptimizerState,
    batch: &[(usize, usize)],
    items: &[&Item],
    positives: Option<&Positives>,
    loss: &LossConfig,
    lr: f64,
    adam: &AdamConfig,
    clip_seed: u64,
) -> Result<LossValue> {
    let mut g = Graph::new();
    let terms = {
        let mut cx = Ctx::new(&mut g, &model.params);
        batch_objective(&mut cx, model, batch, items, positives, loss, clip_seed)?
    };
    let value = terms.value(&g);
    if !value.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} (rating {}, alignment {}) at optimizer step {}",
            value.total,
            value.rating_part,
            value.alignment_part,
            state.t + 1
        )));
    }
    g.backward(terms.total)?;
    g.accumulate_into(&mut model.params);
    let stepped = adam_step(&mut model.params, state, lr, adam);
    model.params.zero_grad();
    stepped?;
    Ok(value)
}

/// Scores `table` for every user with a positive among its items and
/// macro-averages the metrics. `user` maps an id to its vector.
pub fn evaluate_table<'a, F>(
    table: &ItemTable,
    positives: &BTreeMap<String, HashSet<String>>,
    ks: &[usize],
    user: F,
) -> Result<MetricReport>
where
    F: Fn(&str) -> Option<&'a [f64]> + Sync,
{
    evaluate_with(&table.ids, positives, ks, |u| {
        let vec = user(u).ok_or_else(|| Error::Data(format!("user `{u}` has no trained vector")))?;
        table.scores(vec)
    })
}

/// Ranks `split`'s items in `which` for every user with positives there.
pub fn evaluate_split(
    model: &Model,
    data: TrainData,
    which: SplitName,
    ks: &[usize],
    segments: usize,
    seed: u64,
) -> Result<MetricReport> {
    let items = data.lookup(data.split.items(which))?;
    let table = model.item_table(&items, segments, seed)?;
    evaluate_table(&table, &data.split.positives(which), ks, |u| {
        model.user_index(u).map(|i| model.user_vector(i))
    })
}

fn validation_ndcg10(model: &Model, data: TrainData, cfg: &TrainConfig) -> Result<Option<f64>> {
    if data.split.val.is_empty() {
        return Ok(None);
    }
    let r = evaluate_split(model, data, SplitName::Val, &[10], cfg.segments, cfg.eval_seed)?;
    Ok(r.get(Metric::Ndcg, 10))
}

/// Training pairs as `(user index, train-item index)` and, if filtering is
/// on, the full set of known training positives.
fn training_pairs(model: &Model, split: &ColdSplit) -> Result<Vec<(usize, usize)>> {
    let item_index: HashMap<&str, usize> =
        split.train_items.iter().enumerate().map(|(j, i)| (i.as_str(), j)).collect();
    split
        .train
        .iter()
        .map(|x| {
            let u = model
                .user_index(&x.user)
                .ok_or_else(|| Error::Data(format!("training user `{}` is not in the model", x.user)))?;
            let j = *item_index
                .get(x.item.as_str())
                .ok_or_else(|| Error::Data(format!("training item `{}` is not a train item", x.item)))?;
            Ok((u, j))
        })
        .collect()
}

/// Fixed-epoch training with best-validation model selection.
pub fn train_loop(model: Model, data: TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_loop_with(model, data, cfg, &mut |_| {})
}

/// As [`train_loop`], calling `on_epoch` after every epoch.
pub fn train_loop_with(
    mut model: Model,
    data: TrainData,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut history = Vec::with_capacity(cfg.epochs);
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history,
            best_epoch: None,
            best_val_ndcg10: None,
        });
    }
    let items = data.lookup(&data.split.train_items)?;
    let mut pairs = training_pairs(&model, data.split)?;
    if pairs.is_empty() {
        return Err(Error::Data("training split has no interactions".into()));
    }
    let positives: Option<Positives> = cfg.loss.filter_false_negatives.then(|| pairs.iter().copied().collect());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut state = OptimizerState::new(&model.params);
    let steps = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = (steps * cfg.epochs) as f64;
    let mut best: Option<(usize, f64, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        let seed = clip_seed(cfg.seed, epoch);
        let (mut loss, mut rating, mut align, mut lr) = (0.0, 0.0, 0.0, 0.0);
        for (s, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            lr = lr_at((epoch * steps + s + 1) as f64 / total_steps, cfg);
            let v = train_step(
                &mut model,
                &mut state,
                batch,
                &items,
                positives.as_ref(),
                &cfg.loss,
                lr,
                &cfg.adam,
                seed,
            )
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("epoch {}, batch {s}: {m}", epoch + 1)),
                other => other,
            })?;
            loss += v.total;
            rating += v.rating_part;
            align += v.alignment_part;
        }
        let n = steps as f64;
        let val = validation_ndcg10(&model, data, cfg)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            loss: loss / n,
            rating_loss: rating / n,
            alignment_loss: align / n,
            val_ndcg10: val,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
        if let Some(v) = val {
            if best.as_ref().is_none_or(|(_, b, _)| v > *b) {
                best = Some((epoch + 1, v, model.params.clone()));
            }
        }
    }
    let (best_epoch, best_val_ndcg10) = match best {
        Some((e, v, params)) => {
            model.params = params;
            (Some(e), Some(v))
        }
        None => (None, None),
    };
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_ndcg10,
    })
}

/// Fits a fresh `num_users × D` user table against frozen item vectors
/// (rows of `item_vectors`) with the rating loss alone.
pub fn train_user_table(
    num_users: usize,
    item_vectors: &Tensor,
    pairs: &[(usize, usize)],
    cfg: &TrainConfig,
    init_std: f64,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    if item_vectors.shape().len() != 2 {
        return Err(Error::shape("train_user_table", item_vectors.shape(), &[0, 0]));
    }
    if let Some(&(u, j)) = pairs.iter().find(|&&(u, j)| u >= num_users || j >= item_vectors.rows()) {
        return Err(Error::Contract(format!("pair ({u}, {j}) out of range")));
    }
    let mut ps = ParamStore::new();
    let table = ps.normal(
        "users",
        &[num_users, item_vectors.cols()],
        init_std,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    if cfg.epochs == 0 || pairs.is_empty() {
        return Ok(ps.get(table).clone());
    }
    let positives: Option<Positives> = cfg.loss.filter_false_negatives.then(|| pairs.iter().copied().collect());
    let loss_cfg = LossConfig {
        lambda: 0.0,
        ..cfg.loss.clone()
    };
    let mut pairs = pairs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let mut state = OptimizerState::new(&ps);
    let steps = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = (steps * cfg.epochs) as f64;
    for epoch in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        for (s, batch) in pairs.chunks(cfg.batch_size).enumerate() {
            let lr = lr_at((epoch * steps + s + 1) as f64 / total_steps, cfg);
            let mut g = Graph::new();
            let rows: Vec<usize> = batch.iter().map(|&(u, _)| u).collect();
            let cols: Vec<usize> = batch.iter().map(|&(_, j)| j).collect();
            let t = g.param(&ps, table);
            let u = g.gather_rows(t, &rows)?;
            let all = g.constant(item_vectors.clone());
            let v = g.gather_rows(all, &cols)?;
            let mb = Minibatch {
                pairs: batch.to_vec(),
                users: u,
                items: v,
                modalities: Vec::new(),
                positives: positives.as_ref(),
            };
            let terms = combined_loss(&mut g, &mb, &loss_cfg)?;
            let value = g.value(terms.total).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("user-table loss {value} at epoch {}, batch {s}", epoch + 1)));
            }
            g.backward(terms.total)?;
            g.accumulate_into(&mut ps);
            adam_step(&mut ps, &mut state, lr, &cfg.adam)?;
            ps.zero_grad();
        }
    }
    Ok(ps.get(table).clone())
}
