//! Synthetic cold-start datasets: latent user/item factors drive both the
//! interactions and the item content, so content determines taste.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{write_manifest, write_ratings_tsv, ManifestAttribute, ManifestRecord, RawContent, RawPayload};
use super::io::{INTERACTIONS_FILE, MANIFEST_FILE};
use super::Rating;
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::tensor::io::{round_to_f32, save_crt1};
use crate::tensor::Tensor;

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    /// Latent factor dimension `k`.
    pub latent: usize,
    /// Standard deviation of the preference noise.
    pub noise: f64,
    /// Target fraction of positive `(user, item)` pairs; 1 admits every pair.
    pub density: f64,
    pub vocab_size: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    /// One attribute per entry, in order.
    pub modalities: Vec<Modality>,
    pub video_frames: usize,
    pub text_len: usize,
    /// Contrast of the factor → pixel map.
    pub image_gain: f64,
    pub pixel_noise: f64,
    /// Inverse temperature of the factor → word distribution.
    pub text_beta: f64,
    /// Fraction of non-positive pairs emitted as low (1–3) ratings.
    pub low_rating_fraction: f64,
    pub seed: u64,
    /// Seed of the content map; defaults to `seed`. Two populations sharing
    /// it share how factors turn into content.
    pub content_seed: Option<u64>,
    /// Give each attribute a disjoint contiguous block of the factors.
    pub factor_split: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            users: 200,
            items: 300,
            latent: 8,
            noise: 0.1,
            density: 0.03,
            vocab_size: 64,
            image_size: 32,
            modalities: vec![Modality::Image, Modality::Text],
            video_frames: 4,
            text_len: 12,
            image_gain: 2.0,
            pixel_noise: 0.02,
            text_beta: 2.0,
            low_rating_fraction: 0.01,
            seed: 0,
            content_seed: None,
            factor_split: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("users", self.users),
            ("items", self.items),
            ("latent", self.latent),
            ("vocab_size", self.vocab_size),
            ("image_size", self.image_size),
            ("video_frames", self.video_frames),
            ("text_len", self.text_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synth `{name}` must be positive")));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("synth needs at least one modality".into()));
        }
        if self.factor_split && self.latent < self.modalities.len() {
            return Err(Error::Config(format!(
                "cannot split {} factors over {} attributes",
                self.latent,
                self.modalities.len()
            )));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config(format!("density {} outside (0, 1]", self.density)));
        }
        if (self.density * (self.users * self.items) as f64).round() < 1.0 {
            return Err(Error::Config(format!("density {} yields no positives", self.density)));
        }
        let finite_nonneg = [
            ("noise", self.noise),
            ("image_gain", self.image_gain),
            ("pixel_noise", self.pixel_noise),
            ("text_beta", self.text_beta),
            ("low_rating_fraction", self.low_rating_fraction),
        ];
        if let Some((name, v)) = finite_nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("synth `{name}` = {v} must be finite and non-negative")));
        }
        if self.low_rating_fraction > 1.0 {
            return Err(Error::Config("low_rating_fraction must be at most 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Factor range `[lo, hi)` that attribute `c` sees.
    pub fn factor_range(&self, c: usize) -> (usize, usize) {
        if !self.factor_split {
            return (0, self.latent);
        }
        let n = self.modalities.len();
        (c * self.latent / n, (c + 1) * self.latent / n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthProvenance {
    pub generator: String,
    pub seed: u64,
    pub content_seed: u64,
    pub config_hash: String,
    pub users: usize,
    pub items: usize,
    pub positives: usize,
    /// `positives / (users · items)`.
    pub density: f64,
    /// Preference threshold `τ`; `None` when every pair is admitted.
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub config: SynthConfig,
    pub ratings: Vec<Rating>,
    pub manifest: Vec<ManifestRecord>,
    pub content: RawContent,
    pub provenance: SynthProvenance,
    /// `M × k`.
    pub user_factors: Tensor,
    /// `N × k`.
    pub item_factors: Tensor,
}

fn id(prefix: char, i: usize, n: usize) -> String {
    let width = n.saturating_sub(1).to_string().len();
    format!("{prefix}{i:0width$}")
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Fixed random maps from factors to content, one per attribute.
enum ContentMap {
    Image { a: Vec<f64> },
    Video { a: Vec<f64>, drift: Vec<f64> },
    Text { words: Vec<f64> },
}

impl ContentMap {
    fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<ContentMap> {
        let pixels = cfg.image_size * cfg.image_size * 3;
        cfg.modalities
            .iter()
            .map(|m| match m {
                Modality::Image => ContentMap::Image { a: gaussian(rng, pixels * cfg.latent) },
                Modality::Video => ContentMap::Video {
                    a: gaussian(rng, pixels * cfg.latent),
                    drift: gaussian(rng, pixels * cfg.latent),
                },
                Modality::Text => ContentMap::Text { words: gaussian(rng, cfg.vocab_size * cfg.latent) },
            })
            .collect()
    }
}

/// `(M · b)` restricted to the factors in `[lo, hi)`, scaled by `1/√(hi−lo)`.
fn project(m: &[f64], b: &[f64], (lo, hi): (usize, usize)) -> Vec<f64> {
    let k = b.len();
    let scale = 1.0 / ((hi - lo) as f64).sqrt();
    m.chunks(k)
        .map(|row| (lo..hi).map(|f| row[f] * b[f]).sum::<f64>() * scale)
        .collect()
}

fn render_pixels(cfg: &SynthConfig, logits: impl Iterator<Item = f64>, rng: &mut impl Rng) -> Vec<f64> {
    logits
        .map(|x| {
            let noise: f64 = rng.sample(StandardNormal);
            (sigmoid(cfg.image_gain * x) + cfg.pixel_noise * noise).clamp(0.0, 1.0)
        })
        .collect()
}

fn make_payload(cfg: &SynthConfig, c: usize, map: &ContentMap, b: &[f64], rng: &mut impl Rng) -> Result<RawPayload> {
    let range = cfg.factor_range(c);
    let s = cfg.image_size;
    Ok(match map {
        ContentMap::Image { a } => {
            let logits = project(a, b, range);
            let mut t = Tensor::new(vec![s, s, 3], render_pixels(cfg, logits.into_iter(), rng))?;
            round_to_f32(&mut t);
            RawPayload::Image(t)
        }
        ContentMap::Video { a, drift } => {
            let base = project(a, b, range);
            let moved = project(drift, b, range);
            let t_max = (cfg.video_frames.max(2) - 1) as f64;
            let mut data = Vec::with_capacity(cfg.video_frames * base.len());
            for t in 0..cfg.video_frames {
                let w = t as f64 / t_max;
                let logits = base.iter().zip(&moved).map(|(x, d)| x + w * d);
                data.extend(render_pixels(cfg, logits, rng));
            }
            let mut t = Tensor::new(vec![cfg.video_frames, s, s, 3], data)?;
            round_to_f32(&mut t);
            RawPayload::Video(t)
        }
        ContentMap::Text { words } => {
            let logits = project(words, b, range);
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (cfg.text_beta * (l - top)).exp()).collect();
            let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("word distribution: {e}")))?;
            let text: Vec<String> = (0..cfg.text_len).map(|_| format!("w{}", dist.sample(rng))).collect();
            RawPayload::Text(text.join(" "))
        }
    })
}

fn payload_path(item: &str, c: usize, m: Modality) -> String {
    let ext = match m {
        Modality::Text => "txt",
        _ => "crt",
    };
    format!("content/{item}.{c}.{}.{ext}", m.as_str())
}

/// Draws a dataset. Positives are pairs with `a_i·b_j/√k + ε > τ`, `τ` the
/// empirical quantile that hits the target density.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let (m, n, k) = (cfg.users, cfg.items, cfg.latent);
    let content_seed = cfg.content_seed.unwrap_or(cfg.seed);
    let maps = ContentMap::draw(cfg, &mut ChaCha8Rng::seed_from_u64(content_seed));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = gaussian(&mut rng, m * k);
    let b = gaussian(&mut rng, n * k);
    let scale = 1.0 / (k as f64).sqrt();
    let mut pref = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let dot: f64 = (0..k).map(|f| a[i * k + f] * b[j * k + f]).sum();
            let eps: f64 = rng.sample(StandardNormal);
            pref.push(dot * scale + cfg.noise * eps);
        }
    }
    let target = (cfg.density * (m * n) as f64).round() as usize;
    let threshold = (target < m * n).then(|| {
        let mut sorted = pref.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        0.5 * (sorted[target - 1] + sorted[target])
    });

    let users: Vec<String> = (0..m).map(|i| id('u', i, m)).collect();
    let items: Vec<String> = (0..n).map(|j| id('i', j, n)).collect();
    let mut ratings = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let positive = threshold.is_none_or(|t| pref[i * n + j] > t);
            let rating = if positive {
                Some(rng.gen_range(4..=5))
            } else if rng.gen::<f64>() < cfg.low_rating_fraction {
                Some(rng.gen_range(1..=3))
            } else {
                None
            };
            if let Some(r) = rating {
                ratings.push(Rating {
                    user: users[i].clone(),
                    item: items[j].clone(),
                    rating: r as f64,
                    timestamp: rng.gen_range(0..1_000_000),
                });
            }
        }
    }
    let positives = ratings.iter().filter(|r| r.rating >= super::RATING_THRESHOLD).count();

    let mut content_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    content_rng.set_stream(1);
    let mut content = RawContent::new();
    let mut manifest = Vec::with_capacity(n);
    for (j, item) in items.iter().enumerate() {
        let bj = &b[j * k..(j + 1) * k];
        let payloads = maps
            .iter()
            .enumerate()
            .map(|(c, map)| make_payload(cfg, c, map, bj, &mut content_rng))
            .collect::<Result<Vec<_>>>()?;
        manifest.push(ManifestRecord {
            item_id: item.clone(),
            attributes: payloads
                .iter()
                .enumerate()
                .map(|(c, p)| ManifestAttribute {
                    modality: p.modality(),
                    path: payload_path(item, c, p.modality()),
                })
                .collect(),
        });
        content.insert(item.clone(), payloads);
    }

    Ok(SynthData {
        config: cfg.clone(),
        ratings,
        manifest,
        content,
        provenance: SynthProvenance {
            generator: "coldrec-synth".into(),
            seed: cfg.seed,
            content_seed,
            config_hash: cfg.hash(),
            users: m,
            items: n,
            positives,
            density: positives as f64 / (m * n) as f64,
            threshold,
        },
        user_factors: Tensor::new(vec![m, k], a)?,
        item_factors: Tensor::new(vec![n, k], b)?,
    })
}

/// Writes `interactions.tsv`, `manifest.ndjson`, `content/` and
/// `provenance.json` under `out`.
pub fn write_synth(out: &Path, data: &SynthData) -> Result<()> {
    std::fs::create_dir_all(out.join("content"))?;
    write_ratings_tsv(&out.join(INTERACTIONS_FILE), &data.ratings, false)?;
    write_manifest(&out.join(MANIFEST_FILE), &data.manifest)?;
    for rec in &data.manifest {
        for (attr, payload) in rec.attributes.iter().zip(&data.content[&rec.item_id]) {
            let path = out.join(&attr.path);
            match payload {
                RawPayload::Image(t) | RawPayload::Video(t) => save_crt1(&path, t)?,
                RawPayload::Text(s) => std::fs::write(&path, s)?,
            }
        }
    }
    let mut prov = serde_json::to_string_pretty(&data.provenance)?;
    prov.push('\n');
    std::fs::write(out.join(PROVENANCE_FILE), prov)?;
    Ok(())
}
