use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{filter_users, InteractionSet, Rating};
use crate::encoders::{tokenize, Modality, Payload, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Item;
use crate::tensor::io::load_crt1;
use crate::tensor::Tensor;

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const MANIFEST_FILE: &str = "manifest.ndjson";

/// Reads `user<TAB>item<TAB>rating<TAB>timestamp` lines.
pub fn read_ratings_tsv(path: &Path, header: bool) -> Result<Vec<Rating>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(header)
        .quoting(false)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 1 + usize::from(header);
        let rec = rec.map_err(|e| Error::Data(format!("{}:{line}: {e}", path.display())))?;
        let bad = |what: &str| Error::Data(format!("{}:{line}: {what} in record {:?}", path.display(), rec.as_slice()));
        if rec.len() != 4 {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let rating: f64 = rec[2].parse().map_err(|_| bad("unparsable rating"))?;
        if !rating.is_finite() {
            return Err(bad("non-finite rating"));
        }
        out.push(Rating {
            user: rec[0].to_string(),
            item: rec[1].to_string(),
            rating,
            timestamp: rec[3].parse().map_err(|_| bad("unparsable timestamp"))?,
        });
    }
    Ok(out)
}

pub fn write_ratings_tsv(path: &Path, ratings: &[Rating], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)
        .map_err(|e| Error::Io(e.into()))?;
    let csv_err = |e: csv::Error| Error::Io(e.into());
    if header {
        w.write_record(["user_id", "item_id", "rating", "timestamp"]).map_err(csv_err)?;
    }
    for r in ratings {
        if [&r.user, &r.item].iter().any(|s| s.contains(['\t', '\n'])) {
            return Err(Error::Data(format!("id with tab or newline: {:?}/{:?}", r.user, r.item)));
        }
        w.write_record([r.user.as_str(), r.item.as_str(), &r.rating.to_string(), &r.timestamp.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestAttribute {
    pub modality: Modality,
    /// Relative to the dataset directory.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub item_id: String,
    pub attributes: Vec<ManifestAttribute>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = BufReader::new(File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    let mut out = Vec::new();
    for (n, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e} in record {line}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Content as stored on disk, before tokenization.
#[derive(Clone, Debug, PartialEq)]
pub enum RawPayload {
    Image(Tensor),
    Video(Tensor),
    Text(String),
}

impl RawPayload {
    pub fn modality(&self) -> Modality {
        match self {
            RawPayload::Image(_) => Modality::Image,
            RawPayload::Video(_) => Modality::Video,
            RawPayload::Text(_) => Modality::Text,
        }
    }
}

pub type RawContent = BTreeMap<String, Vec<RawPayload>>;

/// Drops `floor(fraction·T)` frames from each end of a `T × H × W × 3` video.
pub fn trim_frames(video: &Tensor, fraction: f64) -> Result<Tensor> {
    let s = video.shape().to_vec();
    if s.len() != 4 || !(0.0..0.5).contains(&fraction) {
        return Err(Error::Input(format!("cannot trim {fraction} of a {s:?} video")));
    }
    let cut = (fraction * s[0] as f64).floor() as usize;
    let per = s[1] * s[2] * s[3];
    let keep = s[0] - 2 * cut;
    Tensor::new(vec![keep, s[1], s[2], s[3]], video.data()[cut * per..(cut + keep) * per].to_vec())
}

/// Resamples frames from `src_fps` to `dst_fps` by nearest earlier frame.
pub fn subsample_frames(video: &Tensor, src_fps: f64, dst_fps: f64) -> Result<Tensor> {
    let s = video.shape().to_vec();
    if s.len() != 4 || !(src_fps > 0.0 && dst_fps > 0.0) {
        return Err(Error::Input(format!("cannot resample a {s:?} video from {src_fps} to {dst_fps} fps")));
    }
    let per = s[1] * s[2] * s[3];
    let step = src_fps / dst_fps;
    let mut data = Vec::new();
    let mut k = 0usize;
    loop {
        let src = (k as f64 * step).floor() as usize;
        if src >= s[0] {
            break;
        }
        data.extend_from_slice(&video.data()[src * per..(src + 1) * per]);
        k += 1;
    }
    Tensor::new(vec![k, s[1], s[2], s[3]], data)
}

fn load_payload(root: &Path, item: &str, a: &ManifestAttribute) -> Result<RawPayload> {
    let path: PathBuf = root.join(&a.path);
    let ctx = |e: Error| Error::Data(format!("item `{item}` {} payload {}: {e}", a.modality.as_str(), path.display()));
    Ok(match a.modality {
        Modality::Image => {
            let t = load_crt1(&path).map_err(ctx)?;
            if !matches!(t.shape(), [_, _, 3] | [_, _, _, 3]) {
                return Err(ctx(Error::Input(format!("image shape {:?}", t.shape()))));
            }
            RawPayload::Image(t)
        }
        Modality::Video => {
            let t = load_crt1(&path).map_err(ctx)?;
            if !matches!(t.shape(), [_, _, _, 3]) {
                return Err(ctx(Error::Input(format!("video shape {:?}", t.shape()))));
            }
            RawPayload::Video(t)
        }
        Modality::Text => RawPayload::Text(std::fs::read_to_string(&path).map_err(|e| ctx(e.into()))?),
    })
}

/// A dataset directory: `interactions.tsv`, `manifest.ndjson` and payloads.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub ratings: Vec<Rating>,
    /// Binarized, user-filtered positives.
    pub interactions: InteractionSet,
    pub manifest: Vec<ManifestRecord>,
    /// Attribute modalities, in order, shared by every item.
    pub modalities: Vec<Modality>,
    pub content: RawContent,
}

/// Loads and validates a dataset directory. Every item with interactions
/// must have a manifest record, and every record the same attribute layout.
/// Content is loaded for every record, including items nobody rated.
pub fn load_dataset(root: &Path, threshold: f64, min_ratings: usize, header: bool) -> Result<Dataset> {
    let ratings = read_ratings_tsv(&root.join(INTERACTIONS_FILE), header)?;
    let interactions = filter_users(&InteractionSet::ingest(&ratings, threshold), min_ratings);
    let manifest = read_manifest(&root.join(MANIFEST_FILE))?;
    let by_id: HashMap<&str, &ManifestRecord> = manifest.iter().map(|r| (r.item_id.as_str(), r)).collect();
    if by_id.len() != manifest.len() {
        return Err(Error::Data("manifest lists an item more than once".into()));
    }
    if let Some(x) = interactions.interactions.iter().find(|x| !by_id.contains_key(x.item.as_str())) {
        return Err(Error::Data(format!(
            "interaction ({}, {}, t={}) references an item without content",
            x.user, x.item, x.timestamp
        )));
    }
    let layout = |r: &ManifestRecord| r.attributes.iter().map(|a| a.modality).collect::<Vec<_>>();
    let modalities = manifest.first().map(layout).unwrap_or_default();
    if modalities.is_empty() {
        return Err(Error::Data("manifest is empty or its first record has no attributes".into()));
    }
    let mut content = RawContent::new();
    for rec in &manifest {
        let item = &rec.item_id;
        if layout(rec) != modalities {
            return Err(Error::Data(format!(
                "item `{item}` has attributes {:?}, expected {:?}",
                layout(rec),
                modalities
            )));
        }
        let payloads = rec
            .attributes
            .iter()
            .map(|a| load_payload(root, item, a))
            .collect::<Result<Vec<_>>>()?;
        content.insert(item.clone(), payloads);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        ratings,
        interactions,
        manifest,
        modalities,
        content,
    })
}

impl Dataset {
    pub fn has_text(&self) -> bool {
        self.modalities.contains(&Modality::Text)
    }

    /// Vocabulary over the text of `items` (normally the training items).
    pub fn vocabulary(&self, items: &[String], max_size: Option<usize>) -> Vocabulary {
        content_vocabulary(&self.content, items, max_size)
    }

    /// Model-ready items; text is tokenized with `vocab` and cut to `max_len`.
    pub fn items(&self, vocab: Option<&Vocabulary>, max_len: usize) -> Result<HashMap<String, Item>> {
        content_items(&self.content, vocab, max_len)
    }
}

/// Vocabulary over the text attributes of `items`.
pub fn content_vocabulary(content: &RawContent, items: &[String], max_size: Option<usize>) -> Vocabulary {
    let texts: Vec<&str> = items
        .iter()
        .filter_map(|i| content.get(i))
        .flat_map(|ps| ps.iter())
        .filter_map(|p| match p {
            RawPayload::Text(t) => Some(t.as_str()),
            _ => None,
        })
        .collect();
    Vocabulary::build(texts, 1, max_size)
}

/// Tokenizes text with `vocab` (cut to `max_len`) and wraps every item.
pub fn content_items(content: &RawContent, vocab: Option<&Vocabulary>, max_len: usize) -> Result<HashMap<String, Item>> {
    content
        .iter()
        .map(|(id, ps)| {
            let attributes = ps
                .iter()
                .map(|p| {
                    Ok(match p {
                        RawPayload::Image(t) => Payload::Image(t.clone()),
                        RawPayload::Video(t) => Payload::Video(t.clone()),
                        RawPayload::Text(s) => {
                            let v = vocab.ok_or_else(|| Error::Config("text content needs a vocabulary".into()))?;
                            Payload::Text(tokenize(s, v, max_len))
                        }
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((id.clone(), Item { id: id.clone(), attributes }))
        })
        .collect()
}
