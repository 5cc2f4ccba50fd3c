//! Glue from interactions and raw content to a split, model-ready items and
//! a fresh model.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{cold_split, content_items, content_vocabulary, filter_users, ColdSplit, InteractionSet, RawContent};
use crate::encoders::{Modality, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Item, Model, ModelConfig, ModelSpec};
use crate::train::TrainData;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation and test shares of the items.
    pub ratios: (f64, f64, f64),
    pub seed: u64,
    /// Users with fewer positives are dropped before splitting.
    pub min_ratings: usize,
    /// Cap on the vocabulary size, specials included.
    pub max_vocab: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: (0.85, 0.075, 0.075),
            seed: 0,
            min_ratings: 5,
            max_vocab: None,
        }
    }
}

/// A split with everything needed to build and train a model on it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: ColdSplit,
    pub items: HashMap<String, Item>,
    pub vocabulary: Option<Vocabulary>,
    pub modalities: Vec<Modality>,
    pub config: ModelConfig,
}

impl Prepared {
    /// Filters users, splits items, builds the vocabulary from training
    /// items only and resolves `spec` against the content's attributes.
    pub fn new(xs: &InteractionSet, content: &RawContent, spec: &ModelSpec, split: &SplitConfig) -> Result<Self> {
        let xs = filter_users(xs, split.min_ratings);
        let max_vocab = split.max_vocab;
        let split = cold_split(&xs, split.ratios, split.seed)?;
        let modalities: Vec<Modality> = content
            .values()
            .next()
            .ok_or_else(|| Error::Data("no item content".into()))?
            .iter()
            .map(|p| p.modality())
            .collect();
        let vocabulary = modalities
            .contains(&Modality::Text)
            .then(|| content_vocabulary(content, &split.train_items, max_vocab));
        let config = spec.resolve(&modalities, vocabulary.as_ref().map(Vocabulary::len))?;
        let items = content_items(content, vocabulary.as_ref(), spec.text.max_len)?;
        Ok(Self {
            split,
            items,
            vocabulary,
            modalities,
            config,
        })
    }

    /// A freshly initialized model over the split's training users.
    pub fn model(&self, seed: u64) -> Result<Model> {
        Model::new(self.config.clone(), self.split.users.clone(), self.vocabulary.clone(), seed)
    }

    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            split: &self.split,
            items: &self.items,
        }
    }
}
