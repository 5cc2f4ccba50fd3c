use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModalityEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{Ctx, ParamId, ParamStore};
use crate::transformer::{with_cls, EncoderConfig, EncoderStack, PositionKind, PositionalEncoding};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";

/// Token ↔ id map. Ids are contiguous from 0; `[PAD]`, `[UNK]`, `[CLS]` take 0, 1, 2.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from a corpus: tokens seen at least `min_count` times, most
    /// frequent first (ties lexicographic), capped at `max_size` entries
    /// including the specials.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        min_count: usize,
        max_size: Option<usize>,
    ) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for w in split_words(doc) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && ![PAD, UNK, CLS].contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = [PAD, UNK, CLS].iter().map(|s| s.to_string()).collect();
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(tokens.len()));
        tokens.extend(words.into_iter().take(room).map(|(w, _)| w));
        Self::from_tokens(tokens).expect("specials are unique")
    }

    /// Rebuilds from an id-ordered token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[0] != PAD || tokens[1] != UNK || tokens[2] != CLS {
            return Err(Error::Format("vocabulary must start with [PAD] [UNK] [CLS]".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(self.unk_id())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn unk_id(&self) -> usize {
        1
    }

    pub fn cls_id(&self) -> usize {
        2
    }

    /// Renders ids back to whitespace-joined text.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lower-cases and splits on whitespace; punctuation characters become
/// tokens of their own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Words → ids, unknown words → `[UNK]`, truncated to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    split_words(text)
        .into_iter()
        .take(max_len)
        .map(|w| vocab.id(&w))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    /// Longest token sequence, excluding `[CLS]`.
    pub max_len: usize,
    pub positions: PositionKind,
    pub encoder: EncoderConfig,
}

/// Word embeddings, positional encodings, `[CLS]`, then `L` blocks.
///
/// The `[CLS]` embedding is the word-embedding row of the `[CLS]` id.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub words: ParamId,
    pub positions: PositionalEncoding,
    pub stack: EncoderStack,
}

impl TextEncoder {
    pub fn init<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        cfg: &TextEncoderConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.encoder.validate()?;
        if cfg.vocab_size < 3 {
            return Err(Error::Config("vocabulary needs at least the 3 specials".into()));
        }
        let d = cfg.encoder.token_dim;
        Ok(Self {
            cfg: cfg.clone(),
            words: ps.normal(format!("{name}.words"), &[cfg.vocab_size, d], std, rng)?,
            positions: PositionalEncoding::init(
                ps,
                &format!("{name}.pos"),
                cfg.positions,
                cfg.max_len.max(1),
                d,
                std,
                rng,
            )?,
            stack: EncoderStack::init(ps, &format!("{name}.enc"), &cfg.encoder, std, rng)?,
        })
    }

    /// `[PAD]` ids (0) are masked out as attention keys.
    pub fn encode(&self, cx: &mut Ctx, ids: &[usize]) -> Result<ModalityEmbedding> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.cfg.vocab_size
            )));
        }
        if ids.len() > self.cfg.max_len {
            return Err(Error::Contract(format!(
                "{} tokens exceed max_len {}",
                ids.len(),
                self.cfg.max_len
            )));
        }
        let table = cx.p(self.words);
        let cls = cx.g.gather_rows(table, &[2])?;
        let tokens = if ids.is_empty() {
            None
        } else {
            let emb = cx.g.gather_rows(table, ids)?;
            Some(self.positions.add_to(cx, emb)?)
        };
        let seq = with_cls(cx.g, tokens, cls)?;
        let keep: Vec<bool> = std::iter::once(true).chain(ids.iter().map(|&i| i != 0)).collect();
        let keep = if keep.iter().all(|&k| k) { None } else { Some(keep) };
        let out = self.stack.forward(cx, seq, keep.as_deref())?;
        let aggregated = cx.g.slice_rows(out, 0, 1)?;
        Ok(ModalityEmbedding {
            aggregated,
            tokens: out,
            keep,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["the cat sat on the mat.", "A dog, a cat!"], 1, None)
    }

    #[test]
    fn empty_text_is_empty() {
        assert!(tokenize("", &vocab(), 16).is_empty());
    }

    #[test]
    fn case_folding() {
        let ids = tokenize("A a A", &vocab(), 16);
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i == ids[0]));
        assert_ne!(ids[0], vocab().unk_id());
    }

    #[test]
    fn punctuation_splits_and_unknowns_map_to_unk() {
        assert_eq!(split_words("Hello,world!  ok"), vec!["hello", ",", "world", "!", "ok"]);
        let v = vocab();
        let ids = tokenize("zebra cat", &v, 16);
        assert_eq!(ids[0], v.unk_id());
        assert_eq!(v.token(ids[1]), Some("cat"));
    }

    #[test]
    fn truncates_to_max_len() {
        assert_eq!(tokenize("the cat sat on the mat", &vocab(), 3).len(), 3);
    }

    #[test]
    fn specials_come_first_and_ids_are_contiguous() {
        let v = vocab();
        assert_eq!(&v.tokens()[..3], &[PAD, UNK, CLS]);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), i);
        }
        // "the", "cat" and "a" appear twice, so they lead the corpus tokens.
        assert_eq!(&v.tokens()[3..6], &["a", "cat", "the"]);
    }

    #[test]
    fn round_trip_for_in_vocabulary_tokens() {
        let v = vocab();
        for id in 0..v.len() {
            let tok = v.token(id).unwrap().to_string();
            assert_eq!(v.id(&tok), id);
        }
    }

    fn encoder(ps: &mut ParamStore, vocab: usize) -> TextEncoder {
        let cfg = TextEncoderConfig {
            vocab_size: vocab,
            max_len: 8,
            positions: PositionKind::Sinusoidal,
            encoder: EncoderConfig::new(8, 2, 2, 9),
        };
        TextEncoder::init(ps, "txt", &cfg, 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn single_token_gives_two_outputs() {
        let mut ps = ParamStore::new();
        let enc = encoder(&mut ps, 10);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &ps);
        let out = enc.encode(&mut cx, &[4]).unwrap();
        assert_eq!(cx.g.shape(out.tokens), &[2, 8]);
        let empty = enc.encode(&mut cx, &[]).unwrap();
        assert_eq!(cx.g.shape(empty.tokens), &[1, 8]);
    }

    #[test]
    fn padding_does_not_influence_real_tokens() {
        let mut ps = ParamStore::new();
        let enc = encoder(&mut ps, 10);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &ps);
        let short = enc.encode(&mut cx, &[4, 5]).unwrap();
        let padded = enc.encode(&mut cx, &[4, 5, 0, 0]).unwrap();
        let a = cx.g.value(short.tokens).clone();
        let b = cx.g.value(padded.tokens).clone();
        for r in 0..3 {
            for (x, y) in a.row(r).iter().zip(b.row(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_under_fixed_weights() {
        let mut ps = ParamStore::new();
        let enc = encoder(&mut ps, 10);
        let run = || {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, &ps);
            let out = enc.encode(&mut cx, &[3, 7, 9]).unwrap();
            cx.g.value(out.tokens).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn out_of_range_id_is_a_contract_error() {
        let mut ps = ParamStore::new();
        let enc = encoder(&mut ps, 10);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &ps);
        assert!(matches!(enc.encode(&mut cx, &[10]), Err(Error::Contract(_))));
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent_on_rendered_output(words in prop::collection::vec("[a-z]{1,6}|[,.!?]", 0..20)) {
            let text = words.join(" ");
            let v = Vocabulary::build([text.as_str()], 1, None);
            let ids = tokenize(&text, &v, 64);
            let again = tokenize(&v.render(&ids), &v, 64);
            prop_assert_eq!(ids, again);
        }
    }
}
