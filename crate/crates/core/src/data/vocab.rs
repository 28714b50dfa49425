use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::Corpus;

pub const PAD: &str = "<pad>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const SOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

pub const RESERVED: [&str; 4] = [PAD, SOS, EOS, UNK];

/// Token ↔ id bijection. Ids are contiguous from 0 and the four reserved
/// tokens always occupy ids 0..4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved tokens followed by `words` (duplicates and reserved words are skipped).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED {
            vocab.insert(w.to_string());
        }
        for w in words {
            vocab.insert(w.into());
        }
        vocab
    }

    fn insert(&mut self, token: String) {
        if self.index.contains_key(&token) {
            return;
        }
        self.index.insert(token.clone(), self.tokens.len());
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Words for `ids`, dropping padding/start/end markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != SOS_ID && id != EOS_ID)
            .map(|&id| self.token(id).unwrap_or(UNK).to_string())
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err("vocabulary must start with <pad> <sos> <eos> <unk>".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary token `{t}`"));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Every token with frequency ≥ `min_count`, ordered by frequency (descending)
/// then lexicographically, after the reserved tokens.
pub fn build_vocabulary(corpus: &Corpus, min_count: usize) -> Vocabulary {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sample in &corpus.samples {
        let captions = sample.caption.iter().flatten();
        let turns = sample
            .turns
            .iter()
            .flat_map(|t| t.question.iter().chain(&t.answer));
        for tok in captions.chain(turns) {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_words(entries.into_iter().map(|(t, _)| t.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Corpus, DialogSample, DialogTurn, Split};

    fn corpus_of(turns: &[(&str, &str)]) -> Corpus {
        let sample = DialogSample {
            video_id: "v".into(),
            turns: turns
                .iter()
                .map(|(q, a)| DialogTurn::from_text(q, a))
                .collect(),
            caption: None,
            reasons: None,
        };
        Corpus {
            split: Split::Train,
            samples: vec![sample],
            features: Default::default(),
        }
    }

    #[test]
    fn threshold_maps_rare_tokens_to_unknown() {
        let c = corpus_of(&[("person person person", "person person yes")]);
        let v = build_vocabulary(&c, 6);
        assert_eq!(v.id("person"), UNK_ID);
        let v = build_vocabulary(&c, 5);
        assert_ne!(v.id("person"), UNK_ID);
        assert_eq!(v.id("person"), 4);
    }

    #[test]
    fn min_count_one_covers_everything_in_order() {
        let c = corpus_of(&[("b a", "a c")]);
        let v = build_vocabulary(&c, 1);
        assert_eq!(&v.tokens()[4..], &["a", "b", "c"]);
        for tok in ["a", "b", "c"] {
            assert!(v.contains(tok));
        }
    }

    #[test]
    fn identical_multisets_give_identical_vocabularies() {
        let a = build_vocabulary(&corpus_of(&[("x y", "z x")]), 1);
        let b = build_vocabulary(&corpus_of(&[("x z", "x y")]), 1);
        assert_eq!(a, b);
        assert_eq!(&a.tokens()[..4], &RESERVED);
    }

    #[test]
    fn serde_rejects_missing_reserved_tokens() {
        let bad: Result<Vocabulary, _> = serde_json::from_str(r#"["a","b"]"#);
        assert!(bad.is_err());
        let v = Vocabulary::from_words(["cat"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("cat"), 4);
    }
}
