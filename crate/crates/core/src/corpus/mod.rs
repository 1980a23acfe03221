//! Multilingual parallel corpora: synthetic generation and JSONL storage.
//!
//! A corpus is a set of *groups*. Each group holds one original example
//! in its source language and optionally machine-translated copies in
//! other languages; every member of a group carries the same star label.

mod generate;
mod jsonl;

pub use generate::{
    generate_corpus, label_of, translate_group, Concept, ConceptInventory, CorpusConfig,
    GeneratedCorpus, InterlinguaDoc, LexiconSet, NoiseConfig, LANGUAGE_CODES,
};
pub use jsonl::{load_jsonl, read_examples, save_jsonl, write_examples, JsonlRecord};

use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;
pub type GroupId = u64;

pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const PAD_ID: TokenId = 0;
pub const CLS_ID: TokenId = 1;
pub const NUM_CLASSES: usize = 5;

/// One labeled text in one language.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub id: GroupId,
    pub language: String,
    pub translated: bool,
    pub tokens: Vec<TokenId>,
    /// Star rating in `1..=5`.
    pub stars: u8,
}

impl Example {
    /// Zero-based class index for the star label.
    pub fn class(&self) -> usize {
        usize::from(self.stars) - 1
    }
}

/// An original example plus its translations, all sharing one id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub id: GroupId,
    pub examples: Vec<Example>,
}

impl Group {
    pub fn original(&self) -> Option<&Example> {
        self.examples.iter().find(|e| !e.translated)
    }

    pub fn translations(&self) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(|e| e.translated)
    }

    pub fn stars(&self) -> u8 {
        self.examples[0].stars
    }

    /// Checks the shared-label and single-original invariants.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.examples.first() else {
            return Err(Error::Integrity(format!("group {} is empty", self.id)));
        };
        if let Some(bad) = self.examples.iter().find(|e| e.stars != first.stars) {
            return Err(Error::Integrity(format!(
                "group {} mixes labels: {} has {} stars, {} has {}",
                self.id, first.language, first.stars, bad.language, bad.stars
            )));
        }
        if self.examples.iter().filter(|e| !e.translated).count() > 1 {
            return Err(Error::Integrity(format!(
                "group {} has more than one original",
                self.id
            )));
        }
        if let Some(e) = self.examples.iter().find(|e| e.id != self.id) {
            return Err(Error::Integrity(format!(
                "example with id {} filed under group {}",
                e.id, self.id
            )));
        }
        Ok(())
    }
}

/// String <-> id mapping for surface tokens. Ids 0 and 1 are reserved
/// for padding and the classification token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from surface tokens in the given order.
    pub fn new<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.push(PAD_TOKEN.to_string())?;
        v.push(CLS_TOKEN.to_string())?;
        for t in tokens {
            v.push(t.into())?;
        }
        Ok(v)
    }

    fn push(&mut self, token: String) -> Result<()> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Data(format!("invalid vocabulary token {token:?}")));
        }
        if self.index.contains_key(&token) {
            return Err(Error::Data(format!("duplicate vocabulary token {token}")));
        }
        self.index
            .insert(token.clone(), self.tokens.len() as TokenId);
        self.tokens.push(token);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Surface tokens after the reserved ones, in id order.
    pub fn surface_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn render(&self, ids: &[TokenId]) -> Result<String> {
        let parts = ids
            .iter()
            .map(|&i| {
                self.token(i)
                    .ok_or_else(|| Error::Lookup(format!("token id {i} not in vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.join(" "))
    }
}

/// Train, test and held-out parallel partitions of a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    /// Language codes in first-appearance order.
    pub languages: Vec<String>,
    pub vocab: Vocab,
    pub train: Vec<Group>,
    /// Original-only evaluation rows.
    pub test: Vec<Example>,
    /// Held-out parallel groups for embedding-alignment probes.
    pub probe: Vec<Group>,
    /// Sets of tokens that realize the same concept across languages.
    /// Empty for corpora without a known lexicon.
    pub alignment: Vec<Vec<TokenId>>,
}

impl CorpusSplit {
    pub fn validate(&self) -> Result<()> {
        for g in self.train.iter().chain(&self.probe) {
            g.validate()?;
        }
        if let Some(e) = self.test.iter().find(|e| e.translated) {
            return Err(Error::Contract(format!(
                "test split contains translated row (id {}, {})",
                e.id, e.language
            )));
        }
        let all = self
            .train
            .iter()
            .chain(&self.probe)
            .flat_map(|g| &g.examples)
            .chain(&self.test);
        for e in all {
            if !(1..=5).contains(&e.stars) {
                return Err(Error::Input(format!(
                    "id {}: stars {} outside 1..=5",
                    e.id, e.stars
                )));
            }
            if e.tokens.is_empty() {
                return Err(Error::Data(format!(
                    "id {} ({}) has no tokens",
                    e.id, e.language
                )));
            }
            if let Some(&t) = e.tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
                return Err(Error::Lookup(format!(
                    "id {}: token id {t} not in vocabulary",
                    e.id
                )));
            }
        }
        Ok(())
    }

    pub fn longest_sequence(&self) -> usize {
        self.train
            .iter()
            .chain(&self.probe)
            .flat_map(|g| &g.examples)
            .chain(&self.test)
            .map(|e| e.tokens.len())
            .max()
            .unwrap_or(0)
    }

    /// Original training rows whose source language is `language`.
    pub fn originals_in<'a>(&'a self, language: &'a str) -> impl Iterator<Item = &'a Group> + 'a {
        self.train
            .iter()
            .filter(move |g| g.original().is_some_and(|o| o.language == language))
    }

    pub fn test_in<'a>(&'a self, language: &'a str) -> impl Iterator<Item = &'a Example> + 'a {
        self.test.iter().filter(move |e| e.language == language)
    }

    pub fn has_language(&self, language: &str) -> bool {
        self.languages.iter().any(|l| l == language)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: GroupId, lang: &str, translated: bool, stars: u8) -> Example {
        Example {
            id,
            language: lang.into(),
            translated,
            tokens: vec![2],
            stars,
        }
    }

    #[test]
    fn mixed_labels_fail_integrity() {
        let ok = Group {
            id: 2,
            examples: vec![ex(2, "en", false, 1), ex(2, "fr", true, 1)],
        };
        ok.validate().unwrap();
        let bad = Group {
            id: 2,
            examples: vec![ex(2, "en", false, 1), ex(2, "fr", true, 2)],
        };
        assert!(matches!(bad.validate(), Err(Error::Integrity(_))));
    }

    #[test]
    fn vocab_reserves_pad_and_cls() {
        let v = Vocab::new(["en_0001", "fr_0001"]).unwrap();
        assert_eq!(v.id(PAD_TOKEN), Some(PAD_ID));
        assert_eq!(v.id(CLS_TOKEN), Some(CLS_ID));
        assert_eq!(v.render(&[2, 3]).unwrap(), "en_0001 fr_0001");
        assert!(Vocab::new(["a", "a"]).is_err());
        assert!(Vocab::new(["a b"]).is_err());
    }
}
