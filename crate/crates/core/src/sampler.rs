//! Pair-aware minibatch construction.
//!
//! A paired batch holds `M = batch_size / 2` originals from the run's
//! original language and, at the same index, one translation of each,
//! drawn uniformly from the languages it was translated into. Baseline
//! batches hold `batch_size` originals and no pairing.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, Example, Group};
use crate::error::{Error, Result};
use crate::loss::PairingTarget;

pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub batch_size: usize,
    pub original_language: String,
    pub seed: u64,
    pub baseline_mode: bool,
    /// Translated rows per original row. Only 1 is supported.
    pub translated_per_original: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            original_language: "en".into(),
            seed: 0,
            baseline_mode: false,
            translated_per_original: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size {} must be even and at least 2",
                self.batch_size
            )));
        }
        if self.translated_per_original != 1 {
            return Err(Error::Config(format!(
                "only a 1:1 original:translated ratio is supported, got 1:{}",
                self.translated_per_original
            )));
        }
        Ok(())
    }

    pub fn pairs_per_batch(&self) -> usize {
        self.batch_size / 2
    }
}

/// `M` originals and their index-aligned translations.
#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch<'a> {
    pub originals: Vec<&'a Example>,
    pub translated: Vec<&'a Example>,
}

impl Minibatch<'_> {
    pub fn pairs(&self) -> usize {
        self.originals.len()
    }

    pub fn pairing_target(&self) -> PairingTarget {
        PairingTarget::identity(self.pairs())
    }
}

/// Originals only, no pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainBatch<'a> {
    pub rows: Vec<&'a Example>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Batch<'a> {
    Paired(Minibatch<'a>),
    Plain(PlainBatch<'a>),
}

impl<'a> Batch<'a> {
    /// All rows; for paired batches the originals come first.
    pub fn rows(&self) -> Vec<&'a Example> {
        match self {
            Batch::Paired(m) => m.originals.iter().chain(&m.translated).copied().collect(),
            Batch::Plain(p) => p.rows.clone(),
        }
    }

    pub fn pairing_target(&self) -> Option<PairingTarget> {
        match self {
            Batch::Paired(m) => Some(m.pairing_target()),
            Batch::Plain(_) => None,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Batch::Paired(m) => 2 * m.pairs(),
            Batch::Plain(p) => p.rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn original_groups<'a>(corpus: &'a CorpusSplit, language: &str) -> Result<Vec<&'a Group>> {
    if !corpus.has_language(language) {
        return Err(Error::Lookup(format!(
            "language {language:?} not in corpus"
        )));
    }
    Ok(corpus
        .train
        .iter()
        .filter(|g| g.original().is_some_and(|o| o.language == language))
        .collect())
}

/// One epoch of paired batches; the final short batch is dropped.
pub fn epoch_plan<'a>(
    corpus: &'a CorpusSplit,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Minibatch<'a>>> {
    config.validate()?;
    if config.baseline_mode {
        return Err(Error::Usage(
            "paired plan requested in baseline mode".into(),
        ));
    }
    let groups = original_groups(corpus, &config.original_language)?;
    let translations: Vec<Vec<&Example>> = groups
        .iter()
        .map(|g| g.translations().collect::<Vec<_>>())
        .collect();
    if let Some((g, _)) = groups.iter().zip(&translations).find(|(_, t)| t.is_empty()) {
        return Err(Error::Data(format!("group {} has no translations", g.id)));
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let m = config.pairs_per_batch();
    let mut batches = Vec::with_capacity(order.len() / m);
    for chunk in order.chunks_exact(m) {
        let mut originals = Vec::with_capacity(m);
        let mut translated = Vec::with_capacity(m);
        for &i in chunk {
            let ts = &translations[i];
            originals.push(groups[i].original().expect("filtered on original"));
            translated.push(ts[rng.gen_range(0..ts.len())]);
        }
        batches.push(Minibatch {
            originals,
            translated,
        });
    }
    Ok(batches)
}

/// One epoch of original-only batches of `batch_size` rows.
pub fn baseline_plan<'a>(
    corpus: &'a CorpusSplit,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<PlainBatch<'a>>> {
    config.validate()?;
    if !config.baseline_mode {
        return Err(Error::Usage(
            "baseline plan requested without baseline_mode".into(),
        ));
    }
    let mut rows: Vec<&Example> = original_groups(corpus, &config.original_language)?
        .into_iter()
        .filter_map(Group::original)
        .collect();
    rows.shuffle(rng);
    Ok(rows
        .chunks_exact(config.batch_size)
        .map(|c| PlainBatch { rows: c.to_vec() })
        .collect())
}

/// Plan for either mode.
pub fn plan<'a>(
    corpus: &'a CorpusSplit,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Batch<'a>>> {
    Ok(if config.baseline_mode {
        baseline_plan(corpus, config, rng)?
            .into_iter()
            .map(Batch::Plain)
            .collect()
    } else {
        epoch_plan(corpus, config, rng)?
            .into_iter()
            .map(Batch::Paired)
            .collect()
    })
}
