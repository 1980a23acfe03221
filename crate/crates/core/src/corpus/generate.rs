use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusSplit, Example, Group, GroupId, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

/// Codes handed out to synthetic languages, in order. Languages past the
/// sixth are named `l6`, `l7`, ...
pub const LANGUAGE_CODES: [&str; 6] = ["en", "fr", "de", "es", "ja", "zh"];

/// Inclusive valence-sum ranges for 1..=5 stars, symmetric about zero.
const SCORE_BANDS: [(i64, i64); 5] = [(i64::MIN, -4), (-3, -2), (-1, 1), (2, 3), (4, i64::MAX)];

fn language_code(i: usize) -> String {
    LANGUAGE_CODES
        .get(i)
        .map_or_else(|| format!("l{i}"), |c| (*c).to_string())
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Probability of replacing a token with a random in-language token.
    pub p_substitute: f64,
    /// Probability of deleting a token.
    pub p_drop: f64,
}

impl NoiseConfig {
    pub const NONE: NoiseConfig = NoiseConfig {
        p_substitute: 0.0,
        p_drop: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_substitute", self.p_substitute), ("p_drop", self.p_drop)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p_substitute: 0.25,
            p_drop: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_languages: usize,
    pub groups_per_language: usize,
    pub test_groups_per_language: usize,
    pub probe_groups_per_language: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub concept_vocab: usize,
    pub noise: NoiseConfig,
    /// Attach translations into every other language to each train group.
    pub translate: bool,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_languages: 3,
            groups_per_language: 600,
            test_groups_per_language: 200,
            probe_groups_per_language: 50,
            min_len: 8,
            max_len: 12,
            concept_vocab: 48,
            noise: NoiseConfig::default(),
            translate: true,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_languages < 2 {
            return fail(format!(
                "need at least 2 languages, got {}",
                self.num_languages
            ));
        }
        if self.groups_per_language < 50 {
            return fail(format!(
                "need at least 50 groups per language, got {}",
                self.groups_per_language
            ));
        }
        for (name, n) in [
            ("groups_per_language", self.groups_per_language),
            ("test_groups_per_language", self.test_groups_per_language),
            ("probe_groups_per_language", self.probe_groups_per_language),
        ] {
            if n % 5 != 0 {
                return fail(format!(
                    "{name}={n} must be a multiple of 5 for exact label balance"
                ));
            }
        }
        if self.min_len < 4 || self.max_len < self.min_len {
            return fail(format!(
                "length bounds [{}, {}] invalid (need 4 <= min <= max)",
                self.min_len, self.max_len
            ));
        }
        if self.concept_vocab < 3 || self.concept_vocab > 9999 {
            return fail(format!(
                "concept_vocab {} outside [3, 9999]",
                self.concept_vocab
            ));
        }
        self.noise.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Concept {
    pub id: u32,
    /// One of -1, 0, +1.
    pub valence: i8,
}

/// Language-neutral content of one text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterlinguaDoc {
    pub concepts: Vec<Concept>,
}

impl InterlinguaDoc {
    pub fn score(&self) -> i64 {
        self.concepts.iter().map(|c| i64::from(c.valence)).sum()
    }
}

/// Fixed valence for every concept id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptInventory {
    valences: Vec<i8>,
    by_valence: [Vec<u32>; 3],
}

impl ConceptInventory {
    /// Splits `size` concepts into equal thirds of negative, neutral and
    /// positive valence, shuffled by `rng`.
    pub fn generate(size: usize, rng: &mut impl Rng) -> Self {
        let mut valences: Vec<i8> = (0..size).map(|i| (i % 3) as i8 - 1).collect();
        valences.shuffle(rng);
        Self::from_valences(valences)
    }

    pub fn from_valences(valences: Vec<i8>) -> Self {
        let mut by_valence: [Vec<u32>; 3] = Default::default();
        for (i, &v) in valences.iter().enumerate() {
            by_valence[(v + 1) as usize].push(i as u32);
        }
        Self {
            valences,
            by_valence,
        }
    }

    pub fn len(&self) -> usize {
        self.valences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valences.is_empty()
    }

    pub fn concept(&self, id: u32) -> Concept {
        Concept {
            id,
            valence: self.valences[id as usize],
        }
    }

    fn sample_with_valence(&self, valence: i8, rng: &mut impl Rng) -> Concept {
        let pool = &self.by_valence[(valence + 1) as usize];
        self.concept(pool[rng.gen_range(0..pool.len())])
    }
}

/// Per-language bijections from concept ids to surface token ids, with
/// disjoint surface vocabularies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LexiconSet {
    languages: Vec<String>,
    /// `forward[lang][concept]` is the surface token.
    forward: Vec<Vec<TokenId>>,
    inverse: HashMap<TokenId, (usize, u32)>,
}

impl LexiconSet {
    /// Builds lexicons and the matching vocabulary. Surface strings are
    /// `<lang>_<nnnn>`; which concept a string realizes is a random
    /// permutation per language.
    pub fn generate(
        languages: &[String],
        concept_vocab: usize,
        rng: &mut impl Rng,
    ) -> Result<(Self, Vocab)> {
        let vocab = Vocab::new(
            languages
                .iter()
                .flat_map(|l| (0..concept_vocab).map(move |i| format!("{l}_{i:04}"))),
        )?;
        let mut forward = Vec::with_capacity(languages.len());
        let mut inverse = HashMap::new();
        for (li, lang) in languages.iter().enumerate() {
            let mut local: Vec<usize> = (0..concept_vocab).collect();
            local.shuffle(rng);
            let map: Vec<TokenId> = local
                .iter()
                .map(|&i| {
                    vocab
                        .id(&format!("{lang}_{i:04}"))
                        .expect("token just inserted")
                })
                .collect();
            for (c, &t) in map.iter().enumerate() {
                inverse.insert(t, (li, c as u32));
            }
            forward.push(map);
        }
        Ok((
            Self {
                languages: languages.to_vec(),
                forward,
                inverse,
            },
            vocab,
        ))
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn language_index(&self, code: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == code)
            .ok_or_else(|| Error::Lookup(format!("unknown language {code:?}")))
    }

    pub fn realize(&self, language: usize, concept: u32) -> TokenId {
        self.forward[language][concept as usize]
    }

    /// All surface tokens of one language.
    pub fn tokens_of(&self, language: usize) -> &[TokenId] {
        &self.forward[language]
    }

    /// Inverse lookup: `(language index, concept id)` for a surface token.
    pub fn concept_of(&self, token: TokenId) -> Option<(usize, u32)> {
        self.inverse.get(&token).copied()
    }

    /// For each concept, its surface token in every language.
    pub fn alignment(&self) -> Vec<Vec<TokenId>> {
        let n = self.forward.first().map_or(0, Vec::len);
        (0..n)
            .map(|c| self.forward.iter().map(|m| m[c]).collect())
            .collect()
    }

    /// Surface realization with substitution and deletion noise.
    pub fn realize_noisy(
        &self,
        doc: &InterlinguaDoc,
        language: usize,
        noise: &NoiseConfig,
        rng: &mut impl Rng,
    ) -> Vec<TokenId> {
        let own = &self.forward[language];
        let mut out = Vec::with_capacity(doc.concepts.len());
        for c in &doc.concepts {
            if noise.p_drop > 0.0 && rng.gen_bool(noise.p_drop) {
                continue;
            }
            if noise.p_substitute > 0.0 && rng.gen_bool(noise.p_substitute) {
                out.push(own[rng.gen_range(0..own.len())]);
            } else {
                out.push(own[c.id as usize]);
            }
        }
        if out.is_empty() {
            if let Some(c) = doc.concepts.first() {
                out.push(own[c.id as usize]);
            }
        }
        out
    }
}

/// Star label of a document: 1 + index of the score band holding the
/// sum of its valences.
pub fn label_of(doc: &InterlinguaDoc) -> Result<u8> {
    if doc.concepts.is_empty() {
        return Err(Error::Domain("cannot label an empty document".into()));
    }
    let s = doc.score();
    let band = SCORE_BANDS
        .iter()
        .position(|&(lo, hi)| (lo..=hi).contains(&s))
        .expect("bands cover all integers");
    Ok(band as u8 + 1)
}

/// Samples a document whose label is exactly `stars`.
fn sample_doc(
    stars: u8,
    inventory: &ConceptInventory,
    min_len: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> InterlinguaDoc {
    let n = rng.gen_range(min_len..=max_len) as i64;
    let (lo, hi) = SCORE_BANDS[usize::from(stars) - 1];
    let score = rng.gen_range(lo.max(-n)..=hi.min(n));
    let neg = rng.gen_range((-score).max(0)..=(n - score) / 2);
    let pos = neg + score;
    let neutral = n - pos - neg;
    let mut valences: Vec<i8> = std::iter::repeat_n(-1, neg as usize)
        .chain(std::iter::repeat_n(1, pos as usize))
        .chain(std::iter::repeat_n(0, neutral as usize))
        .collect();
    valences.shuffle(rng);
    InterlinguaDoc {
        concepts: valences
            .into_iter()
            .map(|v| inventory.sample_with_valence(v, rng))
            .collect(),
    }
}

/// Simulated machine translation of `original` into `target_language`.
pub fn translate_group(
    original: &Example,
    doc: &InterlinguaDoc,
    target_language: &str,
    lexicons: &LexiconSet,
    noise: &NoiseConfig,
    rng: &mut impl Rng,
) -> Result<Example> {
    let target = lexicons.language_index(target_language)?;
    lexicons.language_index(&original.language)?;
    if original.language == target_language {
        return Err(Error::Input(format!(
            "cannot translate id {} into its own language {target_language}",
            original.id
        )));
    }
    noise.validate()?;
    Ok(Example {
        id: original.id,
        language: target_language.to_string(),
        translated: true,
        tokens: lexicons.realize_noisy(doc, target, noise, rng),
        stars: original.stars,
    })
}

/// A generated corpus together with the hidden structure it came from.
#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub split: CorpusSplit,
    pub inventory: ConceptInventory,
    pub lexicons: LexiconSet,
    pub docs: BTreeMap<GroupId, InterlinguaDoc>,
}

struct GroupSpec {
    id: GroupId,
    language: usize,
    stars: u8,
    translate: bool,
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<GeneratedCorpus> {
    config.validate()?;
    let languages: Vec<String> = (0..config.num_languages).map(language_code).collect();
    let mut setup_rng = rng_for(config.seed, 0);
    let inventory = ConceptInventory::generate(config.concept_vocab, &mut setup_rng);
    let (lexicons, vocab) = LexiconSet::generate(&languages, config.concept_vocab, &mut setup_rng)?;

    let k = config.num_languages;
    let mut next_id: GroupId = 1;
    let mut specs = |per_lang: usize, translate: bool| -> Vec<GroupSpec> {
        let mut out = Vec::with_capacity(per_lang * k);
        for language in 0..k {
            for i in 0..per_lang {
                out.push(GroupSpec {
                    id: next_id,
                    language,
                    stars: (i % 5) as u8 + 1,
                    translate,
                });
                next_id += 1;
            }
        }
        out
    };
    let train_specs = specs(config.groups_per_language, config.translate);
    let test_specs = specs(config.test_groups_per_language, false);
    let probe_specs = specs(config.probe_groups_per_language, true);

    let build = |spec: &GroupSpec| -> Result<(Group, InterlinguaDoc)> {
        let mut rng = rng_for(config.seed, spec.id);
        let doc = sample_doc(
            spec.stars,
            &inventory,
            config.min_len,
            config.max_len,
            &mut rng,
        );
        debug_assert_eq!(label_of(&doc).ok(), Some(spec.stars));
        let original = Example {
            id: spec.id,
            language: languages[spec.language].clone(),
            translated: false,
            tokens: lexicons.realize_noisy(&doc, spec.language, &NoiseConfig::NONE, &mut rng),
            stars: spec.stars,
        };
        let mut examples = vec![original];
        if spec.translate {
            for target in languages.iter().filter(|l| **l != languages[spec.language]) {
                let t = translate_group(
                    &examples[0],
                    &doc,
                    target,
                    &lexicons,
                    &config.noise,
                    &mut rng,
                )?;
                examples.push(t);
            }
        }
        Ok((
            Group {
                id: spec.id,
                examples,
            },
            doc,
        ))
    };

    let mut docs = BTreeMap::new();
    let mut collect = |specs: &[GroupSpec]| -> Result<Vec<Group>> {
        let built = par::map_slice(ExecMode::Parallel, specs, build);
        let mut groups = Vec::with_capacity(built.len());
        for b in built {
            let (g, d) = b?;
            docs.insert(g.id, d);
            groups.push(g);
        }
        Ok(groups)
    };
    let train = collect(&train_specs)?;
    let test: Vec<Example> = collect(&test_specs)?
        .into_iter()
        .flat_map(|g| g.examples)
        .collect();
    let probe = collect(&probe_specs)?;

    let split = CorpusSplit {
        languages,
        vocab,
        train,
        test,
        probe,
        alignment: lexicons.alignment(),
    };
    split.validate()?;
    Ok(GeneratedCorpus {
        split,
        inventory,
        lexicons,
        docs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc_of(valences: &[i8]) -> InterlinguaDoc {
        InterlinguaDoc {
            concepts: valences
                .iter()
                .enumerate()
                .map(|(i, &v)| Concept {
                    id: i as u32,
                    valence: v,
                })
                .collect(),
        }
    }

    #[test]
    fn label_extremes_and_middle() {
        assert_eq!(label_of(&doc_of(&[1; 10])).unwrap(), 5);
        assert_eq!(label_of(&doc_of(&[-1; 10])).unwrap(), 1);
        assert_eq!(label_of(&doc_of(&[1, -1, 0, 0])).unwrap(), 3);
        assert!(matches!(label_of(&doc_of(&[])), Err(Error::Domain(_))));
    }

    #[test]
    fn bands_are_symmetric() {
        for s in -12i64..=12 {
            let pos = if s > 0 {
                vec![1i8; s as usize]
            } else {
                vec![-1i8; (-s) as usize]
            };
            let mut v = pos;
            v.push(0);
            let neg: Vec<i8> = v.iter().map(|x| -x).collect();
            assert_eq!(
                label_of(&doc_of(&v)).unwrap(),
                6 - label_of(&doc_of(&neg)).unwrap()
            );
        }
    }

    #[test]
    fn small_corpus_is_balanced() {
        let cfg = CorpusConfig {
            num_languages: 2,
            groups_per_language: 50,
            test_groups_per_language: 10,
            probe_groups_per_language: 5,
            seed: 3,
            ..Default::default()
        };
        let g = generate_corpus(&cfg).unwrap();
        let originals: Vec<&Example> = g.split.train.iter().filter_map(Group::original).collect();
        assert_eq!(originals.len(), 100);
        for lang in ["en", "fr"] {
            let mut hist = [0usize; 5];
            for e in originals.iter().filter(|e| e.language == lang) {
                hist[e.class()] += 1;
            }
            assert_eq!(hist, [10; 5]);
        }
        for g2 in &g.split.train {
            assert_eq!(label_of(&g.docs[&g2.id]).unwrap(), g2.stars());
        }
    }

    #[test]
    fn config_bounds_rejected() {
        let bad = [
            CorpusConfig {
                num_languages: 1,
                ..Default::default()
            },
            CorpusConfig {
                groups_per_language: 40,
                ..Default::default()
            },
            CorpusConfig {
                groups_per_language: 52,
                ..Default::default()
            },
            CorpusConfig {
                min_len: 9,
                max_len: 8,
                ..Default::default()
            },
            CorpusConfig {
                noise: NoiseConfig {
                    p_substitute: 1.5,
                    p_drop: 0.0,
                },
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(
                matches!(generate_corpus(&c), Err(Error::Config(_))),
                "{c:?}"
            );
        }
    }

    #[test]
    fn translate_rejects_unknown_and_same_language() {
        let cfg = CorpusConfig {
            num_languages: 2,
            groups_per_language: 50,
            ..Default::default()
        };
        let g = generate_corpus(&cfg).unwrap();
        let grp = &g.split.train[0];
        let orig = grp.original().unwrap();
        let doc = &g.docs[&grp.id];
        let mut rng = rng_for(1, 1);
        let err = translate_group(orig, doc, "xx", &g.lexicons, &NoiseConfig::NONE, &mut rng);
        assert!(matches!(err, Err(Error::Lookup(_))));
        let err = translate_group(
            orig,
            doc,
            &orig.language,
            &g.lexicons,
            &NoiseConfig::NONE,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::Input(_))));
    }
}
