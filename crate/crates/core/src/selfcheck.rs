//! Finite-difference check of the full training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_corpus, CorpusConfig, NoiseConfig};
use crate::encoder::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::loss::OtcConfig;
use crate::sampler::{plan, SamplerConfig};
use crate::tensor::{finite_diff_check, GradCheckReport};
use crate::trainer::record_objective;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub batch_size: usize,
    pub use_otc: bool,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            batch_size: 8,
            use_otc: true,
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

/// Builds a tiny two-language corpus and model, then compares analytic
/// and central-difference gradients of one batch loss over every
/// parameter, `log_tau` included.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let corpus = generate_corpus(&CorpusConfig {
        num_languages: 2,
        groups_per_language: 50,
        test_groups_per_language: 5,
        probe_groups_per_language: 0,
        min_len: 4,
        max_len: 6,
        concept_vocab: 6,
        noise: NoiseConfig::default(),
        translate: true,
        seed: cfg.seed,
    })?
    .split;
    let model_cfg = ModelConfig {
        vocab_size: corpus.vocab.len(),
        embed_dim: cfg.embed_dim,
        num_blocks: cfg.num_blocks,
        num_heads: cfg.num_heads,
        ffn_dim: 2 * cfg.embed_dim,
        max_len: corpus.longest_sequence() + 1,
        shared_init: 0.5,
        ..ModelConfig::default()
    };
    let model = Model::init_aligned(&model_cfg, cfg.seed, &corpus.alignment)?;
    let sampler = SamplerConfig {
        batch_size: cfg.batch_size,
        original_language: corpus.languages[0].clone(),
        seed: cfg.seed,
        ..SamplerConfig::default()
    };
    let batches = plan(&corpus, &sampler, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let batch = batches
        .first()
        .ok_or_else(|| Error::Data("grad-check corpus too small for one batch".into()))?;
    let otc = OtcConfig {
        enabled: cfg.use_otc,
        ..OtcConfig::default()
    };
    finite_diff_check(&model.params, cfg.eps, |tape, params| {
        let m = Model::from_params(model_cfg.clone(), params.clone())?;
        Ok(record_objective(tape, &m, batch, &otc, None)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_check_passes() {
        let cfg = GradCheckConfig::default();
        let report = run_grad_check(&cfg).unwrap();
        assert!(report.passes(cfg.tolerance), "{report:?}");
        assert!(report.per_param.iter().any(|(n, _)| n == "log_tau"));
    }
}
