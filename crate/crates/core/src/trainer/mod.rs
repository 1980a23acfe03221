//! Training loop: AdamW with linear warmup, per-step metrics, and
//! per-epoch checkpoints. A run is fully determined by its [`RunConfig`].

mod optim;

pub use optim::{adamw_step, AdamWConfig, OptimizerState, Schedule};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{load_jsonl, CorpusSplit};
use crate::encoder::{save_model, Model, ModelConfig, PaddedBatch, LOG_TAU};
use crate::error::{Error, Result};
use crate::loss::{otc_from_embeddings, total_loss, OtcConfig};
use crate::sampler::{plan, Batch, SamplerConfig};
use crate::tensor::{Gradients, Tape, Var};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MODEL_FILE: &str = "model.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_ce,loss_otc,tau";

const SAMPLER_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

pub fn checkpoint_file(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch}.json")
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub original_language: String,
    pub use_otc: bool,
    pub alpha_otc: f64,
    /// Train on original-language rows only, 32 per batch, no pairing.
    pub baseline: bool,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    /// `vocab_size == 0` means "take it from the corpus".
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub optimizer: AdamWConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            original_language: "en".into(),
            use_otc: true,
            alpha_otc: crate::loss::DEFAULT_ALPHA_OTC,
            baseline: false,
            seed: 0,
            epochs: 5,
            batch_size: crate::sampler::DEFAULT_BATCH_SIZE,
            corpus: PathBuf::from("corpus"),
            output_dir: PathBuf::from("run"),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults for training the small encoder from scratch.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 15,
            schedule: Schedule {
                warmup_steps: 50,
                peak_lr: 3e-3,
            },
            model: ModelConfig {
                shared_init: 0.95,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.baseline && self.use_otc {
            return Err(Error::Usage(
                "OTC needs paired batches and cannot be used with baseline batches".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        self.otc().validate()?;
        self.schedule.validate()?;
        self.sampler().validate()
    }

    pub fn otc(&self) -> OtcConfig {
        OtcConfig {
            alpha_otc: self.alpha_otc,
            enabled: self.use_otc,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            batch_size: self.batch_size,
            original_language: self.original_language.clone(),
            seed: self.seed,
            baseline_mode: self.baseline,
            translated_per_original: 1,
        }
    }

    /// Model config with vocabulary and length filled in from `corpus`.
    pub fn resolved_model(&self, corpus: &CorpusSplit) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        if m.vocab_size == 0 {
            m.vocab_size = corpus.vocab.len();
        }
        if m.vocab_size < corpus.vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than corpus vocabulary {}",
                m.vocab_size,
                corpus.vocab.len()
            )));
        }
        if m.max_len < corpus.longest_sequence() + 1 {
            return Err(Error::Config(format!(
                "max_len {} cannot hold sequences of {} tokens plus [CLS]",
                m.max_len,
                corpus.longest_sequence()
            )));
        }
        m.validate()?;
        Ok(m)
    }
}

/// Loss components and state after one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    /// Zero when OTC is disabled.
    pub loss_otc: f64,
    pub tau: f64,
}

/// Loss values and gradients for one batch.
#[derive(Clone, Debug)]
pub struct BatchObjective {
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_otc: f64,
    pub grads: Gradients,
}

/// Tape handles of the loss terms for one batch.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub total: Var,
    pub ce: Var,
    /// `None` when OTC is disabled.
    pub otc: Option<Var>,
}

/// Records the batch loss on `tape`: classification CE over every row
/// plus, when enabled, the OTC term over the paired halves.
pub fn record_objective(
    tape: &mut Tape,
    model: &Model,
    batch: &Batch<'_>,
    otc: &OtcConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ObjectiveVars> {
    let rows = batch.rows();
    let seqs: Vec<&[u32]> = rows.iter().map(|e| e.tokens.as_slice()).collect();
    let stars: Vec<u8> = rows.iter().map(|e| e.stars).collect();
    let padded = PaddedBatch::new(&seqs, None)?;
    let out = model.forward(tape, &padded, dropout_rng)?;
    let otc_term = if otc.enabled {
        let target = batch.pairing_target();
        let m = target.as_ref().map_or(0, |t| t.size());
        let orig_idx: Vec<usize> = (0..m).collect();
        let trans_idx: Vec<usize> = (m..2 * m).collect();
        let orig = tape.select_rows(out.cls_normalized, &orig_idx)?;
        let trans = tape.select_rows(out.cls_normalized, &trans_idx)?;
        Some(otc_from_embeddings(
            tape,
            orig,
            trans,
            out.log_tau,
            target.as_ref(),
            otc,
        )?)
    } else {
        None
    };
    let (total, ce) = total_loss(tape, out.logits, &stars, otc_term, otc.enabled)?;
    Ok(ObjectiveVars {
        total,
        ce,
        otc: otc_term,
    })
}

/// Forward and backward for one batch.
pub fn batch_objective(
    model: &Model,
    batch: &Batch<'_>,
    otc: &OtcConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchObjective> {
    let mut tape = Tape::new();
    let vars = record_objective(&mut tape, model, batch, otc, dropout_rng)?;
    let loss_total = tape.value(vars.total).item()?;
    let loss_ce = tape.value(vars.ce).item()?;
    let loss_otc = match vars.otc {
        Some(v) => tape.value(v).item()?,
        None => 0.0,
    };
    if !loss_total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (total {loss_total}, ce {loss_ce}, otc {loss_otc})"
        )));
    }
    let grads = tape.backward(vars.total, &model.params)?;
    Ok(BatchObjective {
        loss_total,
        loss_ce,
        loss_otc,
        grads,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<StepMetrics>,
}

impl TrainOutcome {
    /// Mean of `f` over the steps of `epoch`.
    pub fn epoch_mean(&self, epoch: usize, f: impl Fn(&StepMetrics) -> f64) -> Option<f64> {
        let xs: Vec<f64> = self
            .metrics
            .iter()
            .filter(|m| m.epoch == epoch)
            .map(f)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn last_epoch(&self) -> usize {
        self.metrics.last().map_or(0, |m| m.epoch)
    }
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            m.step, m.lr, m.loss_total, m.loss_ce, m.loss_otc, m.tau
        )
        .expect("writing to a String");
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Diagnostics {
    step: usize,
    epoch: usize,
    lr: f64,
    tau: f64,
    error: String,
    batch_ids: Vec<u64>,
    /// Last steps before the failure as `[total, ce, otc, tau]`.
    recent: Vec<[f64; 4]>,
}

/// Trains on an in-memory corpus. When `out_dir` is given, writes the
/// config, metrics log, per-epoch checkpoints and the final model there.
pub fn train_on(
    corpus: &CorpusSplit,
    config: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let model_cfg = config.resolved_model(corpus)?;
    let mut model = Model::init_aligned(&model_cfg, config.seed, &corpus.alignment)?;
    let mut opt = OptimizerState::new(&model.params, config.optimizer)
        .without_decay(&model.params, LOG_TAU)?;
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sampler_rng.set_stream(SAMPLER_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let sampler = config.sampler();
    let otc = config.otc();

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut resolved = config.clone();
        resolved.model = model_cfg.clone();
        let json =
            serde_json::to_string_pretty(&resolved).map_err(|e| Error::Data(e.to_string()))?;
        write(&dir.join(CONFIG_FILE), &json)?;
    }

    let mut metrics = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let batches = plan(corpus, &sampler, &mut sampler_rng)?;
        if batches.is_empty() {
            return Err(Error::Data(format!(
                "not enough {} originals for one batch of {}",
                config.original_language, config.batch_size
            )));
        }
        for batch in &batches {
            step += 1;
            let lr = config.schedule.lr_at(step);
            let dr = (model.config.dropout > 0.0).then_some(&mut dropout_rng);
            let result = batch_objective(&model, batch, &otc, dr).and_then(|obj| {
                adamw_step(&mut model.params, &obj.grads, &mut opt, lr).map(|()| obj)
            });
            let obj = match result {
                Ok(obj) => obj,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(dir) = out_dir {
                        let diag = Diagnostics {
                            step,
                            epoch,
                            lr,
                            tau: model.tau(),
                            error: e.to_string(),
                            batch_ids: batch.rows().iter().map(|r| r.id).collect(),
                            recent: metrics
                                .iter()
                                .rev()
                                .take(20)
                                .map(|m: &StepMetrics| [m.loss_total, m.loss_ce, m.loss_otc, m.tau])
                                .collect(),
                        };
                        let json = serde_json::to_string_pretty(&diag)
                            .map_err(|e| Error::Data(e.to_string()))?;
                        write(&dir.join(DIAGNOSTICS_FILE), &json)?;
                    }
                    return Err(Error::Numeric(format!(
                        "training diverged at step {step}: {e}"
                    )));
                }
                Err(e) => return Err(e),
            };
            metrics.push(StepMetrics {
                step,
                epoch,
                lr,
                loss_total: obj.loss_total,
                loss_ce: obj.loss_ce,
                loss_otc: obj.loss_otc,
                tau: model.tau(),
            });
        }
        if let Some(dir) = out_dir {
            save_model(&dir.join(checkpoint_file(epoch)), &model)?;
        }
    }
    if let Some(dir) = out_dir {
        write(&dir.join(METRICS_FILE), &metrics_csv(&metrics))?;
        save_model(&dir.join(MODEL_FILE), &model)?;
    }
    Ok(TrainOutcome { model, metrics })
}

/// Loads the corpus named in `config` and trains, writing all outputs
/// under `config.output_dir`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let corpus = load_jsonl(&config.corpus)?;
    train_on(&corpus, config, Some(&config.output_dir))
}
