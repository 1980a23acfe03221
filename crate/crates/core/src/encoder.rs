//! Small pre-norm transformer encoder with a classification head on the
//! `[CLS]` position.
//!
//! The head reads the raw `[CLS]` vector; the contrastive objective reads
//! its L2-normalized copy.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenId, CLS_ID, NUM_CLASSES, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, CheckpointFile, ParamId, ParamSet, Tape, Tensor, Var};

pub const LOG_TAU: &str = "log_tau";
pub const DEFAULT_TAU: f64 = 0.07;

/// Scale applied to the classifier head's fan-in initialization so an
/// untrained model starts with near-uniform class probabilities.
const HEAD_INIT_GAIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Longest sequence accepted, counting the `[CLS]` slot.
    pub max_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
    /// Initial contrastive temperature.
    pub init_tau: f64,
    /// Correlation between initial embeddings of tokens that realize the
    /// same concept in different languages (0 disables). Stands in for
    /// the shared space of a pretrained multilingual encoder.
    pub shared_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 32,
            num_blocks: 2,
            num_heads: 2,
            ffn_dim: 64,
            max_len: 32,
            num_classes: NUM_CLASSES,
            dropout: 0.0,
            init_tau: DEFAULT_TAU,
            shared_init: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 3 {
            return fail(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.embed_dim == 0
            || self.num_heads == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return fail(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.ffn_dim == 0 || self.max_len < 2 || self.num_classes < 2 {
            return fail("ffn_dim, max_len and num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.init_tau > 0.0 && self.init_tau.is_finite()) {
            return fail(format!("init_tau {} must be positive", self.init_tau));
        }
        if !(0.0..=1.0).contains(&self.shared_init) {
            return fail(format!("shared_init {} outside [0, 1]", self.shared_init));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    log_tau: ParamId,
}

/// Expected `(name, rows, cols)` of every parameter, in storage order.
fn param_shapes(c: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = c.embed_dim;
    let mut v = vec![
        ("tok_embed".to_string(), c.vocab_size, d),
        ("pos_embed".to_string(), c.max_len, d),
    ];
    for b in 0..c.num_blocks {
        let p = |s: &str| format!("block{b}.{s}");
        v.extend([
            (p("ln1.gamma"), 1, d),
            (p("ln1.beta"), 1, d),
            (p("attn.wq"), d, d),
            (p("attn.bq"), 1, d),
            (p("attn.wk"), d, d),
            (p("attn.wv"), d, d),
            (p("attn.bv"), 1, d),
            (p("attn.wo"), d, d),
            (p("attn.bo"), 1, d),
            (p("ln2.gamma"), 1, d),
            (p("ln2.beta"), 1, d),
            (p("ffn.w1"), d, c.ffn_dim),
            (p("ffn.b1"), 1, c.ffn_dim),
            (p("ffn.w2"), c.ffn_dim, d),
            (p("ffn.b2"), 1, d),
        ]);
    }
    v.extend([
        ("final_ln.gamma".to_string(), 1, d),
        ("final_ln.beta".to_string(), 1, d),
        ("head.w".to_string(), d, c.num_classes),
        ("head.b".to_string(), 1, c.num_classes),
        (LOG_TAU.to_string(), 1, 1),
    ]);
    v
}

impl Layout {
    fn resolve(config: &ModelConfig, params: &ParamSet) -> Result<Self> {
        for (name, r, c) in param_shapes(config) {
            let t = params.by_name(&name)?;
            if t.shape() != [r, c] {
                return Err(Error::Shape(format!(
                    "parameter {name} is {:?}, expected [{r}, {c}]",
                    t.shape()
                )));
            }
        }
        if params.len() != param_shapes(config).len() {
            return Err(Error::Shape("unexpected extra parameters".into()));
        }
        let id = |n: &str| params.id(n);
        let blocks = (0..config.num_blocks)
            .map(|b| {
                let p = |s: &str| id(&format!("block{b}.{s}"));
                Ok(BlockIds {
                    ln1_g: p("ln1.gamma")?,
                    ln1_b: p("ln1.beta")?,
                    wq: p("attn.wq")?,
                    bq: p("attn.bq")?,
                    wk: p("attn.wk")?,
                    wv: p("attn.wv")?,
                    bv: p("attn.bv")?,
                    wo: p("attn.wo")?,
                    bo: p("attn.bo")?,
                    ln2_g: p("ln2.gamma")?,
                    ln2_b: p("ln2.beta")?,
                    w1: p("ffn.w1")?,
                    b1: p("ffn.b1")?,
                    w2: p("ffn.w2")?,
                    b2: p("ffn.b2")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tok: id("tok_embed")?,
            pos: id("pos_embed")?,
            blocks,
            lnf_g: id("final_ln.gamma")?,
            lnf_b: id("final_ln.beta")?,
            head_w: id("head.w")?,
            head_b: id("head.b")?,
            log_tau: id(LOG_TAU)?,
        })
    }
}

/// Sequences with `[CLS]` prepended, right-padded to a common length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl PaddedBatch {
    /// Prepends `[CLS]` to every sequence and pads to the longest one, or
    /// to `pad_to` when that is longer.
    pub fn new<S: AsRef<[TokenId]>>(seqs: &[S], pad_to: Option<usize>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let longest = seqs.iter().map(|s| s.as_ref().len() + 1).max().unwrap_or(1);
        let seq_len = pad_to.unwrap_or(0).max(longest);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            ids.push(CLS_ID as usize);
            ids.extend(s.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat_n(PAD_ID as usize, seq_len - s.len() - 1));
            lengths.push(s.len() + 1);
        }
        Ok(Self {
            ids,
            lengths,
            seq_len,
        })
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }
}

/// Tape handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `batch x d` hidden state at position 0 after the final block.
    pub cls_raw: Var,
    pub cls_normalized: Var,
    /// `batch x num_classes`.
    pub logits: Var,
    pub log_tau: Var,
}

/// Materialized forward outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub cls_raw: Tensor,
    pub cls_normalized: Tensor,
    pub logits: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    layout: Layout,
}

fn uniform_fill(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let a = std * 3f64.sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(rows, cols, data).expect("sized by construction")
}

impl Model {
    /// Fresh parameters: weights uniform with standard deviation
    /// `1/sqrt(fan_in)`, layer-norm scale 1 and offset 0, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_aligned(config, seed, &[])
    }

    /// Like [`Model::init`], but token embeddings in each alignment set
    /// share a common component with weight `config.shared_init`.
    pub fn init_aligned(
        config: &ModelConfig,
        seed: u64,
        alignment: &[Vec<TokenId>],
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let mut params = ParamSet::new();
        for (name, r, c) in param_shapes(config) {
            let t = if name.ends_with("gamma") {
                Tensor::filled(r, c, 1.0)
            } else if name == LOG_TAU {
                Tensor::scalar(config.init_tau.ln())
            } else if name.ends_with("_embed") {
                uniform_fill(r, c, 1.0 / (d as f64).sqrt(), &mut rng)
            } else if r == 1 {
                Tensor::zeros(r, c)
            } else {
                let gain = if name == "head.w" {
                    HEAD_INIT_GAIN
                } else {
                    1.0
                };
                uniform_fill(r, c, gain / (r as f64).sqrt(), &mut rng)
            };
            params.insert(name, t)?;
        }
        let rho = config.shared_init;
        if rho > 0.0 && !alignment.is_empty() {
            let tok = params.id("tok_embed")?;
            let own = (1.0 - rho * rho).sqrt();
            for set in alignment {
                let shared = uniform_fill(1, d, 1.0 / (d as f64).sqrt(), &mut rng);
                for &t in set {
                    if t as usize >= config.vocab_size {
                        return Err(Error::Lookup(format!(
                            "aligned token {t} outside vocabulary"
                        )));
                    }
                    let table = params.get_mut(tok);
                    for j in 0..d {
                        let v = rho * shared.data()[j] + own * table.get(t as usize, j);
                        table.set(t as usize, j, v);
                    }
                }
            }
        }
        Self::from_params(config.clone(), params)
    }

    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn log_tau_id(&self) -> ParamId {
        self.layout.log_tau
    }

    pub fn tau(&self) -> f64 {
        self.params.get(self.layout.log_tau).data()[0].exp()
    }

    /// Records the forward pass on `tape`. Dropout is applied only when
    /// `dropout_rng` is given and the configured rate is positive.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &PaddedBatch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderVars> {
        let c = &self.config;
        let (b, l, d) = (batch.batch(), batch.seq_len, c.embed_dim);
        if l > c.max_len {
            return Err(Error::Input(format!(
                "sequence length {l} exceeds max_len {}",
                c.max_len
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        if (0..b).any(|i| batch.ids[i * l] != CLS_ID as usize) {
            return Err(Error::Input("every sequence must start with [CLS]".into()));
        }
        let p = &self.params;
        let lay = &self.layout;
        let bind = |tape: &mut Tape, id| tape.param(p, id);

        let tok = bind(tape, lay.tok);
        let pos = bind(tape, lay.pos);
        let tok_x = tape.embedding_lookup(tok, &batch.ids)?;
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos_x = tape.embedding_lookup(pos, &pos_ids)?;
        let mut x = tape.add(tok_x, pos_x)?;

        let attn_layout = AttentionLayout {
            batch: b,
            seq_len: l,
            lengths: batch.lengths.clone(),
            heads: c.num_heads,
        };
        let linear = |tape: &mut Tape, x: Var, w: ParamId, bias: ParamId| -> Result<Var> {
            let wv = tape.param(p, w);
            let bv = tape.param(p, bias);
            let y = tape.matmul(x, wv)?;
            tape.add(y, bv)
        };
        for blk in &lay.blocks {
            let g = bind(tape, blk.ln1_g);
            let be = bind(tape, blk.ln1_b);
            let h = tape.layer_norm(x, g, be)?;
            let q = linear(tape, h, blk.wq, blk.bq)?;
            // no key bias: it shifts every score of a query equally
            let wk = bind(tape, blk.wk);
            let k = tape.matmul(h, wk)?;
            let v = linear(tape, h, blk.wv, blk.bv)?;
            let a = tape.attention(q, k, v, &attn_layout)?;
            let mut o = linear(tape, a, blk.wo, blk.bo)?;
            o = self.dropout(tape, o, dropout_rng.as_deref_mut())?;
            x = tape.add(x, o)?;

            let g = bind(tape, blk.ln2_g);
            let be = bind(tape, blk.ln2_b);
            let h = tape.layer_norm(x, g, be)?;
            let f = linear(tape, h, blk.w1, blk.b1)?;
            let f = tape.relu(f);
            let mut f = linear(tape, f, blk.w2, blk.b2)?;
            f = self.dropout(tape, f, dropout_rng.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        let g = bind(tape, lay.lnf_g);
        let be = bind(tape, lay.lnf_b);
        let xf = tape.layer_norm(x, g, be)?;
        let cls_rows: Vec<usize> = (0..b).map(|i| i * l).collect();
        let cls_raw = tape.select_rows(xf, &cls_rows)?;
        let logits = linear(tape, cls_raw, lay.head_w, lay.head_b)?;
        let cls_normalized = tape.l2_normalize_rows(cls_raw)?;
        let log_tau = bind(tape, lay.log_tau);
        debug_assert_eq!(tape.value(cls_raw).shape(), [b, d]);
        Ok(EncoderVars {
            cls_raw,
            cls_normalized,
            logits,
            log_tau,
        })
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let rate = self.config.dropout;
        let Some(rng) = rng.filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let shape = tape.value(x).shape();
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..shape[0] * shape[1])
            .map(|_| if rng.gen_bool(rate) { 0.0 } else { keep })
            .collect();
        let m = tape.constant(Tensor::new(shape[0], shape[1], mask)?);
        tape.mul(x, m)
    }

    /// Inference-mode forward pass.
    pub fn predict(&self, batch: &PaddedBatch) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, batch, None)?;
        Ok(EncoderOutput {
            cls_raw: tape.value(vars.cls_raw).clone(),
            cls_normalized: tape.value(vars.cls_normalized).clone(),
            logits: tape.value(vars.logits).clone(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    model_config: ModelConfig,
    #[serde(flatten)]
    checkpoint: CheckpointFile,
}

/// Writes the model config and weights to one JSON file.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let file = ModelFile {
        model_config: model.config.clone(),
        checkpoint: CheckpointFile::from_params(&model.params),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    Model::from_params(file.model_config, file.checkpoint.into_params()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            num_blocks: 2,
            num_heads: 2,
            ffn_dim: 16,
            max_len: 24,
            ..Default::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(&tiny(), 5).unwrap();
        let b = Model::init(&tiny(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Model::init(&tiny(), 6).unwrap());
        assert!((a.tau() - DEFAULT_TAU).abs() < 1e-15);
    }

    #[test]
    fn head_dim_split() {
        let c = ModelConfig {
            vocab_size: 10,
            ..Default::default()
        };
        assert_eq!(c.head_dim(), 16);
        let bad = ModelConfig { num_heads: 3, ..c };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn input_errors() {
        let m = Model::init(&tiny(), 1).unwrap();
        let too_big = PaddedBatch::new(&[vec![25u32]], None).unwrap();
        assert!(matches!(m.predict(&too_big), Err(Error::Input(_))));
        let too_long = PaddedBatch::new(&[vec![2u32; 30]], None).unwrap();
        assert!(matches!(m.predict(&too_long), Err(Error::Input(_))));
    }

    #[test]
    fn normalized_cls_has_unit_rows() {
        let m = Model::init(&tiny(), 2).unwrap();
        let batch = PaddedBatch::new(&[vec![2u32, 3, 4], vec![5, 6]], None).unwrap();
        let out = m.predict(&batch).unwrap();
        for r in 0..2 {
            let n: f64 = out.cls_normalized.row_slice(r).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.logits.shape(), [2, 5]);
    }

    #[test]
    fn aligned_init_correlates_translations() {
        let c = ModelConfig {
            shared_init: 0.9,
            embed_dim: 32,
            ..tiny()
        };
        let m = Model::init_aligned(&c, 3, &[vec![2, 12], vec![3, 13]]).unwrap();
        let t = m.params.by_name("tok_embed").unwrap();
        let cos = |a: usize, b: usize| {
            let (x, y) = (t.row_slice(a), t.row_slice(b));
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let n = |v: &[f64]| v.iter().map(|p| p * p).sum::<f64>().sqrt();
            dot / (n(x) * n(y))
        };
        assert!(cos(2, 12) > 0.5, "{}", cos(2, 12));
        assert!(cos(2, 13).abs() < cos(2, 12));
    }

    #[test]
    fn model_file_round_trip() {
        let m = Model::init(&tiny(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&path, &m).unwrap();
        assert_eq!(load_model(&path).unwrap(), m);
    }
}
