//! Per-language F1-micro, embedding retrieval, significance testing and
//! report tables.

mod report;
mod stats;

pub use report::{
    emit_reports, flag_delta, otc_deltas, results_csv, Cell, Grid, ReportFiles, ReportTables,
    RunResult, FLAG_THRESHOLD, MIN_SEEDS, RESULTS_FILE,
};
pub use stats::{paired_permutation_test, sign_flip_test, PermutationTestResult, EXACT_MAX_PAIRS};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, Example, NUM_CLASSES};
use crate::encoder::{Model, PaddedBatch};
use crate::error::{Error, Result};
use crate::par::{map_slice, ExecMode};
use crate::tensor::Tensor;

pub const EVAL_BATCH: usize = 64;

/// Gold stars on rows, predicted stars on columns.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_labels(predictions: &[u8], golds: &[u8]) -> Result<Self> {
        if predictions.len() != golds.len() {
            return Err(Error::Input(format!(
                "{} predictions for {} gold labels",
                predictions.len(),
                golds.len()
            )));
        }
        let mut cm = Self::default();
        for (&p, &g) in predictions.iter().zip(golds) {
            cm.add(g, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, gold: u8, predicted: u8) -> Result<()> {
        for s in [gold, predicted] {
            if s == 0 || usize::from(s) > NUM_CLASSES {
                return Err(Error::Input(format!("label {s} outside 1..={NUM_CLASSES}")));
            }
        }
        self.counts[usize::from(gold) - 1][usize::from(predicted) - 1] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, x) in r.iter_mut().zip(o) {
                *c += x;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Domain(
                "accuracy of an empty confusion matrix".into(),
            )),
            n => Ok(self.correct() as f64 / n as f64),
        }
    }

    /// Micro-averaged F1 from pooled per-class TP/FP/FN counts.
    pub fn f1_micro(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Domain("F1 of an empty confusion matrix".into()));
        }
        let (mut tp, mut fp, mut fnn) = (0u64, 0u64, 0u64);
        for k in 0..NUM_CLASSES {
            let col: u64 = (0..NUM_CLASSES).map(|g| self.counts[g][k]).sum();
            let row: u64 = self.counts[k].iter().sum();
            tp += self.counts[k][k];
            fp += col - self.counts[k][k];
            fnn += row - self.counts[k][k];
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / (tp + fnn) as f64;
        if precision + recall == 0.0 {
            return Ok(0.0);
        }
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Micro-F1 over labels in `1..=5`.
pub fn f1_micro(predictions: &[u8], golds: &[u8]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Domain("F1 of empty input".into()));
    }
    ConfusionMatrix::from_labels(predictions, golds)?.f1_micro()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageMetrics {
    pub language: String,
    pub f1_micro: f64,
    pub n_examples: usize,
    pub confusion: ConfusionMatrix,
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn forward_chunks<T: Sync, R: Send>(
    model: &Model,
    rows: &[T],
    tokens: impl Fn(&T) -> &[u32] + Sync,
    mode: ExecMode,
    f: impl Fn(&Tensor, &Tensor) -> R + Sync,
) -> Result<Vec<R>> {
    let chunks: Vec<&[T]> = rows.chunks(EVAL_BATCH).collect();
    map_slice(mode, &chunks, |chunk| {
        let seqs: Vec<&[u32]> = chunk.iter().map(&tokens).collect();
        let out = model.predict(&PaddedBatch::new(&seqs, None)?)?;
        Ok(f(&out.logits, &out.cls_normalized))
    })
    .into_iter()
    .collect()
}

/// Star predictions (argmax of the logits, plus one) for each row.
pub fn predict_stars(model: &Model, rows: &[&Example], mode: ExecMode) -> Result<Vec<u8>> {
    let parts = forward_chunks(
        model,
        rows,
        |e| e.tokens.as_slice(),
        mode,
        |logits, _| {
            logits
                .to_rows()
                .iter()
                .map(|r| argmax(r) as u8 + 1)
                .collect::<Vec<_>>()
        },
    )?;
    Ok(parts.into_iter().flatten().collect())
}

/// Normalized CLS embeddings, one row per input.
pub fn embed(model: &Model, rows: &[&Example], mode: ExecMode) -> Result<Tensor> {
    let parts = forward_chunks(
        model,
        rows,
        |e| e.tokens.as_slice(),
        mode,
        |_, cls| cls.to_rows(),
    )?;
    Tensor::from_rows(&parts.into_iter().flatten().collect::<Vec<_>>())
}

/// One [`LanguageMetrics`] per language present in `test`, in order of
/// first appearance.
pub fn evaluate(model: &Model, test: &[Example], mode: ExecMode) -> Result<Vec<LanguageMetrics>> {
    if let Some(e) = test.iter().find(|e| e.translated) {
        return Err(Error::Contract(format!(
            "test split must be original-only; row {} ({}) is translated",
            e.id, e.language
        )));
    }
    let mut languages: Vec<&str> = Vec::new();
    for e in test {
        if !languages.contains(&e.language.as_str()) {
            languages.push(&e.language);
        }
    }
    let rows: Vec<&Example> = test.iter().collect();
    let preds = predict_stars(model, &rows, mode)?;
    languages
        .into_iter()
        .map(|lang| {
            let mut cm = ConfusionMatrix::default();
            for (e, &p) in rows.iter().zip(&preds).filter(|(e, _)| e.language == lang) {
                cm.add(e.stars, p)?;
            }
            Ok(LanguageMetrics {
                language: lang.to_string(),
                f1_micro: cm.f1_micro()?,
                n_examples: cm.total() as usize,
                confusion: cm,
            })
        })
        .collect()
}

/// Fraction of rows whose best match is their own index, averaged over
/// both directions. Ties go to the lower index.
pub fn retrieval_accuracy(orig: &Tensor, trans: &Tensor) -> Result<f64> {
    if orig.shape() != trans.shape() {
        return Err(Error::Shape(format!(
            "retrieval needs equal shapes, got {:?} and {:?}",
            orig.shape(),
            trans.shape()
        )));
    }
    let m = orig.rows();
    if m < 2 {
        return Err(Error::Domain(format!(
            "retrieval needs at least 2 pairs, got {m}"
        )));
    }
    let sim: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            (0..m)
                .map(|j| crate::tensor::dot(orig.row_slice(i), trans.row_slice(j)))
                .collect()
        })
        .collect();
    let o2t = (0..m).filter(|&i| argmax(&sim[i]) == i).count();
    let t2o = (0..m)
        .filter(|&j| argmax(&(0..m).map(|i| sim[i][j]).collect::<Vec<_>>()) == j)
        .count();
    Ok((o2t + t2o) as f64 / (2 * m) as f64)
}

/// Mean retrieval accuracy between the held-out originals of `language`
/// and their translations, one retrieval pool per target language.
pub fn probe_retrieval(
    model: &Model,
    corpus: &CorpusSplit,
    language: &str,
    mode: ExecMode,
) -> Result<f64> {
    let groups: Vec<_> = corpus
        .probe
        .iter()
        .filter(|g| g.original().is_some_and(|o| o.language == language))
        .collect();
    let targets: Vec<&String> = corpus.languages.iter().filter(|l| *l != language).collect();
    let mut scores = Vec::new();
    for target in targets {
        let pairs: Vec<(&Example, &Example)> = groups
            .iter()
            .filter_map(|g| {
                let t = g.translations().find(|t| &t.language == target)?;
                Some((g.original()?, t))
            })
            .collect();
        if pairs.len() < 2 {
            continue;
        }
        let (o, t): (Vec<&Example>, Vec<&Example>) = pairs.into_iter().unzip();
        scores.push(retrieval_accuracy(
            &embed(model, &o, mode)?,
            &embed(model, &t, mode)?,
        )?);
    }
    if scores.is_empty() {
        return Err(Error::Data(format!(
            "no held-out parallel pairs for original language {language:?}"
        )));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
