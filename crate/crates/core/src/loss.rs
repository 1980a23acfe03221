//! Classification cross-entropy and the original-translated contrastive
//! (OTC) objective.
//!
//! For `M` index-aligned (original, translation) pairs with unit-norm
//! `[CLS]` embeddings `o_i` and `t_m`:
//!
//! ```text
//! S[i][m]    = o_i . t_m
//! p_o2t[i]   = softmax_m(S[i][m] / tau)
//! p_t2o[m]   = softmax_i(S[i][m] / tau)
//! loss_otc   = alpha * 1/2 * (mean_i H(y_i, p_o2t[i]) + mean_m H(y_m, p_t2o[m]))
//! ```
//!
//! with `tau = exp(log_tau)` learnable and `y` the identity pairing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_ALPHA_OTC: f64 = 0.4;

/// Allowed deviation of a pairing-distribution row sum from 1.
const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtcConfig {
    pub alpha_otc: f64,
    pub enabled: bool,
}

impl Default for OtcConfig {
    fn default() -> Self {
        Self {
            alpha_otc: DEFAULT_ALPHA_OTC,
            enabled: true,
        }
    }
}

impl OtcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_otc >= 0.0 && self.alpha_otc.is_finite()) {
            return Err(Error::Config(format!(
                "alpha_otc {} must be >= 0",
                self.alpha_otc
            )));
        }
        Ok(())
    }
}

/// One-hot rows marking the correct translation of each original.
#[derive(Clone, Debug, PartialEq)]
pub struct PairingTarget(Tensor);

impl PairingTarget {
    /// Target for index-aligned pairs.
    pub fn identity(m: usize) -> Self {
        Self(Tensor::identity(m))
    }

    /// Arbitrary one-hot target; rejects anything else.
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rows() != t.cols() {
            return Err(Error::Shape("pairing target must be square".into()));
        }
        for r in 0..t.rows() {
            let row = t.row_slice(r);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract(format!("target row {r} is not one-hot")));
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }
}

/// Pairwise dot products `orig . trans^T`.
pub fn similarity_matrix(tape: &mut Tape, orig: Var, trans: Var) -> Result<Var> {
    let (o, t) = (tape.value(orig), tape.value(trans));
    if o.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "similarity_matrix: {:?} vs {:?}",
            o.shape(),
            t.shape()
        )));
    }
    let tt = tape.transpose(trans);
    tape.matmul(orig, tt)
}

#[derive(Clone, Copy, Debug)]
pub struct PairingDistributions {
    /// Row `i`: match probabilities of original `i` over translations.
    pub p_o2t: Var,
    /// Row `m`: match probabilities of translation `m` over originals.
    pub p_t2o: Var,
}

/// Temperature-scaled row softmaxes of `S` and `S^T`.
pub fn pairing_distributions(
    tape: &mut Tape,
    sim: Var,
    log_tau: Var,
) -> Result<PairingDistributions> {
    if !tape.value(sim).is_finite() {
        return Err(Error::Numeric("similarity matrix is not finite".into()));
    }
    let lt = tape.value(log_tau).item()?;
    if !lt.is_finite() {
        return Err(Error::Numeric(format!("log_tau = {lt}")));
    }
    let neg = tape.scale(log_tau, -1.0);
    let inv_tau = tape.exp(neg);
    let scaled = tape.scale_by(sim, inv_tau)?;
    let p_o2t = tape.row_softmax(scaled)?;
    let scaled_t = tape.transpose(scaled);
    let p_t2o = tape.row_softmax(scaled_t)?;
    Ok(PairingDistributions { p_o2t, p_t2o })
}

fn check_row_stochastic(t: &Tensor, what: &str) -> Result<()> {
    for r in 0..t.rows() {
        let s: f64 = t.row_slice(r).iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Contract(format!("{what} row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// `alpha * 1/2 * (CE(y, p_o2t) + CE(y, p_t2o))`, each CE averaged over
/// the `M` pairs. Fails with a usage error when no pairing target exists.
pub fn otc_loss(
    tape: &mut Tape,
    dists: &PairingDistributions,
    target: Option<&PairingTarget>,
    config: &OtcConfig,
) -> Result<Var> {
    config.validate()?;
    let target = target.ok_or_else(|| {
        Error::Usage("OTC loss needs paired batches; this batch has no pairing target".into())
    })?;
    check_row_stochastic(tape.value(dists.p_o2t), "p_o2t")?;
    check_row_stochastic(tape.value(dists.p_t2o), "p_t2o")?;
    let h_o2t = tape.cross_entropy_rows(dists.p_o2t, target.tensor())?;
    let h_t2o = tape.cross_entropy_rows(dists.p_t2o, target.tensor())?;
    let both = tape.add(h_o2t, h_t2o)?;
    Ok(tape.scale(both, 0.5 * config.alpha_otc))
}

/// Full OTC term from the two normalized embedding halves.
pub fn otc_from_embeddings(
    tape: &mut Tape,
    orig: Var,
    trans: Var,
    log_tau: Var,
    target: Option<&PairingTarget>,
    config: &OtcConfig,
) -> Result<Var> {
    let s = similarity_matrix(tape, orig, trans)?;
    let d = pairing_distributions(tape, s, log_tau)?;
    otc_loss(tape, &d, target, config)
}

/// One-hot encoding of star labels `1..=5` as `n x 5`.
pub fn star_one_hot(stars: &[u8], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(stars.len(), num_classes);
    for (i, &s) in stars.iter().enumerate() {
        if s == 0 || usize::from(s) > num_classes {
            return Err(Error::Input(format!("label {s} outside 1..={num_classes}")));
        }
        t.set(i, usize::from(s) - 1, 1.0);
    }
    Ok(t)
}

/// Mean categorical cross-entropy of softmax(logits) against star labels.
pub fn classification_loss(tape: &mut Tape, logits: Var, stars: &[u8]) -> Result<Var> {
    let (rows, cols) = (tape.value(logits).rows(), tape.value(logits).cols());
    if rows != stars.len() {
        return Err(Error::Shape(format!(
            "{rows} logit rows for {} labels",
            stars.len()
        )));
    }
    let y = star_one_hot(stars, cols)?;
    let p = tape.row_softmax(logits)?;
    tape.cross_entropy_rows(p, &y)
}

/// Classification loss over every row, plus the OTC term when enabled.
pub fn total_loss(
    tape: &mut Tape,
    logits_all: Var,
    stars_all: &[u8],
    otc_term: Option<Var>,
    otc_enabled: bool,
) -> Result<(Var, Var)> {
    let ce = classification_loss(tape, logits_all, stars_all)?;
    match (otc_enabled, otc_term) {
        (true, Some(otc)) => Ok((tape.add(ce, otc)?, ce)),
        (true, None) => Err(Error::Usage("OTC enabled but no OTC term supplied".into())),
        (false, _) => Ok((ce, ce)),
    }
}
