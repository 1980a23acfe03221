use super::{ParamId, ParamSet, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    /// Worst relative error per parameter, in parameter order.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// Checks every entry of every parameter in `params`.
///
/// `loss_fn` must build a scalar loss on the tape it is given, binding
/// parameters through [`Tape::param`] on the `ParamSet` it receives.
/// The relative error of one entry is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` with
/// `numeric = (f(x + eps) - f(x - eps)) / (2 eps)`.
pub fn finite_diff_check<F>(params: &ParamSet, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let all: Vec<ParamId> = params.ids().collect();
    finite_diff_check_subset(params, &all, eps, loss_fn)
}

/// Same as [`finite_diff_check`], restricted to the listed parameters.
pub fn finite_diff_check_subset<F>(
    params: &ParamSet,
    ids: &[ParamId],
    eps: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut tape = Tape::new();
    let root = loss_fn(&mut tape, params)?;
    let analytic = tape.backward(root, params)?;

    let eval = |p: &ParamSet, id: ParamId, at: usize| -> Result<f64> {
        let mut t = Tape::new();
        let r = loss_fn(&mut t, p)?;
        let v = t.value(r).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss while probing {}[{at}]",
                p.name(id)
            )));
        }
        Ok(v)
    };

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        entries_checked: 0,
        per_param: Vec::with_capacity(ids.len()),
    };
    for &id in ids {
        let mut param_worst = 0.0f64;
        for i in 0..params.get(id).len() {
            let x = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = x + eps;
            let up = eval(&work, id, i)?;
            work.get_mut(id).data_mut()[i] = x - eps;
            let down = eval(&work, id, i)?;
            work.get_mut(id).data_mut()[i] = x;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            param_worst = param_worst.max(rel);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel;
                report.worst = Some((params.name(id).to_string(), i));
            }
            report.entries_checked += 1;
        }
        report
            .per_param
            .push((params.name(id).to_string(), param_worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(x)).unwrap();
        p
    }

    #[test]
    fn square_matches_closed_form() {
        let p = scalar_param(3.0);
        let r = finite_diff_check(&p, 1e-5, |t, p| {
            let x = t.param(p, p.id("x")?);
            let y = t.mul(x, x)?;
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-9, "{r:?}");
    }

    #[test]
    fn abs_kink_is_flagged() {
        let p = scalar_param(0.0);
        let r = finite_diff_check(&p, 1e-5, |t, p| {
            let x = t.param(p, p.id("x")?);
            let y = t.abs(x);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_relative_error > 1e-4);
    }

    #[test]
    fn eps_range_enforced() {
        let p = scalar_param(1.0);
        let f = |t: &mut Tape, p: &ParamSet| {
            let x = t.param(p, p.id("x")?);
            Ok(t.sum(x))
        };
        assert!(finite_diff_check(&p, 1e-2, f).is_err());
        assert!(finite_diff_check(&p, 1e-8, f).is_err());
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        let p = scalar_param(0.0);
        // exp(1e308 * x) overflows as soon as x moves off zero.
        let err = finite_diff_check(&p, 1e-5, |t, p| {
            let x = t.param(p, p.id("x")?);
            let big = t.scale(x, 1e308);
            let y = t.exp(big);
            Ok(t.sum(y))
        })
        .unwrap_err();
        assert!(
            matches!(err, Error::Numeric(ref m) if m.contains('x')),
            "{err}"
        );
    }
}
