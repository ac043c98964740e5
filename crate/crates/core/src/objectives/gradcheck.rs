//! Central finite-difference verification of analytic gradients.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Parameterized;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for relative errors, so entries where both
    /// gradients are ~0 are judged on absolute error.
    pub denominator_floor: f64,
    /// Check at most this many entries per tensor (evenly strided); `None`
    /// checks every entry.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, denominator_floor: 1e-6, max_entries_per_tensor: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    /// `(tensor name, flat index)` of the worst relative error.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

fn with_tensor<P: Parameterized>(params: &mut P, name: &str, f: &mut dyn FnMut(&mut Array2<f64>)) {
    params.visit_mut("", &mut |n, t| {
        if n == name {
            f(t)
        }
    });
}

/// Compares `analytic` (name → gradient, as returned by the implementation)
/// with central differences of `loss` at `params`.
pub fn gradient_check<P, F>(
    params: &P,
    analytic: &[(String, Array2<f64>)],
    loss: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let mut work = params.clone();
    let mut report =
        GradCheckReport { max_relative_error: 0.0, max_absolute_error: 0.0, worst: None, entries_checked: 0 };
    let mut names = Vec::new();
    params.visit("", &mut |n, t| names.push((n, t.len())));

    for (name, len) in names {
        let grad = analytic
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, g)| g)
            .ok_or_else(|| Error::InvalidInput(format!("no analytic gradient for `{name}`")))?;
        if grad.len() != len {
            return Err(Error::DimensionMismatch(format!("gradient for `{name}` has wrong shape")));
        }
        let stride = cfg.max_entries_per_tensor.map_or(1, |m| len.div_ceil(m.max(1)));
        for idx in (0..len).step_by(stride) {
            let mut eval_at = |delta: f64| -> Result<f64> {
                let mut original = 0.0;
                with_tensor(&mut work, &name, &mut |t| {
                    let slot = &mut t.as_slice_mut().expect("standard layout")[idx];
                    original = *slot;
                    *slot += delta;
                });
                let value = loss(&work);
                with_tensor(&mut work, &name, &mut |t| t.as_slice_mut().expect("standard layout")[idx] = original);
                let value = value?;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("loss at perturbed `{name}`[{idx}]")));
                }
                Ok(value)
            };
            let plus = eval_at(cfg.step)?;
            let minus = eval_at(-cfg.step)?;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad.as_slice().map_or_else(|| grad.iter().nth(idx).copied().unwrap_or(0.0), |s| s[idx]);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.denominator_floor);
            report.entries_checked += 1;
            report.max_absolute_error = report.max_absolute_error.max(abs);
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[derive(Clone)]
    struct Probe(Array2<f64>);

    impl Parameterized for Probe {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Array2<f64>)) {
            f(crate::nn::join(prefix, "w"), &self.0)
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
            f(crate::nn::join(prefix, "w"), &mut self.0)
        }
    }

    #[test]
    fn quadratic_probe_matches() {
        let p = Probe(array![[0.5, -1.5, 2.0], [3.0, 0.25, -0.75]]);
        let analytic = vec![("w".to_string(), &p.0 * 2.0)];
        let report =
            gradient_check(&p, &analytic, |q: &Probe| Ok(q.0.iter().map(|v| v * v).sum()), Default::default())
                .unwrap();
        assert_eq!(report.entries_checked, 6);
        assert!(report.max_relative_error < 1e-9, "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let p = Probe(array![[1.0, 2.0]]);
        let analytic = vec![("w".to_string(), array![[2.0, 3.0]])];
        let report =
            gradient_check(&p, &analytic, |q: &Probe| Ok(q.0.iter().map(|v| v * v).sum()), Default::default())
                .unwrap();
        assert!(!report.passes(1e-4));
        assert_eq!(report.worst, Some(("w".to_string(), 1)));
    }

    #[test]
    fn non_finite_loss_is_error() {
        let p = Probe(array![[0.0]]);
        let analytic = vec![("w".to_string(), array![[0.0]])];
        let out = gradient_check(&p, &analytic, |q: &Probe| Ok(q.0[[0, 0]].ln()), Default::default());
        assert!(out.is_err());
    }
}
