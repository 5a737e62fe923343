//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::DenseArray;

/// Denominator floor of the relative error, so that near-zero gradients are
/// compared absolutely instead of amplifying round-off.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose ±step perturbation crossed a rectifier or pooling kink.
    pub excluded: usize,
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradientReport {
    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error > self.tolerance)
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn loss_at(tape: &mut Tape, terminal: NodeId, inputs: &[(&str, DenseArray)]) -> Result<f64> {
    tape.evaluate(inputs)?;
    let v = tape.value(terminal);
    if !v.is_scalar() {
        return Err(Error::NonScalarTerminal {
            node: terminal.index(),
            shape: v.shape().to_vec(),
        });
    }
    Ok(v.item())
}

/// Compares analytic parameter gradients of `terminal` against central
/// differences with the given `step`. Entries where a perturbation changes
/// the tape's kink signature are excluded rather than compared.
///
/// The tape is left evaluated at the original parameter values.
pub fn gradient_check(
    tape: &mut Tape,
    terminal: NodeId,
    inputs: &[(&str, DenseArray)],
    step: f64,
    tolerance: f64,
) -> Result<GradientReport> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    loss_at(tape, terminal, inputs)?;
    let grads = tape.backpropagate(terminal)?;
    let base_sig = tape.kink_signature();
    let params: Vec<NodeId> = tape.parameters().collect();
    let mut report = GradientReport {
        tolerance,
        params: Vec::with_capacity(params.len()),
    };
    for p in params {
        let analytic = grads.get(p).expect("gradient per parameter").clone();
        let mut check = ParamCheck {
            name: tape.param_name(p).unwrap_or_default().to_string(),
            max_rel_error: 0.0,
            checked: 0,
            excluded: 0,
        };
        for j in 0..analytic.len() {
            let orig = tape.value(p).data()[j];
            tape.param_data_mut(p)[j] = orig + step;
            let plus = loss_at(tape, terminal, inputs)?;
            let sig_plus = tape.kink_signature();
            tape.param_data_mut(p)[j] = orig - step;
            let minus = loss_at(tape, terminal, inputs)?;
            let sig_minus = tape.kink_signature();
            tape.param_data_mut(p)[j] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                check.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            check.max_rel_error = check.max_rel_error.max(relative_error(analytic.data()[j], numeric));
            check.checked += 1;
        }
        report.params.push(check);
    }
    loss_at(tape, terminal, inputs)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_model_is_exact() {
        let mut t = Tape::new();
        let x = t.input("x", DenseArray::new(vec![2, 3], vec![1., 2., 3., 2., 0.5, 2.]).unwrap());
        let w = t.param("w", DenseArray::new(vec![3, 1], vec![0.3, -0.2, 0.1]).unwrap());
        let b = t.param("b", DenseArray::new(vec![1], vec![0.7]).unwrap());
        let y = t.affine(x, w, Some(b)).unwrap();
        let s = t.sum(y).unwrap();
        let r = gradient_check(&mut t, s, &[], 1e-5, 1e-10).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error() < 1e-10);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let mut t = Tape::new();
        let w = t.param("w", DenseArray::new(vec![3], vec![0.0, 1.0, -1.0]).unwrap());
        let r = t.relu(w).unwrap();
        let s = t.sum(r).unwrap();
        let rep = gradient_check(&mut t, s, &[], 1e-5, 1e-8).unwrap();
        assert_eq!(rep.params[0].excluded, 1);
        assert_eq!(rep.params[0].checked, 2);
        assert!(rep.passed());
    }

    #[test]
    fn non_finite_loss_aborts_with_node() {
        let mut t = Tape::new();
        let w = t.param("w", DenseArray::new(vec![1], vec![1e-6]).unwrap());
        let l = t.log(w).unwrap();
        let s = t.sum(l).unwrap();
        // a step larger than the value pushes log into negative territory
        let err = gradient_check(&mut t, s, &[], 1e-3, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonFinite { node: 1, .. }), "{err:?}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let mut t = Tape::new();
        let w = t.param("w", DenseArray::scalar(1.0));
        let s = t.sum(w).unwrap();
        assert!(gradient_check(&mut t, s, &[], 0.0, 1e-4).is_err());
    }
}
