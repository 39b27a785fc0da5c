//! Central finite-difference checking of analytic gradients.

use super::{Graph, Scalar, Tensor, Var};
use crate::error::Result;

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: Scalar,
    pub max_abs_err: Scalar,
    pub checked: usize,
}

/// Relative error with a small floor on the denominator so that gradients that
/// are both essentially zero compare as equal.
pub fn relative_error(analytic: Scalar, numeric: Scalar) -> Scalar {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences with step `h`, for every element of every input.
///
/// `f` receives a fresh graph and one `Var` per input; it must be a pure
/// function of the input values.
pub fn check_gradients<F>(inputs: &[Tensor], h: Scalar, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<Scalar> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
