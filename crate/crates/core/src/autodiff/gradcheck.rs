//! Central finite-difference gradient checking.
//!
//! The numeric side only ever reads forward values, so it stays independent
//! of every backward rule it is used to validate.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Floor on the denominator of the relative error, so coordinates whose
/// true gradient is zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of a scalar loss with respect to every
/// input against central differences of step `eps`.
///
/// `build` receives fresh trainable leaves for `inputs` (in order) and must
/// return the scalar loss. At most `max_coords` coordinates per input are
/// probed, evenly strided, when given.
pub fn check<F>(
    inputs: &[Tensor],
    eps: f64,
    max_coords: Option<usize>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; n]);
        let stride = max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for j in (0..n).step_by(stride) {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let e = rel_err(analytic[j], numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err || e.is_nan() {
                report.max_rel_err = if e.is_nan() { f64::INFINITY } else { e };
                report.worst = (i, j);
            }
        }
    }
    Ok(report)
}
