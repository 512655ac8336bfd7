//! Central finite-difference verification of tape gradients.

use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor so near-zero gradients compare absolutely.
    pub abs_floor: f64,
    /// Coordinates probed per input; larger inputs are strided through.
    pub max_coords_per_input: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-5,
            max_coords_per_input: 64,
        }
    }
}

/// Checks `op` (summed to a scalar) against central differences.
pub fn grad_check<Op>(op_name: &str, op: Op, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    Op: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(
        op_name,
        op,
        inputs,
        GradCheckOptions {
            eps,
            tol,
            ..Default::default()
        },
    )
}

fn evaluate<Op>(op_name: &str, op: &Op, inputs: &[Tensor<f64>], record: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    Op: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = if record { Graph::new() } else { Graph::inference() };
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    let out = if g.value(out).len() == 1 { out } else { g.sum(out) };
    if let Some((_, name)) = g.first_non_finite() {
        return Err(Error::Numerical(format!("{op_name}: non-finite value produced by {name}")));
    }
    Ok((g, vars, out))
}

pub fn grad_check_with<Op>(
    op_name: &str,
    op: Op,
    inputs: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    Op: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|t| !t.all_finite()) {
        return Err(Error::Numerical(format!("{op_name}: non-finite input")));
    }
    let (g, vars, out) = evaluate(op_name, &op, inputs, true)?;
    let grads = g.backward(out)?;
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let n = inputs[k].len();
        let step = n.div_ceil(opts.max_coords_per_input.max(1)).max(1);
        for idx in (0..n).step_by(step) {
            let orig = probe[k].data()[idx];
            probe[k].data_mut()[idx] = orig + opts.eps;
            let (gp, _, op_) = evaluate(op_name, &op, &probe, false)?;
            let fp = gp.value(op_).item();
            probe[k].data_mut()[idx] = orig - opts.eps;
            let (gm, _, om) = evaluate(op_name, &op, &probe, false)?;
            let fm = gm.value(om).item();
            probe[k].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = analytic.data()[idx];
            if !a.is_finite() {
                return Err(Error::Numerical(format!("{op_name}: non-finite analytic gradient")));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error: max_rel,
        tolerance: opts.tol,
        passed: max_rel <= opts.tol,
        coords_checked: checked,
    })
}
