use super::{Tape, Var};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, 1e-8)` over all checked coordinates.
    pub max_rel_error: f64,
    /// `(input, flat index)` where the maximum occurred.
    pub worst: (usize, usize),
    /// Backward-pass and finite-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
    /// `(backward, finite difference)` for every coordinate, inputs in order.
    pub values: Vec<(f64, f64)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

impl GradCheckReport {
    /// Largest relative error over coordinates whose gradient magnitude is at
    /// least `floor`. Central differences cannot resolve components much
    /// smaller than `|f|·ε/h`.
    pub fn max_rel_error_above(&self, floor: f64) -> f64 {
        self.values
            .iter()
            .filter(|(a, n)| a.abs().max(n.abs()) >= floor)
            .map(|&(a, n)| rel_error(a, n))
            .fold(0.0, f64::max)
    }
}

/// Compares the backward-pass gradient of a scalar function against
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|v| {
                grads
                    .raw(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; v.numel()])
            })
            .collect()
    };

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.numel() != 1 {
            return Err(contract_err!("grad_check needs a scalar function"));
        }
        Ok(out.item())
    };

    let mut probe = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        coordinates: 0,
        values: Vec::new(),
    };
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let x0 = probe[ti].data()[i];
            probe[ti].data_mut()[i] = x0 + h;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[i] = x0 - h;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad[i];
            let rel = rel_error(a, numeric);
            report.values.push((a, numeric));
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, i);
                report.worst_values = (a, numeric);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
