//! Central finite-difference verification of graph gradients.

use super::{Fault, Graph, Var};
use crate::error::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead of amplified noise.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct CheckInput {
    pub name: String,
    pub value: Vec<f64>,
    pub shape: Vec<usize>,
}

impl CheckInput {
    pub fn new(name: impl Into<String>, value: Vec<f64>, shape: impl Into<Vec<usize>>) -> Self {
        CheckInput {
            name: name.into(),
            value,
            shape: shape.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl CheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn evaluate<F>(inputs: &[CheckInput], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|i| g.variable(i.value.clone(), i.shape.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    Ok(g.scalar(loss))
}

/// Central differences `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every entry
/// of every input.
pub fn numeric_gradient<F>(inputs: &[CheckInput], h: f64, build: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut probe = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..probe.len() {
        let mut grad = Vec::with_capacity(probe[k].value.len());
        for idx in 0..probe[k].value.len() {
            let orig = probe[k].value[idx];
            probe[k].value[idx] = orig + h;
            let up = evaluate(&probe, &build)?;
            probe[k].value[idx] = orig - h;
            let down = evaluate(&probe, &build)?;
            probe[k].value[idx] = orig;
            grad.push((up - down) / (2.0 * h));
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares the analytic gradient of `build`'s scalar output with respect to
/// every entry of every input against a central difference of step `h`.
pub fn check<F>(inputs: &[CheckInput], h: f64, fault: Option<Fault>, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = match fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    let vars = inputs
        .iter()
        .map(|i| g.variable(i.value.clone(), i.shape.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let numeric = numeric_gradient(inputs, h, &build)?;

    let mut report = CheckReport::default();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&g, *var);
        for (idx, (&a, &n)) in analytic.iter().zip(&numeric[k]).enumerate() {
            let err = relative_error(a, n);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Mismatch {
                    input: inputs[k].name.clone(),
                    index: idx,
                    analytic: a,
                    numeric: n,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_injected_fault() {
        let inputs = [CheckInput::new("x", vec![0.3, -0.7, 1.1], [3])];
        let build = |g: &mut Graph, v: &[Var]| {
            let t = g.tanh(v[0]);
            Ok(g.sum(t))
        };
        assert!(check(&inputs, DEFAULT_STEP, None, build).unwrap().passes(1e-4));
        assert!(!check(&inputs, DEFAULT_STEP, Some(Fault::TanhBackward), build)
            .unwrap()
            .passes(1e-4));
    }
}
