//! Central-difference verification of analytic gradients.

use crate::error::{ensure, Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-input outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per input, in input order.
    pub per_input: Vec<f64>,
    /// Number of scalar elements compared.
    pub elements: usize,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of a scalar function against
/// `(f(x+eps) - f(x-eps)) / (2 eps)` for every element of every input and
/// returns the largest `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    Ok(grad_check_report(f, inputs, eps)?.max_relative_error())
}

pub fn grad_check_report<T, F>(f: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    analytic_vs_numeric(&f, inputs, eps, |_, g| g)
}

/// Same as [`grad_check_report`] but lets the caller tamper with the
/// analytic gradient first; used as a negative control for the checker.
pub fn grad_check_with_tamper<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    eps: f64,
    tamper: impl Fn(usize, Tensor<T>) -> Tensor<T>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    analytic_vs_numeric(&f, inputs, eps, tamper)
}

fn analytic_vs_numeric<T, F>(
    f: &F,
    inputs: &[Tensor<T>],
    eps: f64,
    tamper: impl Fn(usize, Tensor<T>) -> Tensor<T>,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    ensure!(
        (1e-6..=1e-3).contains(&eps),
        "grad_check",
        "eps {} outside [1e-6, 1e-3]",
        eps
    );
    for (i, t) in inputs.iter().enumerate() {
        ensure!(t.is_finite(), "grad_check", "input {} has non-finite values", i);
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::contract(
            "grad_check",
            format!("function output has shape {:?}, expected a scalar", g.shape(out)),
        ));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(inputs)
        .enumerate()
        .map(|(i, (&v, t))| tamper(i, grads.wrt_or_zeros(v, t)))
        .collect();

    let eval = |xs: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item()?.to_f64_lossy())
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    let mut elements = 0;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + T::lit(eps);
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - T::lit(eps);
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[i].data()[j].to_f64_lossy();
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
            elements += 1;
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input, elements })
}
