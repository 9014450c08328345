//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker is the independent oracle for every backward rule in this
//! crate: it only ever calls a black-box loss function, never the tape.
//! Checks run in double precision; finite differences are unusable in
//! single precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{collect_grads, ParamSet};
use crate::tensor::Tensor;

/// Worst relative error per parameter tensor, plus the overall worst.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub worst: f64,
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst <= tolerance
    }
}

/// Relative error between an autodiff gradient and a finite-difference
/// estimate: `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn relative_error(g_ad: f64, g_fd: f64) -> f64 {
    (g_ad - g_fd).abs() / f64::max(1e-8, g_ad.abs() + g_fd.abs())
}

/// Compare autodiff gradients against central finite differences of `f`.
///
/// `f` must be deterministic given fixed RNG streams (dropout masks frozen
/// across calls). For each coordinate the estimate is
/// `(f(θ+εe) - f(θ-εe)) / 2ε`.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamSet<f64>,
    ad_grads: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet<f64>) -> Result<f64>,
{
    let mut per_param = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut tensor_worst = 0.0f64;
        for c in 0..params.tensor(i).numel() {
            let base = params.tensor(i).data()[c];
            let mut probe = params.clone();
            probe.tensor_mut(i).data_mut()[c] = base + eps;
            let plus = f(&probe)?;
            probe.tensor_mut(i).data_mut()[c] = base - eps;
            let minus = f(&probe)?;
            let g_fd = (plus - minus) / (2.0 * eps);
            let g_ad = ad_grads[i].data()[c];
            let err = relative_error(g_ad, g_fd);
            tensor_worst = tensor_worst.max(err);
        }
        worst = worst.max(tensor_worst);
        per_param.push((params.name(i).to_string(), tensor_worst));
    }
    Ok(GradCheckReport { worst, per_param })
}

/// Run one forward/backward pass of `build` and collect the loss value and
/// the gradients aligned with `params`.
///
/// `build` receives a fresh graph and the bound parameter vars and returns
/// the scalar loss var.
pub fn autodiff_gradients<F>(build: F, params: &ParamSet<f64>) -> Result<(f64, Vec<Tensor<f64>>)>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars = params.bind(&g, true)?;
    let loss = build(&g, &vars)?;
    g.backward(loss)?;
    let grads = collect_grads(&g, params, &vars)?;
    Ok((g.scalar_value(loss), grads))
}

/// Convenience wrapper: gradients of `build` checked against finite
/// differences of the same builder evaluated as a black-box function.
pub fn check_builder<F>(build: F, params: &ParamSet<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let (_, grads) = autodiff_gradients(&build, params)?;
    finite_diff_check(
        |p: &ParamSet<f64>| {
            let g = Graph::new();
            let vars = p.bind(&g, false)?;
            let loss = build(&g, &vars)?;
            Ok(g.scalar_value(loss))
        },
        params,
        &grads,
        eps,
    )
}
