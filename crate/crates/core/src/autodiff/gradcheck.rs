//! Finite-difference checking of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::{Tensor, TensorError};

pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Builds a graph from leaves and returns the scalar loss.
pub type GraphBuilder<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError> + 'a;

fn eval_loss(build: &GraphBuilder, params: &[(String, Tensor)]) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).item() as f64)
}

/// Analytic gradients of the built loss with respect to each parameter,
/// in parameter order. Parameters unreachable from the loss yield zeros.
pub fn analytic_grads(
    build: &GraphBuilder,
    params: &[(String, Tensor)],
) -> Result<Vec<Vec<f32>>, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, (_, t))| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Central finite differences of the built loss, one pass per element.
pub fn finite_diff_grads(
    build: &GraphBuilder,
    params: &[(String, Tensor)],
    h: f32,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let n = params[pi].1.numel();
        let mut grad = vec![0.0f64; n];
        for e in 0..n {
            let mut plus = params.to_vec();
            plus[pi].1.data_mut()[e] += h;
            let mut minus = params.to_vec();
            minus[pi].1.data_mut()[e] -= h;
            let fp = eval_loss(build, &plus)?;
            let fm = eval_loss(build, &minus)?;
            grad[e] = (fp - fm) / (2.0 * h as f64);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Relative error with a floor that keeps near-zero gradients from
/// dividing by noise: |a-n| / max(|a|, |n|, floor).
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares externally supplied analytic gradients against finite
/// differences. The error floor scales with each parameter's gradient
/// magnitude so that elements far below the tensor's scale are judged
/// near-absolutely, where f32 forward noise would otherwise dominate.
pub fn report_from_grads(
    params: &[(String, Tensor)],
    analytic: &[Vec<f32>],
    numeric: &[Vec<f64>],
    tol: f64,
) -> GradCheckReport {
    let mut per_param = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    for ((name, _), (a, n)) in params.iter().zip(analytic.iter().zip(numeric)) {
        let scale = a
            .iter()
            .map(|v| v.abs() as f64)
            .chain(n.iter().map(|v| v.abs()))
            .fold(1.0f64, f64::max);
        let floor = 0.1 * scale;
        let mut worst: f64 = 0.0;
        for (&av, &nv) in a.iter().zip(n) {
            worst = worst.max(rel_err(av as f64, nv, floor));
        }
        overall = overall.max(worst);
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
        });
    }
    GradCheckReport {
        per_param,
        max_rel_err: overall,
        tol,
        pass: overall <= tol,
    }
}

/// Checks the tape's backward pass against central finite differences of
/// its own forward pass. The builder must be deterministic in the
/// parameters (disable dropout).
pub fn grad_check(
    build: &GraphBuilder,
    params: &[(String, Tensor)],
    tol: f64,
    h: f32,
) -> Result<GradCheckReport, TensorError> {
    let analytic = analytic_grads(build, params)?;
    let numeric = finite_diff_grads(build, params, h)?;
    Ok(report_from_grads(params, &analytic, &numeric, tol))
}
