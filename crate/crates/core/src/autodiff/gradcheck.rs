use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn evaluate<S, F>(f: &F, params: &[Tensor<S>]) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.scalar_value(out).f64();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of a scalar graph function against
/// central differences `(f(θ+h) − f(θ−h)) / 2h`, with `h = eps · max(1, |θ_i|)`.
///
/// The relative error of each coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`. `f` must be deterministic.
pub fn check_gradients<S, F>(f: F, params: &[Tensor<S>], eps: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    check_gradients_reference(&f, &f, params, eps)
}

/// Checks gradients computed at storage precision `L` (typically `f32`)
/// against central differences of the same objective evaluated at a
/// reference precision `R` (typically `f64`) on identical parameter values.
///
/// At `f32` the rounding of the objective itself, divided by `2h`, swamps
/// gradient entries around `1e-3`; evaluating the difference quotient at
/// higher precision removes that noise floor while the gradient under test
/// stays the one produced by the `L` engine.
pub fn check_gradients_reference<L, R, FL, FR>(
    f_low: FL,
    f_ref: FR,
    params: &[Tensor<L>],
    eps: f64,
) -> Result<GradCheckReport>
where
    L: Scalar,
    R: Scalar,
    FL: Fn(&mut Graph<L>, &[Var]) -> Result<Var>,
    FR: Fn(&mut Graph<R>, &[Var]) -> Result<Var>,
{
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Evaluation("parameters must be finite".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f_low(&mut g, &vars)?;
    if !g.scalar_value(out).f64().is_finite() {
        return Err(Error::Evaluation("objective is not finite".into()));
    }
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<L>> = vars.iter().map(|&v| grads.tensor(v)).collect();
    drop(g);

    let reference: Vec<Tensor<R>> = params.iter().map(|p| p.cast()).collect();
    let mut work = reference.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    for (pi, p) in reference.iter().enumerate() {
        for ci in 0..p.numel() {
            let theta = p.data()[ci];
            let h = eps * theta.f64().abs().max(1.0);
            let plus = R::of(theta.f64() + h);
            let minus = R::of(theta.f64() - h);
            work[pi].data_mut()[ci] = plus;
            let f_plus = evaluate(&f_ref, &work)?;
            work[pi].data_mut()[ci] = minus;
            let f_minus = evaluate(&f_ref, &work)?;
            work[pi].data_mut()[ci] = theta;

            let numeric = (f_plus - f_minus) / (plus.f64() - minus.f64());
            let a = analytic[pi].data()[ci].f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.coordinates == 1 {
                report.max_rel_error = rel;
                report.worst = (pi, ci);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
