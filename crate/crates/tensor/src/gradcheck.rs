//! Central finite-difference gradient checking in 64-bit precision.

use crate::{Gradients, Tape, TensorError, TensorF64, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates whose relative error exceeds this are flagged.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tol: 1e-5,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Coordinates over tolerance, in parameter/coordinate order.
    pub flagged: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Relative error with the denominator clamped below by `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn bind(tape: &mut Tape<f64>, params: &[TensorF64]) -> Vec<Var> {
    params.iter().map(|p| tape.param(p.clone())).collect()
}

fn eval<F>(f: &F, params: &[TensorF64]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let loss = f(&mut tape, &vars)?;
    tape.value(loss)
        .item()
        .ok_or_else(|| TensorError::Contract("gradient check needs a scalar loss".into()))
}

/// Analytic gradients of `f` at `params` by one reverse sweep.
pub fn analytic_gradients<F>(f: &F, params: &[TensorF64]) -> Result<Vec<Vec<f64>>, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params);
    let loss = f(&mut tape, &vars)?;
    let grads: Gradients<f64> = tape.backward(loss)?;
    Ok(vars
        .iter()
        .map(|&v| grads.get(v).expect("parameters are tracked").to_vec())
        .collect())
}

/// Compares supplied gradients against central differences of `f`.
pub fn compare_gradients<F>(
    f: &F,
    params: &[TensorF64],
    analytic: &[Vec<f64>],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut report = GradCheckReport::default();
    let mut work: Vec<TensorF64> = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for coord in 0..work[p].numel() {
            let orig = work[p].data()[coord];
            work[p].data_mut()[coord] = orig + config.step;
            let plus = eval(f, &work)?;
            work[p].data_mut()[coord] = orig - config.step;
            let minus = eval(f, &work)?;
            work[p].data_mut()[coord] = orig;

            let numeric = (plus - minus) / (2.0 * config.step);
            let rel_error = relative_error(grad[coord], numeric, config.floor);
            report.coords_checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel_error);
            if !(rel_error <= config.tol) {
                report.flagged.push(Mismatch {
                    param: p,
                    coord,
                    analytic: grad[coord],
                    numeric,
                    rel_error,
                });
            }
        }
    }
    Ok(report)
}

/// Checks the reverse-mode gradient of `f` against 64-bit central differences.
///
/// `f` receives a fresh tape and one tracked leaf per entry of `params`, and
/// must return a scalar. Errors raised by `f` itself are propagated.
pub fn grad_check<F>(
    f: F,
    params: &[TensorF64],
    config: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let analytic = analytic_gradients(&f, params)?;
    compare_gradients(&f, params, &analytic, config)
}
