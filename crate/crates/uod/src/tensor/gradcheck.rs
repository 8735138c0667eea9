//! Central finite-difference gradient checking.
//!
//! Used in two layers: per-op unit tests run tight checks with a small step,
//! and the verification harness checks whole blocks against a scalar loss.

use ndarray::ArrayD;

use super::{Tape, Var};

/// Scale-floored relative error between an analytic and a numeric gradient
/// element: `|a - n| / max(floor, |a|, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / floor.max(analytic.abs()).max(numeric.abs())
}

/// Evaluate the scalar loss for given input values.
fn eval<F>(inputs: &[ArrayD<f64>], build: &F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    build(&tape, &vars).scalar()
}

/// Max scale-floored relative error between analytic and central-difference
/// gradients of `build` (a scalar-valued graph) w.r.t. all input elements.
/// Uses step 1e-5, suitable for tight per-op checks in f64.
pub fn fd_check_op<F>(inputs: &[ArrayD<f64>], build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    fd_check_op_step(inputs, 1e-5, build)
}

/// Same as [`fd_check_op`] with an explicit step.
pub fn fd_check_op_step<F>(inputs: &[ArrayD<f64>], step: f64, build: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    // Analytic gradients.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&tape, &vars);
    tape.backward(loss);
    let analytic: Vec<ArrayD<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, a)| {
            tape.grad(*v)
                .unwrap_or_else(|| ArrayD::zeros(a.shape().to_vec()))
        })
        .collect();

    // Numeric gradients, one element at a time.
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut max_err = 0.0f64;
    for k in 0..work.len() {
        for idx in 0..work[k].len() {
            let orig = work[k].as_slice().unwrap()[idx];
            work[k].as_slice_mut().unwrap()[idx] = orig + step;
            let fp = eval(&work, &build);
            work[k].as_slice_mut().unwrap()[idx] = orig - step;
            let fm = eval(&work, &build);
            work[k].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[k].as_slice().unwrap()[idx];
            max_err = max_err.max(rel_err(a, numeric, 1.0));
        }
    }
    max_err
}
