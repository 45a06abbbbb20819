//! Gradient verification against central finite differences.
//!
//! Runs at 64-bit precision with step h = 1e-4; 32-bit differences are too
//! noisy to distinguish a wrong gradient from roundoff.

use super::{Tape, Tensor};

const H: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

/// Compare the recorded gradient of `f` at `point` against central
/// differences, elementwise; passes iff the max relative error is below `tol`.
///
/// `f` must rebuild its graph from the tape it is given, returning a scalar.
pub fn grad_check<F>(shape: &[usize], point: &[f64], tol: f64, f: F) -> GradCheckReport
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> Tensor<f64>,
{
    let tape = Tape::new();
    let x = tape.var(shape, point.to_vec());
    let y = f(&tape, &x);
    assert_eq!(y.numel(), 1, "grad_check needs a scalar-valued function");
    y.backward().expect("backward on scalar");
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |values: Vec<f64>| -> f64 {
        let t = Tape::new();
        let v = t.var(shape, values);
        f(&t, &v).item()
    };

    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;
    for i in 0..point.len() {
        let mut plus = point.to_vec();
        plus[i] += H;
        let mut minus = point.to_vec();
        minus[i] -= H;
        let fd = (eval(plus) - eval(minus)) / (2.0 * H);
        let ad = analytic[i];
        let denom = ad.abs().max(fd.abs()).max(DENOM_FLOOR);
        let rel = (ad - fd).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    GradCheckReport { max_rel_err, worst_index, pass: max_rel_err < tol }
}
