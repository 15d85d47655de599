//! Finite-difference gradient oracle.
//!
//! The oracle only evaluates the forward pass; it never reads gradients
//! from the tape it is checking.

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// `max |autodiff - numeric| / (|numeric| + 1e-8)` over all entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries: usize,
}

/// Central-difference derivative of `f` along one coordinate, using the
/// fourth-order stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    let p1 = f(x + step);
    let m1 = f(x - step);
    let p2 = f(x + 2.0 * step);
    let m2 = f(x - 2.0 * step);
    // paired differences keep a locally constant f at exactly zero
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step)
}

/// Compares the tape's gradients of the scalar produced by `build` against
/// central differences, for every entry of every input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, build: F) -> GradReport
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&tape, &vars);
        tape.backward(loss).expect("scalar loss");
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        build(&tape, &vars).value().data()[0]
    };

    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let base = input.data()[idx];
            let numeric = central_difference(
                |x| {
                    work[which].data_mut()[idx] = x;
                    eval(&work)
                },
                base,
                step,
            );
            work[which].data_mut()[idx] = base;
            let auto = analytic[which].data()[idx];
            let abs = (auto - numeric).abs();
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(abs / (numeric.abs() + 1e-8));
            report.entries += 1;
        }
    }
    report
}

/// Entries uniform in `[-scale, scale]`.
pub fn random_tensor<R: Rng>(rng: &mut R, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("non-empty shape")
}
