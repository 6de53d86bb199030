//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`TapeFunction`] records its forward pass on a [`Tape`]; [`gradient`]
//! replays it backwards. Evaluating the same function over [`Dual`] numbers
//! gives exact Hessian-vector products, which is what the second-order
//! bi-level update needs.

mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use optim::{Adam, AdamState, Optimizer, Sgd};
pub use params::{ParamTree, ParamVars};
pub use scalar::{Dual, Scalar};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: &'static str, expected: usize, shape: Vec<usize> },
    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("gradient requires a scalar output, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("parameter tree has no leaf named {0:?}")]
    MissingLeaf(String),
    #[error("parameter tree structure mismatch: {0}")]
    Structure(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

/// A differentiable computation `(params, inputs) -> output` written against
/// the tape API. Implement it for every scalar type the caller needs; plain
/// closures over a fixed scalar type implement it automatically.
pub trait TapeFunction<T: Scalar> {
    fn forward(&self, tape: &mut Tape<T>, params: &ParamVars, inputs: &[Var]) -> Result<Var, TensorError>;
}

impl<T, F> TapeFunction<T> for F
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamVars, &[Var]) -> Result<Var, TensorError>,
{
    fn forward(&self, tape: &mut Tape<T>, params: &ParamVars, inputs: &[Var]) -> Result<Var, TensorError> {
        self(tape, params, inputs)
    }
}

fn run<T: Scalar, F: TapeFunction<T>>(
    tape: &mut Tape<T>,
    f: &F,
    params: &ParamVars,
    inputs: &[Tensor],
) -> Result<Var, TensorError> {
    let input_vars: Vec<Var> = inputs.iter().map(|x| tape.constant_f64(x)).collect();
    f.forward(tape, params, &input_vars)
}

/// Forward pass only. Never mutates `params`.
pub fn evaluate<F: TapeFunction<f64>>(f: &F, params: &ParamTree, inputs: &[Tensor]) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let vars = params.bind_frozen(&mut tape);
    let out = run(&mut tape, f, &vars, inputs)?;
    Ok(tape.value(out).clone())
}

/// Scalar value and its gradient with respect to every leaf of `params`.
pub fn value_and_gradient<F: TapeFunction<f64>>(
    f: &F,
    params: &ParamTree,
    inputs: &[Tensor],
) -> Result<(f64, ParamTree), TensorError> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = run(&mut tape, f, &vars, inputs)?;
    let grads = tape.backward(out)?;
    let value = tape.value(out).data()[0];
    Ok((value, collect_grads(params, &vars, &grads, |g| g.clone())))
}

pub fn gradient<F: TapeFunction<f64>>(f: &F, params: &ParamTree, inputs: &[Tensor]) -> Result<ParamTree, TensorError> {
    value_and_gradient(f, params, inputs).map(|(_, g)| g)
}

fn collect_grads<T: Scalar>(
    params: &ParamTree,
    vars: &ParamVars,
    grads: &Gradients<T>,
    conv: impl Fn(&Tensor<T>) -> Tensor,
) -> ParamTree {
    params
        .iter()
        .map(|(name, leaf)| {
            let var = vars.get(name).expect("bound leaf");
            let g = grads.get(var).map(&conv).unwrap_or_else(|| Tensor::zeros(leaf.shape()));
            (name.to_string(), g)
        })
        .collect()
}

/// Gradient at `params` together with the exact product of the Hessian with
/// `direction`, by forward-mode differentiation of the reverse sweep.
pub fn hessian_vector_product<F: TapeFunction<Dual>>(
    f: &F,
    params: &ParamTree,
    inputs: &[Tensor],
    direction: &ParamTree,
) -> Result<(ParamTree, ParamTree), TensorError> {
    params.max_abs_diff(direction)?; // structure check
    let mut tape: Tape<Dual> = Tape::new();
    let mut bound = Vec::new();
    for ((name, p), (_, d)) in params.iter().zip(direction.iter()) {
        let data = p.data().iter().zip(d.data()).map(|(&v, &t)| Dual::new(v, t)).collect();
        let var = tape.param(Tensor::new(p.shape().to_vec(), data)?);
        bound.push((name.to_string(), var));
    }
    let vars: ParamVars = bound.into_iter().collect();
    let out = run(&mut tape, f, &vars, inputs)?;
    let grads = tape.backward(out)?;
    let g = collect_grads(params, &vars, &grads, |g| g.map(|d| Dual::new(d.v, 0.0)).to_f64());
    let hv = collect_grads(params, &vars, &grads, |g| {
        Tensor::new(g.shape().to_vec(), g.data().iter().map(|d| d.t).collect()).expect("same shape")
    });
    Ok((g, hv))
}

/// Outcome of a central-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation moved a ReLU input lying within
    /// `10 * step` of its kink; the derivative is not defined there.
    pub excluded: usize,
}

/// Relative error floor: differences between gradients smaller than this in
/// magnitude are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval_tracked<F: TapeFunction<f64>>(f: &F, params: &ParamTree, inputs: &[Tensor]) -> Result<(f64, Vec<f64>), TensorError> {
    let mut tape = Tape::with_kink_tracking();
    let vars = params.bind_frozen(&mut tape);
    let out = run(&mut tape, f, &vars, inputs)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(TensorError::NonScalar { shape: v.shape().to_vec() });
    }
    Ok((v.data()[0], tape.kink_inputs().unwrap_or_default().to_vec()))
}

/// Worst relative error between [`gradient`] and central differences.
pub fn finite_diff_check<F: TapeFunction<f64>>(f: &F, params: &ParamTree, inputs: &[Tensor], step: f64) -> Result<f64, TensorError> {
    finite_diff_report(f, params, inputs, step).map(|r| r.max_rel_error)
}

pub fn finite_diff_report<F: TapeFunction<f64>>(
    f: &F,
    params: &ParamTree,
    inputs: &[Tensor],
    step: f64,
) -> Result<FiniteDiffReport, TensorError> {
    if step.is_nan() || step <= 0.0 {
        return Err(TensorError::InvalidStep(step));
    }
    let grad = gradient(f, params, inputs)?;
    let (_, base_kinks) = eval_tracked(f, params, inputs)?;
    let mut report = FiniteDiffReport { max_rel_error: 0.0, checked: 0, excluded: 0 };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let n = params.get(name).expect("leaf").numel();
        for i in 0..n {
            let orig = params.get(name).expect("leaf").data()[i];
            probe.get_mut(name).expect("leaf").data_mut()[i] = orig + step;
            let (fp, kp) = eval_tracked(f, &probe, inputs)?;
            probe.get_mut(name).expect("leaf").data_mut()[i] = orig - step;
            let (fm, km) = eval_tracked(f, &probe, inputs)?;
            probe.get_mut(name).expect("leaf").data_mut()[i] = orig;

            let near_kink = kp
                .iter()
                .zip(&km)
                .zip(&base_kinks)
                .any(|((a, b), base)| a != b && base.abs() < 10.0 * step);
            if near_kink {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * step);
            let analytic = grad.get(name).expect("leaf").data()[i];
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
