//! Hand-coded competitors: Adam on the Lagrangian dual, Adam on a softmax
//! reparameterization of the simplex, and projected gradient descent (which
//! doubles as the convergence oracle in the test suite).

use std::time::Instant;

use crate::domains::SimplexVector;
use crate::error::{Error, Result};
use crate::fw::{self, FwRecord, FwTrace};
use crate::linalg::{self};
use crate::svm::KernelMatrix;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            step: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_step(step: f64) -> Self {
        AdamParams {
            step,
            ..AdamParams::default()
        }
    }
}

/// First/second moment accumulators plus the timestep for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new(dim: usize, params: AdamParams) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            params,
        }
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    /// Standard bias-corrected Adam update, in place.
    pub fn step(&mut self, values: &mut [f64], grad: &[f64]) -> Result<()> {
        if values.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.m.len()),
                got: format!("{} values, {} gradients", values.len(), grad.len()),
            });
        }
        self.t += 1;
        let AdamParams {
            step,
            beta1,
            beta2,
            epsilon,
        } = self.params;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..values.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= step * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

/// f(alpha) = 0.5 alpha^T K alpha - lambda sum alpha, with gradient
/// K alpha - lambda 1.
pub fn lagrangian_objective(
    alpha: &[f64],
    k: &KernelMatrix,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    if alpha.len() != k.n() {
        return Err(Error::ShapeMismatch {
            expected: format!("alpha of length {}", k.n()),
            got: format!("{}", alpha.len()),
        });
    }
    if lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let ka = k.matvec(alpha);
    let value = 0.5 * linalg::dot(alpha, &ka) - lambda * alpha.iter().sum::<f64>();
    let grad = ka.iter().map(|g| g - lambda).collect();
    Ok((value, grad))
}

/// Sup-norm of the projected gradient residual for the constraint alpha >= 0;
/// zero exactly at a KKT point.
fn nonneg_residual(alpha: &[f64], grad: &[f64]) -> f64 {
    alpha
        .iter()
        .zip(grad)
        .map(|(a, g)| (a - (a - g).max(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Adam on the Lagrangian objective; nonnegativity is enforced by clipping
/// at zero after each step. The trace records the Lagrangian objective and
/// the nonnegativity KKT residual in the gap column.
pub fn lagrangian_adam_train(
    k: &KernelMatrix,
    lambda: f64,
    iters: usize,
    adam: AdamParams,
) -> Result<(Vec<f64>, FwTrace)> {
    let start = Instant::now();
    let n = k.n();
    let mut alpha = vec![1.0 / n as f64; n];
    let mut state = AdamState::new(n, adam);
    let mut trace = FwTrace::default();
    for t in 0..iters {
        let (value, grad) = lagrangian_objective(&alpha, k, lambda)?;
        trace.records.push(FwRecord {
            iter: t,
            objective: value,
            duality_gap: nonneg_residual(&alpha, &grad),
            step_size: adam.step,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        state.step(&mut alpha, &grad)?;
        for a in alpha.iter_mut() {
            *a = a.max(0.0);
        }
    }
    Ok((alpha, trace))
}

/// Exact simplex Frank-Wolfe gap at `alpha`, used as the trace gap for the
/// simplex-feasible baselines.
fn exact_simplex_gap(alpha: &[f64], grad: &[f64]) -> f64 {
    let s = crate::domains::simplex_lmo_exact(grad).expect("finite gradient");
    fw::duality_gap(alpha, grad, s.weights()).expect("matched lengths")
}

/// Adam on unconstrained theta with alpha = exp(theta)/sum exp(theta); the
/// gradient in theta flows through the tape. Iterates are strictly interior
/// simplex points by construction.
pub fn reparam_simplex_train(
    k: &KernelMatrix,
    iters: usize,
    adam: AdamParams,
) -> Result<(SimplexVector, FwTrace)> {
    let start = Instant::now();
    let n = k.n();
    let mut theta = vec![0.0; n];
    let mut state = AdamState::new(n, adam);
    let mut trace = FwTrace::default();
    for t in 0..iters {
        // softmax(theta) = softmin(-theta) at beta = 1
        let mut tape = Tape::new();
        let theta_node = tape.vector_var(&theta)?;
        let neg = tape.scale(theta_node, -1.0)?;
        let alpha_node = tape.softmin(neg, 1.0)?;
        let k_node = tape.constant(k.matrix().clone())?;
        let ka = tape.matvec(k_node, alpha_node)?;
        let quad = tape.dot(alpha_node, ka)?;
        let obj = tape.scale(quad, 0.5)?;

        let alpha_vals = tape.value(alpha_node).as_slice().to_vec();
        let grad_alpha = k.matvec(&alpha_vals);
        trace.records.push(FwRecord {
            iter: t,
            objective: tape.scalar_value(obj),
            duality_gap: exact_simplex_gap(&alpha_vals, &grad_alpha),
            step_size: adam.step,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        let grads = tape.backward(obj)?;
        let grad_theta = grads.grad_or_zeros(theta_node, n, 1);
        state.step(&mut theta, grad_theta.as_slice())?;
    }
    let neg_theta: Vec<f64> = theta.iter().map(|v| -v).collect();
    let alpha = linalg::softmin(&neg_theta, 1.0)?;
    Ok((alpha, trace))
}

/// alpha <- project_simplex(alpha - step * grad f(alpha)) per iteration.
pub fn projected_gd_train<F, G>(
    objective: F,
    gradient: G,
    n: usize,
    step: f64,
    iters: usize,
) -> Result<(SimplexVector, FwTrace)>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if step.is_nan() || step <= 0.0 {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let start = Instant::now();
    let mut alpha = SimplexVector::uniform(n);
    let mut trace = FwTrace::default();
    for t in 0..iters {
        let grad = gradient(alpha.weights());
        trace.records.push(FwRecord {
            iter: t,
            objective: objective(alpha.weights()),
            duality_gap: exact_simplex_gap(alpha.weights(), &grad),
            step_size: step,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        let moved: Vec<f64> = alpha
            .weights()
            .iter()
            .zip(&grad)
            .map(|(a, g)| a - step * g)
            .collect();
        alpha = linalg::project_simplex(&moved)?;
    }
    Ok((alpha, trace))
}

/// Projected gradient descent on the dual QP 1/2 alpha^T K alpha.
pub fn projected_gd_qp(
    k: &KernelMatrix,
    step: f64,
    iters: usize,
) -> Result<(SimplexVector, FwTrace)> {
    projected_gd_train(
        |alpha| 0.5 * linalg::dot(alpha, &k.matvec(alpha)),
        |alpha| k.matvec(alpha),
        k.n(),
        step,
        iters,
    )
}
