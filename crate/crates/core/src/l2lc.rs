//! Learning to learn by conditional gradients: a two-layer LSTM controller
//! that emits either step sizes (Gamma variant) or surrogate gradient
//! directions (Direction variant), meta-trained by backpropagating the
//! summed trajectory loss through the unrolled Frank-Wolfe optimizer with
//! truncated segments.

use std::io::{self, BufRead, Write};

use crate::baselines::{AdamParams, AdamState};
use crate::domains::SimplexVector;
use crate::error::{Error, Result};
use crate::fw::{self, GammaFeed, GammaSource, SimplexLmo, StepSchedule};
use crate::linalg::{self, Matrix};
use crate::rng::{self, SplitMix64};
use crate::svm::KernelMatrix;
use crate::tape::{NodeId, Tape};

/// What the controller emits: a step size from the previous step size, or a
/// surrogate gradient consumed coordinate-wise with shared parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Gamma,
    Direction,
}

/// Input fed for gamma_{-1} on the very first step, where no previous step
/// size exists yet.
pub const GAMMA_INPUT_INIT: f64 = 0.0;

/// Gate parameters of one LSTM layer (input, forget, output, candidate).
#[derive(Debug, Clone)]
pub struct LstmLayer {
    pub w_i: Matrix,
    pub u_i: Matrix,
    pub b_i: Vec<f64>,
    pub w_f: Matrix,
    pub u_f: Matrix,
    pub b_f: Vec<f64>,
    pub w_o: Matrix,
    pub u_o: Matrix,
    pub b_o: Vec<f64>,
    pub w_c: Matrix,
    pub u_c: Matrix,
    pub b_c: Vec<f64>,
}

fn uniform_mat(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.next_range(-0.1, 0.1)).collect(),
    )
    .expect("sized data")
}

fn uniform_vec(len: usize, rng: &mut SplitMix64) -> Vec<f64> {
    (0..len).map(|_| rng.next_range(-0.1, 0.1)).collect()
}

impl LstmLayer {
    fn init(hidden: usize, input: usize, rng: &mut SplitMix64) -> Self {
        LstmLayer {
            w_i: uniform_mat(hidden, input, rng),
            u_i: uniform_mat(hidden, hidden, rng),
            b_i: uniform_vec(hidden, rng),
            w_f: uniform_mat(hidden, input, rng),
            u_f: uniform_mat(hidden, hidden, rng),
            // forget-gate bias +1 stabilizes early memory
            b_f: vec![1.0; hidden],
            w_o: uniform_mat(hidden, input, rng),
            u_o: uniform_mat(hidden, hidden, rng),
            b_o: uniform_vec(hidden, rng),
            w_c: uniform_mat(hidden, input, rng),
            u_c: uniform_mat(hidden, hidden, rng),
            b_c: uniform_vec(hidden, rng),
        }
    }

    fn tensors(&self) -> [(&Matrix, &Matrix, &Vec<f64>); 4] {
        [
            (&self.w_i, &self.u_i, &self.b_i),
            (&self.w_f, &self.u_f, &self.b_f),
            (&self.w_o, &self.u_o, &self.b_o),
            (&self.w_c, &self.u_c, &self.b_c),
        ]
    }
}

/// Two-layer LSTM with 20 hidden units per layer plus a linear projection to
/// a single scalar output.
#[derive(Debug, Clone)]
pub struct LstmController {
    pub variant: Variant,
    pub hidden: usize,
    pub layers: Vec<LstmLayer>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Hidden and cell state per layer; one instance per pipeline (the Direction
/// variant keeps one per coordinate).
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmController {
    /// Small uniform weights in [-0.1, 0.1], forget-gate bias +1; both
    /// variants read a scalar and emit a scalar.
    pub fn init(variant: Variant, seed: u64) -> Self {
        let hidden = 20;
        let mut rng = SplitMix64::new(seed);
        let layers = vec![
            LstmLayer::init(hidden, 1, &mut rng),
            LstmLayer::init(hidden, hidden, &mut rng),
        ];
        let w_out = Matrix::new(
            1,
            hidden,
            (0..hidden).map(|_| rng.next_range(-0.1, 0.1)).collect(),
        )
        .expect("sized data");
        let b_out = vec![rng.next_range(-0.1, 0.1)];
        LstmController {
            variant,
            hidden,
            layers,
            w_out,
            b_out,
        }
    }

    pub fn zero_state(&self) -> LstmState {
        LstmState {
            h: vec![vec![0.0; self.hidden]; self.layers.len()],
            c: vec![vec![0.0; self.hidden]; self.layers.len()],
        }
    }

    /// One forward step through both layers and the output projection. The
    /// arithmetic mirrors `step_on_tape` operation for operation so the two
    /// paths agree bit-for-bit.
    pub fn step(&self, input: &[f64], state: &mut LstmState) -> Vec<f64> {
        let mut layer_in = input.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let gate_pre = |w: &Matrix, u: &Matrix, b: &[f64]| -> Vec<f64> {
                let wx = w.matvec(&layer_in);
                let uh = u.matvec(&state.h[li]);
                wx.iter()
                    .zip(&uh)
                    .zip(b)
                    .map(|((a, b2), bias)| (a + b2) + bias)
                    .collect()
            };
            let i: Vec<f64> = gate_pre(&layer.w_i, &layer.u_i, &layer.b_i)
                .into_iter()
                .map(logistic)
                .collect();
            let f: Vec<f64> = gate_pre(&layer.w_f, &layer.u_f, &layer.b_f)
                .into_iter()
                .map(logistic)
                .collect();
            let o: Vec<f64> = gate_pre(&layer.w_o, &layer.u_o, &layer.b_o)
                .into_iter()
                .map(logistic)
                .collect();
            let g: Vec<f64> = gate_pre(&layer.w_c, &layer.u_c, &layer.b_c)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let c_new: Vec<f64> = (0..self.hidden)
                .map(|k| f[k] * state.c[li][k] + i[k] * g[k])
                .collect();
            let h_new: Vec<f64> = (0..self.hidden)
                .map(|k| o[k] * c_new[k].tanh())
                .collect();
            state.c[li] = c_new;
            state.h[li] = h_new.clone();
            layer_in = h_new;
        }
        let wo = self.w_out.matvec(&layer_in);
        wo.iter().zip(&self.b_out).map(|(a, b)| a + b).collect()
    }

    pub fn param_count(&self) -> usize {
        self.flatten().len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            for (w, u, b) in layer.tensors() {
                out.extend_from_slice(w.as_slice());
                out.extend_from_slice(u.as_slice());
                out.extend_from_slice(b);
            }
        }
        out.extend_from_slice(self.w_out.as_slice());
        out.extend_from_slice(&self.b_out);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut at = 0usize;
        let take_mat = |m: &mut Matrix, at: &mut usize| {
            let len = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[*at..*at + len]);
            *at += len;
        };
        for layer in self.layers.iter_mut() {
            for (w, u, b) in [
                (&mut layer.w_i, &mut layer.u_i, &mut layer.b_i),
                (&mut layer.w_f, &mut layer.u_f, &mut layer.b_f),
                (&mut layer.w_o, &mut layer.u_o, &mut layer.b_o),
                (&mut layer.w_c, &mut layer.u_c, &mut layer.b_c),
            ] {
                take_mat(w, &mut at);
                take_mat(u, &mut at);
                let b_len = b.len();
                b.copy_from_slice(&flat[at..at + b_len]);
                at += b_len;
            }
        }
        take_mat(&mut self.w_out, &mut at);
        let b_len = self.b_out.len();
        self.b_out.copy_from_slice(&flat[at..at + b_len]);
        at += b_len;
        debug_assert_eq!(at, flat.len());
    }
}

// ---------------------------------------------------------------------------
// Tape forward of the controller
// ---------------------------------------------------------------------------

struct LayerNodes {
    gates: [(NodeId, NodeId, NodeId); 4],
}

/// Parameter leaves of one segment tape, in `flatten` order.
pub struct ControllerNodes {
    layers: Vec<LayerNodes>,
    w_out: NodeId,
    b_out: NodeId,
}

impl LstmController {
    /// Registers every parameter as a tape variable.
    pub fn param_nodes(&self, tape: &mut Tape) -> Result<ControllerNodes> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut gates = Vec::with_capacity(4);
            for (w, u, b) in layer.tensors() {
                let wn = tape.var(w.clone())?;
                let un = tape.var(u.clone())?;
                let bn = tape.vector_var(b)?;
                gates.push((wn, un, bn));
            }
            layers.push(LayerNodes {
                gates: [gates[0], gates[1], gates[2], gates[3]],
            });
        }
        let w_out = tape.var(self.w_out.clone())?;
        let b_out = tape.vector_var(&self.b_out)?;
        Ok(ControllerNodes {
            layers,
            w_out,
            b_out,
        })
    }

    /// One LSTM step on the tape; returns the scalar output node and the new
    /// per-layer (h, c) nodes.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape,
        nodes: &ControllerNodes,
        input: NodeId,
        state: &[(NodeId, NodeId)],
    ) -> Result<(NodeId, Vec<(NodeId, NodeId)>)> {
        let mut layer_in = input;
        let mut new_state = Vec::with_capacity(self.layers.len());
        for (li, layer_nodes) in nodes.layers.iter().enumerate() {
            let (h, c) = state[li];
            let mut pre = Vec::with_capacity(4);
            for (w, u, b) in layer_nodes.gates.iter() {
                let wx = tape.matvec(*w, layer_in)?;
                let uh = tape.matvec(*u, h)?;
                let sum = tape.add(wx, uh)?;
                pre.push(tape.add(sum, *b)?);
            }
            let i = tape.logistic(pre[0])?;
            let f = tape.logistic(pre[1])?;
            let o = tape.logistic(pre[2])?;
            let g = tape.tanh(pre[3])?;
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            let c_new = tape.add(fc, ig)?;
            let tc = tape.tanh(c_new)?;
            let h_new = tape.mul(o, tc)?;
            new_state.push((h_new, c_new));
            layer_in = h_new;
        }
        let wo = tape.matvec(nodes.w_out, layer_in)?;
        let out = tape.add(wo, nodes.b_out)?;
        Ok((out, new_state))
    }

    /// Collects parameter gradients from a backward pass, in `flatten` order.
    fn collect_grads(&self, tape: &Tape, nodes: &ControllerNodes, grads: &crate::tape::GradientMap) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        let mut push = |id: NodeId| {
            let v = tape.value(id);
            out.extend_from_slice(grads.grad_or_zeros(id, v.rows(), v.cols()).as_slice());
        };
        for layer in &nodes.layers {
            for (w, u, b) in &layer.gates {
                push(*w);
                push(*u);
                push(*b);
            }
        }
        push(nodes.w_out);
        push(nodes.b_out);
        out
    }
}

// ---------------------------------------------------------------------------
// Inference-side steps
// ---------------------------------------------------------------------------

struct LstmGammaFeed {
    ctrl: LstmController,
    state: LstmState,
    prev_gamma: f64,
}

impl GammaFeed for LstmGammaFeed {
    fn next_gamma(&mut self, _t: usize) -> f64 {
        let out = self.ctrl.step(&[self.prev_gamma], &mut self.state);
        let gamma = logistic(out[0]);
        self.prev_gamma = gamma;
        gamma
    }
}

impl GammaSource for LstmController {
    fn start_feed(&self) -> Box<dyn GammaFeed> {
        Box::new(LstmGammaFeed {
            ctrl: self.clone(),
            state: self.zero_state(),
            prev_gamma: GAMMA_INPUT_INIT,
        })
    }
}

/// Convex-combination step toward softmin(g, beta); the learned-direction
/// update and the hand-coded softmin update share this exact code path.
pub fn direction_step(
    alpha: &SimplexVector,
    g: &[f64],
    beta: f64,
    gamma: f64,
) -> Result<SimplexVector> {
    let s = linalg::softmin(g, beta)?;
    SimplexVector::new(fw::fw_update(alpha.weights(), s.weights(), gamma))
}

/// Runs the controller coordinate-wise over the gradient (shared parameters,
/// one state per coordinate) and softmins the outputs into a simplex point.
pub fn direction_lmo(
    ctrl: &LstmController,
    states: &mut [LstmState],
    grad: &[f64],
    beta: f64,
) -> Result<SimplexVector> {
    if states.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} coordinate states", grad.len()),
            got: format!("{}", states.len()),
        });
    }
    let mut g = vec![0.0; grad.len()];
    for (i, &gi) in grad.iter().enumerate() {
        let out = ctrl.step(&[gi], &mut states[i]);
        g[i] = out[0];
    }
    linalg::softmin(&g, beta)
}

/// One learned-step-size update: gamma_t = logistic(LSTM(gamma_{t-1})), then
/// the softmin Frank-Wolfe step. Returns (new iterate, gamma_t).
pub fn learned_gamma_step(
    ctrl: &LstmController,
    prev_gamma: f64,
    state: &mut LstmState,
    alpha: &SimplexVector,
    grad: &[f64],
    beta: f64,
) -> Result<(SimplexVector, f64)> {
    let out = ctrl.step(&[prev_gamma], state);
    let gamma = logistic(out[0]);
    let s = linalg::softmin(grad, beta)?;
    let next = SimplexVector::new(fw::fw_update(alpha.weights(), s.weights(), gamma))?;
    Ok((next, gamma))
}

/// One learned-direction update with an externally supplied step size.
pub fn learned_direction_step(
    ctrl: &LstmController,
    states: &mut [LstmState],
    alpha: &SimplexVector,
    grad: &[f64],
    beta: f64,
    gamma: f64,
) -> Result<SimplexVector> {
    let s = direction_lmo(ctrl, states, grad, beta)?;
    SimplexVector::new(fw::fw_update(alpha.weights(), s.weights(), gamma))
}

// ---------------------------------------------------------------------------
// Task families and meta-training
// ---------------------------------------------------------------------------

/// Seeded sampler of simplex QP tasks f(alpha) = 1/2 alpha^T K alpha.
#[derive(Debug, Clone)]
pub enum TaskFamily {
    /// K = A^T A / n with standard Gaussian A.
    RandomQp { n: usize },
    /// Principal submatrices of a fixed kernel (SVM duals on sampled rows).
    KernelSubsets { kernel: KernelMatrix, subset: usize },
}

impl TaskFamily {
    pub fn sample(&self, seed: u64) -> KernelMatrix {
        match self {
            TaskFamily::RandomQp { n } => random_qp_kernel(*n, seed),
            TaskFamily::KernelSubsets { kernel, subset } => {
                let mut rng = SplitMix64::new(seed);
                let mut idx: Vec<usize> = (0..kernel.n()).collect();
                rng.shuffle(&mut idx);
                idx.truncate((*subset).min(kernel.n()));
                let m = *subset;
                let mut k = Matrix::zeros(m, m);
                for (r, &ir) in idx.iter().enumerate() {
                    for (c, &ic) in idx.iter().enumerate() {
                        k.set(r, c, kernel.get(ir, ic));
                    }
                }
                KernelMatrix::from_matrix(k).expect("square submatrix")
            }
        }
    }
}

/// Random PSD QP matrix K = A^T A / n.
pub fn random_qp_kernel(n: usize, seed: u64) -> KernelMatrix {
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f64> = (0..n * n).map(|_| rng.next_gaussian()).collect();
    let a = Matrix::new(n, n, data).expect("sized data");
    let mut k = a.transpose().matmul(&a).expect("square");
    k.scale_in_place(1.0 / n as f64);
    KernelMatrix::from_matrix(k).expect("square product")
}

#[derive(Debug, Clone)]
pub struct MetaTrainConfig {
    pub variant: Variant,
    /// Total unrolled Frank-Wolfe steps per task.
    pub unroll: usize,
    /// Truncated-backpropagation segment length; carried state is detached
    /// at segment boundaries.
    pub segment_len: usize,
    pub meta_epochs: usize,
    pub meta_step: f64,
    pub train_tasks: usize,
    pub val_tasks: usize,
    /// Early-stopping patience in meta-epochs without validation improvement.
    pub patience: usize,
    /// Softmin temperature of the unrolled updates.
    pub beta: f64,
    /// Fixed step-size schedule for the Direction variant.
    pub direction_gamma: StepSchedule,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            variant: Variant::Gamma,
            unroll: 100,
            segment_len: 20,
            meta_epochs: 100,
            meta_step: 1e-3,
            train_tasks: 32,
            val_tasks: 8,
            patience: 10,
            beta: 10.0,
            direction_gamma: StepSchedule::Default,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaEpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct MetaTrainResult {
    pub controller: LstmController,
    pub epoch_losses: Vec<MetaEpochLoss>,
}

/// Sum of f(x_t) for t = 1..=T along the unrolled run, computed on the
/// plain inference path.
pub fn unroll_loss(ctrl: &LstmController, k: &KernelMatrix, config: &MetaTrainConfig) -> Result<f64> {
    let problem = match config.variant {
        Variant::Gamma => fw::simplex_qp_problem(
            k.matrix().clone(),
            SimplexLmo::Softmin { beta: config.beta },
        ),
        Variant::Direction => fw::simplex_qp_problem(
            k.matrix().clone(),
            SimplexLmo::LearnedDirection {
                controller: std::sync::Arc::new(ctrl.clone()),
                beta: config.beta,
            },
        ),
    };
    let schedule = match config.variant {
        Variant::Gamma => StepSchedule::Learned(std::sync::Arc::new(ctrl.clone())),
        Variant::Direction => config.direction_gamma.clone(),
    };
    let run = fw::run_fw(&problem, &schedule, config.unroll, None)?;
    let tail: f64 = run.trace.records.iter().skip(1).map(|r| r.objective).sum();
    Ok(tail + run.final_objective)
}

/// Meta-gradient of the summed trajectory loss with respect to the
/// controller parameters, over `config.unroll` steps in truncated segments.
///
/// With `detach_lmo` (production behavior) the optimizee gradient entering
/// the update, softmin(K alpha) for Gamma and the LSTM input coordinates for
/// Direction, is treated as a constant of the controller parameters
/// (second-derivative dropping). With it off, the whole unroll lives on the
/// tape; finite differences then match the returned gradient exactly, which
/// is how the tape is validated.
pub fn unroll_meta_gradient(
    ctrl: &LstmController,
    k: &KernelMatrix,
    config: &MetaTrainConfig,
    detach_lmo: bool,
) -> Result<(f64, Vec<f64>)> {
    match config.variant {
        Variant::Gamma => unroll_meta_gradient_gamma(ctrl, k, config, detach_lmo),
        Variant::Direction => unroll_meta_gradient_direction(ctrl, k, config, detach_lmo),
    }
}

fn qp_loss_node(tape: &mut Tape, k_node: NodeId, alpha: NodeId) -> Result<NodeId> {
    let ka = tape.matvec(k_node, alpha)?;
    let quad = tape.dot(alpha, ka)?;
    tape.scale(quad, 0.5)
}

fn fw_update_on_tape(
    tape: &mut Tape,
    alpha: NodeId,
    s: NodeId,
    gamma: NodeId,
) -> Result<NodeId> {
    let one = tape.scalar_const(1.0)?;
    let neg_gamma = tape.scale(gamma, -1.0)?;
    let one_minus = tape.add(one, neg_gamma)?;
    let keep = tape.mul(one_minus, alpha)?;
    let step = tape.mul(gamma, s)?;
    tape.add(keep, step)
}

fn unroll_meta_gradient_gamma(
    ctrl: &LstmController,
    k: &KernelMatrix,
    config: &MetaTrainConfig,
    detach_lmo: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = k.n();
    let mut alpha_vals = SimplexVector::uniform(n).into_vec();
    let mut state_vals = ctrl.zero_state();
    let mut prev_gamma_val = GAMMA_INPUT_INIT;
    let mut total_loss = 0.0;
    let mut grad_acc = vec![0.0; ctrl.param_count()];
    let mut t = 0usize;

    while t < config.unroll {
        let mut tape = Tape::new();
        let nodes = ctrl.param_nodes(&mut tape)?;
        let k_node = tape.constant(k.matrix().clone())?;
        let mut alpha = tape.vector_const(&alpha_vals)?;
        let mut state: Vec<(NodeId, NodeId)> = state_vals
            .h
            .iter()
            .zip(&state_vals.c)
            .map(|(h, c)| Ok((tape.vector_const(h)?, tape.vector_const(c)?)))
            .collect::<Result<_>>()?;
        let mut prev_gamma = tape.vector_const(&[prev_gamma_val])?;
        let mut seg_loss: Option<NodeId> = None;

        let seg_end = (t + config.segment_len.max(1)).min(config.unroll);
        while t < seg_end {
            let (out, new_state) = ctrl.step_on_tape(&mut tape, &nodes, prev_gamma, &state)?;
            let gamma = tape.logistic(out)?;
            let s = if detach_lmo {
                let grad = k.matvec(tape.value(alpha).as_slice());
                let s_vals = linalg::softmin(&grad, config.beta)?;
                tape.vector_const(s_vals.weights())?
            } else {
                let ka = tape.matvec(k_node, alpha)?;
                tape.softmin(ka, config.beta)?
            };
            alpha = fw_update_on_tape(&mut tape, alpha, s, gamma)?;
            let f = qp_loss_node(&mut tape, k_node, alpha)?;
            seg_loss = Some(match seg_loss {
                None => f,
                Some(acc) => tape.add(acc, f)?,
            });
            prev_gamma = gamma;
            state = new_state;
            t += 1;
        }

        let seg_loss = seg_loss.expect("non-empty segment");
        total_loss += tape.scalar_value(seg_loss);
        let grads = tape.backward(seg_loss)?;
        for (acc, g) in grad_acc
            .iter_mut()
            .zip(ctrl.collect_grads(&tape, &nodes, &grads))
        {
            *acc += g;
        }

        // detach carried state across the segment boundary
        alpha_vals = tape.value(alpha).as_slice().to_vec();
        prev_gamma_val = tape.scalar_value(prev_gamma);
        for (li, (h, c)) in state.iter().enumerate() {
            state_vals.h[li] = tape.value(*h).as_slice().to_vec();
            state_vals.c[li] = tape.value(*c).as_slice().to_vec();
        }
    }
    Ok((total_loss, grad_acc))
}

fn unroll_meta_gradient_direction(
    ctrl: &LstmController,
    k: &KernelMatrix,
    config: &MetaTrainConfig,
    detach_lmo: bool,
) -> Result<(f64, Vec<f64>)> {
    let n = k.n();
    let mut alpha_vals = SimplexVector::uniform(n).into_vec();
    let mut coord_states: Vec<LstmState> = (0..n).map(|_| ctrl.zero_state()).collect();
    let mut sched_state = config.direction_gamma.start();
    let mut total_loss = 0.0;
    let mut grad_acc = vec![0.0; ctrl.param_count()];
    let mut t = 0usize;

    // basis vectors used to pack per-coordinate scalars into one vector node
    let basis: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();

    while t < config.unroll {
        let mut tape = Tape::new();
        let nodes = ctrl.param_nodes(&mut tape)?;
        let k_node = tape.constant(k.matrix().clone())?;
        let mut alpha = tape.vector_const(&alpha_vals)?;
        let mut states: Vec<Vec<(NodeId, NodeId)>> = coord_states
            .iter()
            .map(|st| {
                st.h.iter()
                    .zip(&st.c)
                    .map(|(h, c)| Ok((tape.vector_const(h)?, tape.vector_const(c)?)))
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        let basis_nodes: Vec<NodeId> = basis
            .iter()
            .map(|e| tape.vector_const(e))
            .collect::<Result<_>>()?;
        let mut seg_loss: Option<NodeId> = None;

        let seg_end = (t + config.segment_len.max(1)).min(config.unroll);
        while t < seg_end {
            let grad_vals = k.matvec(tape.value(alpha).as_slice());
            let ka_node = if detach_lmo {
                None
            } else {
                Some(tape.matvec(k_node, alpha)?)
            };
            let mut g: Option<NodeId> = None;
            for i in 0..n {
                let input = match ka_node {
                    None => tape.vector_const(&[grad_vals[i]])?,
                    Some(ka) => tape.dot(basis_nodes[i], ka)?,
                };
                let (out, new_state) =
                    ctrl.step_on_tape(&mut tape, &nodes, input, &states[i])?;
                states[i] = new_state;
                let packed = tape.mul(basis_nodes[i], out)?;
                g = Some(match g {
                    None => packed,
                    Some(acc) => tape.add(acc, packed)?,
                });
            }
            let g = g.expect("n >= 1");
            let s = tape.softmin(g, config.beta)?;
            let gamma_val = config.direction_gamma.step_size(t, &mut sched_state);
            let keep = tape.scale(alpha, 1.0 - gamma_val)?;
            let step = tape.scale(s, gamma_val)?;
            alpha = tape.add(keep, step)?;
            let f = qp_loss_node(&mut tape, k_node, alpha)?;
            seg_loss = Some(match seg_loss {
                None => f,
                Some(acc) => tape.add(acc, f)?,
            });
            t += 1;
        }

        let seg_loss = seg_loss.expect("non-empty segment");
        total_loss += tape.scalar_value(seg_loss);
        let grads = tape.backward(seg_loss)?;
        for (acc, g) in grad_acc
            .iter_mut()
            .zip(ctrl.collect_grads(&tape, &nodes, &grads))
        {
            *acc += g;
        }

        alpha_vals = tape.value(alpha).as_slice().to_vec();
        for (i, st) in states.iter().enumerate() {
            for (li, (h, c)) in st.iter().enumerate() {
                coord_states[i].h[li] = tape.value(*h).as_slice().to_vec();
                coord_states[i].c[li] = tape.value(*c).as_slice().to_vec();
            }
        }
    }
    Ok((total_loss, grad_acc))
}

/// Minimizes the mean summed trajectory loss over sampled tasks by Adam on
/// the controller parameters, with truncated backpropagation through time
/// and early stopping on a disjoint validation task split. Returns the
/// best-validation controller.
pub fn meta_train(family: &TaskFamily, config: &MetaTrainConfig) -> Result<MetaTrainResult> {
    if config.unroll == 0 {
        return Err(Error::invalid("meta-training needs unroll length >= 1"));
    }
    let mut ctrl = LstmController::init(config.variant, config.seed);
    let mut epoch_losses = Vec::new();
    if config.meta_epochs == 0 {
        return Ok(MetaTrainResult {
            controller: ctrl,
            epoch_losses,
        });
    }

    let train_kernels: Vec<KernelMatrix> = (0..config.train_tasks)
        .map(|i| family.sample(rng::mix_seed(config.seed, 0x1000 + i as u64)))
        .collect();
    let val_kernels: Vec<KernelMatrix> = (0..config.val_tasks.max(1))
        .map(|i| family.sample(rng::mix_seed(config.seed, 0x2000 + i as u64)))
        .collect();

    let mut adam = AdamState::new(ctrl.param_count(), AdamParams::with_step(config.meta_step));
    let mut best_val = f64::INFINITY;
    let mut best_ctrl = ctrl.clone();
    let mut patience_left = config.patience;

    for epoch in 0..config.meta_epochs {
        let mut grad = vec![0.0; ctrl.param_count()];
        let mut train_loss = 0.0;
        for kernel in &train_kernels {
            let (loss, g) = unroll_meta_gradient(&ctrl, kernel, config, true)?;
            train_loss += loss;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        let scale = 1.0 / config.train_tasks as f64;
        train_loss *= scale;
        for g in grad.iter_mut() {
            *g *= scale;
        }
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "meta-loss diverged at epoch {epoch}"
            )));
        }

        let mut params = ctrl.flatten();
        adam.step(&mut params, &grad)?;
        ctrl.unflatten(&params);

        let mut val_loss = 0.0;
        for kernel in &val_kernels {
            val_loss += unroll_loss(&ctrl, kernel, config)?;
        }
        val_loss /= val_kernels.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "validation meta-loss diverged at epoch {epoch}"
            )));
        }
        epoch_losses.push(MetaEpochLoss {
            epoch,
            train_loss,
            val_loss,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_ctrl = ctrl.clone();
            patience_left = config.patience;
        } else if patience_left == 0 {
            break;
        } else {
            patience_left -= 1;
        }
    }

    Ok(MetaTrainResult {
        controller: best_ctrl,
        epoch_losses,
    })
}

// ---------------------------------------------------------------------------
// Serialization: `CGM1 lstm`
// ---------------------------------------------------------------------------

impl LstmController {
    pub fn save<W: Write>(&self, w: &mut W, config_hash: Option<&str>) -> io::Result<()> {
        writeln!(w, "CGM1 lstm")?;
        if let Some(h) = config_hash {
            writeln!(w, "config {h}")?;
        }
        let variant = match self.variant {
            Variant::Gamma => "gamma",
            Variant::Direction => "direction",
        };
        writeln!(w, "variant {variant}")?;
        writeln!(w, "hidden {}", self.hidden)?;
        writeln!(w, "layers {}", self.layers.len())?;
        let mut write_tensor = |name: &str, rows: usize, cols: usize, data: &[f64]| -> io::Result<()> {
            writeln!(w, "param {name} {rows} {cols}")?;
            for r in 0..rows {
                let row: Vec<String> = data[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| v.to_string())
                    .collect();
                writeln!(w, "{}", row.join(","))?;
            }
            Ok(())
        };
        for (li, layer) in self.layers.iter().enumerate() {
            for (gate, (wm, um, bv)) in ["i", "f", "o", "c"].iter().zip(layer.tensors()) {
                write_tensor(&format!("w_{gate}.{li}"), wm.rows(), wm.cols(), wm.as_slice())?;
                write_tensor(&format!("u_{gate}.{li}"), um.rows(), um.cols(), um.as_slice())?;
                write_tensor(&format!("b_{gate}.{li}"), bv.len(), 1, bv)?;
            }
        }
        write_tensor("w_out", self.w_out.rows(), self.w_out.cols(), self.w_out.as_slice())?;
        write_tensor("b_out", self.b_out.len(), 1, &self.b_out)?;
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<LstmController> {
        let lines: Vec<String> = r
            .lines()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: 0,
                msg: e.to_string(),
            })?;
        let mut at = 0usize;
        let mut take = |what: &str| -> Result<String> {
            if at >= lines.len() {
                return Err(Error::Parse {
                    line: lines.len(),
                    msg: format!("missing {what}"),
                });
            }
            at += 1;
            Ok(lines[at - 1].clone())
        };
        if take("header")?.trim() != "CGM1 lstm" {
            return Err(Error::Parse {
                line: 1,
                msg: "expected 'CGM1 lstm'".into(),
            });
        }
        let mut variant = None;
        let mut hidden = None;
        let layer_count: usize;
        loop {
            let line = take("controller fields")?;
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("config") => {}
                Some("variant") => {
                    variant = match parts.next() {
                        Some("gamma") => Some(Variant::Gamma),
                        Some("direction") => Some(Variant::Direction),
                        other => {
                            return Err(Error::Parse {
                                line: 0,
                                msg: format!("unknown variant {other:?}"),
                            })
                        }
                    };
                }
                Some("hidden") => hidden = parts.next().and_then(|v| v.parse::<usize>().ok()),
                Some("layers") => {
                    layer_count = parts
                        .next()
                        .and_then(|v| v.parse::<usize>().ok())
                        .ok_or_else(|| Error::Parse {
                            line: 0,
                            msg: "bad layer count".into(),
                        })?;
                    break;
                }
                other => {
                    return Err(Error::Parse {
                        line: 0,
                        msg: format!("unexpected field {other:?}"),
                    })
                }
            }
        }
        let (variant, hidden) = match (variant, hidden) {
            (Some(v), Some(h)) => (v, h),
            _ => {
                return Err(Error::Parse {
                    line: at,
                    msg: "incomplete controller header".into(),
                })
            }
        };
        let read_tensor = |take: &mut dyn FnMut(&str) -> Result<String>| -> Result<(String, Matrix)> {
            let header = take("param header")?;
            let mut parts = header.split_whitespace();
            if parts.next() != Some("param") {
                return Err(Error::Parse {
                    line: 0,
                    msg: format!("expected param header, got '{header}'"),
                });
            }
            let name = parts
                .next()
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: "missing param name".into(),
                })?
                .to_string();
            let rows: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: "bad rows".into(),
                })?;
            let cols: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    msg: "bad cols".into(),
                })?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row = take("param row")?;
                for v in row.split(',') {
                    data.push(v.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: 0,
                        msg: e.to_string(),
                    })?);
                }
            }
            Ok((name, Matrix::new(rows, cols, data)?))
        };
        let mut ctrl = LstmController::init(variant, 0);
        if hidden != ctrl.hidden || layer_count != ctrl.layers.len() {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "unsupported controller shape: hidden {hidden}, layers {layer_count}"
                ),
            });
        }
        for li in 0..layer_count {
            for gate in ["i", "f", "o", "c"] {
                for prefix in ["w", "u", "b"] {
                    let (name, tensor) = read_tensor(&mut take)?;
                    let expected = format!("{prefix}_{gate}.{li}");
                    if name != expected {
                        return Err(Error::Parse {
                            line: 0,
                            msg: format!("expected param {expected}, got {name}"),
                        });
                    }
                    let layer = &mut ctrl.layers[li];
                    match (prefix, gate) {
                        ("w", "i") => layer.w_i = tensor,
                        ("u", "i") => layer.u_i = tensor,
                        ("b", "i") => layer.b_i = tensor.into_vec(),
                        ("w", "f") => layer.w_f = tensor,
                        ("u", "f") => layer.u_f = tensor,
                        ("b", "f") => layer.b_f = tensor.into_vec(),
                        ("w", "o") => layer.w_o = tensor,
                        ("u", "o") => layer.u_o = tensor,
                        ("b", "o") => layer.b_o = tensor.into_vec(),
                        ("w", "c") => layer.w_c = tensor,
                        ("u", "c") => layer.u_c = tensor,
                        ("b", "c") => layer.b_c = tensor.into_vec(),
                        _ => unreachable!(),
                    }
                }
            }
        }
        let (name, w_out) = read_tensor(&mut take)?;
        if name != "w_out" {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected w_out, got {name}"),
            });
        }
        let (name, b_out) = read_tensor(&mut take)?;
        if name != "b_out" {
            return Err(Error::Parse {
                line: 0,
                msg: format!("expected b_out, got {name}"),
            });
        }
        ctrl.w_out = w_out;
        ctrl.b_out = b_out.into_vec();
        Ok(ctrl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(variant: Variant) -> LstmController {
        let mut ctrl = LstmController::init(variant, 1);
        let zeros = vec![0.0; ctrl.param_count()];
        ctrl.unflatten(&zeros);
        ctrl
    }

    #[test]
    fn zero_parameters_zero_state_gives_zero_output() {
        let ctrl = zeroed(Variant::Gamma);
        let mut state = ctrl.zero_state();
        let out = ctrl.step(&[0.7], &mut state);
        assert_eq!(out, vec![0.0]);
        for li in 0..2 {
            assert!(state.h[li].iter().all(|&v| v == 0.0));
            assert!(state.c[li].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn saturated_forget_gate_preserves_cell_exactly() {
        let mut ctrl = zeroed(Variant::Gamma);
        for layer in ctrl.layers.iter_mut() {
            layer.b_f = vec![60.0; ctrl.hidden]; // logistic(60) rounds to 1.0
        }
        let mut state = ctrl.zero_state();
        let mut rng = SplitMix64::new(4);
        for li in 0..2 {
            for k in 0..ctrl.hidden {
                state.c[li][k] = rng.next_gaussian();
            }
        }
        let saved = state.c.clone();
        ctrl.step(&[0.0], &mut state);
        assert_eq!(state.c, saved);
    }

    #[test]
    fn tape_forward_matches_plain_forward_bitwise() {
        let ctrl = LstmController::init(Variant::Gamma, 9);
        let mut state = ctrl.zero_state();
        // advance a few plain steps to randomize the state
        ctrl.step(&[0.4], &mut state);
        ctrl.step(&[0.2], &mut state);

        let mut tape = Tape::new();
        let nodes = ctrl.param_nodes(&mut tape).unwrap();
        let input = tape.vector_const(&[0.8]).unwrap();
        let state_nodes: Vec<(NodeId, NodeId)> = state
            .h
            .iter()
            .zip(&state.c)
            .map(|(h, c)| {
                (
                    tape.vector_const(h).unwrap(),
                    tape.vector_const(c).unwrap(),
                )
            })
            .collect();
        let (out, new_state) = ctrl
            .step_on_tape(&mut tape, &nodes, input, &state_nodes)
            .unwrap();

        let mut plain_state = state.clone();
        let plain_out = ctrl.step(&[0.8], &mut plain_state);
        assert_eq!(tape.value(out).as_slice(), plain_out.as_slice());
        for (li, (h, c)) in new_state.iter().enumerate() {
            assert_eq!(tape.value(*h).as_slice(), plain_state.h[li].as_slice());
            assert_eq!(tape.value(*c).as_slice(), plain_state.c[li].as_slice());
        }
    }

    #[test]
    fn lstm_output_gradient_matches_finite_differences() {
        let ctrl = LstmController::init(Variant::Gamma, 5);
        let mut tape = Tape::new();
        let nodes = ctrl.param_nodes(&mut tape).unwrap();
        let input = tape.vector_const(&[0.3]).unwrap();
        let state_nodes: Vec<(NodeId, NodeId)> = (0..2)
            .map(|_| {
                (
                    tape.vector_const(&vec![0.0; ctrl.hidden]).unwrap(),
                    tape.vector_const(&vec![0.0; ctrl.hidden]).unwrap(),
                )
            })
            .collect();
        let (out, _) = ctrl
            .step_on_tape(&mut tape, &nodes, input, &state_nodes)
            .unwrap();
        let grads = tape.backward(out).unwrap();
        let analytic = ctrl.collect_grads(&tape, &nodes, &grads);

        let base = ctrl.flatten();
        let h = 1e-5;
        let eval = |params: &[f64]| -> f64 {
            let mut c = ctrl.clone();
            c.unflatten(params);
            let mut st = c.zero_state();
            c.step(&[0.3], &mut st)[0]
        };
        let mut rng = SplitMix64::new(77);
        let mut max_rel = 0.0f64;
        for _ in 0..300 {
            let p = rng.next_index(base.len());
            let mut plus = base.clone();
            plus[p] += h;
            let mut minus = base.clone();
            minus[p] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = analytic[p].abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((analytic[p] - fd).abs() / denom);
        }
        assert!(max_rel <= 1e-5, "max relative error {max_rel}");
    }

    #[test]
    fn zero_weight_controller_reduces_to_constant_schedule() {
        let mut ctrl = zeroed(Variant::Gamma);
        ctrl.b_out = vec![0.4];
        let constant = logistic(0.4);
        let kernel = random_qp_kernel(6, 3);
        let learned = fw::run_fw(
            &fw::simplex_qp_problem(
                kernel.matrix().clone(),
                SimplexLmo::Softmin { beta: 10.0 },
            ),
            &StepSchedule::Learned(std::sync::Arc::new(ctrl)),
            50,
            None,
        )
        .unwrap();
        let hand = fw::run_fw(
            &fw::simplex_qp_problem(
                kernel.matrix().clone(),
                SimplexLmo::Softmin { beta: 10.0 },
            ),
            &StepSchedule::Constant(constant),
            50,
            None,
        )
        .unwrap();
        assert!(learned.trace.same_numbers(&hand.trace));
        assert_eq!(
            learned.final_point.weights(),
            hand.final_point.weights()
        );
    }

    #[test]
    fn learned_gamma_step_reduces_to_hand_coded_update() {
        let mut ctrl = zeroed(Variant::Gamma);
        ctrl.b_out = vec![-0.7];
        let gamma = logistic(-0.7);
        let kernel = random_qp_kernel(6, 19);
        let alpha = SimplexVector::uniform(6);
        let grad = kernel.matvec(alpha.weights());
        let mut state = ctrl.zero_state();
        let (next, emitted) =
            learned_gamma_step(&ctrl, GAMMA_INPUT_INIT, &mut state, &alpha, &grad, 8.0).unwrap();
        assert_eq!(emitted, gamma);
        let hand = crate::svm::fw_svm_step(&alpha, &kernel, gamma, 8.0).unwrap();
        assert_eq!(next.weights(), hand.weights());
    }

    #[test]
    fn direction_step_with_true_gradient_reduces_to_fw_svm_step() {
        let kernel = random_qp_kernel(8, 11);
        let alpha = SimplexVector::uniform(8);
        let grad = kernel.matvec(alpha.weights());
        let via_direction = direction_step(&alpha, &grad, 7.0, 0.3).unwrap();
        let via_svm = crate::svm::fw_svm_step(&alpha, &kernel, 0.3, 7.0).unwrap();
        assert_eq!(via_direction.weights(), via_svm.weights());
    }

    #[test]
    fn random_controllers_cannot_break_feasibility() {
        for trial in 0..30 {
            let mut ctrl = LstmController::init(
                if trial % 2 == 0 {
                    Variant::Gamma
                } else {
                    Variant::Direction
                },
                trial,
            );
            // exaggerate the weights to stress the squashing
            let scaled: Vec<f64> = ctrl.flatten().iter().map(|w| w * 40.0).collect();
            ctrl.unflatten(&scaled);
            let kernel = random_qp_kernel(5, 100 + trial);
            let problem = match ctrl.variant {
                Variant::Gamma => fw::simplex_qp_problem(
                    kernel.matrix().clone(),
                    SimplexLmo::Softmin { beta: 5.0 },
                ),
                Variant::Direction => fw::simplex_qp_problem(
                    kernel.matrix().clone(),
                    SimplexLmo::LearnedDirection {
                        controller: std::sync::Arc::new(ctrl.clone()),
                        beta: 5.0,
                    },
                ),
            };
            let schedule = match ctrl.variant {
                Variant::Gamma => StepSchedule::Learned(std::sync::Arc::new(ctrl.clone())),
                Variant::Direction => StepSchedule::Default,
            };
            let run = fw::run_fw(&problem, &schedule, 40, None).unwrap();
            let sum: f64 = run.final_point.weights().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9);
            assert!(run.final_point.weights().iter().all(|&w| w >= -1e-12));
            for r in &run.trace.records {
                assert!((0.0..=1.0).contains(&r.step_size));
            }
        }
    }

    #[test]
    fn meta_gradient_matches_finite_differences_gamma() {
        meta_gradient_fd_check(Variant::Gamma);
    }

    #[test]
    fn meta_gradient_matches_finite_differences_direction() {
        meta_gradient_fd_check(Variant::Direction);
    }

    fn meta_gradient_fd_check(variant: Variant) {
        let kernel = random_qp_kernel(3, 21);
        let config = MetaTrainConfig {
            variant,
            unroll: 3,
            segment_len: 8, // single segment: the full unroll lives on one tape
            beta: 4.0,
            direction_gamma: StepSchedule::Constant(0.25),
            ..MetaTrainConfig::default()
        };
        let ctrl = LstmController::init(variant, 13);
        // detach off: finite differences observe the same full computation
        let (loss, grad) = unroll_meta_gradient(&ctrl, &kernel, &config, false).unwrap();
        assert!(loss.is_finite());

        let base = ctrl.flatten();
        let h = 1e-5;
        let eval = |params: &[f64]| -> f64 {
            let mut c = ctrl.clone();
            c.unflatten(params);
            unroll_meta_gradient(&c, &kernel, &config, false).unwrap().0
        };
        let mut rng = SplitMix64::new(55);
        let mut max_rel = 0.0f64;
        for _ in 0..200 {
            let p = rng.next_index(base.len());
            let mut plus = base.clone();
            plus[p] += h;
            let mut minus = base.clone();
            minus[p] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = grad[p].abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((grad[p] - fd).abs() / denom);
        }
        assert!(max_rel <= 1e-4, "{variant:?}: max relative error {max_rel}");
    }

    #[test]
    fn zero_epoch_meta_train_returns_fresh_controller() {
        let family = TaskFamily::RandomQp { n: 5 };
        let config = MetaTrainConfig {
            meta_epochs: 0,
            seed: 17,
            ..MetaTrainConfig::default()
        };
        let result = meta_train(&family, &config).unwrap();
        assert!(result.epoch_losses.is_empty());
        let fresh = LstmController::init(Variant::Gamma, 17);
        assert_eq!(result.controller.flatten(), fresh.flatten());
    }

    #[test]
    fn meta_loss_decreases_on_random_qps() {
        let family = TaskFamily::RandomQp { n: 10 };
        let config = MetaTrainConfig {
            variant: Variant::Gamma,
            unroll: 60,
            segment_len: 20,
            meta_epochs: 50,
            train_tasks: 8,
            val_tasks: 4,
            patience: 50,
            beta: 100.0,
            seed: 3,
            ..MetaTrainConfig::default()
        };
        let result = meta_train(&family, &config).unwrap();
        let first = result.epoch_losses.first().unwrap().train_loss;
        let last = result.epoch_losses.last().unwrap().train_loss;
        assert!(
            last <= 0.9 * first,
            "meta-loss did not decrease: {first} -> {last}"
        );
    }

    #[test]
    fn controller_round_trips_through_text_format() {
        let ctrl = LstmController::init(Variant::Direction, 23);
        let mut buf = Vec::new();
        ctrl.save(&mut buf, Some("cafe")).unwrap();
        let loaded = LstmController::load(buf.as_slice()).unwrap();
        assert_eq!(loaded.variant, ctrl.variant);
        assert_eq!(loaded.flatten(), ctrl.flatten());
    }
}
