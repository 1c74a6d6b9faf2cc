//! Generic Frank-Wolfe loop over any differentiable objective and any
//! linear-minimization oracle, with step-size schedules, duality-gap
//! computation, and per-iteration tracing.

use std::fmt;
use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use crate::domains::{self, Rank1Atom, SimplexVector, TraceNormPoint};
use crate::error::{Error, Result};
use crate::l2lc::{self, LstmController, LstmState};
use crate::linalg::{self, Matrix};
use crate::rng;

/// Per-run step-size emitter behind `StepSchedule::Learned`.
pub trait GammaFeed {
    fn next_gamma(&mut self, t: usize) -> f64;
}

/// Immutable descriptor that can start fresh `GammaFeed`s, one per run.
pub trait GammaSource: Send + Sync {
    fn start_feed(&self) -> Box<dyn GammaFeed>;
}

/// Step-size schedule. `Default` is 2/(t+2); `Harmonic` is 2/(t+1) clamped
/// to 1 so that t = 0 stays inside [0, 1]; `Learned` delegates to a
/// controller and clamps its output.
#[derive(Clone)]
pub enum StepSchedule {
    Default,
    Harmonic,
    Constant(f64),
    Learned(Arc<dyn GammaSource>),
}

impl fmt::Debug for StepSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSchedule::Default => write!(f, "Default"),
            StepSchedule::Harmonic => write!(f, "Harmonic"),
            StepSchedule::Constant(c) => write!(f, "Constant({c})"),
            StepSchedule::Learned(_) => write!(f, "Learned"),
        }
    }
}

/// Mutable per-run state of a schedule (only `Learned` carries any).
pub struct ScheduleState {
    feed: Option<Box<dyn GammaFeed>>,
}

impl StepSchedule {
    pub fn start(&self) -> ScheduleState {
        ScheduleState {
            feed: match self {
                StepSchedule::Learned(src) => Some(src.start_feed()),
                _ => None,
            },
        }
    }

    /// Step size for iteration `t`; always in [0, 1].
    pub fn step_size(&self, t: usize, state: &mut ScheduleState) -> f64 {
        let gamma = match self {
            StepSchedule::Default => 2.0 / (t as f64 + 2.0),
            StepSchedule::Harmonic => 2.0 / (t as f64 + 1.0),
            StepSchedule::Constant(c) => *c,
            StepSchedule::Learned(_) => {
                let feed = state.feed.as_mut().expect("state started from Learned");
                feed.next_gamma(t)
            }
        };
        gamma.clamp(0.0, 1.0)
    }
}

/// One completed Frank-Wolfe iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct FwRecord {
    pub iter: usize,
    pub objective: f64,
    pub duality_gap: f64,
    pub step_size: f64,
    pub elapsed_ms: f64,
}

/// Whether a serialized trace carries measured wall time or zeros. Wall time
/// differs between runs, so deterministic artifacts are written with `Zero`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timing {
    Wall,
    Zero,
}

/// Per-iteration record of objective, duality gap, step size, wall time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FwTrace {
    pub records: Vec<FwRecord>,
}

impl FwTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_objective(&self) -> Option<f64> {
        self.records.last().map(|r| r.objective)
    }

    pub fn min_gap(&self) -> Option<f64> {
        self.records
            .iter()
            .map(|r| r.duality_gap)
            .min_by(|a, b| a.total_cmp(b))
    }

    pub fn write_csv<W: Write>(&self, w: &mut W, timing: Timing) -> std::io::Result<()> {
        writeln!(w, "iter,objective,duality_gap,step_size,elapsed_ms")?;
        for r in &self.records {
            let elapsed = match timing {
                Timing::Wall => r.elapsed_ms,
                Timing::Zero => 0.0,
            };
            writeln!(
                w,
                "{},{},{},{},{}",
                r.iter, r.objective, r.duality_gap, r.step_size, elapsed
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self, timing: Timing) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, timing).expect("write to Vec");
        String::from_utf8(buf).expect("csv is ascii")
    }

    /// Equality of the optimization payload, ignoring wall time.
    pub fn same_numbers(&self, other: &FwTrace) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iter == b.iter
                    && a.objective == b.objective
                    && a.duality_gap == b.duality_gap
                    && a.step_size == b.step_size
            })
    }
}

/// Frank-Wolfe certificate <x - s, grad> for vector iterates.
pub fn duality_gap(x: &[f64], grad: &[f64], s: &[f64]) -> Result<f64> {
    if x.len() != grad.len() || x.len() != s.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("three vectors of length {}", x.len()),
            got: format!("lengths {}, {}, {}", x.len(), grad.len(), s.len()),
        });
    }
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += (x[i] - s[i]) * grad[i];
    }
    Ok(acc)
}

/// Frank-Wolfe certificate with the Frobenius inner product.
pub fn duality_gap_frob(x: &Matrix, grad: &Matrix, s: &Matrix) -> Result<f64> {
    if x.rows() != grad.rows()
        || x.cols() != grad.cols()
        || x.rows() != s.rows()
        || x.cols() != s.cols()
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} matrices", x.rows(), x.cols()),
            got: format!(
                "{}x{} and {}x{}",
                grad.rows(),
                grad.cols(),
                s.rows(),
                s.cols()
            ),
        });
    }
    Ok(duality_gap(x.as_slice(), grad.as_slice(), s.as_slice()).expect("lengths match"))
}

/// The convex-combination update (1-gamma) x + gamma s. Every simplex-domain
/// code path (hand-coded, softmin, learned) funnels through this one function
/// so that matched gamma sequences give bit-identical trajectories.
pub fn fw_update(x: &[f64], s: &[f64], gamma: f64) -> Vec<f64> {
    debug_assert_eq!(x.len(), s.len());
    x.iter()
        .zip(s)
        .map(|(xi, si)| (1.0 - gamma) * xi + gamma * si)
        .collect()
}

/// A constrained problem the engine can run: objective, gradient, LMO, and
/// the domain-specific update/gap arithmetic.
pub trait FwProblem {
    type Point: Clone;
    type Grad;
    type Dir;
    /// Per-run LMO scratch (controller states, retry counters); fresh per run.
    type LmoState;

    fn initial(&self) -> Self::Point;
    fn objective(&self, x: &Self::Point) -> f64;
    fn gradient(&self, x: &Self::Point) -> Self::Grad;
    fn init_lmo_state(&self) -> Self::LmoState;
    fn lmo(&self, grad: &Self::Grad, t: usize, state: &mut Self::LmoState) -> Result<Self::Dir>;
    fn apply_step(&self, x: &Self::Point, dir: &Self::Dir, gamma: f64) -> Self::Point;
    fn gap(&self, x: &Self::Point, grad: &Self::Grad, dir: &Self::Dir) -> f64;
    /// True when the LMO is exact, making the gap a valid stopping
    /// certificate. Softmin and power-iteration LMOs are inexact, so those
    /// runs are budget-only.
    fn exact_lmo(&self) -> bool;
}

/// Linear-minimization oracle choices over the unit simplex.
#[derive(Clone)]
pub enum SimplexLmo {
    Exact,
    Softmin { beta: f64 },
    /// LSTM emits a surrogate gradient; softmin of it is the step target.
    LearnedDirection {
        controller: Arc<LstmController>,
        beta: f64,
    },
}

impl fmt::Debug for SimplexLmo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimplexLmo::Exact => write!(f, "Exact"),
            SimplexLmo::Softmin { beta } => write!(f, "Softmin(beta={beta})"),
            SimplexLmo::LearnedDirection { beta, .. } => {
                write!(f, "LearnedDirection(beta={beta})")
            }
        }
    }
}

pub struct SimplexLmoState {
    /// One LSTM state per coordinate for the learned-direction oracle.
    direction_states: Option<Vec<LstmState>>,
}

/// Frank-Wolfe problem over the unit simplex with closure-backed objective.
pub struct SimplexFwProblem<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    pub objective: F,
    pub gradient: G,
    pub x0: SimplexVector,
    pub lmo: SimplexLmo,
}

impl<F, G> FwProblem for SimplexFwProblem<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    type Point = SimplexVector;
    type Grad = Vec<f64>;
    type Dir = SimplexVector;
    type LmoState = SimplexLmoState;

    fn initial(&self) -> SimplexVector {
        self.x0.clone()
    }

    fn objective(&self, x: &SimplexVector) -> f64 {
        (self.objective)(x.weights())
    }

    fn gradient(&self, x: &SimplexVector) -> Vec<f64> {
        (self.gradient)(x.weights())
    }

    fn init_lmo_state(&self) -> SimplexLmoState {
        SimplexLmoState {
            direction_states: match &self.lmo {
                SimplexLmo::LearnedDirection { controller, .. } => Some(
                    (0..self.x0.len())
                        .map(|_| controller.zero_state())
                        .collect(),
                ),
                _ => None,
            },
        }
    }

    fn lmo(&self, grad: &Vec<f64>, _t: usize, state: &mut SimplexLmoState) -> Result<SimplexVector> {
        match &self.lmo {
            SimplexLmo::Exact => domains::simplex_lmo_exact(grad),
            SimplexLmo::Softmin { beta } => domains::simplex_lmo_softmin(grad, *beta),
            SimplexLmo::LearnedDirection { controller, beta } => {
                let states = state
                    .direction_states
                    .as_mut()
                    .expect("state initialized for LearnedDirection");
                l2lc::direction_lmo(controller, states, grad, *beta)
            }
        }
    }

    fn apply_step(&self, x: &SimplexVector, dir: &SimplexVector, gamma: f64) -> SimplexVector {
        SimplexVector::new(fw_update(x.weights(), dir.weights(), gamma))
            .expect("convex combination of simplex points stays on the simplex")
    }

    fn gap(&self, x: &SimplexVector, grad: &Vec<f64>, dir: &SimplexVector) -> f64 {
        duality_gap(x.weights(), grad, dir.weights()).expect("matched lengths")
    }

    fn exact_lmo(&self) -> bool {
        matches!(self.lmo, SimplexLmo::Exact)
    }
}

/// Power iterations granted to the trace-norm LMO at step t: a constant k
/// per run, or the logarithmic schedule k_t = max(1, ceil(log2(t + 2))).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerBudget {
    Constant(usize),
    LogT,
}

impl PowerBudget {
    pub fn at(&self, t: usize) -> usize {
        match self {
            PowerBudget::Constant(k) => (*k).max(1),
            PowerBudget::LogT => (((t + 2) as f64).log2().ceil() as usize).max(1),
        }
    }
}

/// Frank-Wolfe problem over the trace-norm ball; the LMO runs power
/// iterations per step on the gradient matrix, with a per-iteration seed
/// derived from `seed`.
pub struct TraceNormFwProblem<F, G>
where
    F: Fn(&Matrix) -> f64,
    G: Fn(&Matrix) -> Matrix,
{
    pub objective: F,
    pub gradient: G,
    pub rows: usize,
    pub cols: usize,
    pub tau: f64,
    pub power_budget: PowerBudget,
    pub seed: u64,
}

impl<F, G> FwProblem for TraceNormFwProblem<F, G>
where
    F: Fn(&Matrix) -> f64,
    G: Fn(&Matrix) -> Matrix,
{
    type Point = TraceNormPoint;
    type Grad = Matrix;
    type Dir = Rank1Atom;
    type LmoState = ();

    fn initial(&self) -> TraceNormPoint {
        TraceNormPoint::zeros(self.rows, self.cols, self.tau).expect("positive radius")
    }

    fn objective(&self, x: &TraceNormPoint) -> f64 {
        (self.objective)(x.dense())
    }

    fn gradient(&self, x: &TraceNormPoint) -> Matrix {
        (self.gradient)(x.dense())
    }

    fn init_lmo_state(&self) {}

    fn lmo(&self, grad: &Matrix, t: usize, _state: &mut ()) -> Result<Rank1Atom> {
        let seed_t = rng::mix_seed(self.seed, t as u64);
        domains::tracenorm_lmo(grad, self.tau, self.power_budget.at(t), seed_t)
    }

    fn apply_step(&self, x: &TraceNormPoint, dir: &Rank1Atom, gamma: f64) -> TraceNormPoint {
        x.fw_step(dir, gamma)
    }

    fn gap(&self, x: &TraceNormPoint, grad: &Matrix, dir: &Rank1Atom) -> f64 {
        x.dense().frob_inner(grad) - dir.inner_with(grad)
    }

    fn exact_lmo(&self) -> bool {
        false
    }
}

/// Result of a Frank-Wolfe run.
pub struct FwRun<P> {
    pub final_point: P,
    pub final_objective: f64,
    pub trace: FwTrace,
}

/// Runs x_{t+1} = (1-gamma_t) x_t + gamma_t s_t for t = 0..max_iters-1,
/// stopping early when an exact-LMO gap falls at or below `gap_tol`. The
/// trace has one record per executed iteration; a run is single-threaded
/// and deterministic given (problem, schedule, seeds).
pub fn run_fw<P: FwProblem>(
    problem: &P,
    schedule: &StepSchedule,
    max_iters: usize,
    gap_tol: Option<f64>,
) -> Result<FwRun<P::Point>> {
    if max_iters == 0 {
        return Err(Error::invalid("run_fw needs at least one iteration"));
    }
    let start = Instant::now();
    let mut x = problem.initial();
    let mut sched_state = schedule.start();
    let mut lmo_state = problem.init_lmo_state();
    let mut trace = FwTrace::default();

    for t in 0..max_iters {
        let objective = problem.objective(&x);
        if !objective.is_finite() {
            return Err(Error::at_iteration(
                t,
                Error::Numeric(format!("objective became {objective}")),
            ));
        }
        let grad = problem.gradient(&x);
        let dir = problem
            .lmo(&grad, t, &mut lmo_state)
            .map_err(|e| Error::at_iteration(t, e))?;
        let gap = problem.gap(&x, &grad, &dir);
        let gamma = schedule.step_size(t, &mut sched_state);
        trace.records.push(FwRecord {
            iter: t,
            objective,
            duality_gap: gap,
            step_size: gamma,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if problem.exact_lmo() && gap_tol.is_some_and(|tol| gap <= tol) {
            break;
        }
        x = problem.apply_step(&x, &dir, gamma);
    }

    let final_objective = problem.objective(&x);
    Ok(FwRun {
        final_point: x,
        final_objective,
        trace,
    })
}

/// Simplex problem backed by closures, as built by `simplex_qp_problem`.
pub type SimplexQpProblem =
    SimplexFwProblem<Box<dyn Fn(&[f64]) -> f64>, Box<dyn Fn(&[f64]) -> Vec<f64>>>;

/// Quadratic simplex objective f(alpha) = 1/2 alpha^T K alpha with gradient
/// K alpha; the shape shared by SVM duals and the random QP task family.
pub fn simplex_qp_problem(k: Matrix, lmo: SimplexLmo) -> SimplexQpProblem {
    let n = k.rows();
    debug_assert_eq!(k.rows(), k.cols());
    let k_obj = k.clone();
    SimplexFwProblem {
        objective: Box::new(move |alpha: &[f64]| 0.5 * linalg::dot(alpha, &k_obj.matvec(alpha))),
        gradient: Box::new(move |alpha: &[f64]| k.matvec(alpha)),
        x0: SimplexVector::uniform(n),
        lmo,
    }
}
