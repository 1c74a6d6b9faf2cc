//! Neural SVM: the dual quadratic program over the unit simplex solved by
//! Frank-Wolfe forward passes, kernel construction, prediction, and the
//! deep-kernel end-to-end loop (a small feature net trained by Adam under a
//! Frank-Wolfe head).

use std::io::{self, BufRead, Write};
use std::time::Instant;

use crate::baselines::{AdamParams, AdamState};
use crate::domains::SimplexVector;
use crate::error::{Error, Result};
use crate::fw::{self, FwRecord, FwTrace, SimplexLmo, StepSchedule};
use crate::linalg::{self, Matrix};
use crate::rng::SplitMix64;
use crate::tape::Tape;

/// Binary-labeled samples; labels are -1 or +1.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<f64>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", features.rows()),
                got: format!("{}", labels.len()),
            });
        }
        if labels.iter().any(|y| *y != 1.0 && *y != -1.0) {
            return Err(Error::invalid("labels must be -1 or +1"));
        }
        Ok(LabeledDataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }
}

/// Kernel choice; RBF is k(x, y) = exp(-|x-y|^2 / (2 sigma^2)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Linear,
    Rbf { bandwidth: f64 },
}

impl KernelSpec {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            KernelSpec::Linear => linalg::dot(x, y),
            KernelSpec::Rbf { bandwidth } => {
                let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-sq / (2.0 * bandwidth * bandwidth)).exp()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let KernelSpec::Rbf { bandwidth } = self {
            if bandwidth.is_nan() || *bandwidth <= 0.0 {
                return Err(Error::invalid(format!(
                    "RBF bandwidth must be positive, got {bandwidth}"
                )));
            }
        }
        Ok(())
    }
}

/// Symmetric PSD gram matrix K_ij = y_i y_j k(x_i, x_j) + delta_ij / C.
#[derive(Debug, Clone)]
pub struct KernelMatrix(Matrix);

impl KernelMatrix {
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::invalid("kernel matrix must be square"));
        }
        Ok(KernelMatrix(m))
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn matvec(&self, alpha: &[f64]) -> Vec<f64> {
        self.0.matvec(alpha)
    }
}

/// Builds the l2-SVM dual kernel. The C/2 sum eps_i^2 slack term of the
/// primal shows up in the dual as the diagonal shift K + I/C.
pub fn build_kernel(data: &LabeledDataset, spec: KernelSpec, c: f64) -> Result<KernelMatrix> {
    spec.validate()?;
    if data.len() < 2 {
        return Err(Error::invalid("kernel needs at least two samples"));
    }
    if c.is_nan() || c <= 0.0 {
        return Err(Error::invalid(format!("C must be positive, got {c}")));
    }
    let n = data.len();
    let shift = 1.0 / c; // c = +inf gives the hard-margin limit, shift 0
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = data.label(i) * data.label(j) * spec.eval(data.sample(i), data.sample(j));
            k.set(i, j, v);
            k.set(j, i, v);
        }
        k.set(i, i, k.get(i, i) + shift);
    }
    Ok(KernelMatrix(k))
}

/// f(alpha) = 1/2 alpha^T K alpha.
pub fn dual_objective(alpha: &SimplexVector, k: &KernelMatrix) -> Result<f64> {
    if alpha.len() != k.n() {
        return Err(Error::ShapeMismatch {
            expected: format!("alpha of length {}", k.n()),
            got: format!("{}", alpha.len()),
        });
    }
    Ok(0.5 * linalg::dot(alpha.weights(), &k.matvec(alpha.weights())))
}

/// grad f(alpha) = K alpha.
pub fn dual_gradient(alpha: &SimplexVector, k: &KernelMatrix) -> Result<Vec<f64>> {
    if alpha.len() != k.n() {
        return Err(Error::ShapeMismatch {
            expected: format!("alpha of length {}", k.n()),
            got: format!("{}", alpha.len()),
        });
    }
    Ok(k.matvec(alpha.weights()))
}

/// One softmin Frank-Wolfe update:
/// alpha' = (1 - gamma) alpha + gamma softmin(K alpha, beta).
pub fn fw_svm_step(
    alpha: &SimplexVector,
    k: &KernelMatrix,
    gamma: f64,
    beta: f64,
) -> Result<SimplexVector> {
    let grad = dual_gradient(alpha, k)?;
    let s = linalg::softmin(&grad, beta)?;
    SimplexVector::new(fw::fw_update(alpha.weights(), s.weights(), gamma))
}

/// Trained SVM: dual weights plus everything prediction needs.
#[derive(Debug, Clone)]
pub struct SvmModel {
    pub alpha: SimplexVector,
    pub data: LabeledDataset,
    pub kernel: KernelSpec,
    /// Softmin temperature used in training; infinity marks the exact LMO.
    pub beta: f64,
    pub c: f64,
}

fn lmo_beta(lmo: &SimplexLmo) -> f64 {
    match lmo {
        SimplexLmo::Exact => f64::INFINITY,
        SimplexLmo::Softmin { beta } => *beta,
        SimplexLmo::LearnedDirection { beta, .. } => *beta,
    }
}

/// Trains the dual by Frank-Wolfe from the uniform start; the trace records
/// the dual objective per iteration.
pub fn svm_train(
    data: &LabeledDataset,
    spec: KernelSpec,
    c: f64,
    lmo: SimplexLmo,
    schedule: &StepSchedule,
    iters: usize,
) -> Result<(SvmModel, FwTrace)> {
    let kernel = build_kernel(data, spec, c)?;
    let problem = fw::simplex_qp_problem(kernel.matrix().clone(), lmo.clone());
    let run = fw::run_fw(&problem, schedule, iters, None)?;
    let model = SvmModel {
        alpha: run.final_point,
        data: data.clone(),
        kernel: spec,
        beta: lmo_beta(&lmo),
        c,
    };
    Ok((model, run.trace))
}

/// Decision score sum_i alpha_i y_i k(x_i, x) and its sign; sign(0) = +1.
/// No bias term: the dual has no offset variable.
pub fn svm_predict(model: &SvmModel, x: &[f64]) -> Result<(f64, f64)> {
    if x.len() != model.data.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} features", model.data.dim()),
            got: format!("{}", x.len()),
        });
    }
    let mut score = 0.0;
    for i in 0..model.data.len() {
        score += model.alpha.weights()[i]
            * model.data.label(i)
            * model.kernel.eval(model.data.sample(i), x);
    }
    let label = if score >= 0.0 { 1.0 } else { -1.0 };
    Ok((label, score))
}

/// Fraction of `data` classified correctly by `model`.
pub fn accuracy(model: &SvmModel, data: &LabeledDataset) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..data.len() {
        let (label, _) = svm_predict(model, data.sample(i))?;
        if label == data.label(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Deep SVM: small feature net under a Frank-Wolfe head
// ---------------------------------------------------------------------------

/// Two fully-connected tanh layers; the circles architecture is 4 then 2
/// units.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl FeatureNet {
    pub fn init(input_dim: usize, hidden: usize, output: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut weights = |rows: usize, cols: usize| -> Matrix {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| rng.next_range(-bound, bound))
                .collect();
            Matrix::new(rows, cols, data).expect("sized data")
        };
        let w1 = weights(hidden, input_dim);
        let w2 = weights(output, hidden);
        FeatureNet {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; output],
        }
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z1 = self.w1.matvec(x);
        for (z, b) in z1.iter_mut().zip(&self.b1) {
            *z = (*z + b).tanh();
        }
        let mut z2 = self.w2.matvec(&z1);
        for (z, b) in z2.iter_mut().zip(&self.b2) {
            *z = (*z + b).tanh();
        }
        z2
    }

    /// Maps every sample through the net, keeping labels.
    pub fn map_dataset(&self, data: &LabeledDataset) -> LabeledDataset {
        let rows: Vec<Vec<f64>> = (0..data.len()).map(|i| self.forward(data.sample(i))).collect();
        LabeledDataset::new(
            Matrix::from_rows(&rows).expect("uniform output dim"),
            data.labels().to_vec(),
        )
        .expect("labels unchanged")
    }

    pub fn param_count(&self) -> usize {
        self.w1.as_slice().len() + self.b1.len() + self.w2.as_slice().len() + self.b2.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.param_count());
        let mut at = 0;
        let w1_len = self.w1.as_slice().len();
        self.w1.as_mut_slice().copy_from_slice(&flat[at..at + w1_len]);
        at += w1_len;
        let b1_len = self.b1.len();
        self.b1.copy_from_slice(&flat[at..at + b1_len]);
        at += b1_len;
        let w2_len = self.w2.as_slice().len();
        self.w2.as_mut_slice().copy_from_slice(&flat[at..at + w2_len]);
        at += w2_len;
        let b2_len = self.b2.len();
        self.b2.copy_from_slice(&flat[at..at + b2_len]);
    }
}

/// Hinge loss sum_i max(0, 1 - y_i score(x_i)) over net features with the
/// dual weights held constant, and its gradient in the flattened parameter
/// order of `FeatureNet`. Scores use the linear kernel on net outputs.
pub fn hinge_loss_and_grad(
    net: &FeatureNet,
    data: &LabeledDataset,
    alpha: &SimplexVector,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let w1 = tape.var(net.w1.clone())?;
    let b1 = tape.vector_var(&net.b1)?;
    let w2 = tape.var(net.w2.clone())?;
    let b2 = tape.vector_var(&net.b2)?;

    let mut phis = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let x = tape.vector_const(data.sample(i))?;
        let z1 = tape.matvec(w1, x)?;
        let z1 = tape.add(z1, b1)?;
        let z1 = tape.tanh(z1)?;
        let z2 = tape.matvec(w2, z1)?;
        let z2 = tape.add(z2, b2)?;
        phis.push(tape.tanh(z2)?);
    }

    // psi = sum_i alpha_i y_i phi_i, so score_j = <psi, phi_j>
    let mut psi = tape.scale(phis[0], alpha.weights()[0] * data.label(0))?;
    for i in 1..data.len() {
        let term = tape.scale(phis[i], alpha.weights()[i] * data.label(i))?;
        psi = tape.add(psi, term)?;
    }

    let one = tape.scalar_const(1.0)?;
    let mut loss = None;
    for i in 0..data.len() {
        let score = tape.dot(psi, phis[i])?;
        let neg_margin = tape.scale(score, -data.label(i))?;
        let margin = tape.add(one, neg_margin)?;
        let hinge = tape.clamp(margin, 0.0, f64::INFINITY)?;
        loss = Some(match loss {
            None => hinge,
            Some(acc) => tape.add(acc, hinge)?,
        });
    }
    let loss = loss.expect("dataset checked non-empty");

    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(net.param_count());
    flat.extend_from_slice(
        grads
            .grad_or_zeros(w1, net.w1.rows(), net.w1.cols())
            .as_slice(),
    );
    flat.extend_from_slice(grads.grad_or_zeros(b1, net.b1.len(), 1).as_slice());
    flat.extend_from_slice(
        grads
            .grad_or_zeros(w2, net.w2.rows(), net.w2.cols())
            .as_slice(),
    );
    flat.extend_from_slice(grads.grad_or_zeros(b2, net.b2.len(), 1).as_slice());
    Ok((tape.scalar_value(loss), flat))
}

#[derive(Debug, Clone)]
pub struct DeepSvmConfig {
    pub c: f64,
    pub beta: f64,
    pub schedule: StepSchedule,
    pub outer_iters: usize,
    pub inner_fw_iters: usize,
    /// Adam updates of the feature net per outer iteration.
    pub adam_steps_per_outer: usize,
    pub adam_lr: f64,
    pub hidden: usize,
    pub feature_dim: usize,
    pub net_seed: u64,
}

impl Default for DeepSvmConfig {
    fn default() -> Self {
        DeepSvmConfig {
            c: 1.0,
            beta: 1.0,
            schedule: StepSchedule::Constant(0.01),
            outer_iters: 20,
            inner_fw_iters: 500,
            adam_steps_per_outer: 250,
            adam_lr: 0.01,
            hidden: 4,
            feature_dim: 2,
            net_seed: 0,
        }
    }
}

/// End-to-end deep SVM: alternates (a) Frank-Wolfe forward passes updating
/// the dual weights on the kernel built from current features with (b) Adam
/// updates of the feature net by backpropagating the hinge loss with the
/// dual weights frozen. The trace records, per outer iteration, the hinge
/// loss as `objective` and the dual objective as `duality_gap`.
pub fn deep_svm_train(
    data: &LabeledDataset,
    config: &DeepSvmConfig,
) -> Result<(FeatureNet, SvmModel, FwTrace)> {
    let start = Instant::now();
    let mut net = FeatureNet::init(data.dim(), config.hidden, config.feature_dim, config.net_seed);
    let mut adam = AdamState::new(net.param_count(), AdamParams::with_step(config.adam_lr));
    let mut trace = FwTrace::default();

    for outer in 0..config.outer_iters {
        let feats = net.map_dataset(data);
        let kernel = build_kernel(&feats, KernelSpec::Linear, config.c)?;
        let problem = fw::simplex_qp_problem(
            kernel.matrix().clone(),
            SimplexLmo::Softmin { beta: config.beta },
        );
        let run = fw::run_fw(&problem, &config.schedule, config.inner_fw_iters, None)
            .map_err(|e| Error::at_iteration(outer, e))?;
        let alpha = run.final_point;

        let mut params = net.flatten();
        let mut hinge = f64::NAN;
        for _ in 0..config.adam_steps_per_outer {
            let (loss, grad) = hinge_loss_and_grad(&net, data, &alpha)?;
            hinge = loss;
            adam.step(&mut params, &grad)?;
            net.unflatten(&params);
        }
        trace.records.push(FwRecord {
            iter: outer,
            objective: hinge,
            duality_gap: run.final_objective,
            step_size: config.adam_lr,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let feats = net.map_dataset(data);
    let (model, _) = svm_train(
        &feats,
        KernelSpec::Linear,
        config.c,
        SimplexLmo::Softmin { beta: config.beta },
        &config.schedule,
        config.inner_fw_iters,
    )?;
    Ok((net, model, trace))
}

/// Prediction for deep models: the query runs through the feature net, then
/// through the SVM head trained on net outputs.
pub fn deep_svm_predict(net: &FeatureNet, model: &SvmModel, x: &[f64]) -> Result<(f64, f64)> {
    svm_predict(model, &net.forward(x))
}

/// Accuracy of a deep model on raw-space data.
pub fn deep_svm_accuracy(
    net: &FeatureNet,
    model: &SvmModel,
    data: &LabeledDataset,
) -> Result<f64> {
    let mut hits = 0usize;
    for i in 0..data.len() {
        let (label, _) = deep_svm_predict(net, model, data.sample(i))?;
        if label == data.label(i) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Serialization: versioned text format, header line `CGM1 svm`
// ---------------------------------------------------------------------------

impl SvmModel {
    pub fn save<W: Write>(&self, w: &mut W, config_hash: Option<&str>) -> io::Result<()> {
        writeln!(w, "CGM1 svm")?;
        if let Some(h) = config_hash {
            writeln!(w, "config {h}")?;
        }
        match self.kernel {
            KernelSpec::Linear => writeln!(w, "kernel linear")?,
            KernelSpec::Rbf { bandwidth } => writeln!(w, "kernel rbf {bandwidth}")?,
        }
        writeln!(w, "beta {}", self.beta)?;
        writeln!(w, "c {}", self.c)?;
        writeln!(w, "n {}", self.data.len())?;
        writeln!(w, "d {}", self.data.dim())?;
        for i in 0..self.data.len() {
            let feats: Vec<String> = self.data.sample(i).iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{},{},{}",
                self.alpha.weights()[i],
                self.data.label(i),
                feats.join(",")
            )?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(r: R) -> Result<SvmModel> {
        let mut lines = r.lines().enumerate();
        let mut next_line = |expect: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(line))) => Ok((i + 1, line)),
                Some((i, Err(e))) => Err(Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                }),
                None => Err(Error::Parse {
                    line: 0,
                    msg: format!("missing {expect}"),
                }),
            }
        };
        let (ln, header) = next_line("header")?;
        if header.trim() != "CGM1 svm" {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected 'CGM1 svm', got '{header}'"),
            });
        }
        let mut kernel = None;
        let mut beta = None;
        let mut c = None;
        let mut n = None;
        let d: usize;
        loop {
            let (ln, line) = next_line("model fields")?;
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or("");
            let parse = |s: Option<&str>, what: &str| -> Result<f64> {
                s.and_then(|v| v.parse::<f64>().ok()).ok_or(Error::Parse {
                    line: ln,
                    msg: format!("bad {what}"),
                })
            };
            match key {
                "config" => {}
                "kernel" => {
                    kernel = Some(match parts.next() {
                        Some("linear") => KernelSpec::Linear,
                        Some("rbf") => KernelSpec::Rbf {
                            bandwidth: parse(parts.next(), "bandwidth")?,
                        },
                        other => {
                            return Err(Error::Parse {
                                line: ln,
                                msg: format!("unknown kernel {other:?}"),
                            })
                        }
                    });
                }
                "beta" => beta = Some(parse(parts.next(), "beta")?),
                "c" => c = Some(parse(parts.next(), "c")?),
                "n" => n = Some(parse(parts.next(), "n")? as usize),
                "d" => {
                    d = parse(parts.next(), "d")? as usize;
                    break;
                }
                other => {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("unknown field {other:?}"),
                    })
                }
            }
        }
        let (kernel, beta, c, n) = match (kernel, beta, c, n) {
            (Some(k), Some(b), Some(c), Some(n)) => (k, b, c, n),
            _ => {
                return Err(Error::Parse {
                    line: 0,
                    msg: "incomplete model header".into(),
                })
            }
        };
        let mut alpha = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let (ln, line) = next_line("sample row")?;
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| Error::Parse {
                line: ln,
                msg: e.to_string(),
            })?;
            if vals.len() != d + 2 {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("expected {} values, got {}", d + 2, vals.len()),
                });
            }
            alpha.push(vals[0]);
            labels.push(vals[1]);
            rows.push(vals[2..].to_vec());
        }
        Ok(SvmModel {
            alpha: SimplexVector::new(alpha)?,
            data: LabeledDataset::new(Matrix::from_rows(&rows)?, labels)?,
            kernel,
            beta,
            c,
        })
    }
}
