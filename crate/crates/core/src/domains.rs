//! Linear-minimization oracles for the two feasible sets: the unit simplex
//! (exact vertex and softmin relaxation) and the trace-norm ball (rank-1
//! atoms from power iteration).

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Nonnegative weight vector summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    /// Validates entries >= 0 (to -1e-12 numerical slack) and sum = 1 +/- 1e-9.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("simplex vector cannot be empty"));
        }
        if !weights.iter().all(|w| w.is_finite()) {
            return Err(Error::invalid("simplex vector has non-finite entries"));
        }
        if let Some(w) = weights.iter().find(|w| **w < -1e-12) {
            return Err(Error::invalid(format!("negative simplex entry {w}")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("simplex entries sum to {sum}")));
        }
        Ok(SimplexVector(weights))
    }

    pub fn uniform(n: usize) -> Self {
        SimplexVector(vec![1.0 / n as f64; n.max(1)])
    }

    /// Unit basis vector e_i.
    pub fn vertex(n: usize, i: usize) -> Self {
        let mut w = vec![0.0; n];
        w[i] = 1.0;
        SimplexVector(w)
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// One term of the atom decomposition of a trace-norm-ball point.
#[derive(Debug, Clone)]
pub struct Rank1Atom {
    pub coefficient: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl Rank1Atom {
    pub fn to_dense(&self) -> Matrix {
        Matrix::outer(self.coefficient, &self.u, &self.v)
    }

    /// <c u v^T, G> = c * u^T G v, without materializing the outer product.
    pub fn inner_with(&self, g: &Matrix) -> f64 {
        self.coefficient * linalg::dot(&self.u, &g.matvec(&self.v))
    }
}

/// Matrix iterate inside the nuclear-norm ball of radius `tau`, stored dense
/// plus the list of rank-1 factors accumulated by Frank-Wolfe steps. The sum
/// of |coefficients| upper-bounds the nuclear norm (triangle inequality), so
/// feasibility is cheap to certify without an SVD.
#[derive(Debug, Clone)]
pub struct TraceNormPoint {
    dense: Matrix,
    atoms: Vec<Rank1Atom>,
    tau: f64,
}

impl TraceNormPoint {
    pub fn zeros(rows: usize, cols: usize, tau: f64) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::invalid(format!("trace-norm radius must be positive, got {tau}")));
        }
        Ok(TraceNormPoint {
            dense: Matrix::zeros(rows, cols),
            atoms: Vec::new(),
            tau,
        })
    }

    /// Reassemble a point from a serialized dense matrix and atom list,
    /// checking the decomposition and mass invariants.
    pub fn from_parts(dense: Matrix, atoms: Vec<Rank1Atom>, tau: f64) -> Result<Self> {
        if tau.is_nan() || tau <= 0.0 {
            return Err(Error::invalid(format!("trace-norm radius must be positive, got {tau}")));
        }
        let mass: f64 = atoms.iter().map(|a| a.coefficient.abs()).sum();
        if mass > tau + 1e-6 {
            return Err(Error::invalid(format!(
                "atom coefficient mass {mass} exceeds radius {tau}"
            )));
        }
        let mut recon = Matrix::zeros(dense.rows(), dense.cols());
        for a in &atoms {
            if a.u.len() != dense.rows() || a.v.len() != dense.cols() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{} atom factors", dense.rows(), dense.cols()),
                    got: format!("{}x{}", a.u.len(), a.v.len()),
                });
            }
            recon.add_scaled(1.0, &a.to_dense());
        }
        recon.add_scaled(-1.0, &dense);
        if recon.frob_norm() > 1e-6 {
            return Err(Error::invalid(
                "dense matrix does not match its atom decomposition",
            ));
        }
        Ok(TraceNormPoint { dense, atoms, tau })
    }

    pub fn dense(&self) -> &Matrix {
        &self.dense
    }

    pub fn atoms(&self) -> &[Rank1Atom] {
        &self.atoms
    }

    pub fn radius(&self) -> f64 {
        self.tau
    }

    /// Sum of |coefficients|; upper bound on the nuclear norm.
    pub fn coefficient_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.coefficient.abs()).sum()
    }

    /// Convex-combination update (1-gamma) * self + gamma * atom, applied to
    /// both the dense matrix and the atom list. Atoms scaled to exactly zero
    /// are dropped.
    pub fn fw_step(&self, atom: &Rank1Atom, gamma: f64) -> TraceNormPoint {
        let mut dense = self.dense.clone();
        dense.scale_in_place(1.0 - gamma);
        let scaled = Rank1Atom {
            coefficient: gamma * atom.coefficient,
            u: atom.u.clone(),
            v: atom.v.clone(),
        };
        dense.add_scaled(1.0, &scaled.to_dense());
        let mut atoms: Vec<Rank1Atom> = self
            .atoms
            .iter()
            .map(|a| Rank1Atom {
                coefficient: (1.0 - gamma) * a.coefficient,
                u: a.u.clone(),
                v: a.v.clone(),
            })
            .filter(|a| a.coefficient != 0.0)
            .collect();
        if scaled.coefficient != 0.0 {
            atoms.push(scaled);
        }
        TraceNormPoint {
            dense,
            atoms,
            tau: self.tau,
        }
    }

    /// Rebuild the dense matrix from atoms; used to check the decomposition.
    pub fn reconstruct_from_atoms(&self) -> Matrix {
        let mut out = Matrix::zeros(self.dense.rows(), self.dense.cols());
        for a in &self.atoms {
            out.add_scaled(1.0, &a.to_dense());
        }
        out
    }
}

/// Exact simplex LMO: one-hot at the lowest-index minimizing coordinate.
pub fn simplex_lmo_exact(grad: &[f64]) -> Result<SimplexVector> {
    if grad.is_empty() {
        return Err(Error::invalid("LMO over an empty gradient"));
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::invalid("LMO gradient has non-finite entries"));
    }
    let mut best = 0;
    for i in 1..grad.len() {
        if grad[i] < grad[best] {
            best = i;
        }
    }
    Ok(SimplexVector::vertex(grad.len(), best))
}

/// Softmin-relaxed simplex LMO; always interior to the simplex.
pub fn simplex_lmo_softmin(grad: &[f64], beta: f64) -> Result<SimplexVector> {
    linalg::softmin(grad, beta)
}

/// Trace-norm-ball LMO: the rank-1 atom -tau * u1 v1^T with (u1, v1) the top
/// singular pair of the gradient, approximated by `k` power iterations.
pub fn tracenorm_lmo(grad: &Matrix, tau: f64, k: usize, seed: u64) -> Result<Rank1Atom> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::invalid(format!("trace-norm radius must be positive, got {tau}")));
    }
    let pair = linalg::power_iteration(grad, k, seed)?;
    Ok(Rank1Atom {
        coefficient: -tau,
        u: pair.u,
        v: pair.v,
    })
}
