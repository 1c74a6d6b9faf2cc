//! Dense vector/matrix arithmetic, softmin, power iteration, and exact
//! simplex projection. Straightforward loops only; every routine is a pure
//! function over immutable inputs.

use crate::domains::SimplexVector;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols} = {} entries", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("rows have inconsistent lengths"));
        }
        let data = rows.iter().flatten().copied().collect();
        Matrix::new(r, c, data)
    }

    /// Column vector (n x 1).
    pub fn column(data: Vec<f64>) -> Self {
        let rows = data.len();
        Matrix {
            rows,
            cols: 1,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// A * x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.cols, x.len());
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for c in 0..self.cols {
                acc += row[c] * x[c];
            }
            out[r] = acc;
        }
        out
    }

    /// A^T * x.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.rows, x.len());
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            for c in 0..self.cols {
                out[c] += row[c] * x[r];
            }
        }
        out
    }

    /// A * B.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                expected: format!("inner dims to agree ({}x{} * ?x?)", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// u * v^T scaled by `coeff`.
    pub fn outer(coeff: f64, u: &[f64], v: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(u.len(), v.len());
        for (r, &ur) in u.iter().enumerate() {
            for (c, &vc) in v.iter().enumerate() {
                out.data[r * v.len() + c] = coeff * ur * vc;
            }
        }
        out
    }

    /// self += coeff * other, elementwise.
    pub fn add_scaled(&mut self, coeff: f64, other: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += coeff * b;
        }
    }

    pub fn scale_in_place(&mut self, coeff: f64) {
        for a in self.data.iter_mut() {
            *a *= coeff;
        }
    }

    /// Frobenius inner product <self, other>.
    pub fn frob_inner(&self, other: &Matrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        dot(&self.data, &other.data)
    }

    pub fn frob_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

/// Top singular pair estimate from power iteration.
#[derive(Debug, Clone)]
pub struct SingularPair {
    /// Unit left singular vector (length = rows).
    pub u: Vec<f64>,
    /// Unit right singular vector (length = cols).
    pub v: Vec<f64>,
    /// Rayleigh estimate u^T A v of the top singular value; nonnegative.
    pub sigma_est: f64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Temperature-controlled relaxation of argmin vertex selection:
/// sigma(z)_i = exp(-beta z_i) / sum_j exp(-beta z_j).
///
/// The minimum entry is subtracted before exponentiating; without the shift
/// the formula overflows for large beta, with it the result is algebraically
/// identical and the minimizing coordinate always contributes exp(0) = 1.
pub fn softmin(z: &[f64], beta: f64) -> Result<SimplexVector> {
    if z.is_empty() {
        return Err(Error::invalid("softmin of an empty vector"));
    }
    if !z.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("softmin input has non-finite entries"));
    }
    if beta <= 0.0 || !beta.is_finite() || beta.is_nan() {
        return Err(Error::invalid(format!("softmin beta must be positive, got {beta}")));
    }
    let min = z.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w: Vec<f64> = z.iter().map(|&zi| (-beta * (zi - min)).exp()).collect();
    let total: f64 = w.iter().sum();
    for wi in w.iter_mut() {
        *wi /= total;
    }
    SimplexVector::new(w)
}

/// Alternating power iteration for the top singular pair of `a`:
/// v0 drawn uniformly from the unit sphere (seeded), then k rounds of
/// u <- Av/|Av|, v <- A^T u/|A^T u|. A zero intermediate product retries
/// with a fresh seeded start, at most three times.
pub fn power_iteration(a: &Matrix, k: usize, seed: u64) -> Result<SingularPair> {
    if k == 0 {
        return Err(Error::invalid("power iteration needs k >= 1"));
    }
    if a.is_zero() {
        return Err(Error::DegenerateMatrix(
            "power iteration on the zero matrix".into(),
        ));
    }
    let mut rng = SplitMix64::new(seed);
    'attempt: for _ in 0..4 {
        let mut v = rng.unit_sphere(a.cols());
        let mut u = vec![0.0; a.rows()];
        for _ in 0..k {
            u = a.matvec(&v);
            let un = norm2(&u);
            if un == 0.0 {
                continue 'attempt;
            }
            for x in u.iter_mut() {
                *x /= un;
            }
            v = a.matvec_t(&u);
            let vn = norm2(&v);
            if vn == 0.0 {
                continue 'attempt;
            }
            for x in v.iter_mut() {
                *x /= vn;
            }
        }
        let sigma_est = dot(&u, &a.matvec(&v));
        // Fix signs jointly: first nonzero entry of u positive. s = -tau u v^T
        // is invariant under (u, v) -> (-u, -v), so this only stabilizes tests.
        if let Some(&lead) = u.iter().find(|x| **x != 0.0) {
            if lead < 0.0 {
                for x in u.iter_mut() {
                    *x = -*x;
                }
                for x in v.iter_mut() {
                    *x = -*x;
                }
            }
        }
        return Ok(SingularPair { u, v, sigma_est });
    }
    Err(Error::DegenerateMatrix(
        "power iteration hit a zero product on every restart".into(),
    ))
}

/// Euclidean projection onto {x >= 0, sum x = 1} by sort-and-threshold.
pub fn project_simplex(v: &[f64]) -> Result<SimplexVector> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("projection input has non-finite entries"));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in sorted.iter().enumerate() {
        cumsum += uj;
        let candidate = (cumsum - 1.0) / (j + 1) as f64;
        if uj - candidate > 0.0 {
            theta = candidate;
        }
    }
    let x: Vec<f64> = v.iter().map(|&vi| (vi - theta).max(0.0)).collect();
    SimplexVector::new(x)
}
