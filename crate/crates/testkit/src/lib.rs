//! Independent oracles for the condgrad test suites. Nothing here ships in
//! production code paths; the crate is a dev-dependency only.

use condgrad::linalg::{self, Matrix};
use condgrad::rng::SplitMix64;

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
pub fn jacobi_eigen(s: &Matrix, sweeps: usize) -> (Vec<f64>, Matrix) {
    assert_eq!(s.rows(), s.cols(), "jacobi needs a square symmetric matrix");
    let n = s.rows();
    let mut a = s.clone();
    let mut v = Matrix::zeros(n, n);
    for i in 0..n {
        v.set(i, i, 1.0);
    }
    for _ in 0..sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a.get(p, q).abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // rotate rows/columns p and q of A
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - sn * vkq);
                    v.set(k, q, sn * vkp + c * vkq);
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| a.get(i, i)).collect();
    (eigenvalues, v)
}

/// Smallest eigenvalue of a symmetric matrix, via the Jacobi oracle.
pub fn min_eigenvalue(s: &Matrix) -> f64 {
    let (mut vals, _) = jacobi_eigen(s, 60);
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    vals[0]
}

/// Top singular triple (u, v, sigma) of a general matrix, from the Jacobi
/// eigendecomposition of A^T A.
pub fn top_singular_pair(a: &Matrix) -> (Vec<f64>, Vec<f64>, f64) {
    let ata = a.transpose().matmul(a).expect("square product");
    let (vals, vecs) = jacobi_eigen(&ata, 60);
    let (best, &lambda) = vals
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
        .expect("nonempty spectrum");
    let v: Vec<f64> = (0..a.cols()).map(|r| vecs.get(r, best)).collect();
    let sigma = lambda.max(0.0).sqrt();
    let av = a.matvec(&v);
    let norm = linalg::norm2(&av);
    let u: Vec<f64> = if norm > 0.0 {
        av.iter().map(|x| x / norm).collect()
    } else {
        vec![0.0; a.rows()]
    };
    (u, v, sigma)
}

/// All singular values of a general matrix, descending.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    let ata = a.transpose().matmul(a).expect("square product");
    let (vals, _) = jacobi_eigen(&ata, 60);
    let mut sv: Vec<f64> = vals.iter().map(|l| l.max(0.0).sqrt()).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Random matrix with planted singular values sigma_i = top / ratio^i, so the
/// spectral gap sigma_1/sigma_2 = ratio is exact.
pub fn matrix_with_spectral_gap(
    rows: usize,
    cols: usize,
    top: f64,
    ratio: f64,
    seed: u64,
) -> Matrix {
    assert!(ratio > 1.0);
    let k = rows.min(cols);
    let mut rng = SplitMix64::new(seed);
    let u = random_orthonormal(rows, k, &mut rng);
    let v = random_orthonormal(cols, k, &mut rng);
    let mut out = Matrix::zeros(rows, cols);
    let mut sigma = top;
    for i in 0..k {
        let ui: Vec<f64> = (0..rows).map(|r| u.get(r, i)).collect();
        let vi: Vec<f64> = (0..cols).map(|r| v.get(r, i)).collect();
        out.add_scaled(1.0, &Matrix::outer(sigma, &ui, &vi));
        sigma /= ratio;
    }
    out
}

/// Gram-Schmidt on Gaussian columns; n x k with orthonormal columns.
pub fn random_orthonormal(n: usize, k: usize, rng: &mut SplitMix64) -> Matrix {
    assert!(k <= n);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.next_gaussian()).collect();
        for u in &cols {
            let proj = linalg::dot(&v, u);
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= proj * ui;
            }
        }
        let norm = linalg::norm2(&v);
        if norm < 1e-8 {
            continue;
        }
        for vi in v.iter_mut() {
            *vi /= norm;
        }
        cols.push(v);
    }
    let mut out = Matrix::zeros(n, k);
    for (ci, col) in cols.iter().enumerate() {
        for (ri, &val) in col.iter().enumerate() {
            out.set(ri, ci, val);
        }
    }
    out
}

/// Central finite-difference gradient of f at x.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative disagreement between two gradients, with an absolute
/// floor guarding near-zero entries.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// |cos angle| between two vectors.
pub fn abs_cosine(a: &[f64], b: &[f64]) -> f64 {
    (linalg::dot(a, b) / (linalg::norm2(a) * linalg::norm2(b))).abs()
}
