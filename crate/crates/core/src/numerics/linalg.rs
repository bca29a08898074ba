//! Small dense linear algebra: LU with partial pivoting and a symmetric
//! eigensolver (Householder tridiagonalization followed by Sturm bisection).
//!
//! Matrix inverses are never formed anywhere in this crate; Cayley transforms
//! go through these LU solves and everything else is triangular substitution.
//! System sizes are bounded by the hidden width of a layer stack, so dense
//! O(n^3) routines are the right tool.

use super::matrix::Matrix;
use crate::{Error, Result};

/// Relative pivot threshold below which a system is reported singular.
const PIVOT_RTOL: f64 = 1e-12;

/// LU factorization with partial pivoting, PA = LU.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    // piv[k] = row swapped into position k at elimination step k
    piv: Vec<usize>,
}

pub fn lu_factor(a: &Matrix, context: &'static str) -> Result<Lu> {
    assert!(a.rows() == a.cols(), "lu_factor needs a square matrix");
    let n = a.rows();
    let mut lu = a.clone();
    let mut piv = vec![0usize; n];
    let scale = a.max_abs().max(1.0);
    for k in 0..n {
        // find pivot
        let mut p = k;
        let mut best = lu.get(k, k).abs();
        for i in (k + 1)..n {
            let v = lu.get(i, k).abs();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best < PIVOT_RTOL * scale {
            return Err(Error::Singular {
                context,
                pivot: best,
            });
        }
        piv[k] = p;
        if p != k {
            for j in 0..n {
                let tmp = lu.get(k, j);
                lu.set(k, j, lu.get(p, j));
                lu.set(p, j, tmp);
            }
        }
        let pivot = lu.get(k, k);
        for i in (k + 1)..n {
            let m = lu.get(i, k) / pivot;
            lu.set(i, k, m);
            if m != 0.0 {
                for j in (k + 1)..n {
                    let v = lu.get(i, j) - m * lu.get(k, j);
                    lu.set(i, j, v);
                }
            }
        }
    }
    Ok(Lu { lu, piv })
}

impl Lu {
    pub fn n(&self) -> usize {
        self.lu.rows()
    }

    /// Solve A X = B for a multi-column right-hand side.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(b.rows(), b.cols());
        self.solve_into(b, &mut out);
        out
    }

    pub fn solve_into(&self, b: &Matrix, out: &mut Matrix) {
        let n = self.n();
        assert_eq!(b.rows(), n, "rhs row count");
        let cols = b.cols();
        out.data_mut().copy_from_slice(b.data());
        // apply row swaps
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                for j in 0..cols {
                    let tmp = out.get(k, j);
                    out.set(k, j, out.get(p, j));
                    out.set(p, j, tmp);
                }
            }
        }
        // forward substitution with unit-diagonal L
        for i in 1..n {
            for k in 0..i {
                let m = self.lu.get(i, k);
                if m != 0.0 {
                    for j in 0..cols {
                        let v = out.get(i, j) - m * out.get(k, j);
                        out.set(i, j, v);
                    }
                }
            }
        }
        // back substitution with U
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let m = self.lu.get(i, k);
                if m != 0.0 {
                    for j in 0..cols {
                        let v = out.get(i, j) - m * out.get(k, j);
                        out.set(i, j, v);
                    }
                }
            }
            let d = self.lu.get(i, i);
            for j in 0..cols {
                let v = out.get(i, j) / d;
                out.set(i, j, v);
            }
        }
    }

    /// Solve A^T X = B. Uses A^T = U^T L^T P, so U^T goes first.
    pub fn solve_transposed_into(&self, b: &Matrix, out: &mut Matrix) {
        let n = self.n();
        assert_eq!(b.rows(), n, "rhs row count");
        let cols = b.cols();
        out.data_mut().copy_from_slice(b.data());
        // U^T is lower triangular: forward substitution
        for i in 0..n {
            for k in 0..i {
                let m = self.lu.get(k, i);
                if m != 0.0 {
                    for j in 0..cols {
                        let v = out.get(i, j) - m * out.get(k, j);
                        out.set(i, j, v);
                    }
                }
            }
            let d = self.lu.get(i, i);
            for j in 0..cols {
                let v = out.get(i, j) / d;
                out.set(i, j, v);
            }
        }
        // L^T is unit upper triangular: back substitution
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let m = self.lu.get(k, i);
                if m != 0.0 {
                    for j in 0..cols {
                        let v = out.get(i, j) - m * out.get(k, j);
                        out.set(i, j, v);
                    }
                }
            }
        }
        // undo swaps in reverse: x = P^T y
        for k in (0..n).rev() {
            let p = self.piv[k];
            if p != k {
                for j in 0..cols {
                    let tmp = out.get(k, j);
                    out.set(k, j, out.get(p, j));
                    out.set(p, j, tmp);
                }
            }
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
///
/// The input is symmetrized as (A + A^T)/2 to wash out rounding asymmetry,
/// reduced to tridiagonal form by Householder reflections, then the smallest
/// eigenvalue is isolated by bisection on Sturm sequence counts. Absolute
/// accuracy is ~1e-11, well inside the 1e-8 certificate margins used by
/// callers.
pub fn sym_eig_min(a: &Matrix) -> f64 {
    assert!(a.rows() == a.cols(), "sym_eig_min needs a square matrix");
    let n = a.rows();
    if n == 0 {
        return 0.0;
    }
    let (d, e) = householder_tridiag(a);
    tridiag_eig_min(&d, &e)
}

/// Reduce a symmetric matrix to tridiagonal form; returns (diagonal, off-diagonal).
fn householder_tridiag(a: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = a.rows();
    // symmetrized working copy
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = 0.5 * (a.get(i, j) + a.get(j, i));
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n.saturating_sub(1)];
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];

    for k in 0..n.saturating_sub(2) {
        // householder vector for column k below the diagonal
        let mut alpha = 0.0;
        for i in (k + 1)..n {
            alpha += w[i * n + k] * w[i * n + k];
        }
        alpha = alpha.sqrt();
        let x1 = w[(k + 1) * n + k];
        if alpha == 0.0 {
            d[k] = w[k * n + k];
            e[k] = 0.0;
            continue;
        }
        if x1 > 0.0 {
            alpha = -alpha;
        }
        // v = x - alpha e1 on the trailing block
        let mut vnorm2 = 0.0;
        for i in (k + 1)..n {
            v[i] = w[i * n + k];
        }
        v[k + 1] -= alpha;
        for i in (k + 1)..n {
            vnorm2 += v[i] * v[i];
        }
        if vnorm2 == 0.0 {
            d[k] = w[k * n + k];
            e[k] = alpha;
            continue;
        }
        let beta = 2.0 / vnorm2;
        // p = beta * W v on trailing block
        for i in (k + 1)..n {
            let mut s = 0.0;
            for j in (k + 1)..n {
                s += w[i * n + j] * v[j];
            }
            p[i] = beta * s;
        }
        // p <- p - (beta/2) (v^T p) v
        let mut vtp = 0.0;
        for i in (k + 1)..n {
            vtp += v[i] * p[i];
        }
        let c = 0.5 * beta * vtp;
        for i in (k + 1)..n {
            p[i] -= c * v[i];
        }
        // W <- W - v p^T - p v^T on trailing block
        for i in (k + 1)..n {
            for j in (k + 1)..n {
                w[i * n + j] -= v[i] * p[j] + p[i] * v[j];
            }
        }
        d[k] = w[k * n + k];
        e[k] = alpha;
    }
    if n >= 2 {
        d[n - 2] = w[(n - 2) * n + (n - 2)];
        e[n - 2] = w[(n - 1) * n + (n - 2)];
    }
    d[n - 1] = w[(n - 1) * n + (n - 1)];
    (d, e)
}

/// Number of eigenvalues of the tridiagonal matrix below `x`.
fn sturm_count(d: &[f64], e: &[f64], x: f64) -> usize {
    const PIVMIN: f64 = 1e-300;
    let mut count = 0usize;
    let mut q = d[0] - x;
    for i in 0..d.len() {
        if q.abs() < PIVMIN {
            q = -PIVMIN;
        }
        if q < 0.0 {
            count += 1;
        }
        if i + 1 < d.len() {
            q = d[i + 1] - x - e[i] * e[i] / q;
        }
    }
    count
}

fn tridiag_eig_min(d: &[f64], e: &[f64]) -> f64 {
    let n = d.len();
    // Gershgorin bounds
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let mut r = 0.0;
        if i > 0 {
            r += e[i - 1].abs();
        }
        if i < n - 1 {
            r += e[i].abs();
        }
        lo = lo.min(d[i] - r);
        hi = hi.max(d[i] + r);
    }
    if lo == hi {
        return lo;
    }
    let mut a = lo;
    let mut b = hi;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if sturm_count(d, e, mid) >= 1 {
            b = mid;
        } else {
            a = mid;
        }
        if b - a <= 1e-11 + 1e-13 * a.abs().max(b.abs()) {
            break;
        }
    }
    0.5 * (a + b)
}
