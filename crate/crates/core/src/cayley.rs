//! Cayley transform: column-orthonormal matrices from free parameters, and
//! the orthogonal affine layers built on it.
//!
//! For a square block G and a tall block H, the transform maps
//! `[G; H]` to `J = [(I+Z)^{-1}(I-Z); -2H(I+Z)^{-1}]` with
//! `Z = G^T - G + H^T H`, and `J^T J = I` holds identically. Since
//! `Z + Z^T = 2 H^T H` is positive semidefinite, `I + Z` is always
//! nonsingular; the LU solve still flags systems whose pivots collapse
//! below 1e-12 relative.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Matrix, NodeId, Tape};
use crate::{Error, Result};

/// Free parameters of a Cayley transform: square `g` (p x p) and optional
/// tall `h` ((n-p) x p). `h = None` is the square case n = p.
#[derive(Debug, Clone)]
pub struct CayleyInput {
    pub g: Matrix,
    pub h: Option<Matrix>,
}

impl CayleyInput {
    pub fn new(g: Matrix, h: Option<Matrix>) -> Result<Self> {
        if g.rows() != g.cols() {
            return Err(Error::Shape(format!(
                "cayley G must be square, got {}x{}",
                g.rows(),
                g.cols()
            )));
        }
        if let Some(h) = &h {
            if h.cols() != g.cols() {
                return Err(Error::Shape(format!(
                    "cayley H must have {} columns, got {}",
                    g.cols(),
                    h.cols()
                )));
            }
        }
        Ok(CayleyInput { g, h })
    }

    pub fn p(&self) -> usize {
        self.g.rows()
    }

    pub fn n(&self) -> usize {
        self.p() + self.h.as_ref().map_or(0, Matrix::rows)
    }
}

/// Tape node ids for the two blocks of a Cayley transform output.
#[derive(Debug, Clone, Copy)]
pub struct CayleyNodes {
    /// (I+Z)^{-1}(I-Z), p x p. Absent when the caller asked only for the
    /// bottom block.
    pub top: Option<NodeId>,
    /// -2H(I+Z)^{-1}, (n-p) x p. Absent when there is no H block.
    pub bottom: Option<NodeId>,
}

/// Record a Cayley transform on the tape.
///
/// `g` and `h` may each be missing: a missing `g` contributes nothing to
/// `Z = G^T - G + H^T H` (used when the square block is frozen at zero), and
/// a missing `h` is the square case. Set `want_top` to false to skip the
/// square block entirely when only the bottom is consumed downstream.
pub fn build_cayley(
    tape: &mut Tape,
    p: usize,
    g: Option<NodeId>,
    h: Option<NodeId>,
    want_top: bool,
) -> Result<CayleyNodes> {
    let eye = tape.constant(Matrix::identity(p));
    let z = match (g, h) {
        (Some(g), Some(h)) => {
            let gt = tape.transpose(g)?;
            let skew = tape.sub(gt, g)?;
            let ht = tape.transpose(h)?;
            let hth = tape.matmul(ht, h)?;
            Some(tape.add(skew, hth)?)
        }
        (Some(g), None) => {
            let gt = tape.transpose(g)?;
            Some(tape.sub(gt, g)?)
        }
        (None, Some(h)) => {
            let ht = tape.transpose(h)?;
            Some(tape.matmul(ht, h)?)
        }
        (None, None) => None,
    };
    let Some(z) = z else {
        // Z = 0: the transform is the identity stack [I; 0]
        return Ok(CayleyNodes {
            top: want_top.then_some(eye),
            bottom: None,
        });
    };
    let m = tape.add(eye, z)?;
    let top = if want_top {
        let i_minus_z = tape.sub(eye, z)?;
        Some(tape.solve(m, i_minus_z)?)
    } else {
        None
    };
    let bottom = match h {
        Some(h) => {
            let mt = tape.transpose(m)?;
            let ht = tape.transpose(h)?;
            let rhs = tape.scale(ht, -2.0)?;
            let bt = tape.solve(mt, rhs)?;
            Some(tape.transpose(bt)?)
        }
        None => None,
    };
    Ok(CayleyNodes { top, bottom })
}

/// Evaluate the Cayley transform, returning the stacked n x p matrix `J`
/// with `J^T J = I`. Runs the tape builder on a scratch tape so the value
/// path and the gradient path are the same computation.
pub fn cayley_transform(input: &CayleyInput) -> Result<Matrix> {
    let mut tape = Tape::new();
    let g = tape.constant(input.g.clone());
    let h = match &input.h {
        Some(h) if h.rows() > 0 => Some(tape.constant(h.clone())),
        _ => None,
    };
    let nodes = build_cayley(&mut tape, input.p(), Some(g), h, true)?;
    let top = tape.value(nodes.top.expect("top requested")).clone();
    let mut out = Matrix::zeros(input.n(), input.p());
    let p = input.p();
    out.data_mut()[..p * p].copy_from_slice(top.data());
    if let Some(b) = nodes.bottom {
        let bot = tape.value(b);
        out.data_mut()[p * p..].copy_from_slice(bot.data());
    }
    Ok(out)
}

/// Orthogonal affine layer x -> P x + q with P from the Cayley transform of
/// a square free parameter. Isometric, hence distortion 1.
#[derive(Debug, Clone)]
pub struct OrthogonalLayer {
    p: Matrix,
    q: Matrix,
    /// free parameter kept for training and serialization
    g: Matrix,
}

impl OrthogonalLayer {
    /// Materialize from the free parameter `g` (n x n) and bias `q` (n x 1).
    pub fn from_free(g: Matrix, q: Matrix) -> Result<Self> {
        let n = g.rows();
        if g.cols() != n {
            return Err(Error::Shape("orthogonal free parameter must be square".into()));
        }
        if q.shape() != (n, 1) {
            return Err(Error::Shape(format!(
                "orthogonal bias must be {n}x1, got {:?}",
                q.shape()
            )));
        }
        let p = cayley_transform(&CayleyInput::new(g.clone(), None)?)?;
        Ok(OrthogonalLayer { p, q, g })
    }

    pub fn identity(n: usize) -> Self {
        OrthogonalLayer {
            p: Matrix::identity(n),
            q: Matrix::zeros(n, 1),
            g: Matrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn free_g(&self) -> &Matrix {
        &self.g
    }

    /// ||P^T P - I||_max
    pub fn orthogonality_defect(&self) -> f64 {
        let n = self.dim();
        self.p
            .transpose()
            .matmul(&self.p)
            .max_abs_diff(&Matrix::identity(n))
    }

    /// P x + q for a batch of column vectors.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.dim() {
            return Err(Error::Shape(format!(
                "orthogonal forward: expected {} rows, got {}",
                self.dim(),
                x.rows()
            )));
        }
        let mut y = self.p.matmul(x);
        for j in 0..y.cols() {
            for i in 0..y.rows() {
                let v = y.get(i, j) + self.q.data()[i];
                y.set(i, j, v);
            }
        }
        Ok(y)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::col_vec(x))?.data().to_vec())
    }

    /// Exact inverse P^T (y - q).
    pub fn inverse(&self, y: &Matrix) -> Result<Matrix> {
        if y.rows() != self.dim() {
            return Err(Error::Shape(format!(
                "orthogonal inverse: expected {} rows, got {}",
                self.dim(),
                y.rows()
            )));
        }
        let mut shifted = y.clone();
        for j in 0..shifted.cols() {
            for i in 0..shifted.rows() {
                let v = shifted.get(i, j) - self.q.data()[i];
                shifted.set(i, j, v);
            }
        }
        Ok(self.p.transpose().matmul(&shifted))
    }

    pub fn inverse_vec(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse(&Matrix::col_vec(y))?.data().to_vec())
    }
}

/// Draw a matrix with i.i.d. normal entries of the given std deviation.
pub fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

/// Seeded standard-normal draw for callers without their own stream.
pub fn seeded_normal(rows: usize, cols: usize, std: f64, seed: u64) -> Matrix {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    normal_matrix(rows, cols, std, &mut rng)
}

/// Free parameters for a fresh orthogonal layer: G ~ N(0, 1/n) entrywise so
/// Z starts near zero and P near the identity, q = 0.
pub fn init_orthogonal_free(n: usize, rng: &mut impl Rng) -> (Matrix, Matrix) {
    let std = 1.0 / (n as f64).sqrt();
    (normal_matrix(n, n, std, rng), Matrix::zeros(n, 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_input_gives_identity_stack() {
        let input = CayleyInput::new(Matrix::zeros(3, 3), Some(Matrix::zeros(2, 3))).unwrap();
        let j = cayley_transform(&input).unwrap();
        assert_eq!(j.shape(), (5, 3));
        for i in 0..5 {
            for k in 0..3 {
                let want = if i == k { 1.0 } else { 0.0 };
                assert!((j.get(i, k) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_evaluated_1d_case() {
        // G = 0, H = 1: Z = 1, top = (1+1)^{-1}(1-1) = 0, bottom = -2*1*(1/2) = -1
        let input = CayleyInput::new(
            Matrix::scalar(0.0),
            Some(Matrix::from_vec(1, 1, vec![1.0])),
        )
        .unwrap();
        let j = cayley_transform(&input).unwrap();
        assert_eq!(j.shape(), (2, 1));
        assert!((j.get(0, 0) - 0.0).abs() < 1e-15);
        assert!((j.get(1, 0) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_input_is_column_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = normal_matrix(8, 8, 0.2, &mut rng);
        let h = normal_matrix(24, 8, 0.2, &mut rng);
        let j = cayley_transform(&CayleyInput::new(g, Some(h)).unwrap()).unwrap();
        let defect = j.transpose().matmul(&j).max_abs_diff(&Matrix::identity(8));
        assert!(defect <= 1e-10, "J^T J defect {defect}");
    }

    #[test]
    fn square_case_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = normal_matrix(6, 6, 0.5, &mut rng);
        let j = cayley_transform(&CayleyInput::new(g, None).unwrap()).unwrap();
        let defect = j.transpose().matmul(&j).max_abs_diff(&Matrix::identity(6));
        assert!(defect <= 1e-12, "P^T P defect {defect}");
    }

    #[test]
    fn gradient_through_cayley_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g0 = normal_matrix(4, 4, 0.3, &mut rng);
        let h0 = normal_matrix(3, 4, 0.3, &mut rng);
        let weights = normal_matrix(4, 4, 1.0, &mut rng);
        let weights_b = normal_matrix(3, 4, 1.0, &mut rng);

        // loss = sum(Wt . top) + sum(Wb . bottom), differentiated w.r.t. G
        let h_fixed = h0.clone();
        let wt = weights.clone();
        let wb = weights_b.clone();
        let err = finite_diff_check(
            move |t, gid| {
                let h = t.constant(h_fixed.clone());
                let nodes = build_cayley(t, 4, Some(gid), Some(h), true)?;
                let wt_id = t.constant(wt.clone());
                let wb_id = t.constant(wb.clone());
                let a = t.hadamard(nodes.top.unwrap(), wt_id)?;
                let b = t.hadamard(nodes.bottom.unwrap(), wb_id)?;
                let sa = t.sum_all(a)?;
                let sb = t.sum_all(b)?;
                t.add(sa, sb)
            },
            &g0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "grad wrt G error {err}");

        // and w.r.t. H
        let g_fixed = g0.clone();
        let wt = weights;
        let wb = weights_b;
        let err = finite_diff_check(
            move |t, hid| {
                let g = t.constant(g_fixed.clone());
                let nodes = build_cayley(t, 4, Some(g), Some(hid), true)?;
                let wt_id = t.constant(wt.clone());
                let wb_id = t.constant(wb.clone());
                let a = t.hadamard(nodes.top.unwrap(), wt_id)?;
                let b = t.hadamard(nodes.bottom.unwrap(), wb_id)?;
                let sa = t.sum_all(a)?;
                let sb = t.sum_all(b)?;
                t.add(sa, sb)
            },
            &h0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "grad wrt H error {err}");
    }

    #[test]
    fn orthogonal_layer_identity_and_translation() {
        let layer = OrthogonalLayer::identity(2);
        let y = layer.forward_vec(&[1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0, 2.0]);

        let layer = OrthogonalLayer::from_free(
            Matrix::zeros(2, 2),
            Matrix::col_vec(&[1.0, 1.0]),
        )
        .unwrap();
        let y = layer.forward_vec(&[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![1.0, 1.0]);
        // zero free parameter means P = I, so the inverse is y - q
        let x = layer.inverse_vec(&[1.0, 1.0]).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
    }

    #[test]
    fn orthogonal_layer_is_isometric_and_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (g, _) = init_orthogonal_free(5, &mut rng);
        let q = normal_matrix(5, 1, 1.0, &mut rng);
        let layer = OrthogonalLayer::from_free(g, q).unwrap();
        assert!(layer.orthogonality_defect() <= 1e-8);

        for _ in 0..20 {
            let x = normal_matrix(5, 1, 2.0, &mut rng);
            let x2 = normal_matrix(5, 1, 2.0, &mut rng);
            let y = layer.forward(&x).unwrap();
            let y2 = layer.forward(&x2).unwrap();
            let din = x.sub(&x2).frob_norm();
            let dout = y.sub(&y2).frob_norm();
            assert!((din - dout).abs() <= 1e-9, "isometry violated: {din} vs {dout}");

            let back = layer.inverse(&y).unwrap();
            assert!(back.max_abs_diff(&x) <= 1e-9);
        }
    }
}
