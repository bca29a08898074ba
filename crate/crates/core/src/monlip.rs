//! The monotone-and-Lipschitz residual layer.
//!
//! A layer `F(x) = mu x + H(x)` where the nonlinear block is an MLP backbone
//! with every hidden layer wired to both the input and the output. The free
//! parameterization maps unconstrained matrices onto weights that satisfy the
//! monotonicity/Lipschitz certificate for any parameter value, so training is
//! plain first-order optimization with no projections.
//!
//! Materialization produces the scaled representation
//! `zhat_k = act_hat(V_k zhat_{k-1} + sqrt(2 gamma) S_k x + bhat_k)` and
//! `y = mu x + sqrt(gamma/2) S^T zhat + b_y`, where `V` is strictly lower
//! block bidiagonal and `act_hat(v) = psi * act(v / psi)`. The certificate
//! checker validates the equivalent unscaled weights `(U, W, Y, Lambda)`
//! against `Y = U^T Lambda` and
//! `2 Lambda - Lambda W - W^T Lambda - (2/gamma) Y^T Y >= 0`.

use rand::Rng;

use crate::cayley::{build_cayley, normal_matrix};
use crate::numerics::{sym_eig_min, Activation, Matrix, NodeId, Tape};
use crate::{Error, Result};

/// Max allowed ||Y - U^T Lambda||_max for certification.
pub const Y_EQ_TOL: f64 = 1e-9;
/// Min allowed eigenvalue margin of the certificate matrix.
pub const H_MARGIN_TOL: f64 = -1e-8;
/// Min allowed eigenvalue margin for 2I - V - V^T and 2I - S S^T.
pub const LEMMA_MARGIN_TOL: f64 = -1e-8;

/// Unconstrained learnable parameters of one monotone-Lipschitz layer.
///
/// Widths are the hidden-layer sizes `m_1..m_L`. The square Cayley block
/// `fp` is frozen at zero by default (`None`), which keeps the input
/// coupling stack exactly column-orthonormal; it can be made learnable via
/// the `free_fp` configuration flag.
#[derive(Debug, Clone)]
pub struct FreeParams {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub mu: f64,
    pub nu: f64,
    pub activation: Activation,
    /// n x n, None means frozen at zero
    pub fp: Option<Matrix>,
    /// m x n with m the sum of widths
    pub fq: Matrix,
    /// per layer, m_k x 1 log-scalings
    pub d: Vec<Matrix>,
    /// per layer, m_k x m_k
    pub fa: Vec<Matrix>,
    /// couplings between consecutive hidden layers: fb[i] is
    /// widths[i] x widths[i+1], so there are L-1 of them
    pub fb: Vec<Matrix>,
    /// per layer, m_k x 1 biases (pre-scaling)
    pub b: Vec<Matrix>,
    /// n x 1 output bias
    pub b_y: Matrix,
}

impl FreeParams {
    /// Zero-initialized parameters; the layer reduces to F(x) = mu x.
    pub fn zeros(
        input_dim: usize,
        widths: &[usize],
        mu: f64,
        nu: f64,
        activation: Activation,
    ) -> Result<Self> {
        check_bounds(mu, nu)?;
        if widths.is_empty() || widths.contains(&0) || input_dim == 0 {
            return Err(Error::Config(
                "layer needs a positive input dim and at least one nonzero width".into(),
            ));
        }
        let m: usize = widths.iter().sum();
        Ok(FreeParams {
            input_dim,
            widths: widths.to_vec(),
            mu,
            nu,
            activation,
            fp: None,
            fq: Matrix::zeros(m, input_dim),
            d: widths.iter().map(|&w| Matrix::zeros(w, 1)).collect(),
            fa: widths.iter().map(|&w| Matrix::zeros(w, w)).collect(),
            fb: widths
                .windows(2)
                .map(|w| Matrix::zeros(w[0], w[1]))
                .collect(),
            b: widths.iter().map(|&w| Matrix::zeros(w, 1)).collect(),
            b_y: Matrix::zeros(input_dim, 1),
        })
    }

    /// Random initialization: Cayley blocks i.i.d. normal with std
    /// 1/sqrt(width), log-scalings and biases zero.
    pub fn init(
        input_dim: usize,
        widths: &[usize],
        mu: f64,
        nu: f64,
        activation: Activation,
        free_fp: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut p = Self::zeros(input_dim, widths, mu, nu, activation)?;
        let m: usize = widths.iter().sum();
        p.fq = normal_matrix(m, input_dim, 1.0 / (m as f64).sqrt(), rng);
        if free_fp {
            p.fp = Some(normal_matrix(
                input_dim,
                input_dim,
                1.0 / (input_dim as f64).sqrt(),
                rng,
            ));
        }
        for (k, &w) in widths.iter().enumerate() {
            p.fa[k] = normal_matrix(w, w, 1.0 / (w as f64).sqrt(), rng);
        }
        for (i, pair) in widths.windows(2).enumerate() {
            p.fb[i] = normal_matrix(pair[0], pair[1], 1.0 / (pair[1] as f64).sqrt(), rng);
        }
        Ok(p)
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn gamma(&self) -> f64 {
        self.nu - self.mu
    }

    /// Learnable matrices in a fixed order; optimizers and model files rely
    /// on this order matching `build_materialize`'s leaf order.
    pub fn flatten(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        if let Some(fp) = &self.fp {
            out.push(fp);
        }
        out.push(&self.fq);
        for k in 0..self.layers() {
            out.push(&self.d[k]);
            out.push(&self.fa[k]);
            if k >= 1 {
                out.push(&self.fb[k - 1]);
            }
            out.push(&self.b[k]);
        }
        out.push(&self.b_y);
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        if let Some(fp) = &mut self.fp {
            out.push(fp);
        }
        out.push(&mut self.fq);
        let layers = self.widths.len();
        let mut fb_iter = self.fb.iter_mut();
        let mut d_iter = self.d.iter_mut();
        let mut fa_iter = self.fa.iter_mut();
        let mut b_iter = self.b.iter_mut();
        for k in 0..layers {
            out.push(d_iter.next().unwrap());
            out.push(fa_iter.next().unwrap());
            if k >= 1 {
                out.push(fb_iter.next().unwrap());
            }
            out.push(b_iter.next().unwrap());
        }
        out.push(&mut self.b_y);
        out
    }
}

fn check_bounds(mu: f64, nu: f64) -> Result<()> {
    if !(mu > 0.0) || !(nu > mu) {
        return Err(Error::Config(format!(
            "need 0 < mu < nu, got mu = {mu}, nu = {nu}"
        )));
    }
    Ok(())
}

/// Materialized weights of one layer in the scaled representation.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub mu: f64,
    pub nu: f64,
    pub activation: Activation,
    /// S_k: m_k x n
    pub s_blocks: Vec<Matrix>,
    /// sub-diagonal blocks: v_blocks[i] is widths[i+1] x widths[i]
    pub v_blocks: Vec<Matrix>,
    /// positive scalings, m_k x 1
    pub psi: Vec<Matrix>,
    /// scaled biases, m_k x 1
    pub bhat: Vec<Matrix>,
    /// n x 1
    pub b_y: Matrix,
}

/// Tape nodes of a materialized layer, for training.
pub struct MonLipTape {
    /// free-parameter leaves in `FreeParams::flatten` order
    pub leaves: Vec<NodeId>,
    pub s_blocks: Vec<NodeId>,
    pub st_blocks: Vec<NodeId>,
    pub v_blocks: Vec<NodeId>,
    pub psi: Vec<NodeId>,
    pub bhat: Vec<NodeId>,
    pub b_y: NodeId,
    pub mu: f64,
    pub nu: f64,
    pub activation: Activation,
}

impl MonLipTape {
    pub fn gamma(&self) -> f64 {
        self.nu - self.mu
    }
}

/// Record leaves for every free parameter and build the weight nodes.
pub fn build_materialize(tape: &mut Tape, params: &FreeParams) -> Result<MonLipTape> {
    check_bounds(params.mu, params.nu)?;
    let layers = params.layers();
    let n = params.input_dim;

    let mut leaves = Vec::new();
    let fp_id = params.fp.as_ref().map(|fp| {
        let id = tape.leaf(fp.clone());
        leaves.push(id);
        id
    });
    let fq_id = tape.leaf(params.fq.clone());
    leaves.push(fq_id);
    let mut d_ids = Vec::with_capacity(layers);
    let mut fa_ids = Vec::with_capacity(layers);
    let mut fb_ids = Vec::with_capacity(layers.saturating_sub(1));
    let mut b_ids = Vec::with_capacity(layers);
    for k in 0..layers {
        let d = tape.leaf(params.d[k].clone());
        leaves.push(d);
        d_ids.push(d);
        let fa = tape.leaf(params.fa[k].clone());
        leaves.push(fa);
        fa_ids.push(fa);
        if k >= 1 {
            let fb = tape.leaf(params.fb[k - 1].clone());
            leaves.push(fb);
            fb_ids.push(fb);
        }
        let b = tape.leaf(params.b[k].clone());
        leaves.push(b);
        b_ids.push(b);
    }
    let b_y = tape.leaf(params.b_y.clone());
    leaves.push(b_y);

    // [P; Q] = cayley([F^p; F^q]); only the bottom block Q feeds the weights,
    // so the square block is never computed on the training path.
    let q_full = build_cayley(tape, n, fp_id, Some(fq_id), false)?
        .bottom
        .expect("Q block");

    let mut q_blocks = Vec::with_capacity(layers);
    let mut offset = 0;
    for &w in &params.widths {
        q_blocks.push(tape.row_slice(q_full, offset, w)?);
        offset += w;
    }

    // per-layer Cayley: [A_k^T; B_k^T] = cayley([F_k^a; F_k^b])
    let mut a_t = Vec::with_capacity(layers);
    let mut b_mats: Vec<Option<NodeId>> = Vec::with_capacity(layers);
    for k in 0..layers {
        let fb = if k >= 1 { Some(fb_ids[k - 1]) } else { None };
        let nodes = build_cayley(tape, params.widths[k], Some(fa_ids[k]), fb, true)?;
        a_t.push(nodes.top.expect("A block"));
        b_mats.push(match nodes.bottom {
            Some(bt) => Some(tape.transpose(bt)?),
            None => None,
        });
    }

    // V_k = 2 B_k A_{k-1}^T, S_k = A_k Q_k - B_k Q_{k-1}
    let mut s_blocks = Vec::with_capacity(layers);
    let mut st_blocks = Vec::with_capacity(layers);
    let mut v_blocks = Vec::with_capacity(layers.saturating_sub(1));
    for k in 0..layers {
        let a_k = tape.transpose(a_t[k])?;
        let aq = tape.matmul(a_k, q_blocks[k])?;
        let s_k = match &b_mats[k] {
            Some(b_k) => {
                let bq = tape.matmul(*b_k, q_blocks[k - 1])?;
                tape.sub(aq, bq)?
            }
            None => aq,
        };
        s_blocks.push(s_k);
        st_blocks.push(tape.transpose(s_k)?);
        if let Some(b_k) = &b_mats[k] {
            let ba = tape.matmul(*b_k, a_t[k - 1])?;
            v_blocks.push(tape.scale(ba, 2.0)?);
        }
    }

    // Psi_k = diag(exp(d_k)), bhat_k = Psi_k b_k
    let mut psi = Vec::with_capacity(layers);
    let mut bhat = Vec::with_capacity(layers);
    for k in 0..layers {
        let p = tape.exp(d_ids[k])?;
        psi.push(p);
        bhat.push(tape.hadamard(p, b_ids[k])?);
    }

    Ok(MonLipTape {
        leaves,
        s_blocks,
        st_blocks,
        v_blocks,
        psi,
        bhat,
        b_y,
        mu: params.mu,
        nu: params.nu,
        activation: params.activation,
    })
}

/// Forward pass on the tape for a batch of columns `x` (n x B).
///
/// `bias_override`, when present, supplies per-sample scaled biases
/// (m_k x B nodes) in place of the layer's own `bhat`; this is how
/// condition-dependent biases enter.
pub fn build_forward(
    tape: &mut Tape,
    layer: &MonLipTape,
    x: NodeId,
    bias_override: Option<&[NodeId]>,
) -> Result<NodeId> {
    let gamma = layer.gamma();
    let sqrt_2g = (2.0 * gamma).sqrt();
    let sqrt_g2 = (gamma / 2.0).sqrt();

    let mut zhat_prev: Option<NodeId> = None;
    let mut acc: Option<NodeId> = None;
    for k in 0..layer.s_blocks.len() {
        let sx = tape.matmul(layer.s_blocks[k], x)?;
        let sx = tape.scale(sx, sqrt_2g)?;
        let mut pre = match zhat_prev {
            Some(z) => {
                let vz = tape.matmul(layer.v_blocks[k - 1], z)?;
                tape.add(vz, sx)?
            }
            None => sx,
        };
        pre = match bias_override {
            Some(biases) => tape.add(pre, biases[k])?,
            None => tape.add_bias(pre, layer.bhat[k])?,
        };
        let zhat = tape.scaled_act(pre, layer.psi[k], layer.activation)?;
        let stz = tape.matmul(layer.st_blocks[k], zhat)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, stz)?,
            None => stz,
        });
        zhat_prev = Some(zhat);
    }
    let mux = tape.scale(x, layer.mu)?;
    let coupling = tape.scale(acc.expect("at least one layer"), sqrt_g2)?;
    let y = tape.add(mux, coupling)?;
    tape.add_bias(y, layer.b_y)
}

/// Register already-materialized weights as tape constants, for graphs that
/// differentiate with respect to the input rather than the parameters.
pub fn register_const(tape: &mut Tape, w: &LayerWeights) -> Result<MonLipTape> {
    let s_blocks: Vec<NodeId> = w
        .s_blocks
        .iter()
        .map(|m| tape.constant(m.clone()))
        .collect();
    let mut st_blocks = Vec::with_capacity(s_blocks.len());
    for &s in &s_blocks {
        st_blocks.push(tape.transpose(s)?);
    }
    Ok(MonLipTape {
        leaves: Vec::new(),
        s_blocks,
        st_blocks,
        v_blocks: w.v_blocks.iter().map(|m| tape.constant(m.clone())).collect(),
        psi: w.psi.iter().map(|m| tape.constant(m.clone())).collect(),
        bhat: w.bhat.iter().map(|m| tape.constant(m.clone())).collect(),
        b_y: tape.constant(w.b_y.clone()),
        mu: w.mu,
        nu: w.nu,
        activation: w.activation,
    })
}

/// Materialize the weights for a parameter value. Runs the tape builder on a
/// scratch tape so the value path and the gradient path cannot drift apart.
pub fn materialize(params: &FreeParams) -> Result<LayerWeights> {
    let mut tape = Tape::new();
    let mt = build_materialize(&mut tape, params)?;
    Ok(LayerWeights {
        input_dim: params.input_dim,
        widths: params.widths.clone(),
        mu: params.mu,
        nu: params.nu,
        activation: params.activation,
        s_blocks: mt
            .s_blocks
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect(),
        v_blocks: mt
            .v_blocks
            .iter()
            .map(|&id| tape.value(id).clone())
            .collect(),
        psi: mt.psi.iter().map(|&id| tape.value(id).clone()).collect(),
        bhat: mt.bhat.iter().map(|&id| tape.value(id).clone()).collect(),
        b_y: tape.value(mt.b_y).clone(),
    })
}

impl LayerWeights {
    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    pub fn gamma(&self) -> f64 {
        self.nu - self.mu
    }

    pub fn distortion(&self) -> f64 {
        self.nu / self.mu
    }

    /// One explicit pass through the scaled representation for a batch of
    /// columns. No iteration is needed: V is strictly lower block triangular.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.input_dim {
            return Err(Error::Shape(format!(
                "layer forward: expected {} rows, got {}",
                self.input_dim,
                x.rows()
            )));
        }
        let gamma = self.gamma();
        let sqrt_2g = (2.0 * gamma).sqrt();
        let sqrt_g2 = (gamma / 2.0).sqrt();
        let cols = x.cols();

        let mut y = x.scale(self.mu);
        let mut zhat_prev: Option<Matrix> = None;
        for k in 0..self.layers() {
            let mut pre = self.s_blocks[k].matmul(x).scale(sqrt_2g);
            if let Some(z) = &zhat_prev {
                pre = self.v_blocks[k - 1].matmul(z).add(&pre);
            }
            let psi = self.psi[k].data();
            let bh = self.bhat[k].data();
            let mut zhat = pre;
            for i in 0..zhat.rows() {
                let p = psi[i];
                for j in 0..cols {
                    let v = zhat.get(i, j) + bh[i];
                    zhat.set(i, j, p * self.activation.eval(v / p));
                }
            }
            let stz = self.s_blocks[k].transpose().matmul(&zhat);
            for (yv, sv) in y.data_mut().iter_mut().zip(stz.data()) {
                *yv += sqrt_g2 * sv;
            }
            zhat_prev = Some(zhat);
        }
        for j in 0..cols {
            for i in 0..self.input_dim {
                let v = y.get(i, j) + self.b_y.data()[i];
                y.set(i, j, v);
            }
        }
        Ok(y)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::col_vec(x))?.data().to_vec())
    }

    /// Reference evaluation through the unscaled representation
    /// `z = act(W z + U x + b)`, `y = mu x + Y z + b_y`, the second route in
    /// representation-equivalence checks.
    pub fn forward_compact(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.input_dim {
            return Err(Error::Shape("compact forward dimension mismatch".into()));
        }
        let der = self.derived_compact();
        let cols = x.cols();
        let mut y = x.scale(self.mu);
        let mut z_prev: Option<Matrix> = None;
        for k in 0..self.layers() {
            let mut pre = der.u_blocks[k].matmul(x);
            if let Some(z) = &z_prev {
                pre = der.w_blocks[k - 1].matmul(z).add(&pre);
            }
            let psi = self.psi[k].data();
            let bh = self.bhat[k].data();
            let mut z = pre;
            for i in 0..z.rows() {
                for j in 0..cols {
                    let v = z.get(i, j) + bh[i] / psi[i];
                    z.set(i, j, self.activation.eval(v));
                }
            }
            let yz = der.y_blocks[k].matmul(&z);
            for (yv, dv) in y.data_mut().iter_mut().zip(yz.data()) {
                *yv += dv;
            }
            z_prev = Some(z);
        }
        for j in 0..cols {
            for i in 0..self.input_dim {
                let v = y.get(i, j) + self.b_y.data()[i];
                y.set(i, j, v);
            }
        }
        Ok(y)
    }

    /// Full m x n coupling matrix S.
    pub fn full_s(&self) -> Matrix {
        let m = self.hidden_dim();
        let n = self.input_dim;
        let mut s = Matrix::zeros(m, n);
        let mut row = 0;
        for blk in &self.s_blocks {
            for i in 0..blk.rows() {
                for j in 0..n {
                    s.set(row + i, j, blk.get(i, j));
                }
            }
            row += blk.rows();
        }
        s
    }

    /// Full m x m strictly lower block bidiagonal V.
    pub fn full_v(&self) -> Matrix {
        let m = self.hidden_dim();
        let mut v = Matrix::zeros(m, m);
        let mut row = self.widths[0];
        let mut col = 0;
        for (idx, blk) in self.v_blocks.iter().enumerate() {
            for i in 0..blk.rows() {
                for j in 0..blk.cols() {
                    v.set(row + i, col + j, blk.get(i, j));
                }
            }
            col += self.widths[idx];
            row += blk.rows();
        }
        v
    }

    /// Derived unscaled weights (U, W, Y, Lambda) per block.
    pub fn derived_compact(&self) -> CompactWeights {
        let gamma = self.gamma();
        let sqrt_2g = (2.0 * gamma).sqrt();
        let sqrt_g2 = (gamma / 2.0).sqrt();
        let mut u_blocks = Vec::with_capacity(self.layers());
        let mut y_blocks = Vec::with_capacity(self.layers());
        let mut w_blocks = Vec::with_capacity(self.v_blocks.len());
        let mut lambda_blocks = Vec::with_capacity(self.layers());
        for k in 0..self.layers() {
            let psi = self.psi[k].data();
            let s = &self.s_blocks[k];
            let u = Matrix::from_fn(s.rows(), s.cols(), |i, j| sqrt_2g * s.get(i, j) / psi[i]);
            let y = Matrix::from_fn(s.cols(), s.rows(), |i, j| sqrt_g2 * s.get(j, i) * psi[j]);
            let lambda = Matrix::from_fn(psi.len(), 1, |i, _| 0.5 * psi[i] * psi[i]);
            u_blocks.push(u);
            y_blocks.push(y);
            lambda_blocks.push(lambda);
            if k >= 1 {
                let v = &self.v_blocks[k - 1];
                let psi_prev = self.psi[k - 1].data();
                let w = Matrix::from_fn(v.rows(), v.cols(), |i, j| {
                    v.get(i, j) * psi_prev[j] / psi[i]
                });
                w_blocks.push(w);
            }
        }
        CompactWeights {
            u_blocks,
            w_blocks,
            y_blocks,
            lambda_blocks,
        }
    }
}

/// The unscaled weight view used by the certificate.
#[derive(Debug, Clone)]
pub struct CompactWeights {
    pub u_blocks: Vec<Matrix>,
    pub w_blocks: Vec<Matrix>,
    pub y_blocks: Vec<Matrix>,
    pub lambda_blocks: Vec<Matrix>,
}

/// Outcome of the algebraic certificate check for one layer.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CertificateReport {
    /// ||Y - U^T Lambda||_max
    pub y_eq_err: f64,
    /// lambda_min(2 Lambda - Lambda W - W^T Lambda - (2/gamma) Y^T Y)
    pub h_margin: f64,
    /// lambda_min(2I - V - V^T)
    pub lemma_v_margin: f64,
    /// lambda_min(2I - S S^T)
    pub lemma_s_margin: f64,
}

impl CertificateReport {
    pub fn certified(&self) -> bool {
        self.y_eq_err <= Y_EQ_TOL
            && self.h_margin >= H_MARGIN_TOL
            && self.lemma_v_margin >= LEMMA_MARGIN_TOL
            && self.lemma_s_margin >= LEMMA_MARGIN_TOL
    }
}

/// Numerically verify the monotonicity/Lipschitz certificate of a layer.
pub fn certificate_check(w: &LayerWeights) -> CertificateReport {
    let der = w.derived_compact();
    let m = w.hidden_dim();
    let n = w.input_dim;
    let gamma = w.gamma();

    // assemble full U (m x n), Y (n x m), lambda (m), W (m x m)
    let mut u = Matrix::zeros(m, n);
    let mut y = Matrix::zeros(n, m);
    let mut lambda = vec![0.0; m];
    let mut row = 0;
    for k in 0..w.layers() {
        let ub = &der.u_blocks[k];
        let yb = &der.y_blocks[k];
        let lb = &der.lambda_blocks[k];
        for i in 0..ub.rows() {
            for j in 0..n {
                u.set(row + i, j, ub.get(i, j));
                y.set(j, row + i, yb.get(j, i));
            }
            lambda[row + i] = lb.data()[i];
        }
        row += ub.rows();
    }
    let mut wfull = Matrix::zeros(m, m);
    {
        let mut row = w.widths[0];
        let mut col = 0;
        for (idx, blk) in der.w_blocks.iter().enumerate() {
            for i in 0..blk.rows() {
                for j in 0..blk.cols() {
                    wfull.set(row + i, col + j, blk.get(i, j));
                }
            }
            col += w.widths[idx];
            row += blk.rows();
        }
    }

    let mut y_eq_err: f64 = 0.0;
    for i in 0..n {
        for j in 0..m {
            let v = u.get(j, i) * lambda[j];
            y_eq_err = y_eq_err.max((y.get(i, j) - v).abs());
        }
    }

    // H = 2 Lambda - Lambda W - W^T Lambda - (2/gamma) Y^T Y
    let mut h = Matrix::zeros(m, m);
    for i in 0..m {
        h.set(i, i, 2.0 * lambda[i]);
    }
    for i in 0..m {
        for j in 0..m {
            let lw = lambda[i] * wfull.get(i, j);
            if lw != 0.0 {
                let v = h.get(i, j) - lw;
                h.set(i, j, v);
                let v = h.get(j, i) - lw;
                h.set(j, i, v);
            }
        }
    }
    let yty = y.transpose().matmul(&y);
    let c = 2.0 / gamma;
    for i in 0..m {
        for j in 0..m {
            let v = h.get(i, j) - c * yty.get(i, j);
            h.set(i, j, v);
        }
    }
    let h_margin = sym_eig_min(&h);

    let vfull = w.full_v();
    let mut lv = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let d = if i == j { 2.0 } else { 0.0 };
            lv.set(i, j, d - vfull.get(i, j) - vfull.get(j, i));
        }
    }
    let lemma_v_margin = sym_eig_min(&lv);

    let sfull = w.full_s();
    let sst = sfull.matmul(&sfull.transpose());
    let mut ls = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let d = if i == j { 2.0 } else { 0.0 };
            ls.set(i, j, d - sst.get(i, j));
        }
    }
    let lemma_s_margin = sym_eig_min(&ls);

    CertificateReport {
        y_eq_err,
        h_margin,
        lemma_v_margin,
        lemma_s_margin,
    }
}

/// Orthogonality diagnostic for the square Cayley block: materializes the
/// full [P; Q] stack (the only place P is ever computed) and reports
/// ||J^T J - I||_max.
pub fn q_orthogonality_defect(params: &FreeParams) -> Result<f64> {
    let mut tape = Tape::new();
    let n = params.input_dim;
    let fp = match &params.fp {
        Some(fp) => tape.constant(fp.clone()),
        None => tape.constant(Matrix::zeros(n, n)),
    };
    let fq = tape.constant(params.fq.clone());
    let nodes = build_cayley(&mut tape, n, Some(fp), Some(fq), true)?;
    let p = tape.value(nodes.top.expect("P block")).clone();
    let q = tape.value(nodes.bottom.expect("Q block")).clone();
    let ptp = p.transpose().matmul(&p);
    let qtq = q.transpose().matmul(&q);
    Ok(ptp.add(&qtq).max_abs_diff(&Matrix::identity(n)))
}

/// Free-parameter counts of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

/// Count the weight-bearing free parameters and the biases of a layer.
///
/// For the uniform case (all widths equal to the input dim d) this returns
/// the conventional (3L+1)d^2 + Ld weight count, which also charges the
/// vacuous first coupling block; other shapes get the exact sum over the
/// parameter matrices that actually exist. Biases are reported separately.
pub fn param_count(input_dim: usize, widths: &[usize]) -> ParamCount {
    assert!(!widths.is_empty(), "param_count needs at least one width");
    let l = widths.len();
    let m: usize = widths.iter().sum();
    let d = widths[0];
    let biases = m + input_dim;
    if widths.iter().all(|&w| w == d) && input_dim == d {
        return ParamCount {
            weights: (3 * l + 1) * d * d + l * d,
            biases,
        };
    }
    let mut weights = input_dim * input_dim + m * input_dim; // F^p, F^q
    for &w in widths {
        weights += w * w + w; // F^a and d
    }
    for pair in widths.windows(2) {
        weights += pair[0] * pair[1]; // F^b
    }
    ParamCount { weights, biases }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_params(
        seed: u64,
        n: usize,
        widths: &[usize],
        mu: f64,
        nu: f64,
    ) -> FreeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FreeParams::init(n, widths, mu, nu, Activation::Relu, false, &mut rng).unwrap();
        for k in 0..p.layers() {
            p.d[k] = normal_matrix(widths[k], 1, 0.1, &mut rng);
            p.b[k] = normal_matrix(widths[k], 1, 0.5, &mut rng);
        }
        p.b_y = normal_matrix(n, 1, 0.5, &mut rng);
        p
    }

    #[test]
    fn zero_coupling_layer_is_affine() {
        let mut p = FreeParams::zeros(3, &[4, 4], 0.5, 2.0, Activation::Relu).unwrap();
        p.b_y = Matrix::col_vec(&[1.0, -2.0, 0.5]);
        let w = materialize(&p).unwrap();
        for blk in &w.s_blocks {
            assert_eq!(blk.max_abs(), 0.0);
        }
        let x = Matrix::col_vec(&[2.0, 0.0, -4.0]);
        let y = w.forward(&x).unwrap();
        for i in 0..3 {
            let want = 0.5 * x.get(i, 0) + p.b_y.get(i, 0);
            assert!((y.get(i, 0) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_log_scaling_gives_unit_psi_and_half_lambda() {
        let mut p = random_params(0, 3, &[4, 4], 0.5, 2.0);
        for k in 0..p.layers() {
            p.d[k] = Matrix::zeros(p.widths[k], 1);
        }
        let w = materialize(&p).unwrap();
        for psi in &w.psi {
            assert!(psi.data().iter().all(|&v| v == 1.0));
        }
        let der = w.derived_compact();
        for lam in &der.lambda_blocks {
            assert!(lam.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn random_layer_passes_certificate() {
        let p = random_params(1, 3, &[4, 4], 0.5, 2.0);
        let w = materialize(&p).unwrap();
        let report = certificate_check(&w);
        assert!(report.certified(), "{report:?}");
        assert!(report.y_eq_err <= 1e-12);
    }

    #[test]
    fn free_fp_layer_also_passes_certificate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = FreeParams::init(3, &[4, 4], 0.5, 2.0, Activation::Relu, true, &mut rng).unwrap();
        assert!(p.fp.is_some());
        let w = materialize(&p).unwrap();
        assert!(certificate_check(&w).certified());
        assert!(q_orthogonality_defect(&p).unwrap() <= 1e-10);
    }

    #[test]
    fn decoupled_layer_h_margin_is_exponential_in_min_d() {
        let mut p = FreeParams::zeros(2, &[3, 3], 0.5, 2.0, Activation::Relu).unwrap();
        p.d[0] = Matrix::col_vec(&[0.3, -0.2, 0.1]);
        p.d[1] = Matrix::col_vec(&[0.0, 0.4, -0.5]);
        let w = materialize(&p).unwrap();
        let report = certificate_check(&w);
        let want = (2.0f64 * (-0.5)).exp();
        assert!(
            (report.h_margin - want).abs() < 1e-9,
            "margin {} want {want}",
            report.h_margin
        );
    }

    #[test]
    fn corrupted_couplings_fail_certification() {
        let p = random_params(2, 3, &[6, 6], 0.5, 2.0);
        let w = materialize(&p).unwrap();
        assert!(certificate_check(&w).certified());
        let mut bad = w.clone();
        for blk in &mut bad.v_blocks {
            *blk = blk.scale(10.0);
        }
        let report = certificate_check(&bad);
        assert!(report.h_margin < 0.0, "{report:?}");
        assert!(!report.certified());
    }

    #[test]
    fn empirical_monotonicity_and_lipschitzness() {
        let p = random_params(3, 4, &[8, 8], 0.5, 2.0);
        let w = materialize(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..2000 {
            let x1 = normal_matrix(4, 1, 2.0, &mut rng);
            let x2 = normal_matrix(4, 1, 2.0, &mut rng);
            let y1 = w.forward(&x1).unwrap();
            let y2 = w.forward(&x2).unwrap();
            let dx = x1.sub(&x2);
            let dy = y1.sub(&y2);
            let inner: f64 = dx.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let nx2 = dx.frob_norm().powi(2);
            assert!(inner >= 0.5 * nx2 - 1e-9, "monotonicity violated");
            assert!(dy.frob_norm() <= 2.0 * dx.frob_norm() + 1e-9, "lipschitz violated");
        }
    }

    #[test]
    fn scaled_and_compact_representations_agree() {
        for seed in 0..3u64 {
            let p = random_params(40 + seed, 3, &[5, 4, 6], 0.3, 3.0);
            let w = materialize(&p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(77 + seed);
            let x = normal_matrix(3, 7, 1.5, &mut rng);
            let a = w.forward(&x).unwrap();
            let b = w.forward_compact(&x).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-10, "gap {}", a.max_abs_diff(&b));
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let p = random_params(5, 3, &[4, 5], 0.5, 2.0);
        let w = materialize(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = normal_matrix(3, 4, 1.0, &mut rng);

        let mut tape = Tape::new();
        let mt = build_materialize(&mut tape, &p).unwrap();
        let xid = tape.constant(x.clone());
        let y = build_forward(&mut tape, &mt, xid, None).unwrap();
        let tape_y = tape.value(y);
        let plain_y = w.forward(&x).unwrap();
        assert!(tape_y.max_abs_diff(&plain_y) <= 1e-13);
    }

    /// Gradient of a scalar loss through materialize + forward against
    /// central finite differences on individual free parameters.
    #[test]
    fn gradient_through_materialize_and_forward() {
        let p = random_params(6, 2, &[3, 3], 0.5, 2.0);
        let x = Matrix::from_vec(2, 2, vec![0.4, -0.3, 0.9, 1.1]);

        let mut tape = Tape::new();
        let mt = build_materialize(&mut tape, &p).unwrap();
        let leaves = mt.leaves.clone();
        let xid = tape.constant(x.clone());
        let y = build_forward(&mut tape, &mt, xid, None).unwrap();
        let sq = tape.hadamard(y, y).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward(loss).unwrap();

        let loss_of = |params: &FreeParams| -> f64 {
            let w = materialize(params).unwrap();
            let out = w.forward(&x).unwrap();
            0.5 * out.data().iter().map(|v| v * v).sum::<f64>()
        };

        // leaf order: fq, d1, fa1, b1, d2, fa2, fb2, b2, b_y
        let h = 1e-6;
        let mut q = p.clone();

        // F^q
        let mut max_rel: f64 = 0.0;
        {
            let g = tape.grad(leaves[0]).clone();
            for i in 0..q.fq.len() {
                let orig = q.fq.data()[i];
                q.fq.data_mut()[i] = orig + h;
                let f1 = loss_of(&q);
                q.fq.data_mut()[i] = orig - h;
                let f2 = loss_of(&q);
                q.fq.data_mut()[i] = orig;
                let fd = (f1 - f2) / (2.0 * h);
                max_rel = max_rel.max((g.data()[i] - fd).abs() / (1.0 + fd.abs()));
            }
        }
        assert!(max_rel <= 1e-5, "F^q gradient error {max_rel}");

        // d of second layer (leaf index 4) - flows through bhat for ReLU
        let mut max_rel: f64 = 0.0;
        {
            let g = tape.grad(leaves[4]).clone();
            for i in 0..q.d[1].len() {
                let orig = q.d[1].data()[i];
                q.d[1].data_mut()[i] = orig + h;
                let f1 = loss_of(&q);
                q.d[1].data_mut()[i] = orig - h;
                let f2 = loss_of(&q);
                q.d[1].data_mut()[i] = orig;
                let fd = (f1 - f2) / (2.0 * h);
                max_rel = max_rel.max((g.data()[i] - fd).abs() / (1.0 + fd.abs()));
            }
        }
        assert!(max_rel <= 1e-5, "d gradient error {max_rel}");

        // F^b coupling (leaf index 6)
        let mut max_rel: f64 = 0.0;
        {
            let g = tape.grad(leaves[6]).clone();
            for i in 0..q.fb[0].len() {
                let orig = q.fb[0].data()[i];
                q.fb[0].data_mut()[i] = orig + h;
                let f1 = loss_of(&q);
                q.fb[0].data_mut()[i] = orig - h;
                let f2 = loss_of(&q);
                q.fb[0].data_mut()[i] = orig;
                let fd = (f1 - f2) / (2.0 * h);
                max_rel = max_rel.max((g.data()[i] - fd).abs() / (1.0 + fd.abs()));
            }
        }
        assert!(max_rel <= 1e-5, "F^b gradient error {max_rel}");
    }

    #[test]
    fn param_count_formula_and_exact_sum() {
        let c = param_count(32, &[32; 8]);
        assert_eq!(c.weights, 25 * 32 * 32 + 8 * 32);
        assert_eq!(c.weights, 25856);
        assert_eq!(c.biases, 8 * 32 + 32);

        let c = param_count(1, &[1]);
        assert_eq!(c.weights, 5);
        assert_eq!(c.biases, 2);

        // non-uniform: exact sum; fp 9, fq 27, fa 16 + 25, fb 20, d 9
        let c = param_count(3, &[4, 5]);
        assert_eq!(c.weights, 9 + 27 + 16 + 25 + 20 + 9);
        assert_eq!(c.biases, 9 + 3);
    }

    #[test]
    fn step_net_param_count_is_about_sixteen_thousand() {
        let c = param_count(1, &[32; 8]);
        let total = c.total();
        assert!(
            (14_000..=18_000).contains(&total),
            "step net parameter count {total}"
        );
    }
}
