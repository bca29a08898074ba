//! Iterative solvers for inverting a monotone-Lipschitz layer.
//!
//! Inverting `y = F(x)` reduces to the fixed point
//! `zhat = act_hat((V - (gamma/mu) S S^T) zhat + b_z)` with
//! `b_z = (sqrt(2 gamma)/mu) S (y - b_y) + bhat`, after which
//! `x = (y - b_y - sqrt(gamma/2) S^T zhat) / mu`. The fixed point splits into
//! three monotone operators: the affine part `(I - V) z - b_z`, the
//! subdifferential behind the activation, and the dense quadratic coupling
//! `(gamma/mu) S S^T z`.
//!
//! The primary solver is Davis-Yin splitting, which only ever applies
//! `S S^T` as two thin products and solves the affine resolvent by block
//! forward substitution (V is strictly lower triangular; the resolvent is
//! never materialized). It converges for any step `alpha in (0, mu/gamma)`.
//! The forward-step method `x <- x - alpha (F(x) - y)` is the baseline, with
//! optimal step `alpha = mu/nu^2` and rate `1 - mu^2/nu^2`.
//!
//! Residuals are inf-norm step sizes: `||z^{k+1} - z^k||_inf` for DYS and
//! `||x^{k+1} - x^k||_inf` for FSM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::monlip::LayerWeights;
use crate::numerics::Activation;
use crate::{Error, Result};

/// Which solver inverts the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Dys,
    Fsm,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Dys => "dys",
            SolverKind::Fsm => "fsm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dys" => Ok(SolverKind::Dys),
            "fsm" => Ok(SolverKind::Fsm),
            other => Err(Error::Config(format!("unknown solver `{other}`"))),
        }
    }
}

/// How the iteration state starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverInit {
    /// DYS starts from b_z, FSM from zero.
    Default,
    Zero,
    /// Uniform in [-1, 1] from a seeded stream; used for restart checks.
    Random(u64),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub kind: SolverKind,
    /// None picks the per-layer default: 0.9 mu/gamma for DYS, mu/nu^2 for FSM.
    pub alpha: Option<f64>,
    /// Convergence threshold on the inf-norm step residual.
    pub tol: f64,
    pub max_iters: usize,
    pub record_trace: bool,
    pub init: SolverInit,
    /// Skip the step-size range check (for experiments only).
    pub force_alpha: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            kind: SolverKind::Dys,
            alpha: None,
            tol: 1e-8,
            max_iters: 5000,
            record_trace: false,
            init: SolverInit::Default,
            force_alpha: false,
        }
    }
}

impl SolverConfig {
    /// Resolve the step size for a layer, validating the convergence range.
    pub fn resolve_alpha(&self, w: &LayerWeights) -> Result<f64> {
        let (hi, default) = match self.kind {
            SolverKind::Dys => {
                let bound = w.mu / w.gamma();
                (bound, 0.9 * bound)
            }
            SolverKind::Fsm => {
                let opt = w.mu / (w.nu * w.nu);
                (2.0 * opt, opt)
            }
        };
        let alpha = self.alpha.unwrap_or(default);
        if !(alpha > 0.0) || (!self.force_alpha && alpha >= hi) {
            return Err(Error::Config(format!(
                "step alpha = {alpha} outside the convergent range (0, {hi}) for {} \
                 (mu = {}, nu = {}); pass the force flag to override",
                self.kind.name(),
                w.mu,
                w.nu
            )));
        }
        Ok(alpha)
    }
}

/// Result of one inversion.
#[derive(Debug, Clone)]
pub struct Solve {
    pub x: Vec<f64>,
    /// Fixed-point hidden state at convergence (empty for FSM).
    pub zhat: Vec<f64>,
    pub iters: usize,
    pub residual: f64,
    /// (iteration, residual) pairs when tracing was requested.
    pub trace: Option<Vec<(usize, f64)>>,
}

/// Elementwise proximal operator of the convex function behind a scaled
/// activation, with the per-coordinate change of variables
/// `prox_fhat(x) = psi prox_f(x / psi)`.
///
/// ReLU is the indicator prox `max(x, 0)` for every alpha. The others solve
/// the monotone optimality condition
/// `(1 - alpha) z + alpha psi inv_act(z / psi) = x` by safeguarded
/// Newton-bisection; the condition has slope >= 1 everywhere, so the
/// residual bounds the error directly.
#[derive(Debug, Clone, Copy)]
pub struct ProxOp {
    pub activation: Activation,
}

impl ProxOp {
    pub fn new(activation: Activation) -> Self {
        ProxOp { activation }
    }

    /// Scalar prox with scaling `psi > 0`.
    pub fn eval(&self, x: f64, alpha: f64, psi: f64) -> Result<f64> {
        debug_assert!(alpha > 0.0 && psi > 0.0);
        match self.activation {
            Activation::Relu => Ok(x.max(0.0)),
            act if alpha == 1.0 => Ok(psi * act.eval(x / psi)),
            act => prox_root(act, x, alpha, psi, 0),
        }
    }

    /// Prox over a slice with per-coordinate scalings.
    pub fn apply(&self, x: &[f64], alpha: f64, psi: &[f64], out: &mut [f64]) -> Result<()> {
        for (i, ((o, &v), &p)) in out.iter_mut().zip(x).zip(psi).enumerate() {
            *o = match self.activation {
                Activation::Relu => v.max(0.0),
                act if alpha == 1.0 => p * act.eval(v / p),
                act => prox_root(act, v, alpha, p, i)?,
            };
        }
        Ok(())
    }
}

/// Inverse of the base activation on its open range.
fn act_inverse(act: Activation, t: f64) -> f64 {
    match act {
        Activation::Relu => unreachable!("relu prox is closed form"),
        Activation::Tanh => 0.5 * ((1.0 + t) / (1.0 - t)).ln(),
        Activation::Sigmoid => (t / (1.0 - t)).ln(),
        Activation::Softplus => {
            if t > 30.0 {
                t + (-(-t).exp()).ln_1p()
            } else {
                t.exp_m1().ln()
            }
        }
    }
}

/// Derivative of the inverse activation; always >= 1 on the range.
fn act_inverse_slope(act: Activation, t: f64) -> f64 {
    match act {
        Activation::Relu => unreachable!(),
        Activation::Tanh => 1.0 / (1.0 - t * t),
        Activation::Sigmoid => 1.0 / (t * (1.0 - t)),
        Activation::Softplus => 1.0 / (1.0 - (-t).exp()),
    }
}

fn g_value(act: Activation, z: f64, alpha: f64, psi: f64) -> f64 {
    (1.0 - alpha) * z + alpha * psi * act_inverse(act, z / psi)
}

fn prox_root(act: Activation, x: f64, alpha: f64, psi: f64, coord: usize) -> Result<f64> {
    let t_top = 1.0 - f64::EPSILON / 2.0;
    let (mut lo, mut hi) = match act {
        Activation::Tanh => {
            // odd and slope >= 1 through the origin: the root shares the sign
            // of x and |z*| <= |x|
            if x >= 0.0 {
                (0.0, (psi * t_top).min(x))
            } else {
                ((-psi * t_top).max(x), 0.0)
            }
        }
        Activation::Sigmoid => (psi * 1e-300, psi * t_top),
        Activation::Softplus => {
            let mut hi = psi.max(x).max(1.0);
            let mut tries = 0;
            while g_value(act, hi, alpha, psi) < x {
                hi *= 2.0;
                tries += 1;
                if tries > 200 {
                    return Err(Error::RootFinding {
                        coord,
                        detail: "bracket expansion failed".into(),
                    });
                }
            }
            (psi * 1e-300, hi)
        }
        Activation::Relu => unreachable!(),
    };
    if x == 0.0 && matches!(act, Activation::Tanh) {
        return Ok(0.0);
    }
    // clamp when the target lies beyond the representable range
    if g_value(act, hi, alpha, psi) < x {
        return Ok(hi);
    }
    if g_value(act, lo, alpha, psi) > x {
        return Ok(lo);
    }

    let mut z = (psi * act.eval(x / psi)).clamp(lo.min(hi), hi.max(lo));
    if z <= lo || z >= hi {
        z = 0.5 * (lo + hi);
    }
    for _ in 0..60 {
        let t = z / psi;
        let r = g_value(act, z, alpha, psi) - x;
        if r.abs() <= 1e-13 * (1.0 + x.abs()) {
            return Ok(z);
        }
        if r > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let slope = (1.0 - alpha) + alpha * act_inverse_slope(act, t);
        let mut next = z - r / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == z {
            return Ok(z);
        }
        z = next;
    }
    if (hi - lo).abs() <= 1e-12 * (1.0 + hi.abs()) {
        return Ok(0.5 * (lo + hi));
    }
    Err(Error::RootFinding {
        coord,
        detail: format!("no convergence in 60 iterations (x = {x}, alpha = {alpha})"),
    })
}

/// Elementwise prox with unit scaling.
pub fn prox(op: &ProxOp, x: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let psi = vec![1.0; x.len()];
    let mut out = vec![0.0; x.len()];
    op.apply(x, alpha, &psi, &mut out)?;
    Ok(out)
}

/// Block-index helper over the stacked hidden state of a layer.
struct Blocks<'a> {
    w: &'a LayerWeights,
    offsets: Vec<usize>,
    m: usize,
}

impl<'a> Blocks<'a> {
    fn new(w: &'a LayerWeights) -> Self {
        let mut offsets = Vec::with_capacity(w.layers() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &wd in &w.widths {
            acc += wd;
            offsets.push(acc);
        }
        Blocks { w, offsets, m: acc }
    }

    fn block<'b>(&self, v: &'b [f64], k: usize) -> &'b [f64] {
        &v[self.offsets[k]..self.offsets[k + 1]]
    }

    /// out = S^T z (length n)
    fn st_times(&self, z: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for k in 0..self.w.layers() {
            let s = &self.w.s_blocks[k];
            let zb = self.block(z, k);
            for (i, &zi) in zb.iter().enumerate() {
                if zi == 0.0 {
                    continue;
                }
                for (o, &sij) in out.iter_mut().zip(s.row(i)) {
                    *o += zi * sij;
                }
            }
        }
    }

    /// out = S t (length m)
    fn s_times(&self, t: &[f64], out: &mut [f64]) {
        for k in 0..self.w.layers() {
            let s = &self.w.s_blocks[k];
            let ob = &mut out[self.offsets[k]..self.offsets[k + 1]];
            for (i, o) in ob.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (&sij, &tj) in s.row(i).iter().zip(t) {
                    acc += sij * tj;
                }
                *o = acc;
            }
        }
    }
}

fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn initial_state(init: SolverInit, default: &[f64], len: usize) -> Vec<f64> {
    match init {
        SolverInit::Default => default.to_vec(),
        SolverInit::Zero => vec![0.0; len],
        SolverInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
        }
    }
}

fn flat_psi(w: &LayerWeights) -> Vec<f64> {
    let mut psi = Vec::with_capacity(w.hidden_dim());
    for p in &w.psi {
        psi.extend_from_slice(p.data());
    }
    psi
}

fn flat_bhat(w: &LayerWeights) -> Vec<f64> {
    let mut b = Vec::with_capacity(w.hidden_dim());
    for bh in &w.bhat {
        b.extend_from_slice(bh.data());
    }
    b
}

fn check_dims(w: &LayerWeights, y: &[f64]) -> Result<()> {
    if y.len() != w.input_dim {
        return Err(Error::Shape(format!(
            "invert: expected target of length {}, got {}",
            w.input_dim,
            y.len()
        )));
    }
    Ok(())
}

/// Invert `y = F(x)` with Davis-Yin three-operator splitting.
pub fn dys_invert(w: &LayerWeights, y: &[f64], cfg: &SolverConfig) -> Result<Solve> {
    check_dims(w, y)?;
    let cfg_dys = SolverConfig {
        kind: SolverKind::Dys,
        ..cfg.clone()
    };
    let alpha = cfg_dys.resolve_alpha(w)?;
    let gamma = w.gamma();
    let blocks = Blocks::new(w);
    let m = blocks.m;
    let n = w.input_dim;
    let psi = flat_psi(w);
    let prox_op = ProxOp::new(w.activation);

    // b_z = (sqrt(2 gamma)/mu) S (y - b_y) + bhat
    let shifted: Vec<f64> = y
        .iter()
        .zip(w.b_y.data())
        .map(|(yi, bi)| yi - bi)
        .collect();
    let mut b_z = vec![0.0; m];
    blocks.s_times(&shifted, &mut b_z);
    let scale = (2.0 * gamma).sqrt() / w.mu;
    let bhat = flat_bhat(w);
    for (bz, bh) in b_z.iter_mut().zip(&bhat) {
        *bz = scale * *bz + bh;
    }

    let mut u = initial_state(cfg.init, &b_z, m);
    let mut z_half = vec![0.0; m];
    let mut z_next = vec![0.0; m];
    let mut z_prev: Option<Vec<f64>> = None;
    let mut st_z = vec![0.0; n];
    let mut c_z = vec![0.0; m];
    let mut trace = cfg.record_trace.then(Vec::new);

    let coupling = gamma / w.mu;
    let mut inner_tol = cfg.tol;
    let mut iters = 0;
    let mut residual = f64::INFINITY;
    for k in 1..=cfg.max_iters {
        iters = k;
        prox_op.apply(&u, alpha, &psi, &mut z_half)?;
        blocks.st_times(&z_half, &mut st_z);
        blocks.s_times(&st_z, &mut c_z);
        // z^{k+1} from ((1+alpha) I - alpha V) z = u_half + alpha v_half by
        // block forward substitution, with v_half = b_z - (gamma/mu) S S^T z_half
        for l in 0..w.layers() {
            let (done, rest) = z_next.split_at_mut(blocks.offsets[l]);
            let zb = &mut rest[..blocks.offsets[l + 1] - blocks.offsets[l]];
            let ub = blocks.block(&u, l);
            let zh = blocks.block(&z_half, l);
            let bz = blocks.block(&b_z, l);
            let cz = blocks.block(&c_z, l);
            for (i, zo) in zb.iter_mut().enumerate() {
                let mut t = bz[i] - coupling * cz[i];
                if l > 0 {
                    let v = &w.v_blocks[l - 1];
                    let zprev = &done[blocks.offsets[l - 1]..blocks.offsets[l]];
                    for (&vij, &zj) in v.row(i).iter().zip(zprev) {
                        t += vij * zj;
                    }
                }
                let u_half = 2.0 * zh[i] - ub[i];
                *zo = (alpha * t + u_half) / (1.0 + alpha);
            }
        }
        for ((ui, &zn), &zh) in u.iter_mut().zip(&z_next).zip(&z_half) {
            *ui += zn - zh;
        }
        residual = match &z_prev {
            Some(zp) => inf_norm_diff(&z_next, zp),
            None => inf_norm_diff(&z_next, &z_half),
        };
        if let Some(t) = &mut trace {
            t.push((k, residual));
        }
        if residual <= inner_tol {
            // the step residual can undersell the true defect when the
            // coupling constants are large, so accept only once the
            // reconstructed preimage actually reproduces y
            blocks.st_times(&z_half, &mut st_z);
            let g2 = (gamma / 2.0).sqrt();
            let x: Vec<f64> = shifted
                .iter()
                .zip(&st_z)
                .map(|(s, t)| (s - g2 * t) / w.mu)
                .collect();
            let defect = inf_norm_diff(&w.forward_vec(&x)?, y);
            if defect <= 10.0 * cfg.tol {
                return Ok(Solve {
                    x,
                    zhat: z_half,
                    iters,
                    residual,
                    trace,
                });
            }
            inner_tol = (inner_tol * 0.1).max(1e-15);
        }
        match &mut z_prev {
            Some(zp) => zp.copy_from_slice(&z_next),
            None => z_prev = Some(z_next.clone()),
        }
    }
    Err(Error::NonConvergence {
        iters,
        residual,
        trace: trace.unwrap_or_default(),
    })
}

/// Invert `y = F(x)` with the forward-step method.
pub fn fsm_invert(w: &LayerWeights, y: &[f64], cfg: &SolverConfig) -> Result<Solve> {
    check_dims(w, y)?;
    let cfg_fsm = SolverConfig {
        kind: SolverKind::Fsm,
        ..cfg.clone()
    };
    let alpha = cfg_fsm.resolve_alpha(w)?;
    let n = w.input_dim;
    let zeros = vec![0.0; n];
    let mut x = initial_state(cfg.init, &zeros, n);
    let mut trace = cfg.record_trace.then(Vec::new);

    let mut inner_tol = cfg.tol;
    let mut iters = 0;
    let mut residual = f64::INFINITY;
    for k in 1..=cfg.max_iters {
        iters = k;
        let fx = w.forward_vec(&x)?;
        residual = 0.0;
        for (xi, (fi, yi)) in x.iter_mut().zip(fx.iter().zip(y)) {
            let step = alpha * (fi - yi);
            residual = residual.max(step.abs());
            *xi -= step;
        }
        if let Some(t) = &mut trace {
            t.push((k, residual));
        }
        if residual <= inner_tol {
            // x has already taken the step, so re-check its own defect
            let defect_now = inf_norm_diff(&w.forward_vec(&x)?, y);
            if defect_now <= 10.0 * cfg.tol {
                return Ok(Solve {
                    x,
                    zhat: Vec::new(),
                    iters,
                    residual,
                    trace,
                });
            }
            inner_tol = (inner_tol * 0.1).max(1e-15);
        }
    }
    Err(Error::NonConvergence {
        iters,
        residual,
        trace: trace.unwrap_or_default(),
    })
}

/// Invert with the solver selected in the configuration.
pub fn invert(w: &LayerWeights, y: &[f64], cfg: &SolverConfig) -> Result<Solve> {
    match cfg.kind {
        SolverKind::Dys => dys_invert(w, y, cfg),
        SolverKind::Fsm => fsm_invert(w, y, cfg),
    }
}

/// Header line for trace CSV files.
pub const TRACE_CSV_HEADER: &str = "solver,alpha,iter,residual";

/// Append trace rows in the CSV schema `solver,alpha,iter,residual`.
pub fn append_trace_csv(buf: &mut String, solver: &str, alpha: f64, trace: &[(usize, f64)]) {
    use std::fmt::Write;
    for (iter, residual) in trace {
        let _ = writeln!(buf, "{solver},{alpha},{iter},{residual:e}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cayley::normal_matrix;
    use crate::monlip::{materialize, FreeParams};
    use crate::numerics::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(
        seed: u64,
        n: usize,
        widths: &[usize],
        mu: f64,
        nu: f64,
        act: Activation,
    ) -> LayerWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = FreeParams::init(n, widths, mu, nu, act, false, &mut rng).unwrap();
        for k in 0..p.layers() {
            p.d[k] = normal_matrix(widths[k], 1, 0.1, &mut rng);
            p.b[k] = normal_matrix(widths[k], 1, 0.5, &mut rng);
        }
        p.b_y = normal_matrix(n, 1, 0.5, &mut rng);
        materialize(&p).unwrap()
    }

    #[test]
    fn relu_prox_is_clamp_for_any_alpha() {
        let op = ProxOp::new(Activation::Relu);
        for alpha in [0.01, 1.0, 7.3] {
            let out = prox(&op, &[-2.0, 3.0], alpha).unwrap();
            assert_eq!(out, vec![0.0, 3.0]);
        }
    }

    #[test]
    fn prox_at_unit_alpha_reproduces_scaled_activation() {
        for act in [
            Activation::Relu,
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Softplus,
        ] {
            let op = ProxOp::new(act);
            for psi in [0.5, 1.0, 2.0] {
                let mut x = -6.0;
                while x <= 6.0 {
                    let got = op.eval(x, 1.0, psi).unwrap();
                    let want = psi * act.eval(x / psi);
                    assert!(
                        (got - want).abs() <= 1e-9,
                        "{act:?} psi={psi} x={x}: {got} vs {want}"
                    );
                    x += 0.01;
                }
            }
        }
    }

    #[test]
    fn tanh_prox_at_origin_is_zero() {
        let op = ProxOp::new(Activation::Tanh);
        for alpha in [0.3, 1.0, 2.5] {
            assert_eq!(op.eval(0.0, alpha, 1.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn prox_root_finding_inverts_the_optimality_condition() {
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softplus] {
            for alpha in [0.3, 2.0] {
                for psi in [0.5, 2.0] {
                    for i in 1..40 {
                        let t = match act {
                            Activation::Tanh => -0.96 + 0.049 * i as f64,
                            _ => 0.024 * i as f64 + 0.001,
                        };
                        if matches!(act, Activation::Tanh | Activation::Sigmoid) && t.abs() >= 0.97
                        {
                            continue;
                        }
                        let z_star = psi * t;
                        let x = g_value(act, z_star, alpha, psi);
                        let z = ProxOp::new(act).eval(x, alpha, psi).unwrap();
                        assert!(
                            (z - z_star).abs() <= 1e-9 * (1.0 + z_star.abs()),
                            "{act:?} alpha={alpha} psi={psi} t={t}: {z} vs {z_star}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn prox_is_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for act in [
            Activation::Relu,
            Activation::Tanh,
            Activation::Sigmoid,
            Activation::Softplus,
        ] {
            let op = ProxOp::new(act);
            for alpha in [0.2, 1.0, 3.0] {
                for _ in 0..300 {
                    let a = rng.gen_range(-5.0..5.0);
                    let b = rng.gen_range(-5.0..5.0);
                    let pa = op.eval(a, alpha, 1.3).unwrap();
                    let pb = op.eval(b, alpha, 1.3).unwrap();
                    assert!(
                        (pa - pb).abs() <= (a - b).abs() + 1e-12,
                        "{act:?} alpha={alpha}: |{pa}-{pb}| > |{a}-{b}|"
                    );
                }
            }
        }
    }

    #[test]
    fn decoupled_layer_inverts_in_one_iteration() {
        // S = 0, V = 0, nonnegative bhat: x = (y - b_y)/mu is exact immediately
        let mut p = FreeParams::zeros(3, &[4], 0.5, 2.0, Activation::Relu).unwrap();
        p.b = vec![Matrix::col_vec(&[0.2, 0.0, 1.0, 0.5])];
        p.b_y = Matrix::col_vec(&[1.0, -1.0, 2.0]);
        let w = materialize(&p).unwrap();
        let y = [2.0, 0.5, -1.0];
        let cfg = SolverConfig {
            record_trace: true,
            ..SolverConfig::default()
        };
        let sol = dys_invert(&w, &y, &cfg).unwrap();
        assert_eq!(sol.iters, 1);
        for i in 0..3 {
            let want = (y[i] - p.b_y.get(i, 0)) / 0.5;
            assert!((sol.x[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn dys_round_trip_recovers_the_preimage() {
        let w = random_layer(7, 4, &[8, 8], 0.5, 2.0, Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..10 {
            let x0: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = w.forward_vec(&x0).unwrap();
            let sol = dys_invert(&w, &y, &SolverConfig::default()).unwrap();
            let err = inf_norm_diff(&sol.x, &x0);
            assert!(err <= 1e-6, "round trip error {err}");
        }
    }

    #[test]
    fn dys_round_trip_with_tanh_activation() {
        let w = random_layer(8, 3, &[6, 6], 0.4, 2.5, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for _ in 0..5 {
            let x0: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = w.forward_vec(&x0).unwrap();
            let sol = dys_invert(&w, &y, &SolverConfig::default()).unwrap();
            assert!(inf_norm_diff(&sol.x, &x0) <= 1e-6);
        }
    }

    #[test]
    fn dys_fixed_point_equation_holds_at_convergence() {
        let w = random_layer(9, 3, &[5, 5], 0.5, 2.0, Activation::Relu);
        let y = [0.7, -0.4, 1.2];
        let cfg = SolverConfig::default();
        let sol = dys_invert(&w, &y, &cfg).unwrap();

        // zhat = act_hat((V - gamma/mu S S^T) zhat + b_z)
        let blocks = Blocks::new(&w);
        let m = blocks.m;
        let gamma = w.gamma();
        let shifted: Vec<f64> = y.iter().zip(w.b_y.data()).map(|(a, b)| a - b).collect();
        let mut b_z = vec![0.0; m];
        blocks.s_times(&shifted, &mut b_z);
        let scale = (2.0 * gamma).sqrt() / w.mu;
        for (bz, bh) in b_z.iter_mut().zip(&flat_bhat(&w)) {
            *bz = scale * *bz + bh;
        }
        let mut st = vec![0.0; 3];
        blocks.st_times(&sol.zhat, &mut st);
        let mut rhs = vec![0.0; m];
        blocks.s_times(&st, &mut rhs);
        for (i, r) in rhs.iter_mut().enumerate().take(m) {
            *r = b_z[i] - gamma / w.mu * *r;
        }
        for l in 1..w.layers() {
            let v = &w.v_blocks[l - 1];
            let zprev = blocks.block(&sol.zhat, l - 1);
            let off = blocks.offsets[l];
            for i in 0..v.rows() {
                for (&vij, &zj) in v.row(i).iter().zip(zprev) {
                    rhs[off + i] += vij * zj;
                }
            }
        }
        let psi = flat_psi(&w);
        let mut defect: f64 = 0.0;
        for i in 0..m {
            let val = psi[i] * w.activation.eval(rhs[i] / psi[i]);
            defect = defect.max((val - sol.zhat[i]).abs());
        }
        assert!(defect <= 10.0 * cfg.tol, "fixed point defect {defect}");
    }

    #[test]
    fn dys_converges_across_the_step_range_and_faster_for_larger_alpha() {
        let w = random_layer(10, 3, &[6, 6], 0.5, 2.0, Activation::Relu);
        let y = w.forward_vec(&[0.3, -1.0, 0.8]).unwrap();
        let bound = w.mu / w.gamma();
        let mut iters = Vec::new();
        for frac in [0.1, 0.5, 0.9] {
            let cfg = SolverConfig {
                alpha: Some(frac * bound),
                ..SolverConfig::default()
            };
            let sol = dys_invert(&w, &y, &cfg).unwrap();
            iters.push(sol.iters);
        }
        assert!(
            iters[0] >= iters[1] && iters[1] >= iters[2],
            "iteration counts not decreasing with alpha: {iters:?}"
        );
    }

    #[test]
    fn fsm_decoupled_layer_converges_geometrically() {
        let mut p = FreeParams::zeros(2, &[3], 0.5, 2.0, Activation::Relu).unwrap();
        p.b_y = Matrix::col_vec(&[1.0, -0.5]);
        let w = materialize(&p).unwrap();
        let y = [3.0, 0.5];
        let cfg = SolverConfig {
            kind: SolverKind::Fsm,
            record_trace: true,
            ..SolverConfig::default()
        };
        let sol = fsm_invert(&w, &y, &cfg).unwrap();
        for i in 0..2 {
            let want = (y[i] - p.b_y.get(i, 0)) / 0.5;
            assert!((sol.x[i] - want).abs() <= 1e-6);
        }
        // the affine layer contracts residuals by exactly 1 - alpha mu
        let trace = sol.trace.unwrap();
        let rate = 1.0 - (w.mu / (w.nu * w.nu)) * w.mu;
        for pair in trace.windows(2) {
            let measured = pair[1].1 / pair[0].1;
            assert!(measured <= rate + 1e-6, "contraction {measured} vs {rate}");
        }
    }

    #[test]
    fn fsm_and_dys_agree_and_fsm_contracts_at_its_rate() {
        let w = random_layer(11, 3, &[6, 6], 0.5, 2.0, Activation::Relu);
        let x0 = [0.9, -0.2, 0.4];
        let y = w.forward_vec(&x0).unwrap();
        let dys = dys_invert(&w, &y, &SolverConfig::default()).unwrap();
        let fsm_cfg = SolverConfig {
            kind: SolverKind::Fsm,
            record_trace: true,
            ..SolverConfig::default()
        };
        let fsm = fsm_invert(&w, &y, &fsm_cfg).unwrap();
        assert!(inf_norm_diff(&dys.x, &fsm.x) <= 2e-7);
        assert!(inf_norm_diff(&fsm.x, &x0) <= 1e-6);
        assert!(
            dys.iters <= fsm.iters,
            "dys {} vs fsm {}",
            dys.iters,
            fsm.iters
        );

        // empirical contraction factor of the residual after the transient
        let trace = fsm.trace.unwrap();
        let rate = 1.0 - (w.mu * w.mu) / (w.nu * w.nu);
        let mut worst: f64 = 0.0;
        for pair in trace[trace.len() / 2..].windows(2) {
            worst = worst.max(pair[1].1 / pair[0].1);
        }
        assert!(worst <= rate + 0.05, "contraction {worst} vs rate {rate}");
    }

    #[test]
    fn trace_reaches_tolerance_and_respects_iteration_cap() {
        let w = random_layer(12, 2, &[4, 4], 0.5, 2.0, Activation::Relu);
        let y = [0.2, -0.7];
        let cfg = SolverConfig {
            record_trace: true,
            ..SolverConfig::default()
        };
        let sol = dys_invert(&w, &y, &cfg).unwrap();
        let trace = sol.trace.unwrap();
        assert!(trace.len() <= cfg.max_iters);
        assert!(trace.last().unwrap().1 <= cfg.tol);
        assert!(trace.windows(2).all(|p| p[1].0 == p[0].0 + 1));
    }

    #[test]
    fn alpha_outside_range_is_rejected_unless_forced() {
        let w = random_layer(13, 2, &[4], 0.5, 2.0, Activation::Relu);
        let bad = SolverConfig {
            alpha: Some(w.mu / w.gamma() * 1.5),
            ..SolverConfig::default()
        };
        assert!(matches!(
            dys_invert(&w, &[0.1, 0.2], &bad),
            Err(Error::Config(_))
        ));
        let forced = SolverConfig {
            alpha: Some(w.mu / w.gamma() * 1.02),
            force_alpha: true,
            max_iters: 20000,
            ..SolverConfig::default()
        };
        assert!(dys_invert(&w, &[0.1, 0.2], &forced).is_ok());
    }

    #[test]
    fn non_convergence_carries_residual_and_trace() {
        let w = random_layer(14, 3, &[6, 6], 0.5, 2.0, Activation::Relu);
        let y = [0.5, 0.1, -0.3];
        let cfg = SolverConfig {
            max_iters: 3,
            record_trace: true,
            ..SolverConfig::default()
        };
        match dys_invert(&w, &y, &cfg) {
            Err(Error::NonConvergence {
                iters,
                residual,
                trace,
            }) => {
                assert_eq!(iters, 3);
                assert!(residual > 0.0);
                assert_eq!(trace.len(), 3);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_trace_format() {
        let mut buf = String::from(TRACE_CSV_HEADER);
        buf.push('\n');
        append_trace_csv(&mut buf, "dys", 0.25, &[(1, 0.5), (2, 0.05)]);
        let lines: Vec<&str> = buf.lines().collect();
        assert_eq!(lines[0], "solver,alpha,iter,residual");
        assert!(lines[1].starts_with("dys,0.25,1,"));
    }
}
