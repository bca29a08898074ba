//! Scalar potential networks `f(x) = ||G(x)||^2 / 2 + c` over a bi-Lipschitz
//! core `G`.
//!
//! Because `G` is mu-inverse Lipschitz, `f` satisfies the
//! Polyak-Lojasiewicz inequality `||grad f(x)||^2 / 2 >= m (f(x) - f*)` with
//! `m = mu^2`, so it is non-convex in general yet has a unique global
//! minimum `x* = G^{-1}(0)` with value `c`, computed by running the network
//! backwards instead of descending the gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilipnet::{BiLipModel, InverseSolve};
use crate::monlip::register_const;
use crate::numerics::{Matrix, NodeId, Tape};
use crate::solvers::SolverConfig;
use crate::{Error, Result};

/// A Polyak-Lojasiewicz network: bi-Lipschitz core plus quadratic potential.
#[derive(Debug, Clone)]
pub struct PLNet {
    pub g: BiLipModel,
    /// learnable offset; the global minimum value
    pub c: f64,
}

/// Location and value of the global minimum, with solver statistics.
#[derive(Debug, Clone)]
pub struct GlobalMin {
    pub x: Vec<f64>,
    pub f: f64,
    pub solve: InverseSolve,
}

impl PLNet {
    pub fn new(g: BiLipModel, c: f64) -> Self {
        PLNet { g, c }
    }

    pub fn input_dim(&self) -> usize {
        self.g.input_dim()
    }

    /// PL constant m = mu^2 of the certified core.
    pub fn pl_constant(&self) -> f64 {
        let mu = self.g.mu();
        mu * mu
    }

    /// f over a batch of columns.
    pub fn f_eval(&self, x: &Matrix) -> Result<Vec<f64>> {
        let gx = self.g.forward(x)?;
        let mut out = vec![self.c; x.cols()];
        for j in 0..gx.cols() {
            let mut acc = 0.0;
            for i in 0..gx.rows() {
                let v = gx.get(i, j);
                acc += v * v;
            }
            out[j] += 0.5 * acc;
        }
        Ok(out)
    }

    pub fn f_eval_vec(&self, x: &[f64]) -> Result<f64> {
        Ok(self.f_eval(&Matrix::col_vec(x))?[0])
    }

    /// Record the potential on a tape with the model weights as constants;
    /// returns the (1 x B) node of per-sample values of f - c.
    fn build_potential(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        for (k, mono) in self.g.mono.iter().enumerate() {
            cur = self.build_orth(tape, k, cur)?;
            let mt = register_const(tape, mono)?;
            cur = crate::monlip::build_forward(tape, &mt, cur, None)?;
        }
        cur = self.build_orth(tape, self.g.mono.len(), cur)?;
        let sq = tape.hadamard(cur, cur)?;
        let cs = tape.col_sum(sq)?;
        tape.scale(cs, 0.5)
    }

    fn build_orth(&self, tape: &mut Tape, idx: usize, x: NodeId) -> Result<NodeId> {
        let o = &self.g.orth[idx];
        let p = tape.constant(o.p().clone());
        let q = tape.constant(o.q().clone());
        let px = tape.matmul(p, x)?;
        tape.add_bias(px, q)
    }

    /// Per-sample input gradients of f, columns matching `x`.
    ///
    /// Samples are independent columns, so differentiating the batch sum
    /// recovers every per-sample gradient in one backward sweep.
    pub fn grad_batch(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let pot = self.build_potential(&mut tape, xid)?;
        let root = tape.sum_all(pot)?;
        tape.backward(root)?;
        Ok(tape.grad(xid).clone())
    }

    pub fn grad_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.grad_batch(&Matrix::col_vec(x))?.data().to_vec())
    }

    /// Unique global minimum `x* = G^{-1}(0)`, computed by analytic
    /// orthogonal inverses plus the splitting solver.
    pub fn global_min(&self, cfg: &SolverConfig) -> Result<GlobalMin> {
        let zero = vec![0.0; self.input_dim()];
        let solve = self.g.inverse(&zero, cfg)?;
        let f = self.f_eval_vec(&solve.x)?;
        // the layer post-checks already bound ||G(x*)||, so f - c is O(tol^2)
        let slack = 1e3 * self.input_dim() as f64 * cfg.tol * cfg.tol;
        if (f - self.c).abs() > slack.max(1e-12) {
            return Err(Error::NonConvergence {
                iters: solve.total_iters(),
                residual: f - self.c,
                trace: Vec::new(),
            });
        }
        Ok(GlobalMin {
            x: solve.x.clone(),
            f,
            solve,
        })
    }

    /// Count PL-inequality violations over seeded uniform samples from a
    /// box domain. `f_star` comes from `global_min`; using the computed
    /// value rather than `c` only makes the check stricter-side safe.
    pub fn pl_check(
        &self,
        samples: usize,
        seed: u64,
        domain: &[(f64, f64)],
        f_star: f64,
    ) -> Result<PlCheck> {
        if domain.len() != self.input_dim() {
            return Err(Error::Shape("pl_check domain dimension mismatch".into()));
        }
        let m = self.pl_constant();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut violations = 0usize;
        let mut worst = f64::INFINITY;
        let mut remaining = samples;
        while remaining > 0 {
            let batch = remaining.min(256);
            let x = Matrix::from_fn(self.input_dim(), batch, |i, _| {
                let (lo, hi) = domain[i];
                rng.gen_range(lo..hi)
            });
            let f = self.f_eval(&x)?;
            let grads = self.grad_batch(&x)?;
            for j in 0..batch {
                let mut gn2 = 0.0;
                for i in 0..grads.rows() {
                    let v = grads.get(i, j);
                    gn2 += v * v;
                }
                let margin = 0.5 * gn2 - m * (f[j] - f_star);
                worst = worst.min(margin);
                if margin < -1e-7 {
                    violations += 1;
                }
            }
            remaining -= batch;
        }
        Ok(PlCheck {
            samples,
            seed,
            violations,
            worst_margin: worst,
        })
    }
}

/// Outcome of a PL-inequality sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlCheck {
    pub samples: usize,
    pub seed: u64,
    pub violations: usize,
    /// min over samples of ||grad f||^2/2 - m (f - f*); negative means violated
    pub worst_margin: f64,
}

/// Finite-difference estimates of the inverse-Lipschitz and Lipschitz
/// constants of a model over a box domain: ratios `||dG|| / ||dx||` for
/// seeded base points with short random displacements.
pub fn empirical_bilip(
    g: &BiLipModel,
    pairs: usize,
    seed: u64,
    domain: &[(f64, f64)],
) -> Result<(f64, f64)> {
    if domain.len() != g.input_dim() {
        return Err(Error::Shape("empirical_bilip domain dimension mismatch".into()));
    }
    let n = g.input_dim();
    let diam = domain
        .iter()
        .map(|(lo, hi)| hi - lo)
        .fold(0.0f64, f64::max);
    let delta = 1e-4 * diam.max(1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo_est = f64::INFINITY;
    let mut hi_est = 0.0f64;
    let mut remaining = pairs;
    while remaining > 0 {
        let batch = remaining.min(256);
        let mut x1 = Matrix::zeros(n, batch);
        let mut x2 = Matrix::zeros(n, batch);
        for j in 0..batch {
            let mut dir = vec![0.0; n];
            let mut norm = 0.0;
            for d in dir.iter_mut() {
                *d = rng.gen_range(-1.0..1.0f64);
                norm += *d * *d;
            }
            let norm = norm.sqrt().max(1e-12);
            for i in 0..n {
                let (lo, hi) = domain[i];
                let base = rng.gen_range(lo..hi);
                x1.set(i, j, base);
                x2.set(i, j, base + delta * dir[i] / norm);
            }
        }
        let y1 = g.forward(&x1)?;
        let y2 = g.forward(&x2)?;
        for j in 0..batch {
            let mut din = 0.0;
            let mut dout = 0.0;
            for i in 0..n {
                let a = x1.get(i, j) - x2.get(i, j);
                din += a * a;
                let b = y1.get(i, j) - y2.get(i, j);
                dout += b * b;
            }
            let ratio = (dout / din).sqrt();
            lo_est = lo_est.min(ratio);
            hi_est = hi_est.max(ratio);
        }
        remaining -= batch;
    }
    Ok((lo_est, hi_est))
}

/// Combined verification artifact emitted by the CLI: PL sweep plus
/// empirical bi-Lipschitz estimates, bit-exactly recomputable from the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub seed: u64,
    pub sample_count: usize,
    pub certified_mu: f64,
    pub certified_nu: f64,
    pub certified_tau: f64,
    pub pl_constant: f64,
    pub f_star: f64,
    pub pl_violations: usize,
    pub pl_worst_margin: f64,
    pub bilip_ratio_min: f64,
    pub bilip_ratio_max: f64,
}

/// Run the full verifier suite for a potential network.
pub fn verify(
    net: &PLNet,
    samples: usize,
    seed: u64,
    domain: &[(f64, f64)],
    cfg: &SolverConfig,
) -> Result<VerificationReport> {
    let gm = net.global_min(cfg)?;
    let pl = net.pl_check(samples, seed, domain, gm.f)?;
    let (lo, hi) = empirical_bilip(&net.g, samples, seed.wrapping_add(1), domain)?;
    Ok(VerificationReport {
        seed,
        sample_count: samples,
        certified_mu: net.g.mu(),
        certified_nu: net.g.nu(),
        certified_tau: net.g.tau(),
        pl_constant: net.pl_constant(),
        f_star: gm.f,
        pl_violations: pl.violations,
        pl_worst_margin: pl.worst_margin,
        bilip_ratio_min: lo,
        bilip_ratio_max: hi,
    })
}

/// Gradient descent with Armijo backtracking until `f - f_star <= target`.
/// Returns the final iterate; used to probe that sub-level sets funnel into
/// the global minimum.
pub fn descend_to_min(
    net: &PLNet,
    x0: &[f64],
    f_star: f64,
    target: f64,
    max_steps: usize,
) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut f = net.f_eval_vec(&x)?;
    let mut step = 1.0;
    for _ in 0..max_steps {
        if f - f_star <= target {
            return Ok(x);
        }
        let g = net.grad_vec(&x)?;
        let gn2: f64 = g.iter().map(|v| v * v).sum();
        if gn2 == 0.0 {
            return Ok(x);
        }
        // backtracking line search along -grad
        let mut t = step;
        loop {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - t * gi).collect();
            let fc = net.f_eval_vec(&cand)?;
            if fc <= f - 0.25 * t * gn2 {
                x = cand;
                f = fc;
                step = (t * 2.0).min(1e3);
                break;
            }
            t *= 0.5;
            if t < 1e-18 {
                return Ok(x);
            }
        }
    }
    if f - f_star <= target {
        Ok(x)
    } else {
        Err(Error::NonConvergence {
            iters: max_steps,
            residual: f - f_star,
            trace: Vec::new(),
        })
    }
}
