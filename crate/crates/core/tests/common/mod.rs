//! Shared oracles and generators for the integration suites.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bilip_core::cayley::normal_matrix;
use bilip_core::monlip::{materialize, FreeParams, LayerWeights};
use bilip_core::{Activation, Matrix};

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
/// Independent of the tridiagonalization + bisection path used by the
/// library's certificate checker.
pub fn jacobi_eigvals(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m = a.clone();
    for _ in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m.get(i, j) * m.get(i, j);
                }
            }
        }
        if off.sqrt() < 1e-12 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut evs: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    evs.sort_by(f64::total_cmp);
    evs
}

/// Smallest eigenvalue via the Jacobi oracle.
pub fn jacobi_eig_min(a: &Matrix) -> f64 {
    jacobi_eigvals(a)[0]
}

/// Deterministic family of random certified layers covering the spec'd
/// depth / width / bound grid. `count` layers are drawn by cycling the grid
/// with distinct seeds.
pub fn layer_family(count: usize, seed0: u64) -> Vec<(FreeParams, LayerWeights)> {
    let depths = [1usize, 2, 4, 8];
    let widths = [2usize, 8, 32];
    let bounds = [(0.1, 10.0), (0.5, 2.0), (1.0, 1.5)];
    let dims = [1usize, 2, 4, 8];
    let mut out = Vec::with_capacity(count);
    let mut i = 0usize;
    while out.len() < count {
        let l = depths[i % depths.len()];
        let w = widths[(i / depths.len()) % widths.len()];
        let (mu, nu) = bounds[(i / (depths.len() * widths.len())) % bounds.len()];
        let n = dims[i % dims.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed0.wrapping_add(i as u64));
        let mut params = FreeParams::init(
            n,
            &vec![w; l],
            mu,
            nu,
            Activation::Relu,
            i % 5 == 4, // every fifth layer trains the square Cayley block
            &mut rng,
        )
        .unwrap();
        for k in 0..params.layers() {
            params.d[k] = normal_matrix(w, 1, 0.1, &mut rng);
            params.b[k] = normal_matrix(w, 1, 0.5, &mut rng);
        }
        params.b_y = normal_matrix(n, 1, 0.5, &mut rng);
        let weights = materialize(&params).unwrap();
        out.push((params, weights));
        i += 1;
    }
    out
}

pub fn inf_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}
