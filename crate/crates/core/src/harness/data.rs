//! Synthetic datasets for the experiments. Everything is generated
//! deterministically from (generator, seed, sample count).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Matrix;
use crate::{Error, Result};

/// Inputs are stored with one sample per column (dim x N); targets likewise
/// (1 x N for scalar targets). The domain box records per-dimension bounds
/// of the sampling region.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub domain: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.rows()
    }

    pub fn min_target(&self) -> f64 {
        self.targets.data().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Domain box inflated by a fraction on each side (verifier sampling).
    pub fn inflated_domain(&self, frac: f64) -> Vec<(f64, f64)> {
        self.domain
            .iter()
            .map(|(lo, hi)| {
                let pad = frac * (hi - lo) * 0.5;
                (lo - pad, hi + pad)
            })
            .collect()
    }
}

/// Step target: y = 2 for x > 0, -2 for x < 0, sampled uniformly on [-2, 2].
/// The discontinuity itself is never sampled (continuous distribution).
pub fn gen_step(n_samples: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n_samples);
    let mut ys = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = rng.gen_range(-2.0..2.0);
        xs.push(x);
        ys.push(if x > 0.0 { 2.0 } else { -2.0 });
    }
    Dataset {
        inputs: Matrix::row_vec(&xs),
        targets: Matrix::row_vec(&ys),
        domain: vec![(-2.0, 2.0)],
        seed,
    }
}

/// The rescaled two-dimensional valley function.
pub fn rosenbrock2d(x: f64, y: f64) -> f64 {
    (x - 1.0) * (x - 1.0) / 200.0 + 0.5 * (y - x * x) * (y - x * x)
}

/// Additive sine ripple that keeps the global minimum at (1, 1).
pub fn sine_ripple(x: f64, y: f64) -> f64 {
    use std::f64::consts::FRAC_PI_2;
    0.25 * ((8.0 * (x - 1.0) - FRAC_PI_2).sin() + (8.0 * (y - 1.0) - FRAC_PI_2).sin() + 2.0)
}

/// Parametric variant with movable minimum.
pub fn rosenbrock_param(x: f64, y: f64, a: f64, b: f64) -> f64 {
    (x - a) * (x - a) / 200.0 + 0.5 * (y - b * x * x) * (y - b * x * x)
}

/// Mean of consecutive-coordinate couplings; global minimum 0 at all-ones.
pub fn rosenbrock_nd(x: &[f64]) -> f64 {
    let n = x.len();
    assert!(n >= 2);
    let mut acc = 0.0;
    for i in 0..n - 1 {
        acc += rosenbrock2d(x[i], x[i + 1]);
    }
    acc / (n - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rosenbrock2dVariant {
    Plain,
    PlusSine,
    /// inputs are (x, y, a, b) with the shape parameters appended
    Parametric,
}

impl Rosenbrock2dVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "plus_sine" | "sine" => Ok(Self::PlusSine),
            "parametric" => Ok(Self::Parametric),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Samples on [-2, 2] x [-1, 3]; the parametric variant appends
/// (a, b) ~ U[-1, 1]^2 to the inputs.
pub fn gen_rosenbrock2d(
    variant: Rosenbrock2dVariant,
    n_samples: usize,
    seed: u64,
) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = match variant {
        Rosenbrock2dVariant::Parametric => 4,
        _ => 2,
    };
    let mut inputs = Matrix::zeros(dim, n_samples);
    let mut targets = Matrix::zeros(1, n_samples);
    for j in 0..n_samples {
        let x = rng.gen_range(-2.0..2.0);
        let y = rng.gen_range(-1.0..3.0);
        inputs.set(0, j, x);
        inputs.set(1, j, y);
        let t = match variant {
            Rosenbrock2dVariant::Plain => rosenbrock2d(x, y),
            Rosenbrock2dVariant::PlusSine => rosenbrock2d(x, y) + sine_ripple(x, y),
            Rosenbrock2dVariant::Parametric => {
                let a = rng.gen_range(-1.0..1.0);
                let b = rng.gen_range(-1.0..1.0);
                inputs.set(2, j, a);
                inputs.set(3, j, b);
                rosenbrock_param(x, y, a, b)
            }
        };
        targets.set(0, j, t);
    }
    let mut domain = vec![(-2.0, 2.0), (-1.0, 3.0)];
    if dim == 4 {
        domain.push((-1.0, 1.0));
        domain.push((-1.0, 1.0));
    }
    Dataset {
        inputs,
        targets,
        domain,
        seed,
    }
}

/// Uniform samples on [-2, 2]^dims of the high-dimensional valley.
pub fn gen_rosenbrock_nd(dims: usize, n_samples: usize, seed: u64) -> Result<Dataset> {
    if dims < 2 {
        return Err(Error::Config("rosenbrock needs at least 2 dims".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Matrix::zeros(dims, n_samples);
    let mut targets = Matrix::zeros(1, n_samples);
    let mut point = vec![0.0; dims];
    for j in 0..n_samples {
        for (i, p) in point.iter_mut().enumerate() {
            *p = rng.gen_range(-2.0..2.0);
            inputs.set(i, j, *p);
        }
        targets.set(0, j, rosenbrock_nd(&point));
    }
    Ok(Dataset {
        inputs,
        targets,
        domain: vec![(-2.0, 2.0); dims],
        seed,
    })
}
