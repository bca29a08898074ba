//! Shared builders for the benchmark targets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bilip_core::monlip::{materialize, FreeParams, LayerWeights};
use bilip_core::Activation;

pub use rand;
pub use rand_chacha;

/// A certified random layer for solver and kernel benchmarks.
pub fn bench_layer(n: usize, widths: &[usize], mu: f64, nu: f64, seed: u64) -> LayerWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params =
        FreeParams::init(n, widths, mu, nu, Activation::Relu, false, &mut rng).unwrap();
    materialize(&params).unwrap()
}
