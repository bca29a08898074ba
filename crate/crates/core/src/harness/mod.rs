//! Datasets, the Adam + one-cycle training loop, and experiment
//! orchestration behind the CLI.

pub mod data;
pub mod experiments;
pub mod optimizer;
pub mod train;

pub use data::{
    gen_rosenbrock2d, gen_rosenbrock_nd, gen_step, rosenbrock2d, rosenbrock_nd, rosenbrock_param,
    sine_ripple, Dataset, Rosenbrock2dVariant,
};
pub use experiments::{run_experiment, Experiment, ExperimentConfig, ExperimentResult};
pub use optimizer::{Adam, OneCycle};
pub use train::{evaluate_loss, train, TrainConfig, TrainReport};
