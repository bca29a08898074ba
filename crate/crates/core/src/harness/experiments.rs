//! Experiment orchestration: configuration files, model construction per
//! experiment, training, and evaluation into a machine-readable result.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{
    gen_rosenbrock2d, gen_rosenbrock_nd, gen_step, rosenbrock2d, rosenbrock_nd, sine_ripple,
    Dataset, Rosenbrock2dVariant,
};
use super::train::{train, TrainConfig};
use crate::bilipnet::{BiLipParams, ConditionedBiLipParams, Mlp};
use crate::model_io::ModelParams;
use crate::numerics::Activation;
use crate::plnet::{empirical_bilip, PLNet};
use crate::solvers::SolverConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Step,
    Rb2d,
    Rb2dSine,
    Rb2dParam,
    RbNd,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Self::Step),
            "rb2d" => Ok(Self::Rb2d),
            "rb2d-sine" => Ok(Self::Rb2dSine),
            "rb2d-param" => Ok(Self::Rb2dParam),
            "rbNd" | "rbnd" => Ok(Self::RbNd),
            other => Err(Error::Config(format!(
                "unknown experiment `{other}` (expected step|rb2d|rb2d-sine|rb2d-param|rbNd)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Step => "step",
            Self::Rb2d => "rb2d",
            Self::Rb2dSine => "rb2d-sine",
            Self::Rb2dParam => "rb2d-param",
            Self::RbNd => "rbNd",
        }
    }
}

/// Every knob of an experiment, with per-experiment defaults. Config files
/// are flat `key = value` lines; `#` starts a comment; unknown keys are hard
/// errors.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    /// input dimension for the high-dimensional experiment
    pub dims: usize,
    pub mu: f64,
    pub nu: f64,
    pub k_layers: usize,
    /// hidden layers inside each monotone block
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub orth: bool,
    pub free_fp: bool,
    /// hidden sizes of the condition bias net (parametric experiment)
    pub bias_hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub seed: u64,
    pub certify_every: usize,
    pub log_every: usize,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
}

impl ExperimentConfig {
    pub fn default_for(exp: Experiment) -> Self {
        let base = ExperimentConfig {
            train_samples: 1000,
            test_samples: 50_000,
            dims: 20,
            mu: 0.1,
            nu: 10.0,
            k_layers: 1,
            depth: 8,
            width: 32,
            activation: Activation::Relu,
            orth: false,
            free_fp: false,
            bias_hidden: vec![64, 128],
            epochs: 400,
            batch_size: 256,
            peak_lr: 5e-3,
            seed: 0,
            certify_every: 1,
            log_every: 0,
            solver_tol: 1e-8,
            solver_max_iters: 20_000,
        };
        match exp {
            Experiment::Step => base,
            Experiment::Rb2d | Experiment::Rb2dSine => ExperimentConfig {
                train_samples: 5000,
                test_samples: 50_000,
                mu: 0.316227766016838,
                nu: 3.16227766016838,
                k_layers: 2,
                depth: 4,
                width: 64,
                orth: true,
                epochs: 300,
                peak_lr: 5e-3,
                ..base
            },
            Experiment::Rb2dParam => ExperimentConfig {
                train_samples: 10_000,
                test_samples: 20_000,
                mu: 0.04,
                nu: 16.0,
                k_layers: 2,
                depth: 4,
                width: 64,
                orth: true,
                epochs: 150,
                peak_lr: 5e-3,
                certify_every: 10,
                ..base
            },
            Experiment::RbNd => ExperimentConfig {
                train_samples: 10_000,
                test_samples: 50_000,
                mu: 5f64.powf(-0.5),
                nu: 5f64.powf(0.5),
                k_layers: 2,
                depth: 8,
                width: 128,
                orth: true,
                epochs: 150,
                batch_size: 200,
                peak_lr: 2e-3,
                certify_every: 25,
                ..base
            },
        }
    }

    /// Apply one `key = value` assignment.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
        }
        match key {
            "train_samples" => self.train_samples = num(key, value)?,
            "test_samples" => self.test_samples = num(key, value)?,
            "dims" => self.dims = num(key, value)?,
            "mu" => self.mu = num(key, value)?,
            "nu" => self.nu = num(key, value)?,
            "k_layers" => self.k_layers = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "activation" => self.activation = Activation::parse(value)?,
            "orth" => self.orth = num(key, value)?,
            "free_fp" => self.free_fp = num(key, value)?,
            "bias_hidden" => {
                self.bias_hidden = value
                    .split(',')
                    .map(|v| num("bias_hidden", v.trim()))
                    .collect::<Result<_>>()?;
            }
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "peak_lr" => self.peak_lr = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "certify_every" => self.certify_every = num(key, value)?,
            "log_every" => self.log_every = num(key, value)?,
            "solver_tol" => self.solver_tol = num(key, value)?,
            "solver_max_iters" => self.solver_max_iters = num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown config key `{other}`")));
            }
        }
        Ok(())
    }

    /// Parse a flat key=value file on top of the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected `key = value`, got `{raw}`",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        vec![self.width; self.depth]
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tol: self.solver_tol,
            max_iters: self.solver_max_iters,
            ..SolverConfig::default()
        }
    }
}

/// Machine-readable outcome of one experiment run. Everything except the
/// wall time is reproducible bitwise from (experiment, config, seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment: String,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub test_loss: f64,
    pub empirical_inv_lip: f64,
    pub empirical_lip: f64,
    pub certified_mu: f64,
    pub certified_nu: f64,
    pub certified_tau: f64,
    pub min_train_target: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_star: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_star: Option<f64>,
    /// the generating function evaluated at the recovered minimizer
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_value_at_x_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver_iters: Option<usize>,
    pub wall_time_secs: f64,
}

fn dataset_for(exp: Experiment, cfg: &ExperimentConfig, samples: usize, seed: u64) -> Result<Dataset> {
    Ok(match exp {
        Experiment::Step => gen_step(samples, seed),
        Experiment::Rb2d => gen_rosenbrock2d(Rosenbrock2dVariant::Plain, samples, seed),
        Experiment::Rb2dSine => gen_rosenbrock2d(Rosenbrock2dVariant::PlusSine, samples, seed),
        Experiment::Rb2dParam => gen_rosenbrock2d(Rosenbrock2dVariant::Parametric, samples, seed),
        Experiment::RbNd => gen_rosenbrock_nd(cfg.dims, samples, seed)?,
    })
}

/// Shift the outermost bias so the core maps the empirical argmin of the
/// targets to zero. Keeps the learnable offset `c = min target` consistent
/// at initialization instead of forcing it to plunge while the potential
/// rearranges itself.
fn center_at_argmin(params: &mut BiLipParams, data: &Dataset) -> Result<()> {
    let mut best = 0;
    for j in 1..data.len() {
        if data.targets.get(0, j) < data.targets.get(0, best) {
            best = j;
        }
    }
    let x0: Vec<f64> = (0..params.input_dim)
        .map(|i| data.inputs.get(i, best))
        .collect();
    let g0 = params.materialize()?.forward_vec(&x0)?;
    let k = params.mono.len();
    if let Some(o) = &mut params.orth[k] {
        for (i, g) in g0.iter().enumerate() {
            let v = o.q.get(i, 0) - g;
            o.q.set(i, 0, v);
        }
    } else {
        // last orthogonal slot is identity; fold the shift into the final
        // monotone layer's output bias instead
        let b_y = &mut params.mono[k - 1].b_y;
        for (i, g) in g0.iter().enumerate() {
            let v = b_y.get(i, 0) - g;
            b_y.set(i, 0, v);
        }
    }
    Ok(())
}

fn build_model(exp: Experiment, cfg: &ExperimentConfig, data: &Dataset) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let input_dim = match exp {
        Experiment::Step => 1,
        Experiment::Rb2d | Experiment::Rb2dSine | Experiment::Rb2dParam => 2,
        Experiment::RbNd => cfg.dims,
    };
    let base = BiLipParams::init(
        input_dim,
        cfg.k_layers,
        &cfg.widths(),
        cfg.mu,
        cfg.nu,
        cfg.activation,
        cfg.orth,
        cfg.free_fp,
        &mut rng,
    )?;
    Ok(match exp {
        Experiment::Step => ModelParams::BiLip(base),
        Experiment::Rb2d | Experiment::Rb2dSine | Experiment::RbNd => {
            let mut base = base;
            center_at_argmin(&mut base, data)?;
            ModelParams::Pl {
                g: base,
                c: data.min_target(),
            }
        }
        Experiment::Rb2dParam => {
            let bias_rows = ConditionedBiLipParams::bias_dim(&base);
            let mut dims = vec![2usize];
            dims.extend(&cfg.bias_hidden);
            dims.push(bias_rows);
            let bias_net = Mlp::init(&dims, cfg.activation, &mut rng)?;
            ModelParams::ConditionedPl {
                g: ConditionedBiLipParams::new(base, bias_net)?,
                c: data.min_target(),
            }
        }
    })
}

/// Generate data, build the model, train, and evaluate.
pub fn run_experiment(
    exp: Experiment,
    cfg: &ExperimentConfig,
) -> Result<(ModelParams, ExperimentResult)> {
    let start = Instant::now();
    let train_data = dataset_for(exp, cfg, cfg.train_samples, cfg.seed)?;
    let test_data = dataset_for(exp, cfg, cfg.test_samples, cfg.seed ^ 0x7e57da7a)?;

    let mut params = build_model(exp, cfg, &train_data)?;
    let report = train(
        &mut params,
        &train_data,
        &TrainConfig {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            peak_lr: cfg.peak_lr,
            seed: cfg.seed,
            certify_every: cfg.certify_every,
            log_every: cfg.log_every,
        },
    )?;
    let test_loss = super::train::evaluate_loss(&params, &test_data)?;

    // evaluation core: for the conditioned model, verify at condition zero
    let core = match &params {
        ModelParams::ConditionedPl { g, c: _ } => {
            g.materialize_for(&vec![0.0; g.condition_dim()])?
        }
        other => other.materialize_core()?,
    };
    core.certify()?;
    let bilip_domain: Vec<(f64, f64)> = train_data.domain[..core.input_dim()].to_vec();
    let (inv_lip, lip) = empirical_bilip(&core, 10_000, cfg.seed ^ 0xb111, &bilip_domain)?;

    let solver_cfg = cfg.solver_config();
    let (x_star, f_star, true_value, solver_iters) = match (&params, exp) {
        (ModelParams::Pl { c, .. }, _) => {
            let net = PLNet::new(core.clone(), *c);
            let gm = net.global_min(&solver_cfg)?;
            let truth = match exp {
                Experiment::Rb2d => Some(rosenbrock2d(gm.x[0], gm.x[1])),
                Experiment::Rb2dSine => {
                    Some(rosenbrock2d(gm.x[0], gm.x[1]) + sine_ripple(gm.x[0], gm.x[1]))
                }
                Experiment::RbNd => Some(rosenbrock_nd(&gm.x)),
                _ => None,
            };
            (
                Some(gm.x.clone()),
                Some(gm.f),
                truth,
                Some(gm.solve.total_iters()),
            )
        }
        (ModelParams::ConditionedPl { c, .. }, _) => {
            // report the minimum of the zero-condition slice
            let net = PLNet::new(core.clone(), *c);
            let gm = net.global_min(&solver_cfg)?;
            (Some(gm.x.clone()), Some(gm.f), None, Some(gm.solve.total_iters()))
        }
        _ => (None, None, None, None),
    };

    let result = ExperimentResult {
        experiment: exp.name().to_string(),
        seed: cfg.seed,
        train_samples: cfg.train_samples,
        test_samples: cfg.test_samples,
        epochs: cfg.epochs,
        final_train_loss: report.final_train_loss,
        test_loss,
        empirical_inv_lip: inv_lip,
        empirical_lip: lip,
        certified_mu: core.mu(),
        certified_nu: core.nu(),
        certified_tau: core.tau(),
        min_train_target: train_data.min_target(),
        x_star,
        f_star,
        true_value_at_x_star: true_value,
        solver_iters,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok((params, result))
}
