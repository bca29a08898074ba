//! Minibatch training: Adam with bias correction, one-cycle linear learning
//! rate, and deterministic shuffling from the run seed. The loss is the
//! mean of half squared errors, the convention all reported losses use.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;
use super::optimizer::{Adam, OneCycle};
use crate::model_io::ModelParams;
use crate::numerics::{Matrix, NodeId, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub seed: u64,
    /// run the certificate checker every this many epochs (0 = never)
    pub certify_every: usize,
    /// print a progress line to stderr every this many epochs (0 = silent)
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            peak_lr: 1e-2,
            seed: 0,
            certify_every: 1,
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// full-data loss after the final update (initial loss for zero epochs)
    pub final_train_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// The recorded loss graph for one batch size.
struct TrainGraph {
    tape: Tape,
    leaves: Vec<NodeId>,
    x: NodeId,
    /// condition batch for conditioned models
    p: Option<NodeId>,
    target: NodeId,
    loss: NodeId,
    batch: usize,
}

/// How dataset inputs split into (x, condition) rows.
fn condition_split(params: &ModelParams) -> Option<(usize, usize)> {
    match params {
        ModelParams::ConditionedPl { g, .. } => {
            Some((g.base.input_dim, g.condition_dim()))
        }
        _ => None,
    }
}

fn target_rows(params: &ModelParams, data: &Dataset) -> usize {
    match params {
        ModelParams::BiLip(_) => data.targets.rows(),
        _ => 1,
    }
}

fn build_graph(params: &ModelParams, data: &Dataset, batch: usize) -> Result<TrainGraph> {
    let mut tape = Tape::new();
    let trows = target_rows(params, data);
    match params {
        ModelParams::BiLip(p) => {
            if data.targets.rows() != p.input_dim {
                return Err(Error::Shape(
                    "direct regression needs targets matching the model dimension".into(),
                ));
            }
            let bt = p.register(&mut tape)?;
            let x = tape.constant(Matrix::zeros(p.input_dim, batch));
            let target = tape.constant(Matrix::zeros(trows, batch));
            let out = bt.forward(&mut tape, x, None)?;
            let diff = tape.sub(out, target)?;
            let sq = tape.hadamard(diff, diff)?;
            let s = tape.sum_all(sq)?;
            let loss = tape.scale(s, 0.5 / batch as f64)?;
            Ok(TrainGraph {
                tape,
                leaves: bt.leaves,
                x,
                p: None,
                target,
                loss,
                batch,
            })
        }
        ModelParams::Pl { g, c } => {
            let bt = g.register(&mut tape)?;
            let mut leaves = bt.leaves.clone();
            let c_leaf = tape.leaf(Matrix::scalar(*c));
            leaves.push(c_leaf);
            let x = tape.constant(Matrix::zeros(g.input_dim, batch));
            let target = tape.constant(Matrix::zeros(1, batch));
            let gx = bt.forward(&mut tape, x, None)?;
            let sq = tape.hadamard(gx, gx)?;
            let cs = tape.col_sum(sq)?;
            let pot = tape.scale(cs, 0.5)?;
            let f = tape.add_bias(pot, c_leaf)?;
            let diff = tape.sub(f, target)?;
            let dsq = tape.hadamard(diff, diff)?;
            let s = tape.sum_all(dsq)?;
            let loss = tape.scale(s, 0.5 / batch as f64)?;
            Ok(TrainGraph {
                tape,
                leaves,
                x,
                p: None,
                target,
                loss,
                batch,
            })
        }
        ModelParams::ConditionedPl { g, c } => {
            let ct = g.register(&mut tape)?;
            let mut leaves = ct.leaves.clone();
            let c_leaf = tape.leaf(Matrix::scalar(*c));
            leaves.push(c_leaf);
            let x = tape.constant(Matrix::zeros(g.base.input_dim, batch));
            let p = tape.constant(Matrix::zeros(g.condition_dim(), batch));
            let target = tape.constant(Matrix::zeros(1, batch));
            let gx = ct.forward(&mut tape, x, p)?;
            let sq = tape.hadamard(gx, gx)?;
            let cs = tape.col_sum(sq)?;
            let pot = tape.scale(cs, 0.5)?;
            let f = tape.add_bias(pot, c_leaf)?;
            let diff = tape.sub(f, target)?;
            let dsq = tape.hadamard(diff, diff)?;
            let s = tape.sum_all(dsq)?;
            let loss = tape.scale(s, 0.5 / batch as f64)?;
            Ok(TrainGraph {
                tape,
                leaves,
                x,
                p: Some(p),
                target,
                loss,
                batch,
            })
        }
        ModelParams::Layer(_) => Err(Error::Config(
            "single materialized layers are not trainable".into(),
        )),
    }
}

/// Canonical parameter tensors in leaf order (the potential offset last).
fn param_values(params: &ModelParams) -> Result<Vec<Matrix>> {
    let mut out: Vec<Matrix> = match params {
        ModelParams::BiLip(p) => p.flatten().into_iter().cloned().collect(),
        ModelParams::Pl { g, .. } => g.flatten().into_iter().cloned().collect(),
        ModelParams::ConditionedPl { g, .. } => g.flatten().into_iter().cloned().collect(),
        ModelParams::Layer(_) => {
            return Err(Error::Config(
                "single materialized layers are not trainable".into(),
            ))
        }
    };
    match params {
        ModelParams::Pl { c, .. } | ModelParams::ConditionedPl { c, .. } => {
            out.push(Matrix::scalar(*c));
        }
        _ => {}
    }
    Ok(out)
}

fn write_back(params: &mut ModelParams, values: &[Matrix]) {
    match params {
        ModelParams::BiLip(p) => {
            for (dst, src) in p.flatten_mut().into_iter().zip(values) {
                dst.data_mut().copy_from_slice(src.data());
            }
        }
        ModelParams::Pl { g, c } => {
            let slots = g.flatten_mut();
            let n = slots.len();
            for (dst, src) in slots.into_iter().zip(values) {
                dst.data_mut().copy_from_slice(src.data());
            }
            *c = values[n].get(0, 0);
        }
        ModelParams::ConditionedPl { g, c } => {
            let slots = g.flatten_mut();
            let n = slots.len();
            for (dst, src) in slots.into_iter().zip(values) {
                dst.data_mut().copy_from_slice(src.data());
            }
            *c = values[n].get(0, 0);
        }
        ModelParams::Layer(_) => unreachable!(),
    }
}

fn fill_batch(
    graph: &mut TrainGraph,
    params: &ModelParams,
    data: &Dataset,
    idx: &[usize],
) -> Result<()> {
    let split = condition_split(params);
    let (xrows, _) = split.unwrap_or((data.input_dim(), 0));
    let mut xb = Matrix::zeros(xrows, idx.len());
    for (j, &col) in idx.iter().enumerate() {
        for i in 0..xrows {
            xb.set(i, j, data.inputs.get(i, col));
        }
    }
    graph.tape.set_leaf(graph.x, &xb)?;
    if let (Some(pid), Some((xr, prows))) = (graph.p, split) {
        let mut pb = Matrix::zeros(prows, idx.len());
        for (j, &col) in idx.iter().enumerate() {
            for i in 0..prows {
                pb.set(i, j, data.inputs.get(xr + i, col));
            }
        }
        graph.tape.set_leaf(pid, &pb)?;
    }
    let trows = data.targets.rows();
    let mut tb = Matrix::zeros(trows, idx.len());
    for (j, &col) in idx.iter().enumerate() {
        for i in 0..trows {
            tb.set(i, j, data.targets.get(i, col));
        }
    }
    graph.tape.set_leaf(graph.target, &tb)?;
    Ok(())
}

fn set_param_leaves(graph: &mut TrainGraph, values: &[Matrix]) -> Result<()> {
    for (&leaf, value) in graph.leaves.iter().zip(values) {
        graph.tape.set_leaf(leaf, value)?;
    }
    Ok(())
}

/// Mean squared error of the current parameters over a whole dataset,
/// evaluated through the same graph machinery as training.
pub fn evaluate_loss(params: &ModelParams, data: &Dataset) -> Result<f64> {
    let values = param_values(params)?;
    let n = data.len();
    let chunk = n.min(1024);
    let mut graph = build_graph(params, data, chunk)?;
    set_param_leaves(&mut graph, &values)?;
    let mut total = 0.0;
    let mut done = 0;
    while done < n {
        let this = chunk.min(n - done);
        if this != graph.batch {
            graph = build_graph(params, data, this)?;
            set_param_leaves(&mut graph, &values)?;
        }
        let idx: Vec<usize> = (done..done + this).collect();
        fill_batch(&mut graph, params, data, &idx)?;
        let loss = graph.tape.forward_eval(graph.loss)?.get(0, 0);
        total += loss * this as f64;
        done += this;
    }
    Ok(total / n as f64)
}

/// Train in place. Deterministic for a fixed (config, seed, dataset): the
/// shuffle stream, batch boundaries, and update order are all fixed.
pub fn train(params: &mut ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let n = data.len();
    let full_batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(full_batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedule = OneCycle {
        peak_lr: cfg.peak_lr,
        total_steps,
    };

    let mut values = param_values(params)?;
    let mut adam = {
        let refs: Vec<&Matrix> = values.iter().collect();
        Adam::for_params(&refs)
    };
    let mut graph = build_graph(params, data, full_batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        // Fisher-Yates from the run stream
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(full_batch) {
            if chunk.len() != graph.batch {
                graph = build_graph(params, data, chunk.len())?;
            }
            set_param_leaves(&mut graph, &values)?;
            fill_batch(&mut graph, params, data, chunk)?;
            let loss = graph.tape.forward_eval(graph.loss)?.get(0, 0);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}; the peak learning rate is likely too high"
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            graph.tape.backward(graph.loss)?;
            let grads: Vec<Matrix> = graph
                .leaves
                .iter()
                .map(|&l| graph.tape.grad(l).clone())
                .collect();
            let lr = schedule.lr(step);
            {
                let mut prefs: Vec<&mut Matrix> = values.iter_mut().collect();
                let grefs: Vec<&Matrix> = grads.iter().collect();
                adam.step(&mut prefs, &grefs, lr);
            }
            step += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
        write_back(params, &values);
        if cfg.certify_every > 0 && (epoch + 1) % cfg.certify_every == 0 {
            params.materialize_core()?.certify()?;
        }
        if cfg.log_every > 0 && (epoch + 1) % cfg.log_every == 0 {
            eprintln!(
                "epoch {:>5}/{}: loss {:.6e}",
                epoch + 1,
                cfg.epochs,
                epoch_losses[epoch]
            );
        }
    }
    write_back(params, &values);
    let final_train_loss = evaluate_loss(params, data)?;
    Ok(TrainReport {
        final_train_loss,
        epoch_losses,
    })
}
