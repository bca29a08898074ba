//! Adam with bias correction and the one-cycle linear learning-rate schedule.

use crate::numerics::Matrix;

/// Piecewise-linear one-cycle schedule: ~0 at the first step, peak at the
/// midpoint, back to ~0 at the last step.
#[derive(Debug, Clone, Copy)]
pub struct OneCycle {
    pub peak_lr: f64,
    pub total_steps: usize,
}

impl OneCycle {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.peak_lr;
        }
        let t = step as f64 / (self.total_steps - 1) as f64;
        self.peak_lr * (1.0 - (2.0 * t - 1.0).abs())
    }
}

/// Adam state over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u32,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &[&Matrix]) -> Self {
        let shapes: Vec<_> = params.iter().map(|p| p.shape()).collect();
        Self::new(&shapes)
    }

    /// One update with the given learning rate; `params` and `grads` must
    /// line up with the shapes this state was created for.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.shape(), g.shape());
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
