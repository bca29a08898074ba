//! Bi-Lipschitz networks: alternating orthogonal and monotone-Lipschitz
//! layers `O_{K+1} . F_K . ... . F_1 . O_1`.
//!
//! Each monotone layer is (mu_k, nu_k)-Lipschitz by its certificate and each
//! orthogonal layer is an isometry, so the composition carries certified
//! bounds `mu = prod mu_k`, `nu = prod nu_k` and distortion `tau = nu/mu`.
//! The inverse runs the chain backwards: orthogonal layers invert in closed
//! form, monotone layers go through the splitting solvers.
//!
//! The conditioned variant feeds all the bias vectors (each layer's scaled
//! hidden biases and each orthogonal shift) from an unconstrained MLP of a
//! condition vector `p`; for every fixed `p` the map in `x` keeps the same
//! certified bounds because the weights never depend on `p`.

use rand::{Rng, SeedableRng};

use crate::cayley::{build_cayley, init_orthogonal_free, normal_matrix, OrthogonalLayer};
use crate::monlip::{
    build_forward, build_materialize, certificate_check, materialize, CertificateReport,
    FreeParams, LayerWeights, MonLipTape,
};
use crate::numerics::{Activation, Matrix, NodeId, Tape};
use crate::solvers::{invert, Solve, SolverConfig, SolverInit};
use crate::{Error, Result};

/// Free parameters of an orthogonal affine layer.
#[derive(Debug, Clone)]
pub struct OrthFree {
    pub g: Matrix,
    pub q: Matrix,
}

impl OrthFree {
    pub fn init(n: usize, rng: &mut impl Rng) -> Self {
        let (g, q) = init_orthogonal_free(n, rng);
        OrthFree { g, q }
    }
}

/// Free parameters of a full bi-Lipschitz network: K monotone layers
/// interleaved with K+1 orthogonal layers. `None` orthogonal entries are
/// frozen identities and carry no parameters.
#[derive(Debug, Clone)]
pub struct BiLipParams {
    pub input_dim: usize,
    pub mono: Vec<FreeParams>,
    pub orth: Vec<Option<OrthFree>>,
}

impl BiLipParams {
    /// Random network with `k_layers` monotone layers of the given hidden
    /// widths and a total bi-Lipschitz budget `(mu, nu)` split uniformly, so
    /// each layer gets `(mu^{1/K}, nu^{1/K})` and per-layer distortion is
    /// equal across layers.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        input_dim: usize,
        k_layers: usize,
        widths: &[usize],
        mu: f64,
        nu: f64,
        activation: Activation,
        with_orthogonal: bool,
        free_fp: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k_layers == 0 {
            return Err(Error::Config("need at least one monotone layer".into()));
        }
        let mu_k = mu.powf(1.0 / k_layers as f64);
        let nu_k = nu.powf(1.0 / k_layers as f64);
        let mut mono = Vec::with_capacity(k_layers);
        for _ in 0..k_layers {
            mono.push(FreeParams::init(
                input_dim, widths, mu_k, nu_k, activation, free_fp, rng,
            )?);
        }
        let orth = (0..=k_layers)
            .map(|_| with_orthogonal.then(|| OrthFree::init(input_dim, rng)))
            .collect();
        Ok(BiLipParams {
            input_dim,
            mono,
            orth,
        })
    }

    pub fn k_layers(&self) -> usize {
        self.mono.len()
    }

    pub fn mu(&self) -> f64 {
        self.mono.iter().map(|m| m.mu).product()
    }

    pub fn nu(&self) -> f64 {
        self.mono.iter().map(|m| m.nu).product()
    }

    /// Learnable matrices in network order.
    pub fn flatten(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for (i, mono) in self.mono.iter().enumerate() {
            if let Some(o) = &self.orth[i] {
                out.push(&o.g);
                out.push(&o.q);
            }
            out.extend(mono.flatten());
        }
        if let Some(o) = &self.orth[self.mono.len()] {
            out.push(&o.g);
            out.push(&o.q);
        }
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Matrix> {
        let k = self.mono.len();
        let mut out: Vec<&mut Matrix> = Vec::new();
        let mut orth_iter = self.orth.iter_mut();
        let mut mono_iter = self.mono.iter_mut();
        for _ in 0..k {
            if let Some(o) = orth_iter.next().unwrap() {
                out.push(&mut o.g);
                out.push(&mut o.q);
            }
            out.extend(mono_iter.next().unwrap().flatten_mut());
        }
        if let Some(o) = orth_iter.next().unwrap() {
            out.push(&mut o.g);
            out.push(&mut o.q);
        }
        out
    }

    /// Materialize every layer.
    pub fn materialize(&self) -> Result<BiLipModel> {
        let mono = self
            .mono
            .iter()
            .map(materialize)
            .collect::<Result<Vec<_>>>()?;
        let orth = self
            .orth
            .iter()
            .map(|o| match o {
                Some(o) => OrthogonalLayer::from_free(o.g.clone(), o.q.clone()),
                None => Ok(OrthogonalLayer::identity(self.input_dim)),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BiLipModel { orth, mono })
    }

    /// Register all free parameters on a tape and build the weight nodes.
    pub fn register(&self, tape: &mut Tape) -> Result<BiLipTape> {
        let mut leaves = Vec::new();
        let mut orth = Vec::with_capacity(self.orth.len());
        let mut mono = Vec::with_capacity(self.mono.len());
        for (i, m) in self.mono.iter().enumerate() {
            orth.push(self.register_orth(tape, i, &mut leaves)?);
            let mt = build_materialize(tape, m)?;
            leaves.extend(&mt.leaves);
            mono.push(mt);
        }
        orth.push(self.register_orth(tape, self.mono.len(), &mut leaves)?);
        Ok(BiLipTape {
            input_dim: self.input_dim,
            leaves,
            orth,
            mono,
        })
    }

    fn register_orth(
        &self,
        tape: &mut Tape,
        idx: usize,
        leaves: &mut Vec<NodeId>,
    ) -> Result<Option<OrthTape>> {
        match &self.orth[idx] {
            Some(o) => {
                let g = tape.leaf(o.g.clone());
                let q = tape.leaf(o.q.clone());
                leaves.push(g);
                leaves.push(q);
                let p = build_cayley(tape, self.input_dim, Some(g), None, true)?
                    .top
                    .expect("P block");
                Ok(Some(OrthTape { p, q }))
            }
            None => Ok(None),
        }
    }
}

/// Tape nodes of one orthogonal layer.
pub struct OrthTape {
    pub p: NodeId,
    pub q: NodeId,
}

/// Tape view of a full network.
pub struct BiLipTape {
    pub input_dim: usize,
    /// all free-parameter leaves in `BiLipParams::flatten` order
    pub leaves: Vec<NodeId>,
    pub orth: Vec<Option<OrthTape>>,
    pub mono: Vec<MonLipTape>,
}

/// Per-sample bias overrides for the conditioned variant, in network order.
pub struct BiasOverrides {
    /// per orthogonal layer: n x B node (None for identity layers)
    pub orth_q: Vec<NodeId>,
    /// per monotone layer: one m_k x B node per hidden sub-layer
    pub mono_bhat: Vec<Vec<NodeId>>,
}

impl BiLipTape {
    /// Forward through the alternation for a batch of columns.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: NodeId,
        overrides: Option<&BiasOverrides>,
    ) -> Result<NodeId> {
        let mut cur = x;
        for (i, mono) in self.mono.iter().enumerate() {
            cur = self.orth_forward(tape, i, cur, overrides)?;
            let bias = overrides.map(|o| o.mono_bhat[i].as_slice());
            cur = build_forward(tape, mono, cur, bias)?;
        }
        self.orth_forward(tape, self.mono.len(), cur, overrides)
    }

    fn orth_forward(
        &self,
        tape: &mut Tape,
        idx: usize,
        x: NodeId,
        overrides: Option<&BiasOverrides>,
    ) -> Result<NodeId> {
        match &self.orth[idx] {
            Some(o) => {
                let px = tape.matmul(o.p, x)?;
                match overrides {
                    Some(ov) => tape.add(px, ov.orth_q[idx]),
                    None => tape.add_bias(px, o.q),
                }
            }
            None => Ok(x),
        }
    }
}

/// Materialized bi-Lipschitz network.
#[derive(Debug, Clone)]
pub struct BiLipModel {
    pub orth: Vec<OrthogonalLayer>,
    pub mono: Vec<LayerWeights>,
}

/// Result of a full-network inversion.
#[derive(Debug, Clone)]
pub struct InverseSolve {
    pub x: Vec<f64>,
    /// one entry per monotone layer, innermost last
    pub layer_solves: Vec<Solve>,
}

impl InverseSolve {
    pub fn total_iters(&self) -> usize {
        self.layer_solves.iter().map(|s| s.iters).sum()
    }
}

impl BiLipModel {
    pub fn input_dim(&self) -> usize {
        self.mono[0].input_dim
    }

    pub fn k_layers(&self) -> usize {
        self.mono.len()
    }

    /// Certified inverse-Lipschitz bound, the product over layers.
    pub fn mu(&self) -> f64 {
        self.mono.iter().map(|m| m.mu).product()
    }

    /// Certified Lipschitz bound.
    pub fn nu(&self) -> f64 {
        self.mono.iter().map(|m| m.nu).product()
    }

    /// Certified distortion bound.
    pub fn tau(&self) -> f64 {
        self.nu() / self.mu()
    }

    /// Sequential application over a batch of columns.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "model forward: expected {} rows, got {}",
                self.input_dim(),
                x.rows()
            )));
        }
        let mut cur = self.orth[0].forward(x)?;
        for (k, mono) in self.mono.iter().enumerate() {
            cur = mono.forward(&cur)?;
            cur = self.orth[k + 1].forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::col_vec(x))?.data().to_vec())
    }

    /// Exact inverse: analytic orthogonal inverses, iterative layer solves.
    ///
    /// Per-layer tolerances are tightened below `cfg.tol` so that after the
    /// chain amplifies each layer's error by the inverse-Lipschitz factors of
    /// the layers still to come, the round trip `||G^{-1}(G(x)) - x||` stays
    /// within `10 cfg.tol`. `SolverInit::Random` seeds are decorrelated per
    /// layer so restart checks actually vary every solve in the chain.
    pub fn inverse(&self, y: &[f64], cfg: &SolverConfig) -> Result<InverseSolve> {
        if y.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "model inverse: expected target of length {}, got {}",
                self.input_dim(),
                y.len()
            )));
        }
        let k = self.k_layers();
        let mu_total = self.mu().min(1.0);
        let mu_min = self
            .mono
            .iter()
            .map(|m| m.mu)
            .fold(f64::INFINITY, f64::min)
            .min(1.0);
        let layer_tol = (cfg.tol * mu_total * mu_min / (10.0 * k as f64)).max(1e-14);

        let mut cur = self.orth[k].inverse_vec(y)?;
        let mut layer_solves = Vec::with_capacity(k);
        for idx in (0..k).rev() {
            let mut layer_cfg = cfg.clone();
            layer_cfg.tol = layer_tol;
            if let SolverInit::Random(seed) = cfg.init {
                layer_cfg.init = SolverInit::Random(seed.wrapping_add(idx as u64));
            }
            let solve = invert(&self.mono[idx], &cur, &layer_cfg)?;
            cur = self.orth[idx].inverse_vec(&solve.x)?;
            layer_solves.push(solve);
        }
        Ok(InverseSolve {
            x: cur,
            layer_solves,
        })
    }

    /// Certificate reports for every monotone layer.
    pub fn certificates(&self) -> Vec<CertificateReport> {
        self.mono.iter().map(certificate_check).collect()
    }

    /// Error with the first failing layer, if any.
    pub fn certify(&self) -> Result<Vec<CertificateReport>> {
        let reports = self.certificates();
        for (k, r) in reports.iter().enumerate() {
            if !r.certified() {
                return Err(Error::Certification(format!(
                    "layer {k}: y_eq_err = {:.3e}, h_margin = {:.3e}, lemma margins = ({:.3e}, {:.3e})",
                    r.y_eq_err, r.h_margin, r.lemma_v_margin, r.lemma_s_margin
                )));
            }
        }
        Ok(reports)
    }
}

/// Plain MLP used to generate condition-dependent biases.
#[derive(Debug, Clone)]
pub struct Mlp {
    /// weight matrices, layer i maps dims[i] -> dims[i+1]
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` runs input through hidden sizes to the output dimension.
    pub fn init(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("MLP needs at least input and output dims".into()));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let std = 1.0 / (pair[0] as f64).sqrt();
            weights.push(normal_matrix(pair[1], pair[0], std, rng));
            biases.push(Matrix::zeros(pair[1], 1));
        }
        Ok(Mlp {
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(dims: &[usize], activation: Activation) -> Result<Self> {
        let mut mlp = Self::init(dims, activation, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        for w in &mut mlp.weights {
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        Ok(mlp)
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().unwrap().rows()
    }

    pub fn flatten(&self) -> Vec<&Matrix> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .chain(self.biases.iter_mut())
            .collect()
    }

    /// Batch forward, columns are samples. Activation on every layer but the
    /// last.
    pub fn forward(&self, p: &Matrix) -> Result<Matrix> {
        if p.rows() != self.input_dim() {
            return Err(Error::Shape(format!(
                "bias net: expected {} rows, got {}",
                self.input_dim(),
                p.rows()
            )));
        }
        let mut cur = p.clone();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut next = w.matmul(&cur);
            for j in 0..next.cols() {
                for r in 0..next.rows() {
                    let mut v = next.get(r, j) + b.data()[r];
                    if i < last {
                        v = self.activation.eval(v);
                    }
                    next.set(r, j, v);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Register leaves and build the batch forward on a tape.
    pub fn register(&self, tape: &mut Tape) -> MlpTape {
        let mut leaves = Vec::new();
        let weights: Vec<NodeId> = self
            .weights
            .iter()
            .map(|w| {
                let id = tape.leaf(w.clone());
                leaves.push(id);
                id
            })
            .collect();
        let biases: Vec<NodeId> = self
            .biases
            .iter()
            .map(|b| {
                let id = tape.leaf(b.clone());
                leaves.push(id);
                id
            })
            .collect();
        MlpTape {
            weights,
            biases,
            leaves,
            activation: self.activation,
        }
    }
}

pub struct MlpTape {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub leaves: Vec<NodeId>,
    pub activation: Activation,
}

impl MlpTape {
    pub fn forward(&self, tape: &mut Tape, p: NodeId) -> Result<NodeId> {
        let mut cur = p;
        let last = self.weights.len() - 1;
        for i in 0..self.weights.len() {
            let wx = tape.matmul(self.weights[i], cur)?;
            cur = tape.add_bias(wx, self.biases[i])?;
            if i < last {
                cur = tape.act(cur, self.activation)?;
            }
        }
        Ok(cur)
    }
}

/// Bias-conditioned (partially bi-Lipschitz) network parameters.
///
/// The bias net maps a condition `p` to every bias in the chain, laid out in
/// network order: for each monotone layer its stacked scaled hidden biases,
/// then the shift of every parameterized orthogonal layer. Weight matrices
/// never depend on `p`.
#[derive(Debug, Clone)]
pub struct ConditionedBiLipParams {
    pub base: BiLipParams,
    pub bias_net: Mlp,
}

impl ConditionedBiLipParams {
    /// Total number of bias rows the net must produce.
    pub fn bias_dim(base: &BiLipParams) -> usize {
        let mono: usize = base.mono.iter().map(|m| m.hidden_dim()).sum();
        let orth: usize = base
            .orth
            .iter()
            .filter(|o| o.is_some())
            .map(|_| base.input_dim)
            .sum();
        mono + orth
    }

    pub fn new(base: BiLipParams, bias_net: Mlp) -> Result<Self> {
        let want = Self::bias_dim(&base);
        if bias_net.output_dim() != want {
            return Err(Error::Config(format!(
                "bias net output dim {} does not match the {} bias rows of the model",
                bias_net.output_dim(),
                want
            )));
        }
        Ok(ConditionedBiLipParams { base, bias_net })
    }

    pub fn condition_dim(&self) -> usize {
        self.bias_net.input_dim()
    }

    pub fn flatten(&self) -> Vec<&Matrix> {
        let mut out = self.base.flatten();
        out.extend(self.bias_net.flatten());
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.base.flatten_mut();
        out.extend(self.bias_net.flatten_mut());
        out
    }

    /// Materialize the x-map for one condition value.
    pub fn materialize_for(&self, p: &[f64]) -> Result<BiLipModel> {
        let mut model = self.base.materialize()?;
        let bias = self.bias_net.forward(&Matrix::col_vec(p))?;
        let mut offset = 0;
        for mono in &mut model.mono {
            for bh in &mut mono.bhat {
                let rows = bh.rows();
                for i in 0..rows {
                    bh.set(i, 0, bias.get(offset + i, 0));
                }
                offset += rows;
            }
        }
        for (idx, orth) in model.orth.iter_mut().enumerate() {
            if self.base.orth[idx].is_some() {
                let n = self.base.input_dim;
                let mut q = Matrix::zeros(n, 1);
                for i in 0..n {
                    q.set(i, 0, bias.get(offset + i, 0));
                }
                offset += n;
                *orth = OrthogonalLayer::from_free(
                    self.base.orth[idx].as_ref().unwrap().g.clone(),
                    q,
                )?;
            }
        }
        Ok(model)
    }

    /// Register everything on a tape; the returned closure-ish handle builds
    /// forwards for (x, p) batches.
    pub fn register(&self, tape: &mut Tape) -> Result<ConditionedTape> {
        let base = self.base.register(tape)?;
        let mlp = self.bias_net.register(tape);
        let mut leaves = base.leaves.clone();
        leaves.extend(&mlp.leaves);
        Ok(ConditionedTape { base, mlp, leaves })
    }
}

pub struct ConditionedTape {
    pub base: BiLipTape,
    pub mlp: MlpTape,
    pub leaves: Vec<NodeId>,
}

impl ConditionedTape {
    /// Forward for batches `x` (n x B) and `p` (l x B).
    pub fn forward(&self, tape: &mut Tape, x: NodeId, p: NodeId) -> Result<NodeId> {
        let bias = self.mlp.forward(tape, p)?;
        let mut offset = 0;
        let mut mono_bhat = Vec::with_capacity(self.base.mono.len());
        for mono in &self.base.mono {
            let mut per_sub = Vec::new();
            for psi in &mono.psi {
                let rows = tape.value(*psi).rows();
                per_sub.push(tape.row_slice(bias, offset, rows)?);
                offset += rows;
            }
            mono_bhat.push(per_sub);
        }
        let mut orth_q = Vec::with_capacity(self.base.orth.len());
        for o in &self.base.orth {
            if o.is_some() {
                let n = self.base.input_dim;
                orth_q.push(tape.row_slice(bias, offset, n)?);
                offset += n;
            } else {
                // unused placeholder; identity layers take no bias
                orth_q.push(bias);
            }
        }
        let overrides = BiasOverrides { orth_q, mono_bhat };
        self.base.forward(tape, x, Some(&overrides))
    }
}
