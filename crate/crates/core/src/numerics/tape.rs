//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A `Tape` records primitive operations eagerly: every record call validates
//! shapes, allocates the output buffer once, and computes the value. The same
//! graph can then be re-run with new leaf values (`set_leaf` + `forward`)
//! without allocating, and `backward` accumulates adjoints from a scalar
//! root. Tapes are single-threaded; one lives in each training worker.
//!
//! Gradients follow the usual conventions. The ReLU derivative at exactly
//! zero is taken to be 0; gradient tests sample away from the kink.

use serde::{Deserialize, Serialize};

use super::linalg::{lu_factor, Lu};
use super::matrix::{
    add_bias_into, add_into, col_sum_into, hadamard_into, matmul_abt_acc, matmul_atb_acc,
    matmul_into, row_slice_into, scale_into, sub_into, sum_all_into, transpose_into, Matrix,
};
use crate::{Error, Result};

/// Index of a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Scalar activations with slope restricted to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Activation::Relu => t.max(0.0),
            Activation::Tanh => t.tanh(),
            Activation::Sigmoid => sigmoid(t),
            Activation::Softplus => t.max(0.0) + (-t.abs()).exp().ln_1p(),
        }
    }

    /// Derivative. ReLU uses the subgradient choice sigma'(0) = 0.
    pub fn slope(self, t: f64) -> f64 {
        match self {
            Activation::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let y = t.tanh();
                1.0 - y * y
            }
            Activation::Sigmoid => {
                let s = sigmoid(t);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(t),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    /// a + bias, bias is rows x 1 broadcast over columns
    AddBias(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Scale(usize, f64),
    Hadamard(usize, usize),
    SumAll(usize),
    ColSum(usize),
    RowSlice(usize, usize, usize),
    /// X = A^{-1} B by LU with partial pivoting
    Solve(usize, usize),
    Exp(usize),
    Act(usize, Activation),
    /// psi * sigma(v / psi) rowwise, psi is rows x 1
    ScaledAct(usize, usize, Activation),
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddBias(a, b)
            | Op::Matmul(a, b)
            | Op::Hadamard(a, b)
            | Op::Solve(a, b)
            | Op::ScaledAct(a, b, _) => [Some(a), Some(b)],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::SumAll(a)
            | Op::ColSum(a)
            | Op::RowSlice(a, _, _)
            | Op::Exp(a)
            | Op::Act(a, _) => [Some(a), None],
        }
    }
}

/// Recorded computation graph with stored values and gradient accumulators.
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Matrix>,
    adjoints: Vec<Matrix>,
    aux: Vec<Option<Lu>>,
    needs: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
            adjoints: Vec::new(),
            aux: Vec::new(),
            needs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Register a differentiable leaf.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Register a non-differentiable input (data batches, fixed matrices).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix, grad: bool) -> NodeId {
        let id = self.ops.len();
        self.ops.push(Op::Leaf);
        self.values.push(value);
        self.aux.push(None);
        self.needs.push(grad);
        NodeId(id)
    }

    /// Replace the value of a leaf; shape must match the declaration.
    pub fn set_leaf(&mut self, id: NodeId, value: &Matrix) -> Result<()> {
        match self.ops[id.0] {
            Op::Leaf => {}
            _ => {
                return Err(Error::TapeShape {
                    node: id.0,
                    detail: "set_leaf target is not a leaf".into(),
                })
            }
        }
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::TapeShape {
                node: id.0,
                detail: format!(
                    "leaf expects {:?}, got {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                ),
            });
        }
        if !value.all_finite() {
            return Err(Error::TapeShape {
                node: id.0,
                detail: "leaf value has non-finite entries".into(),
            });
        }
        self.values[id.0].data_mut().copy_from_slice(value.data());
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    /// Gradient accumulated at a node by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.adjoints[id.0]
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.values[id.0].shape()
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> Result<NodeId> {
        let id = self.ops.len();
        let needs = op
            .inputs()
            .iter()
            .flatten()
            .any(|&i| self.needs[i]);
        self.ops.push(op);
        self.values.push(Matrix::zeros(shape.0, shape.1));
        self.aux.push(None);
        self.needs.push(needs);
        self.recompute(id)?;
        Ok(NodeId(id))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::TapeShape {
                node: self.ops.len(),
                detail: format!(
                    "{what}: {:?} vs {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        self.push(Op::Add(a.0, b.0), self.shape(a))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        self.push(Op::Sub(a.0, b.0), self.shape(a))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, _) = self.shape(a);
        if self.shape(bias) != (r, 1) {
            return Err(Error::TapeShape {
                node: self.ops.len(),
                detail: format!(
                    "add_bias: value {:?}, bias {:?} (want {}x1)",
                    self.shape(a),
                    self.shape(bias),
                    r
                ),
            });
        }
        self.push(Op::AddBias(a.0, bias.0), self.shape(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::TapeShape {
                node: self.ops.len(),
                detail: format!("matmul: {ar}x{ac} * {br}x{bc}"),
            });
        }
        self.push(Op::Matmul(a.0, b.0), (ar, bc))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose(a.0), (c, r))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(a.0, s), self.shape(a))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "hadamard")?;
        self.push(Op::Hadamard(a.0, b.0), self.shape(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAll(a.0), (1, 1))
    }

    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, c) = self.shape(a);
        self.push(Op::ColSum(a.0), (1, c))
    }

    pub fn row_slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::TapeShape {
                node: self.ops.len(),
                detail: format!("row_slice [{start}, {start}+{len}) out of {r} rows"),
            });
        }
        self.push(Op::RowSlice(a.0, start, len), (len, c))
    }

    /// X = A^{-1} B. A must be square and well conditioned; the LU factors are
    /// kept on the node and reused by the backward pass.
    pub fn solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ar != ac || ac != br {
            return Err(Error::TapeShape {
                node: self.ops.len(),
                detail: format!("solve: A {ar}x{ac}, B {br}x{bc}"),
            });
        }
        self.push(Op::Solve(a.0, b.0), (ar, bc))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a.0), self.shape(a))
    }

    pub fn act(&mut self, a: NodeId, act: Activation) -> Result<NodeId> {
        self.push(Op::Act(a.0, act), self.shape(a))
    }

    /// Rowwise scaled activation psi * sigma(v / psi); psi is rows x 1, positive.
    pub fn scaled_act(&mut self, v: NodeId, psi: NodeId, act: Activation) -> Result<NodeId> {
        let (r, _) = self.shape(v);
        if self.shape(psi) != (r, 1) {
            return Err(Error::TapeShape {
                node: self.ops.len(),
                detail: format!(
                    "scaled_act: value {:?}, psi {:?} (want {}x1)",
                    self.shape(v),
                    self.shape(psi),
                    r
                ),
            });
        }
        self.push(Op::ScaledAct(v.0, psi.0, act), self.shape(v))
    }

    fn recompute(&mut self, k: usize) -> Result<()> {
        let op = self.ops[k];
        if let Op::Solve(a, b) = op {
            let lu = lu_factor(&self.values[a], "tape solve")?;
            let (head, tail) = self.values.split_at_mut(k);
            lu.solve_into(&head[b], &mut tail[0]);
            self.aux[k] = Some(lu);
            return Ok(());
        }
        let (head, tail) = self.values.split_at_mut(k);
        let out = &mut tail[0];
        match op {
            Op::Leaf | Op::Solve(..) => {}
            Op::Add(a, b) => add_into(&head[a], &head[b], out),
            Op::Sub(a, b) => sub_into(&head[a], &head[b], out),
            Op::AddBias(a, b) => add_bias_into(&head[a], &head[b], out),
            Op::Matmul(a, b) => matmul_into(&head[a], &head[b], out),
            Op::Transpose(a) => transpose_into(&head[a], out),
            Op::Scale(a, s) => scale_into(&head[a], s, out),
            Op::Hadamard(a, b) => hadamard_into(&head[a], &head[b], out),
            Op::SumAll(a) => sum_all_into(&head[a], out),
            Op::ColSum(a) => col_sum_into(&head[a], out),
            Op::RowSlice(a, start, len) => row_slice_into(&head[a], start, len, out),
            Op::Exp(a) => {
                for (o, x) in out.data_mut().iter_mut().zip(head[a].data()) {
                    *o = x.exp();
                }
            }
            Op::Act(a, act) => {
                for (o, x) in out.data_mut().iter_mut().zip(head[a].data()) {
                    *o = act.eval(*x);
                }
            }
            Op::ScaledAct(v, psi, act) => {
                let cols = out.cols().max(1);
                for (i, (orow, vrow)) in out
                    .data_mut()
                    .chunks_exact_mut(cols)
                    .zip(head[v].data().chunks_exact(cols))
                    .enumerate()
                {
                    let p = head[psi].data()[i];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o = p * act.eval(x / p);
                    }
                }
            }
        }
        Ok(())
    }

    /// Recompute every node from the current leaf values.
    pub fn forward(&mut self) -> Result<()> {
        for k in 0..self.ops.len() {
            self.recompute(k)?;
            debug_assert!(
                self.values[k].all_finite(),
                "non-finite value at tape node {k}"
            );
        }
        Ok(())
    }

    /// Recompute the graph and return the value at `root`.
    pub fn forward_eval(&mut self, root: NodeId) -> Result<Matrix> {
        self.forward()?;
        let v = self.values[root.0].clone();
        if !v.all_finite() {
            return Err(Error::TapeShape {
                node: root.0,
                detail: "forward produced non-finite values".into(),
            });
        }
        Ok(v)
    }

    /// Accumulate adjoints for every node from a scalar root. Repeated calls
    /// after a fresh `forward` give identical results.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let (r, c) = self.values[root.0].shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarRoot { rows: r, cols: c });
        }
        if self.adjoints.len() != self.values.len() {
            self.adjoints = self
                .values
                .iter()
                .map(|v| Matrix::zeros(v.rows(), v.cols()))
                .collect();
        } else {
            for a in &mut self.adjoints {
                a.data_mut().fill(0.0);
            }
        }
        self.adjoints[root.0].data_mut()[0] = 1.0;

        for k in (0..=root.0).rev() {
            if !self.needs[k] {
                continue;
            }
            let op = self.ops[k];
            let (head, tail) = self.adjoints.split_at_mut(k);
            let adj = &tail[0];
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut head[a], adj.data(), 1.0, self.needs[a]);
                    acc(&mut head[b], adj.data(), 1.0, self.needs[b]);
                }
                Op::Sub(a, b) => {
                    acc(&mut head[a], adj.data(), 1.0, self.needs[a]);
                    acc(&mut head[b], adj.data(), -1.0, self.needs[b]);
                }
                Op::AddBias(a, b) => {
                    acc(&mut head[a], adj.data(), 1.0, self.needs[a]);
                    if self.needs[b] {
                        let cols = adj.cols().max(1);
                        for (i, row) in adj.data().chunks_exact(cols).enumerate() {
                            head[b].data_mut()[i] += row.iter().sum::<f64>();
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    if self.needs[a] {
                        matmul_abt_acc(adj, &self.values[b], 1.0, &mut head[a]);
                    }
                    if self.needs[b] {
                        matmul_atb_acc(&self.values[a], adj, 1.0, &mut head[b]);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs[a] {
                        let ga = &mut head[a];
                        for i in 0..adj.rows() {
                            for j in 0..adj.cols() {
                                let v = ga.get(j, i) + adj.get(i, j);
                                ga.set(j, i, v);
                            }
                        }
                    }
                }
                Op::Scale(a, s) => acc(&mut head[a], adj.data(), s, self.needs[a]),
                Op::Hadamard(a, b) => {
                    if self.needs[a] {
                        for ((g, d), y) in head[a]
                            .data_mut()
                            .iter_mut()
                            .zip(adj.data())
                            .zip(self.values[b].data())
                        {
                            *g += d * y;
                        }
                    }
                    if self.needs[b] {
                        for ((g, d), x) in head[b]
                            .data_mut()
                            .iter_mut()
                            .zip(adj.data())
                            .zip(self.values[a].data())
                        {
                            *g += d * x;
                        }
                    }
                }
                Op::SumAll(a) => {
                    if self.needs[a] {
                        let d = adj.data()[0];
                        for g in head[a].data_mut() {
                            *g += d;
                        }
                    }
                }
                Op::ColSum(a) => {
                    if self.needs[a] {
                        let cols = head[a].cols().max(1);
                        for grow in head[a].data_mut().chunks_exact_mut(cols) {
                            for (g, d) in grow.iter_mut().zip(adj.data()) {
                                *g += d;
                            }
                        }
                    }
                }
                Op::RowSlice(a, start, len) => {
                    if self.needs[a] {
                        let cols = adj.cols();
                        let ga = head[a].data_mut();
                        let base = start * cols;
                        for (g, d) in ga[base..base + len * cols].iter_mut().zip(adj.data()) {
                            *g += d;
                        }
                    }
                }
                Op::Solve(a, b) => {
                    // X = A^{-1} B:  gB += A^{-T} adj,  gA -= (A^{-T} adj) X^T
                    let lu = self.aux[k].as_ref().expect("solve node has factors");
                    let mut w = Matrix::zeros(adj.rows(), adj.cols());
                    lu.solve_transposed_into(adj, &mut w);
                    if self.needs[b] {
                        acc(&mut head[b], w.data(), 1.0, true);
                    }
                    if self.needs[a] {
                        matmul_abt_acc(&w, &self.values[k], -1.0, &mut head[a]);
                    }
                }
                Op::Exp(a) => {
                    if self.needs[a] {
                        for ((g, d), y) in head[a]
                            .data_mut()
                            .iter_mut()
                            .zip(adj.data())
                            .zip(self.values[k].data())
                        {
                            *g += d * y;
                        }
                    }
                }
                Op::Act(a, act) => {
                    if self.needs[a] {
                        for ((g, d), x) in head[a]
                            .data_mut()
                            .iter_mut()
                            .zip(adj.data())
                            .zip(self.values[a].data())
                        {
                            *g += d * act.slope(*x);
                        }
                    }
                }
                Op::ScaledAct(v, psi, act) => {
                    let cols = adj.cols().max(1);
                    let needs_v = self.needs[v];
                    let needs_psi = self.needs[psi];
                    if needs_v || needs_psi {
                        // split head to borrow v and psi adjoints independently
                        let (gv_part, gpsi_part) = if v < psi {
                            let (l, r) = head.split_at_mut(psi);
                            (&mut l[v], &mut r[0])
                        } else {
                            let (l, r) = head.split_at_mut(v);
                            (&mut r[0], &mut l[psi])
                        };
                        for i in 0..self.values[k].rows() {
                            let p = self.values[psi].data()[i];
                            let vrow = &self.values[v].data()[i * cols..(i + 1) * cols];
                            let drow = &adj.data()[i * cols..(i + 1) * cols];
                            let mut gp = 0.0;
                            let gvrow = &mut gv_part.data_mut()[i * cols..(i + 1) * cols];
                            for ((g, &d), &x) in gvrow.iter_mut().zip(drow).zip(vrow) {
                                let t = x / p;
                                let sl = act.slope(t);
                                if needs_v {
                                    *g += d * sl;
                                }
                                if needs_psi {
                                    gp += d * (act.eval(t) - t * sl);
                                }
                            }
                            if needs_psi {
                                gpsi_part.data_mut()[i] += gp;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc(g: &mut Matrix, d: &[f64], s: f64, needed: bool) {
    if !needed {
        return;
    }
    for (g, d) in g.data_mut().iter_mut().zip(d) {
        *g += s * d;
    }
}

/// Compare the tape gradient of a scalar-valued graph against central finite
/// differences. Returns the max over coordinates of |g_ad - g_fd| / (1 + |g_fd|).
///
/// The builder is invoked once to record the graph; re-evaluations for the
/// +/- h probes reuse the recorded tape. Callers should keep `x` away from
/// activation kinks.
pub fn finite_diff_check<F>(mut build: F, x: &Matrix, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let root = build(&mut tape, xid)?;
    tape.backward(root)?;
    let g_ad = tape.grad(xid).clone();

    let mut probe = x.clone();
    let mut max_rel: f64 = 0.0;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        tape.set_leaf(xid, &probe)?;
        let fp = tape.forward_eval(root)?.get(0, 0);
        probe.data_mut()[i] = orig - h;
        tape.set_leaf(xid, &probe)?;
        let fm = tape.forward_eval(root)?.get(0, 0);
        probe.data_mut()[i] = orig;
        let g_fd = (fp - fm) / (2.0 * h);
        let rel = (g_ad.data()[i] - g_fd).abs() / (1.0 + g_fd.abs());
        max_rel = max_rel.max(rel);
    }
    // restore original values for any further use of the tape
    tape.set_leaf(xid, x)?;
    tape.forward()?;
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_identity_affine() {
        // A x + b with A = I, x = (1,2), b = 0
        let mut t = Tape::new();
        let a = t.constant(Matrix::identity(2));
        let x = t.leaf(Matrix::col_vec(&[1.0, 2.0]));
        let b = t.constant(Matrix::col_vec(&[0.0, 0.0]));
        let ax = t.matmul(a, x).unwrap();
        let y = t.add_bias(ax, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_sum_relu() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col_vec(&[-1.0, 3.0]));
        let r = t.act(x, Activation::Relu).unwrap();
        let s = t.sum_all(r).unwrap();
        assert_eq!(t.value(s).get(0, 0), 3.0);
    }

    #[test]
    fn forward_half_squared_norm() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col_vec(&[3.0, 4.0]));
        let sq = t.hadamard(x, x).unwrap();
        let s = t.sum_all(sq).unwrap();
        let f = t.scale(s, 0.5).unwrap();
        assert_eq!(t.value(f).get(0, 0), 12.5);
    }

    #[test]
    fn backward_half_squared_norm_gradient_is_x() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col_vec(&[3.0, 4.0]));
        let sq = t.hadamard(x, x).unwrap();
        let s = t.sum_all(sq).unwrap();
        let f = t.scale(s, 0.5).unwrap();
        t.backward(f).unwrap();
        assert_eq!(t.grad(x).data(), &[3.0, 4.0]);
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col_vec(&[-1.0, 3.0]));
        let r = t.act(x, Activation::Relu).unwrap();
        let s = t.sum_all(r).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col_vec(&[1.0, 2.0]));
        assert!(matches!(
            t.backward(x),
            Err(crate::Error::NonScalarRoot { rows: 2, cols: 1 })
        ));
    }

    #[test]
    fn record_rejects_shape_mismatch_with_node_index() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let b = t.leaf(Matrix::zeros(3, 3));
        match t.add(a, b) {
            Err(crate::Error::TapeShape { node, .. }) => assert_eq!(node, 2),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    /// Random multi-op graph exercised against central finite differences.
    #[test]
    fn backward_matches_finite_differences_on_mixed_graph() {
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let w1 = Matrix::from_fn(5, 4, |_, _| next());
        let w2 = Matrix::from_fn(3, 5, |_, _| next());
        let bias = Matrix::from_fn(5, 1, |_, _| next());
        let x0 = Matrix::from_fn(4, 2, |_, _| 0.7 * next() + 0.05);

        let err = finite_diff_check(
            move |t, x| {
                let w1 = t.constant(w1.clone());
                let w2 = t.constant(w2.clone());
                let b = t.constant(bias.clone());
                let h = t.matmul(w1, x)?;
                let h = t.add_bias(h, b)?;
                let h = t.act(h, Activation::Tanh)?;
                let e = t.exp(h)?;
                let h = t.hadamard(h, e)?;
                let o = t.matmul(w2, h)?;
                let o = t.act(o, Activation::Sigmoid)?;
                let cs = t.col_sum(o)?;
                let sq = t.hadamard(cs, cs)?;
                let s = t.sum_all(sq)?;
                t.scale(s, 0.5)
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "finite difference disagreement {err}");
    }

    #[test]
    fn backward_through_solve_matches_finite_differences() {
        let mut state = 123u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let b = Matrix::from_fn(4, 2, |_, _| next());
        let a0 = Matrix::from_fn(4, 4, |i, j| 0.3 * next() + if i == j { 2.0 } else { 0.0 });

        let err = finite_diff_check(
            move |t, a| {
                let b = t.constant(b.clone());
                let x = t.solve(a, b)?;
                let sq = t.hadamard(x, x)?;
                t.sum_all(sq)
            },
            &a0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "solve gradient disagreement {err}");
    }

    #[test]
    fn finite_diff_check_reports_zero_for_constant() {
        let err = finite_diff_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                t.sum_all(z)
            },
            &Matrix::col_vec(&[1.0, -2.0]),
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_check_on_quadratic_is_tight() {
        let mut state = 5u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let x = Matrix::from_fn(8, 1, |_, _| next());
        let err = finite_diff_check(
            |t, x| {
                let sq = t.hadamard(x, x)?;
                let s = t.sum_all(sq)?;
                t.scale(s, 0.5)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "quadratic gradient error {err}");
    }

    #[test]
    fn forward_is_bitwise_reproducible() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col_vec(&[0.3, -0.7, 1.9]));
        let w = t.constant(Matrix::from_fn(3, 3, |i, j| ((i * 3 + j) as f64).sin()));
        let h = t.matmul(w, x).unwrap();
        let h = t.act(h, Activation::Tanh).unwrap();
        let s = t.sum_all(h).unwrap();
        let first = t.forward_eval(s).unwrap();
        let second = t.forward_eval(s).unwrap();
        assert_eq!(first.data(), second.data());

        // backward twice after re-forward gives identical gradients
        t.backward(s).unwrap();
        let g1 = t.grad(x).clone();
        t.forward().unwrap();
        t.backward(s).unwrap();
        assert_eq!(g1.data(), t.grad(x).data());
    }

    #[test]
    fn scaled_act_reduces_to_plain_relu_and_scales_tanh() {
        let mut t = Tape::new();
        let v = t.leaf(Matrix::col_vec(&[-2.0, 3.0]));
        let psi = t.constant(Matrix::col_vec(&[0.5, 2.0]));
        let r = t.scaled_act(v, psi, Activation::Relu).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 3.0]);

        let s = t.scaled_act(v, psi, Activation::Tanh).unwrap();
        let want0 = 0.5 * (-2.0f64 / 0.5).tanh();
        let want1 = 2.0 * (3.0f64 / 2.0).tanh();
        assert!((t.value(s).get(0, 0) - want0).abs() < 1e-15);
        assert!((t.value(s).get(1, 0) - want1).abs() < 1e-15);
    }

    #[test]
    fn scaled_act_gradients_flow_to_value_and_scaling() {
        let mut state = 17u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let v0 = Matrix::from_fn(4, 3, |_, _| next());
        let d0 = Matrix::from_fn(4, 1, |_, _| 0.3 * next());

        // gradient w.r.t. the pre-activation
        let d_fixed = d0.clone();
        let err = finite_diff_check(
            move |t, v| {
                let d = t.constant(d_fixed.clone());
                let psi = t.exp(d)?;
                let z = t.scaled_act(v, psi, Activation::Tanh)?;
                let sq = t.hadamard(z, z)?;
                t.sum_all(sq)
            },
            &v0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "scaled act grad wrt v error {err}");

        // gradient w.r.t. the log-scaling
        let v_fixed = v0;
        let err = finite_diff_check(
            move |t, d| {
                let v = t.constant(v_fixed.clone());
                let psi = t.exp(d)?;
                let z = t.scaled_act(v, psi, Activation::Tanh)?;
                let sq = t.hadamard(z, z)?;
                t.sum_all(sq)
            },
            &d0,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "scaled act grad wrt psi error {err}");
    }
}
