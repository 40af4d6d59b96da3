//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every primitive appends one node holding its output value and whatever
//! it needs for the adjoint. Nodes only ever reference earlier nodes, so a
//! single reverse sweep over the tape visits each node after all of its
//! consumers. Gradients for leaves created from trainable tensors
//! accumulate across `backward` calls until read out.

use crate::error::{Error, Result};

use super::tensor::{ParamSet, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalConv {
        x: Var,
        kernel: Var,
        bias: Var,
        seq_len: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<Option<usize>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Min(Var, Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    leaf_grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn matrix(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, shape, &[])),
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].leaf_grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            leaf_grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf copied from `t`; trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("constant", &shape, &[data.len()]));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Binds every tensor of `params` as a leaf. With `trainable == false`
    /// the leaves are constants and the set receives no gradient.
    pub fn bind(&mut self, params: &ParamSet, trainable: bool) -> Vec<Var> {
        params
            .iter()
            .map(|(_, t)| if trainable { self.leaf(t) } else { self.constant(t) })
            .collect()
    }

    /// Adds the leaf gradients of `vars` into the matching tensors of `params`.
    pub fn write_grads(&self, params: &mut ParamSet, vars: &[Var]) {
        for (slot, v) in vars.iter().enumerate() {
            if let Some(g) = self.grad(*v) {
                params.get_mut(slot).accumulate_grad(g);
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.shape(a), "matmul")?;
        let (k2, n) = matrix(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bb) in row.iter_mut().zip(brow) {
                    *o += s * bb;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg(&[a]);
        self.push(shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn min_elementwise(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "min")?;
        Ok(self.zip_with(a, b, Op::Min(a, b), f64::min))
    }

    /// Adds the vector `b` to every row of the matrix `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = matrix(self.shape(x), "add_row")?;
        if self.shape(b) != [n] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(b)));
        }
        let bv = &self.nodes[b.0].value;
        let mut out = self.nodes[x.0].value.clone();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(bv).for_each(|(o, bb)| *o += bb);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(vec![m, n], out, Op::AddRow(x, b), rg))
    }

    /// `x · w + b` for `x: [m×i]`, `w: [i×o]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        })
    }

    /// Row-wise layer normalization with affine `gain` and `shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let (m, n) = matrix(self.shape(x), "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(shift) != [n] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let sv = &self.nodes[shift.0].value;
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = gv[j] * h + sv[j];
            }
        }
        let rg = self.rg(&[x, gain, shift]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Depthwise causal convolution applied independently to consecutive
    /// blocks of `seq_len` rows. Row `i` of a block sees rows `i−w+1..=i`
    /// of the same block; earlier positions are zero padding. Tap `w−1`
    /// multiplies the current row.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, bias: Var, seq_len: usize) -> Result<Var> {
        let (m, d) = matrix(self.shape(x), "causal_conv1d")?;
        let (w, d2) = matrix(self.shape(kernel), "causal_conv1d")?;
        if w == 0 {
            return Err(Error::Config("convolution window must be at least 1".into()));
        }
        if d2 != d || self.shape(bias) != [d] {
            return Err(Error::dim("causal_conv1d", self.shape(x), self.shape(kernel)));
        }
        if seq_len == 0 || m % seq_len != 0 {
            return Err(Error::Config(format!(
                "{m} rows do not split into sequences of length {seq_len}"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[kernel.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut out = vec![0.0; m * d];
        for start in (0..m).step_by(seq_len) {
            for i in 0..seq_len {
                let o = &mut out[(start + i) * d..(start + i + 1) * d];
                o.copy_from_slice(bv);
                for j in 0..w {
                    // source row = i + j − (w − 1)
                    let Some(src) = (i + j).checked_sub(w - 1) else {
                        continue;
                    };
                    let xr = &xv[(start + src) * d..(start + src + 1) * d];
                    let kr = &kv[j * d..(j + 1) * d];
                    for c in 0..d {
                        o[c] += kr[c] * xr[c];
                    }
                }
            }
        }
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            vec![m, d],
            out,
            Op::CausalConv {
                x,
                kernel,
                bias,
                seq_len,
            },
            rg,
        ))
    }

    /// Selects rows of `x`; `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (m, n) = matrix(self.shape(x), "gather_rows")?;
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; index.len() * n];
        for (r, ix) in index.iter().enumerate() {
            if let Some(src) = *ix {
                if src >= m {
                    return Err(Error::Index { index: src, len: m });
                }
                out[r * n..(r + 1) * n].copy_from_slice(&xv[src * n..(src + 1) * n]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![index.len(), n], out, Op::GatherRows { x, index }, rg))
    }

    /// Row lookup into an embedding table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let (_, n) = matrix(self.shape(*first), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, c) = matrix(self.shape(*p), "concat_rows")?;
            if c != n {
                return Err(Error::dim("concat_rows", self.shape(*first), self.shape(*p)));
            }
            rows += r;
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, p) = matrix(self.shape(a), "concat_cols")?;
        let (m2, q) = matrix(self.shape(b), "concat_cols")?;
        if m != m2 {
            return Err(Error::dim("concat_cols", self.shape(a), self.shape(b)));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(&av[i * p..(i + 1) * p]);
            out.extend_from_slice(&bv[i * q..(i + 1) * q]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, p + q], out, Op::ConcatCols(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(Error::Usage("mean of empty tensor".into()));
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(vec![1], vec![s], Op::Mean(x), rg))
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.is_empty() {
            return Err(Error::Usage("mse of empty tensors".into()));
        }
        let s = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![1], vec![s], Op::Mse(a, b), rg))
    }

    /// Reverse sweep from the scalar `loss`, adding into the gradients of
    /// every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.leaf_grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.leaf_grad = Some(g),
                }
            } else {
                self.propagate(i, &g, &mut adj);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let rg = |v: &Var| nodes[v.0].requires_grad;
        let val = |v: &Var| nodes[v.0].value.as_slice();
        let len = |v: &Var| nodes[v.0].value.len();
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if rg(a) {
                    // dA = G·Bᵀ as row updates over a transposed copy of B,
                    // which vectorizes where per-entry dot products do not
                    let bv = val(b);
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv[p * n + j];
                        }
                    }
                    let da = acc(adj, *a, m * k);
                    for r in 0..m {
                        let dr = &mut da[r * k..(r + 1) * k];
                        for j in 0..n {
                            let s = g[r * n + j];
                            if s == 0.0 {
                                continue;
                            }
                            dr.iter_mut()
                                .zip(&bt[j * k..(j + 1) * k])
                                .for_each(|(d, x)| *d += s * x);
                        }
                    }
                }
                if rg(b) {
                    let av = val(a);
                    let db = acc(adj, *b, k * n);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let s = av[r * k + p];
                            if s == 0.0 {
                                continue;
                            }
                            let dr = &mut db[p * n..(p + 1) * n];
                            dr.iter_mut().zip(gr).for_each(|(d, x)| *d += s * x);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if rg(v) {
                        acc(adj, *v, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(a) {
                    acc(adj, *a, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if rg(b) {
                    acc(adj, *b, g.len()).iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                if rg(a) {
                    let bv = val(b);
                    let da = acc(adj, *a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if rg(b) {
                    let av = val(a);
                    let db = acc(adj, *b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (val(a), val(b));
                // ties route to `a`
                if rg(a) {
                    let da = acc(adj, *a, g.len());
                    for j in 0..g.len() {
                        if av[j] <= bv[j] {
                            da[j] += g[j];
                        }
                    }
                }
                if rg(b) {
                    let db = acc(adj, *b, g.len());
                    for j in 0..g.len() {
                        if av[j] > bv[j] {
                            db[j] += g[j];
                        }
                    }
                }
            }
            Op::AddRow(x, b) => {
                let n = len(b);
                if rg(x) {
                    acc(adj, *x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if rg(b) {
                    let db = acc(adj, *b, n);
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(adj, *x, g.len()).iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
            }
            Op::Relu(x) => {
                let xv = val(x);
                let dx = acc(adj, *x, g.len());
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        dx[j] += g[j];
                    }
                }
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.as_slice();
                let dx = acc(adj, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * (1.0 - y[j] * y[j]);
                }
            }
            Op::Gelu(x) => {
                let xv = val(x);
                let dx = acc(adj, *x, g.len());
                for j in 0..g.len() {
                    let v = xv[j];
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    dx[j] += g[j] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let n = len(gain);
                let m = inv_std.len();
                if rg(shift) {
                    let ds = acc(adj, *shift, n);
                    for row in g.chunks_exact(n) {
                        ds.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if rg(gain) {
                    let dg = acc(adj, *gain, n);
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if rg(x) {
                    let gv = val(gain);
                    let dx = acc(adj, *x, m * n);
                    let mut dh = vec![0.0; n];
                    for r in 0..m {
                        let h = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dh[j] = g[r * n + j] * gv[j];
                        }
                        let s1: f64 = dh.iter().sum();
                        let s2: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        let c = inv_std[r] / n as f64;
                        for j in 0..n {
                            dx[r * n + j] += c * (n as f64 * dh[j] - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::CausalConv {
                x,
                kernel,
                bias,
                seq_len,
            } => {
                let seq_len = *seq_len;
                let d = len(bias);
                let w = len(kernel) / d;
                let m = g.len() / d;
                if rg(bias) {
                    let db = acc(adj, *bias, d);
                    for row in g.chunks_exact(d) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if rg(kernel) {
                    let xv = val(x);
                    let dk = acc(adj, *kernel, w * d);
                    for start in (0..m).step_by(seq_len) {
                        for r in 0..seq_len {
                            for j in 0..w {
                                let Some(src) = (r + j).checked_sub(w - 1) else {
                                    continue;
                                };
                                for c in 0..d {
                                    dk[j * d + c] += g[(start + r) * d + c] * xv[(start + src) * d + c];
                                }
                            }
                        }
                    }
                }
                if rg(x) {
                    let kv = val(kernel);
                    let dx = acc(adj, *x, m * d);
                    for start in (0..m).step_by(seq_len) {
                        for r in 0..seq_len {
                            for j in 0..w {
                                let Some(src) = (r + j).checked_sub(w - 1) else {
                                    continue;
                                };
                                for c in 0..d {
                                    dx[(start + src) * d + c] += g[(start + r) * d + c] * kv[j * d + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let n = nodes[x.0].shape[1];
                let dx = acc(adj, *x, len(x));
                for (r, ix) in index.iter().enumerate() {
                    if let Some(src) = ix {
                        let dr = &mut dx[src * n..(src + 1) * n];
                        dr.iter_mut().zip(&g[r * n..(r + 1) * n]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let l = len(p);
                    if rg(p) {
                        acc(adj, *p, l)
                            .iter_mut()
                            .zip(&g[off..off + l])
                            .for_each(|(a, b)| *a += b);
                    }
                    off += l;
                }
            }
            Op::ConcatCols(a, b) => {
                let p = nodes[a.0].shape[1];
                let q = nodes[b.0].shape[1];
                let m = nodes[a.0].shape[0];
                if rg(a) {
                    let da = acc(adj, *a, m * p);
                    for r in 0..m {
                        for j in 0..p {
                            da[r * p + j] += g[r * (p + q) + j];
                        }
                    }
                }
                if rg(b) {
                    let db = acc(adj, *b, m * q);
                    for r in 0..m {
                        for j in 0..q {
                            db[r * q + j] += g[r * (p + q) + p + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let l = len(x);
                acc(adj, *x, l).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let l = len(x);
                let s = g[0] / l as f64;
                acc(adj, *x, l).iter_mut().for_each(|d| *d += s);
            }
            Op::Mse(a, b) => {
                let l = len(a);
                let s = 2.0 * g[0] / l as f64;
                let (av, bv) = (val(a), val(b));
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| s * (x - y)).collect();
                if rg(a) {
                    acc(adj, *a, l).iter_mut().zip(&diff).for_each(|(d, v)| *d += v);
                }
                if rg(b) {
                    acc(adj, *b, l).iter_mut().zip(&diff).for_each(|(d, v)| *d -= v);
                }
            }
        }
    }
}
