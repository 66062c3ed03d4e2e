//! Eager reverse-mode tape.
//!
//! Every op computes its value immediately and records enough state to run
//! its vector-Jacobian product later. Nodes are appended in evaluation order,
//! so the tape order is already a topological order and `backward` walks it
//! in reverse exactly once.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::params::ParamMap;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(NodeId),
    Silu(NodeId),
    Softmax {
        x: NodeId,
    },
    Concat(Vec<NodeId>),
    Slice {
        x: NodeId,
        start: usize,
    },
    MeanRows(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow {
        x: NodeId,
        v: NodeId,
    },
    MulCol {
        x: NodeId,
        col: NodeId,
    },
    BroadcastRows(NodeId),
    RowsMean {
        table: NodeId,
        rows: Vec<usize>,
    },
    SumSquares(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
}

/// A recorded computation. Parameter values are borrowed from the
/// [`ParamMap`] the graph was created with and never copied.
pub struct Graph<'a> {
    params: &'a ParamMap,
    nodes: Vec<Node<'a>>,
    param_nodes: BTreeMap<String, NodeId>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow { op })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `y[i, :] += x[i, :] · w` for row-major `x` (n × k), `w` (k × m), `y` (n × m).
fn matmul_acc(x: &[f64], w: &[f64], y: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let xr = &x[i * k..(i + 1) * k];
        let yr = &mut y[i * m..(i + 1) * m];
        for (kk, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[kk * m..(kk + 1) * m];
            for (yo, &wo) in yr.iter_mut().zip(wr) {
                *yo += xv * wo;
            }
        }
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamMap) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        check_finite(name, &value)?;
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Bind an input (or constant). Gradients reaching it are retained.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, t, "input")
    }

    /// Bind a named parameter from the graph's parameter map. Repeated calls
    /// with the same name return the same node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let params = self.params;
        let value = params
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter `{name}`")))?;
        check_finite("param", value)?;
        self.nodes.push(Node {
            op: Op::Param,
            value: Cow::Borrowed(value),
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x · w + b`. `x` is `[in]` or `[n, in]`, `w` is `[in, out]`, `b` is `[out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() > 2 || xv.cols() != wv.shape()[0] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} with weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (n, k, m) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
        let mut out = vec![0.0; n * m];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for output width {m}", bv.shape()),
                ));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_acc(xv.data(), wv.data(), &mut out, n, k, m);
        let shape = if xv.rank() == 1 { vec![m] } else { vec![n, m] };
        let value = Tensor::new(shape, out)?;
        self.push(Op::Linear { x, w, b }, value, "linear")
    }

    /// Same-padded 1-D convolution over the time axis.
    /// `x` is `[L, c_in]`, `w` is `[k, c_in, c_out]` with odd `k`, `b` is `[c_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 2 || wv.rank() != 3 || wv.shape()[1] != xv.shape()[1] || wv.shape()[0] % 2 == 0
        {
            return Err(Error::shape(
                "conv1d",
                format!("input {:?} with kernel {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (len, cin) = (xv.shape()[0], xv.shape()[1]);
        let (k, cout) = (wv.shape()[0], wv.shape()[2]);
        let pad = k / 2;
        let mut out = vec![0.0; len * cout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != cout {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias {:?} for {cout} channels", bv.shape()),
                ));
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for t in 0..len {
            let yr = &mut out[t * cout..(t + 1) * cout];
            for kk in 0..k {
                let src = t + kk;
                if src < pad || src - pad >= len {
                    continue;
                }
                let xr = &xd[(src - pad) * cin..(src - pad + 1) * cin];
                let wk = &wd[kk * cin * cout..(kk + 1) * cin * cout];
                for (c, &xc) in xr.iter().enumerate() {
                    if xc == 0.0 {
                        continue;
                    }
                    for (yo, &wo) in yr.iter_mut().zip(&wk[c * cout..(c + 1) * cout]) {
                        *yo += xc * wo;
                    }
                }
            }
        }
        let value = Tensor::new(vec![len, cout], out)?;
        self.push(Op::Conv1d { x, w, b }, value, "conv1d")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `cols(x)`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xr = &xv.data()[r * c..(r + 1) * c];
            let mean = xr.iter().sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (xr[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            value,
            "layer_norm",
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value, "relu")
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(Op::Silu(x), value, "silu")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last axis restricted to entries where `keep` is true;
    /// excluded entries are exactly zero and receive no gradient.
    pub fn softmax_masked(&mut self, x: NodeId, keep: Option<&[bool]>) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if let Some(k) = keep {
            if k.len() != xv.len() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} for {:?}", k.len(), xv.shape()),
                ));
            }
        }
        let mut out = vec![0.0; xv.len()];
        for (r, (xr, yr)) in xv.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let kept = |j: usize| keep.is_none_or(|k| k[r * c + j]);
            let max = (0..c)
                .filter(|&j| kept(j))
                .map(|j| xr[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::shape("softmax", "row with every entry masked"));
            }
            let mut z = 0.0;
            for j in (0..c).filter(|&j| kept(j)) {
                yr[j] = (xr[j] - max).exp();
                z += yr[j];
            }
            yr.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(Op::Softmax { x }, value, "softmax")
    }

    /// Concatenate along the last axis. All inputs must share rank and,
    /// for matrices, row count.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = self
            .value(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .shape()
            .to_vec();
        let rank = first.len();
        let rows = if rank == 2 { first[0] } else { 1 };
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let v = self.value(id);
            if v.rank() != rank || (rank == 2 && v.shape()[0] != rows) || rank > 2 {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} does not stack with {:?}", v.shape(), first),
                ));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&id, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(id).data()[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        let value = Tensor::new(shape, out)?;
        self.push(Op::Concat(inputs.to_vec()), value, "concat")
    }

    /// Slice `[start, end)` of the last axis.
    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let c = xv.cols();
        if start >= end || end > c || xv.rank() > 2 {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) of {:?}", xv.shape()),
            ));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(xv.rows() * w);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..end]);
        }
        let shape = if xv.rank() == 2 { vec![xv.rows(), w] } else { vec![w] };
        let value = Tensor::new(shape, out)?;
        self.push(Op::Slice { x, start }, value, "slice")
    }

    /// Mean over rows: `[n, c] -> [c]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.rows() == 0 {
            return Err(Error::shape("mean_rows", format!("{:?}", xv.shape())));
        }
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        self.push(Op::MeanRows(x), Tensor::vector(out), "mean_rows")
    }

    /// Mean of every element, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = xv.sum() / xv.len() as f64;
        self.push(Op::Mean(x), Tensor::scalar(v), "mean")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(v), "sum")
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), value, "sub")
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("hadamard", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(Op::Hadamard(a, b), value, "hadamard")
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * s);
        self.push(Op::Scale(x, s), value, "scale")
    }

    /// `x[i, :] + v` for every row `i`.
    pub fn add_row(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (xv, vv) = (self.value(x), self.value(v));
        if xv.cols() != vv.len() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", xv.shape(), vv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(vv.len()) {
            for (o, b) in row.iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(Op::AddRow { x, v }, value, "add_row")
    }

    /// `x[i, :] * col[i]`: scale each row of `x` (`[n, c]`) by one entry of
    /// `col` (`[n]` or `[n, 1]`).
    pub fn mul_col(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (xv, cv) = (self.value(x), self.value(col));
        if xv.rank() != 2 || cv.len() != xv.rows() {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} by column {:?}", xv.shape(), cv.shape()),
            ));
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(c).zip(cv.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(Op::MulCol { x, col }, value, "mul_col")
    }

    /// Repeat a vector `[c]` into `[rows, c]`.
    pub fn broadcast_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        let vv = self.value(v);
        if vv.rank() != 1 || rows == 0 {
            return Err(Error::shape(
                "broadcast_rows",
                format!("{:?} x {rows}", vv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(rows * vv.len());
        for _ in 0..rows {
            out.extend_from_slice(vv.data());
        }
        let value = Tensor::new(vec![rows, vv.len()], out)?;
        self.push(Op::BroadcastRows(v), value, "broadcast_rows")
    }

    /// Arithmetic mean of selected rows of `table`, where leading axes are
    /// flattened into the row index and the last axis is the row width.
    pub fn rows_mean(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let d = tv.cols();
        let n_rows = tv.len() / d.max(1);
        if rows.is_empty() || rows.iter().any(|&r| r >= n_rows) {
            return Err(Error::shape(
                "rows_mean",
                format!("rows {rows:?} of {:?}", tv.shape()),
            ));
        }
        let mut out = vec![0.0; d];
        for &r in rows {
            for (o, v) in out.iter_mut().zip(&tv.data()[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let inv = rows.len() as f64;
        out.iter_mut().for_each(|v| *v /= inv);
        self.push(
            Op::RowsMean {
                table,
                rows: rows.to_vec(),
            },
            Tensor::vector(out),
            "rows_mean",
        )
    }

    /// Sum of squared elements, as a scalar.
    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Op::SumSquares(x), Tensor::scalar(v), "sum_squares")
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 1 || label >= lv.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {label} for logits {:?}", lv.shape()),
            ));
        }
        let max = lv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = lv.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let loss = z.ln() + max - lv.data()[label];
        self.push(
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            Tensor::scalar(loss),
            "cross_entropy",
        )
    }

    /// Backpropagate a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if node.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output {:?} is not a scalar", node.value.shape()),
            ));
        }
        self.backward_with(output, Tensor::new(node.value.shape().to_vec(), vec![1.0])?)
    }

    /// Backpropagate an explicit output gradient.
    pub fn backward_with(&self, output: NodeId, output_grad: Tensor) -> Result<Gradients> {
        let node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        if node.value.shape() != output_grad.shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "output {:?}, gradient {:?}",
                    node.value.shape(),
                    output_grad.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(output_grad.into_data());

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|g| Tensor::new(n.value.shape().to_vec(), g))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients {
            grads,
            params: self.param_nodes.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |id: NodeId| -> &Tensor { &self.nodes[id.0].value };
        fn buf(grads: &mut [Option<Vec<f64>>], id: NodeId, n: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; n])
        }

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, k, m) = (xv.rows(), wv.shape()[0], wv.shape()[1]);
                {
                    let dx = buf(grads, *x, xv.len());
                    let wd = wv.data();
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let wr = &wd[kk * m..(kk + 1) * m];
                            dx[r * k + kk] += gr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                {
                    let dw = buf(grads, *w, wv.len());
                    let xd = xv.data();
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for kk in 0..k {
                            let xval = xd[r * k + kk];
                            if xval == 0.0 {
                                continue;
                            }
                            for (d, &gv) in dw[kk * m..(kk + 1) * m].iter_mut().zip(gr) {
                                *d += xval * gv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let db = buf(grads, *b, m);
                    for gr in g.chunks(m) {
                        for (d, gv) in db.iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (len, cin) = (xv.shape()[0], xv.shape()[1]);
                let (k, cout) = (wv.shape()[0], wv.shape()[2]);
                let pad = k / 2;
                let (xd, wd) = (xv.data(), wv.data());
                {
                    let dx = buf(grads, *x, xv.len());
                    for t in 0..len {
                        let gr = &g[t * cout..(t + 1) * cout];
                        for kk in 0..k {
                            let src = t + kk;
                            if src < pad || src - pad >= len {
                                continue;
                            }
                            let s = src - pad;
                            let wk = &wd[kk * cin * cout..(kk + 1) * cin * cout];
                            for c in 0..cin {
                                dx[s * cin + c] += gr
                                    .iter()
                                    .zip(&wk[c * cout..(c + 1) * cout])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                    }
                }
                {
                    let dw = buf(grads, *w, wv.len());
                    for t in 0..len {
                        let gr = &g[t * cout..(t + 1) * cout];
                        for kk in 0..k {
                            let src = t + kk;
                            if src < pad || src - pad >= len {
                                continue;
                            }
                            let s = src - pad;
                            for c in 0..cin {
                                let xval = xd[s * cin + c];
                                if xval == 0.0 {
                                    continue;
                                }
                                let off = kk * cin * cout + c * cout;
                                for (d, &gv) in dw[off..off + cout].iter_mut().zip(gr) {
                                    *d += xval * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    let db = buf(grads, *b, cout);
                    for gr in g.chunks(cout) {
                        for (d, gv) in db.iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(*gamma);
                let c = gv.len();
                let rows = xhat.len() / c;
                {
                    let dg = buf(grads, *gamma, c);
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                {
                    let db = buf(grads, *beta, c);
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                }
                let dx = buf(grads, *x, xhat.len());
                let inv_c = 1.0 / c as f64;
                for r in 0..rows {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..c {
                        let dh = g[r * c + j] * gv.data()[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[r * c + j];
                    }
                    for j in 0..c {
                        let dh = g[r * c + j] * gv.data()[j];
                        dx[r * c + j] +=
                            rstd[r] * (dh - inv_c * sum_dh - xhat[r * c + j] * inv_c * sum_dh_h);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let dx = buf(grads, *x, xv.len());
                for ((d, &xi), &gi) in dx.iter_mut().zip(xv.data()).zip(g) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Silu(x) => {
                let xv = val(*x);
                let dx = buf(grads, *x, xv.len());
                for ((d, &xi), &gi) in dx.iter_mut().zip(xv.data()).zip(g) {
                    let s = sigmoid(xi);
                    *d += gi * (s + xi * s * (1.0 - s));
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let c = node.value.cols();
                let dx = buf(grads, *x, y.len());
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Concat(inputs) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &id in inputs {
                    let w = val(id).cols();
                    let d = buf(grads, id, rows * w);
                    for r in 0..rows {
                        for j in 0..w {
                            d[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::Slice { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let w = node.value.cols();
                let d = buf(grads, *x, xv.len());
                for r in 0..xv.rows() {
                    for j in 0..w {
                        d[r * c + start + j] += g[r * w + j];
                    }
                }
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let d = buf(grads, *x, xv.len());
                let inv = 1.0 / n as f64;
                for r in 0..n {
                    for j in 0..c {
                        d[r * c + j] += g[j] * inv;
                    }
                }
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let d = buf(grads, *x, n);
                let s = g[0] / n as f64;
                d.iter_mut().for_each(|v| *v += s);
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                let d = buf(grads, *x, n);
                d.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Add(a, b) => {
                for id in [a, b] {
                    let d = buf(grads, *id, g.len());
                    for (v, gi) in d.iter_mut().zip(g) {
                        *v += gi;
                    }
                }
            }
            Op::Sub(a, b) => {
                let d = buf(grads, *a, g.len());
                for (v, gi) in d.iter_mut().zip(g) {
                    *v += gi;
                }
                let d = buf(grads, *b, g.len());
                for (v, gi) in d.iter_mut().zip(g) {
                    *v -= gi;
                }
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let d = buf(grads, *a, g.len());
                for ((v, gi), bi) in d.iter_mut().zip(g).zip(bv.data()) {
                    *v += gi * bi;
                }
                let d = buf(grads, *b, g.len());
                for ((v, gi), ai) in d.iter_mut().zip(g).zip(av.data()) {
                    *v += gi * ai;
                }
            }
            Op::Scale(x, s) => {
                let d = buf(grads, *x, g.len());
                for (v, gi) in d.iter_mut().zip(g) {
                    *v += gi * s;
                }
            }
            Op::AddRow { x, v } => {
                let c = val(*v).len();
                let d = buf(grads, *x, g.len());
                for (a, gi) in d.iter_mut().zip(g) {
                    *a += gi;
                }
                let dv = buf(grads, *v, c);
                for gr in g.chunks(c) {
                    for (a, gi) in dv.iter_mut().zip(gr) {
                        *a += gi;
                    }
                }
            }
            Op::MulCol { x, col } => {
                let (xv, cv) = (val(*x), val(*col));
                let c = xv.cols();
                {
                    let d = buf(grads, *x, g.len());
                    for ((dr, gr), &s) in d.chunks_mut(c).zip(g.chunks(c)).zip(cv.data()) {
                        for (a, gi) in dr.iter_mut().zip(gr) {
                            *a += gi * s;
                        }
                    }
                }
                let dc = buf(grads, *col, cv.len());
                for (r, (gr, xr)) in g.chunks(c).zip(xv.data().chunks(c)).enumerate() {
                    dc[r] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            Op::BroadcastRows(v) => {
                let c = val(*v).len();
                let d = buf(grads, *v, c);
                for gr in g.chunks(c) {
                    for (a, gi) in d.iter_mut().zip(gr) {
                        *a += gi;
                    }
                }
            }
            Op::RowsMean { table, rows } => {
                let tv = val(*table);
                let dd = tv.cols();
                let d = buf(grads, *table, tv.len());
                let inv = 1.0 / rows.len() as f64;
                for &r in rows {
                    for j in 0..dd {
                        d[r * dd + j] += g[j] * inv;
                    }
                }
            }
            Op::SumSquares(x) => {
                let xv = val(*x);
                let d = buf(grads, *x, xv.len());
                for (a, xi) in d.iter_mut().zip(xv.data()) {
                    *a += 2.0 * xi * g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let d = buf(grads, *logits, probs.len());
                for (j, (a, p)) in d.iter_mut().zip(probs).enumerate() {
                    let y = if j == *label { 1.0 } else { 0.0 };
                    *a += g[0] * (p - y);
                }
            }
        }
        Ok(())
    }
}

/// Result of a backward pass: gradients for every node the output depends on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, NodeId>,
}

impl Gradients {
    /// Gradient with respect to a node (input, parameter, or intermediate).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a named parameter, if it was used.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|id| self.get(*id))
    }

    /// Add every parameter gradient into the accumulators of `params`.
    pub fn accumulate_into(&self, params: &mut ParamMap) -> Result<()> {
        for (name, id) in &self.params {
            if let Some(g) = self.get(*id) {
                params.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty() -> ParamMap {
        ParamMap::new()
    }

    #[test]
    fn identity_linear_layer() {
        let mut pm = ParamMap::new();
        pm.insert("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        pm.insert("b", Tensor::zeros(&[2]));
        let mut g = Graph::new(&pm);
        let x = g.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let w = g.param("w").unwrap();
        let b = g.param("b").unwrap();
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn uniform_softmax() {
        let pm = empty();
        let mut g = Graph::new(&pm);
        let x = g.input(Tensor::zeros(&[3])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_softmax_zeroes_excluded() {
        let pm = empty();
        let mut g = Graph::new(&pm);
        let x = g.input(Tensor::vector(vec![1.0, 5.0, 2.0])).unwrap();
        let y = g.softmax_masked(x, Some(&[true, false, true])).unwrap();
        let v = g.value(y).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut pm = ParamMap::new();
        pm.insert("a", Tensor::vector(vec![0.3, -1.0, 2.0]));
        let mut g = Graph::new(&pm);
        let a = g.param("a").unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param("a").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        let mut pm = ParamMap::new();
        pm.insert("w", Tensor::zeros(&[2, 3]));
        let mut g = Graph::new(&pm);
        let x = g.input(Tensor::vector(vec![0.5, -2.0])).unwrap();
        let w = g.param("w").unwrap();
        let y = g.linear(x, w, None).unwrap();
        let l = g.sum_squares(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.param("w").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let pm = empty();
        let g = Graph::new(&pm);
        let mut other_pm = ParamMap::new();
        other_pm.insert("x", Tensor::scalar(1.0));
        let mut other = Graph::new(&other_pm);
        let id = other.param("x").unwrap();
        assert!(matches!(g.backward(id), Err(Error::State(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let pm = empty();
        let mut g = Graph::new(&pm);
        let a = g.input(Tensor::zeros(&[2])).unwrap();
        let b = g.input(Tensor::zeros(&[3])).unwrap();
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        assert!(err.to_string().contains("[2]"));
    }

    #[test]
    fn non_finite_is_surfaced() {
        let pm = empty();
        let mut g = Graph::new(&pm);
        let a = g.input(Tensor::vector(vec![1e300])).unwrap();
        let b = g.input(Tensor::vector(vec![1e300])).unwrap();
        assert!(matches!(
            g.hadamard(a, b),
            Err(Error::NumericOverflow { op: "hadamard" })
        ));
        assert!(g.input(Tensor::vector(vec![f64::NAN])).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let pm = empty();
        let mut g = Graph::new(&pm);
        let a = g.input(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = g.input(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = g.slice(c, 1, 3).unwrap();
        assert_eq!(g.value(s), g.value(b));
    }
}
