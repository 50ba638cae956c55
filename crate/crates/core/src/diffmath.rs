//! Dense 64-bit tensors, a reverse-mode tape, and k-nearest-neighbor graphs.
//!
//! The tape is dynamic: every op appends a node holding its forward value,
//! and [`Tape::backward`] walks the nodes in reverse. Only the handful of ops
//! the graph networks need are provided. Tensors are row-major; `matmul`
//! treats all leading dimensions of its left operand as rows.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Columns when viewed as a matrix (the last dimension).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Rows when viewed as a matrix (product of leading dimensions).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row `i` of the N×k matrix lists the k nearest other rows of the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    n: usize,
    k: usize,
    indices: Vec<u32>,
}

impl NeighborGraph {
    pub fn from_indices(n: usize, k: usize, indices: Vec<u32>) -> Result<Self> {
        if indices.len() != n * k {
            return Err(Error::Dimension("neighbor matrix must be N×k".into()));
        }
        for (i, row) in indices.chunks(k.max(1)).enumerate() {
            for (s, &j) in row.iter().enumerate() {
                if j as usize >= n || j as usize == i || row[..s].contains(&j) {
                    return Err(Error::Dimension(format!("invalid neighbor row {i}")));
                }
            }
        }
        Ok(Self { n, k, indices })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Block-diagonal union of several graphs with equal `k`; node ids of
    /// graph `g` are offset by the sizes of graphs `0..g`.
    pub fn stack<'a>(graphs: impl IntoIterator<Item = &'a NeighborGraph>) -> Result<Self> {
        let mut n = 0usize;
        let mut k = None;
        let mut indices = Vec::new();
        for g in graphs {
            if *k.get_or_insert(g.k) != g.k {
                return Err(Error::Dimension("stacked graphs disagree on k".into()));
            }
            indices.extend(g.indices.iter().map(|&j| j + n as u32));
            n += g.n;
        }
        Ok(Self {
            n,
            k: k.unwrap_or(0),
            indices,
        })
    }

    /// Same graph with node ids relabelled: node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut indices = vec![0u32; self.indices.len()];
        for i in 0..self.n {
            let dst = perm[i];
            for s in 0..self.k {
                indices[dst * self.k + s] = perm[self.indices[i * self.k + s] as usize] as u32;
            }
        }
        Self {
            n: self.n,
            k: self.k,
            indices,
        }
    }
}

/// Euclidean k-nearest-neighbor graph over the rows of `points` (N×d),
/// excluding self, distance ties broken by lower row index.
pub fn knn_graph(points: &Tensor, k: usize) -> Result<NeighborGraph> {
    let (n, d) = (points.rows(), points.cols());
    if k >= n {
        return Err(Error::Config(format!("k = {k} must be below N = {n}")));
    }
    let p = points.data();
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        let pi = &p[i * d..(i + 1) * d];
        for j in (0..n).filter(|&j| j != i) {
            let pj = &p[j * d..(j + 1) * d];
            let dist: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
            cand.push((dist, j));
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        indices.extend(cand.iter().map(|&(_, j)| j as u32));
    }
    Ok(NeighborGraph { n, k, indices })
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Square(Var),
    Min(Var, Var),
    SumAll(Var),
    RowSum(Var),
    LogSoftmaxRows(Var),
    GatherCols { input: Var, index: Vec<u32> },
    EdgeCombine { center: Var, neighbor: Var, graph: Vec<u32>, k: usize },
    NeighborMaxPool { input: Var, argmax: Vec<u32> },
    EdgeConv(Box<EdgeConvCache>),
    Reshape(Var),
}

#[derive(Debug)]
struct EdgeConvCache {
    center: Var,
    neighbor: Var,
    weight: Var,
    bias: Var,
    graph: Vec<u32>,
    k: usize,
    slope: f64,
    /// Activated first-layer edge features, `[N·k, H_in]`.
    edges: Vec<f64>,
    /// Winning slot and its pre-activation per node and output channel.
    argmax: Vec<u32>,
    winner_pre: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded recording of a computation.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// `c = a·b` (+ `c` when `accumulate`), with optional transposes expressed
/// through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m·k, k·n and m·n elements laid out with
    // the strides computed above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if no gradient
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 {
            return Err(Error::Dimension("matmul right operand must be 2-D".into()));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(Error::Dimension(format!(
                "matmul {:?} × {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let mut shape = ta.shape()[..ta.shape().len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data: out }, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.len() != c {
            return Err(Error::Dimension("bias length must equal column count".into()));
        }
        let mut out = ta.clone();
        for row in out.data.chunks_mut(c) {
            row.iter_mut().zip(tb.data()).for_each(|(x, b)| *x += b);
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor { shape, data }, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Element-wise minimum; the gradient goes to `a` on ties.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "min")?;
        Ok(self.binary(a, b, Op::Min(a, b), |x, y| if x <= y { x } else { y }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddConst(a), |x| x + k)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row of a matrix: `[R×C] → [R]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let data: Vec<f64> = t.data().chunks(c).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        let shape = vec![data.len()];
        self.push(Tensor { shape, data }, Op::RowSum(a), rg)
    }

    /// Row-wise log-softmax with max subtraction. A 1-D input is one row.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Dimension("log_softmax of an empty tensor".into()));
        }
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x = (*x - max) - log_sum);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmaxRows(a), rg))
    }

    /// Picks `index[r·m + j]` from row `r`: `[R×C] → [R×m]`.
    pub fn gather_cols(&mut self, a: Var, index: Vec<u32>, m: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if index.len() != r * m || index.iter().any(|&j| j as usize >= c) {
            return Err(Error::Dimension("gather index does not fit the input".into()));
        }
        let data: Vec<f64> = index
            .iter()
            .enumerate()
            .map(|(p, &j)| t.data()[(p / m) * c + j as usize])
            .collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![r, m],
                data,
            },
            Op::GatherCols { input: a, index },
            rg,
        ))
    }

    /// EdgeConv edge features after the first linear map. With
    /// `center = X·W_c + b` and `neighbor = X·W_d`, the output row `(i, s)` is
    /// `center_i + neighbor_j − neighbor_i` for the `s`-th neighbor `j` of
    /// `i`, which equals `[x_i, x_j − x_i]·[W_c; W_d] + b`. Shape `[N, k, H]`.
    pub fn edge_combine(&mut self, center: Var, neighbor: Var, graph: &NeighborGraph) -> Result<Var> {
        self.same_shape(center, neighbor, "edge_combine")?;
        let (tc, tn) = (self.value(center), self.value(neighbor));
        let (n, h, k) = (tc.rows(), tc.cols(), graph.k());
        if graph.n() != n {
            return Err(Error::Dimension(format!(
                "graph over {} nodes, features over {n}",
                graph.n()
            )));
        }
        let mut out = vec![0.0; n * k * h];
        for i in 0..n {
            let ci = &tc.data()[i * h..(i + 1) * h];
            let ni = &tn.data()[i * h..(i + 1) * h];
            for (s, &j) in graph.row(i).iter().enumerate() {
                let nj = &tn.data()[j as usize * h..(j as usize + 1) * h];
                let dst = &mut out[(i * k + s) * h..(i * k + s + 1) * h];
                for q in 0..h {
                    dst[q] = ci[q] + nj[q] - ni[q];
                }
            }
        }
        let rg = self.rg(center) || self.rg(neighbor);
        Ok(self.push(
            Tensor {
                shape: vec![n, k, h],
                data: out,
            },
            Op::EdgeCombine {
                center,
                neighbor,
                graph: graph.indices().to_vec(),
                k,
            },
            rg,
        ))
    }

    /// Per node and channel, the maximum over the `k` neighbor slots of an
    /// `[N·k, H]` or `[N, k, H]` input. Ties route the gradient to the lowest
    /// slot.
    pub fn neighbor_max_pool(&mut self, edges: Var, graph: &NeighborGraph) -> Result<Var> {
        let t = self.value(edges);
        let (n, k, h) = (graph.n(), graph.k(), t.cols());
        if t.rows() != n * k {
            return Err(Error::Dimension(format!(
                "edge features {:?} do not match a {n}×{k} graph",
                t.shape()
            )));
        }
        let mut out = vec![f64::NEG_INFINITY; n * h];
        let mut argmax = vec![0u32; n * h];
        for i in 0..n {
            for s in 0..k {
                let row = &t.data()[(i * k + s) * h..(i * k + s + 1) * h];
                for q in 0..h {
                    if row[q] > out[i * h + q] {
                        out[i * h + q] = row[q];
                        argmax[i * h + q] = s as u32;
                    }
                }
            }
        }
        let rg = self.rg(edges);
        Ok(self.push(
            Tensor {
                shape: vec![n, h],
                data: out,
            },
            Op::NeighborMaxPool { input: edges, argmax },
            rg,
        ))
    }

    /// One edge-convolution block in a single node:
    /// `max_s leaky(leaky(center_i + neighbor_j − neighbor_i)·W + b)` over
    /// the `k` neighbor slots `j` of each node `i`. Equal to
    /// [`Tape::edge_combine`], [`Tape::leaky_relu`], [`Tape::matmul`],
    /// [`Tape::add_bias`], [`Tape::leaky_relu`] and
    /// [`Tape::neighbor_max_pool`] in sequence, but the backward pass only
    /// visits the winning edges.
    pub fn edge_conv(
        &mut self,
        center: Var,
        neighbor: Var,
        weight: Var,
        bias: Var,
        graph: &NeighborGraph,
        slope: f64,
    ) -> Result<Var> {
        self.same_shape(center, neighbor, "edge_conv")?;
        let (tc, tn, tw, tb) = (
            self.value(center),
            self.value(neighbor),
            self.value(weight),
            self.value(bias),
        );
        let (n, hin, k) = (tc.rows(), tc.cols(), graph.k());
        let hout = tw.cols();
        if graph.n() != n || tw.shape() != [hin, hout] || tb.len() != hout {
            return Err(Error::Dimension(format!(
                "edge_conv: features {:?}, weight {:?}, bias {:?}, graph over {} nodes",
                tc.shape(),
                tw.shape(),
                tb.shape(),
                graph.n()
            )));
        }
        let mut edges = vec![0.0; n * k * hin];
        for i in 0..n {
            let ci = &tc.data()[i * hin..(i + 1) * hin];
            let ni = &tn.data()[i * hin..(i + 1) * hin];
            for (s, &j) in graph.row(i).iter().enumerate() {
                let nj = &tn.data()[j as usize * hin..(j as usize + 1) * hin];
                let dst = &mut edges[(i * k + s) * hin..(i * k + s + 1) * hin];
                for q in 0..hin {
                    let v = ci[q] + nj[q] - ni[q];
                    dst[q] = if v > 0.0 { v } else { slope * v };
                }
            }
        }
        let mut pre = vec![0.0; n * k * hout];
        gemm(n * k, hin, hout, &edges, false, tw.data(), false, &mut pre, false);
        let mut out = vec![f64::NEG_INFINITY; n * hout];
        let mut argmax = vec![0u32; n * hout];
        let mut winner_pre = vec![0.0; n * hout];
        for i in 0..n {
            for s in 0..k {
                let row = &pre[(i * k + s) * hout..(i * k + s + 1) * hout];
                for q in 0..hout {
                    let z = row[q] + tb.data()[q];
                    let y = if z > 0.0 { z } else { slope * z };
                    if y > out[i * hout + q] {
                        out[i * hout + q] = y;
                        argmax[i * hout + q] = s as u32;
                        winner_pre[i * hout + q] = z;
                    }
                }
            }
        }
        let rg = self.rg(center) || self.rg(neighbor) || self.rg(weight) || self.rg(bias);
        let value = Tensor {
            shape: vec![n, hout],
            data: out,
        };
        let cache = EdgeConvCache {
            center,
            neighbor,
            weight,
            bias,
            graph: if rg { graph.indices().to_vec() } else { Vec::new() },
            k,
            slope,
            edges: if rg { edges } else { Vec::new() },
            argmax,
            winner_pre,
        };
        Ok(self.push(value, Op::EdgeConv(Box::new(cache)), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} to {shape:?}",
                t.shape()
            )));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: t.data().to_vec(),
        };
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    /// Reverse-mode accumulation from a scalar node. A tape supports a
    /// single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let nodes = &self.nodes;
            let len_of = |v: Var| nodes[v.0].value.len();
            let need = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if need(*a) {
                        Self::accumulate(&mut grads, *a, m * k, |ga| {
                            gemm(m, n, k, &g, false, tb.data(), true, ga, true)
                        });
                    }
                    if need(*b) {
                        Self::accumulate(&mut grads, *b, k * n, |gb| {
                            gemm(k, m, n, ta.data(), true, &g, false, gb, true)
                        });
                    }
                }
                Op::AddBias(a, b) => {
                    if need(*a) {
                        Self::accumulate(&mut grads, *a, g.len(), |ga| {
                            ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                        });
                    }
                    if need(*b) {
                        let c = len_of(*b);
                        Self::accumulate(&mut grads, *b, c, |gb| {
                            for row in g.chunks(c) {
                                gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                            }
                        });
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    if need(*a) {
                        Self::accumulate(&mut grads, *a, g.len(), |ga| {
                            ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                        });
                    }
                    if need(*b) {
                        Self::accumulate(&mut grads, *b, g.len(), |gb| {
                            gb.iter_mut().zip(&g).for_each(|(x, y)| *x += sign * y)
                        });
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if need(*a) {
                        Self::accumulate(&mut grads, *a, g.len(), |ga| {
                            for i in 0..g.len() {
                                ga[i] += g[i] * vb[i];
                            }
                        });
                    }
                    if need(*b) {
                        Self::accumulate(&mut grads, *b, g.len(), |gb| {
                            for i in 0..g.len() {
                                gb[i] += g[i] * va[i];
                            }
                        });
                    }
                }
                Op::Min(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if need(*a) {
                        Self::accumulate(&mut grads, *a, g.len(), |ga| {
                            for i in 0..g.len() {
                                if va[i] <= vb[i] {
                                    ga[i] += g[i];
                                }
                            }
                        });
                    }
                    if need(*b) {
                        Self::accumulate(&mut grads, *b, g.len(), |gb| {
                            for i in 0..g.len() {
                                if va[i] > vb[i] {
                                    gb[i] += g[i];
                                }
                            }
                        });
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    Self::accumulate(&mut grads, *a, g.len(), |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += k * y)
                    });
                }
                Op::AddConst(a) | Op::Reshape(a) => {
                    Self::accumulate(&mut grads, *a, g.len(), |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                    });
                }
                Op::LeakyRelu(a, slope) => {
                    let va = nodes[a.0].value.data();
                    let slope = *slope;
                    Self::accumulate(&mut grads, *a, g.len(), |ga| {
                        for i in 0..g.len() {
                            ga[i] += if va[i] > 0.0 { g[i] } else { slope * g[i] };
                        }
                    });
                }
                Op::Exp(a) => {
                    let out = node.value.data();
                    Self::accumulate(&mut grads, *a, g.len(), |ga| {
                        for i in 0..g.len() {
                            ga[i] += g[i] * out[i];
                        }
                    });
                }
                Op::Square(a) => {
                    let va = nodes[a.0].value.data();
                    Self::accumulate(&mut grads, *a, g.len(), |ga| {
                        for i in 0..g.len() {
                            ga[i] += 2.0 * va[i] * g[i];
                        }
                    });
                }
                Op::SumAll(a) => {
                    let s = g[0];
                    Self::accumulate(&mut grads, *a, len_of(*a), |ga| {
                        ga.iter_mut().for_each(|x| *x += s)
                    });
                }
                Op::RowSum(a) => {
                    let c = nodes[a.0].value.cols();
                    Self::accumulate(&mut grads, *a, len_of(*a), |ga| {
                        for (r, row) in ga.chunks_mut(c).enumerate() {
                            row.iter_mut().for_each(|x| *x += g[r]);
                        }
                    });
                }
                Op::LogSoftmaxRows(a) => {
                    let out = &node.value;
                    let c = out.cols();
                    Self::accumulate(&mut grads, *a, g.len(), |ga| {
                        for ((gr, orow), dst) in g.chunks(c).zip(out.data().chunks(c)).zip(ga.chunks_mut(c)) {
                            let total: f64 = gr.iter().sum();
                            for q in 0..c {
                                dst[q] += gr[q] - orow[q].exp() * total;
                            }
                        }
                    });
                }
                Op::GatherCols { input, index } => {
                    let c = nodes[input.0].value.cols();
                    let m = node.value.cols();
                    Self::accumulate(&mut grads, *input, len_of(*input), |ga| {
                        for (p, &j) in index.iter().enumerate() {
                            ga[(p / m) * c + j as usize] += g[p];
                        }
                    });
                }
                Op::EdgeCombine {
                    center,
                    neighbor,
                    graph,
                    k,
                } => {
                    let h = nodes[center.0].value.cols();
                    let n = nodes[center.0].value.rows();
                    let k = *k;
                    // per-node sum over the k edge slots
                    let mut slot_sum = vec![0.0; n * h];
                    for i in 0..n {
                        let dst = &mut slot_sum[i * h..(i + 1) * h];
                        for s in 0..k {
                            let src = &g[(i * k + s) * h..(i * k + s + 1) * h];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    if need(*center) {
                        Self::accumulate(&mut grads, *center, n * h, |gc| {
                            gc.iter_mut().zip(&slot_sum).for_each(|(x, y)| *x += y)
                        });
                    }
                    if need(*neighbor) {
                        Self::accumulate(&mut grads, *neighbor, n * h, |gn| {
                            gn.iter_mut().zip(&slot_sum).for_each(|(x, y)| *x -= y);
                            for i in 0..n {
                                for s in 0..k {
                                    let j = graph[i * k + s] as usize;
                                    let src = &g[(i * k + s) * h..(i * k + s + 1) * h];
                                    gn[j * h..(j + 1) * h]
                                        .iter_mut()
                                        .zip(src)
                                        .for_each(|(x, y)| *x += y);
                                }
                            }
                        });
                    }
                }
                Op::EdgeConv(cache) => {
                    let EdgeConvCache {
                        center,
                        neighbor,
                        weight,
                        bias,
                        graph,
                        k,
                        slope,
                        edges,
                        argmax,
                        winner_pre,
                    } = cache.as_ref();
                    let (k, slope) = (*k, *slope);
                    let w = nodes[weight.0].value.data();
                    let (hin, hout) = (nodes[weight.0].value.rows(), nodes[weight.0].value.cols());
                    let n = node.value.rows();
                    let mut gw = vec![0.0; hin * hout];
                    let mut gb = vec![0.0; hout];
                    let mut gc = vec![0.0; n * hin];
                    let mut gn = vec![0.0; n * hin];
                    let mut local = vec![0.0; k * hin];
                    let mut touched = vec![false; k];
                    for i in 0..n {
                        local.iter_mut().for_each(|v| *v = 0.0);
                        touched.iter_mut().for_each(|t| *t = false);
                        for q in 0..hout {
                            let z = winner_pre[i * hout + q];
                            let gz = g[i * hout + q] * if z > 0.0 { 1.0 } else { slope };
                            if gz == 0.0 {
                                continue;
                            }
                            let s = argmax[i * hout + q] as usize;
                            touched[s] = true;
                            gb[q] += gz;
                            let e = &edges[(i * k + s) * hin..(i * k + s + 1) * hin];
                            let ls = &mut local[s * hin..(s + 1) * hin];
                            for r in 0..hin {
                                gw[r * hout + q] += gz * e[r];
                                ls[r] += gz * w[r * hout + q];
                            }
                        }
                        for s in (0..k).filter(|&s| touched[s]) {
                            let j = graph[i * k + s] as usize;
                            let e = &edges[(i * k + s) * hin..(i * k + s + 1) * hin];
                            for r in 0..hin {
                                let d = local[s * hin + r] * if e[r] > 0.0 { 1.0 } else { slope };
                                gc[i * hin + r] += d;
                                gn[j * hin + r] += d;
                                gn[i * hin + r] -= d;
                            }
                        }
                    }
                    for (v, buf) in [(*center, gc), (*neighbor, gn), (*weight, gw), (*bias, gb)] {
                        if need(v) {
                            Self::accumulate(&mut grads, v, buf.len(), |acc| {
                                acc.iter_mut().zip(&buf).for_each(|(x, y)| *x += y)
                            });
                        }
                    }
                }
                Op::NeighborMaxPool { input, argmax } => {
                    let h = node.value.cols();
                    let n = node.value.rows();
                    let k = nodes[input.0].value.rows() / n;
                    Self::accumulate(&mut grads, *input, len_of(*input), |gi| {
                        for i in 0..n {
                            for q in 0..h {
                                let s = argmax[i * h + q] as usize;
                                gi[(i * k + s) * h + q] += g[i * h + q];
                            }
                        }
                    });
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

/// Maximum over coordinates of `|analytic − numeric| / max(1e-8, |analytic| +
/// |numeric|)`, with the numeric gradient from central differences of width
/// `step`. `f` builds a scalar from the parameter leaf it is given.
pub fn gradient_check<F>(f: F, params: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_coords(f, params, step, &(0..params.len()).collect::<Vec<_>>())
}

/// [`gradient_check`] restricted to the listed coordinates.
pub fn gradient_check_coords<F>(f: F, params: &Tensor, step: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = tape.param(params.clone());
    let out = f(&mut tape, p)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(p)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; params.len()]);
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.param(t.clone());
        let out = f(&mut tape, p)?;
        Ok(tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for &i in coords {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let up = eval(&probe)?;
        probe.data[i] = orig - step;
        let down = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub const PARAMS_HEADER: &str = "DIFFMATH-PARAMS v1";

/// Writes named tensors: the header line, then per tensor a line
/// `name dims...` and a line of row-major values at 17 significant digits.
pub fn write_params(out: &mut String, params: &[(String, Tensor)]) {
    out.push_str(PARAMS_HEADER);
    out.push('\n');
    for (name, t) in params {
        out.push_str(name);
        for d in t.shape() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for (i, v) in t.data().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
}

/// Parses the output of [`write_params`]. `first_line` is the 1-based line
/// number of the header within a larger file, for error messages.
pub fn read_params(text: &str, first_line: usize) -> Result<Vec<(String, Tensor)>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + first_line, l));
    match lines.next() {
        Some((_, l)) if l.trim() == PARAMS_HEADER => {}
        Some((no, l)) if l.starts_with("DIFFMATH-PARAMS") => {
            return Err(Error::UnsupportedVersion(format!("line {no}: `{l}`")))
        }
        Some((no, _)) => {
            return Err(Error::Parse {
                line: no,
                msg: format!("expected `{PARAMS_HEADER}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: first_line,
                msg: "empty parameter block".into(),
            })
        }
    }
    let mut out = Vec::new();
    while let Some((no, head)) = lines.next() {
        if head.trim().is_empty() {
            continue;
        }
        let mut toks = head.split_whitespace();
        let name = toks.next().unwrap_or_default().to_string();
        let shape: Vec<usize> = toks
            .map(|t| {
                t.parse().map_err(|_| Error::Parse {
                    line: no,
                    msg: format!("invalid dimension `{t}`"),
                })
            })
            .collect::<Result<_>>()?;
        let (vno, vals) = lines.next().ok_or(Error::Parse {
            line: no + 1,
            msg: format!("missing values for `{name}`"),
        })?;
        let data: Vec<f64> = vals
            .split_whitespace()
            .map(|t| {
                t.parse().map_err(|_| Error::Parse {
                    line: vno,
                    msg: format!("invalid real `{t}`"),
                })
            })
            .collect::<Result<_>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::Parse {
            line: vno,
            msg: e.to_string(),
        })?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let v = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let r = tape.matmul(id, v).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 4.0]);
        let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let r = tape.matmul(row, v).unwrap();
        assert_eq!(tape.value(r).data(), &[11.0]);
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let any = tape.constant(t(&[2, 2], &[5.0, -1.0, 2.0, 7.0]));
        let r = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0; 4]);
        assert!(matches!(tape.matmul(v, v), Err(Error::Dimension(_))));
    }

    #[test]
    fn log_softmax_examples() {
        let mut tape = Tape::new();
        let h = 0.5f64.ln();
        for input in [[0.0, 0.0], [1000.0, 1000.0]] {
            let x = tape.constant(t(&[2], &input));
            let y = tape.log_softmax(x).unwrap();
            assert!(tape.value(y).data().iter().all(|v| (v - h).abs() < 1e-15));
        }
        let x = tape.constant(t(&[2], &[1.0f64.ln(), 3.0f64.ln()]));
        let y = tape.log_softmax(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25f64.ln()).abs() < 1e-15 && (d[1] - 0.75f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn max_pool_examples_and_tie_routing() {
        let g = NeighborGraph::from_indices(3, 2, vec![1, 2, 0, 2, 0, 1]).unwrap();
        let mut tape = Tape::new();
        let e = tape.param(t(&[3, 2, 1], &[1.0, 5.0, 2.0, 2.0, -3.0, -1.0]));
        let p = tape.neighbor_max_pool(e, &g).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 2.0, -1.0]);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(e).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn knn_examples() {
        let pts = t(&[3, 1], &[0.0, 1.0, 10.0]);
        let g = knn_graph(&pts, 1).unwrap();
        assert_eq!(g.indices(), &[1, 0, 1]);
        // middle point equidistant from both ends
        let pts = t(&[3, 1], &[-1.0, 0.0, 1.0]);
        assert_eq!(knn_graph(&pts, 1).unwrap().row(1), &[0]);
        let g = knn_graph(&pts, 2).unwrap();
        for i in 0..3 {
            let mut r: Vec<u32> = g.row(i).to_vec();
            r.sort();
            let expect: Vec<u32> = (0..3).filter(|&j| j != i as u32).collect();
            assert_eq!(r, expect);
        }
        assert!(matches!(knn_graph(&pts, 3), Err(Error::Config(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));

        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let v = tape.constant(t(&[2, 1], &[5.0, 7.0]));
        let mv = tape.matmul(w, v).unwrap();
        let s = tape.sum(mv);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[5.0, 7.0, 5.0, 7.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[0.0, 0.0]));
        let l = tape.log_softmax(x).unwrap();
        let first = tape.gather_cols(l, vec![0], 1).unwrap();
        let s = tape.sum(first);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] + 0.5).abs() < 1e-15);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_check_simple_cases() {
        let sq = |tape: &mut Tape, p: Var| Ok(tape.square(p));
        assert!(gradient_check(sq, &Tensor::scalar(3.0), 1e-5).unwrap() < 1e-6);
        let constant = |tape: &mut Tape, _p: Var| Ok(tape.constant(Tensor::scalar(2.0)));
        assert!(gradient_check(constant, &Tensor::scalar(1.0), 1e-5).unwrap() < 1e-4);
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let bias = random(&[4], &mut rng);
        let other = random(&[3, 4], &mut rng);
        let pts = random(&[5, 2], &mut rng);
        let graph = knn_graph(&pts, 3).unwrap();
        let feats = random(&[5, 3], &mut rng);
        let weights = random(&[3, 4], &mut rng);
        let square = random(&[4, 4], &mut rng);
        let tol = 1e-4;
        let step = 1e-5;
        let checks: Vec<(&str, f64)> = vec![
            ("matmul", gradient_check(|tp, p| {
                let c = tp.constant(b.clone());
                let m = tp.matmul(p, c)?;
                let sq = tp.square(m);
                Ok(tp.sum(sq))
            }, &a, step).unwrap()),
            ("matmul_rhs", gradient_check(|tp, p| {
                let c = tp.constant(a.clone());
                let m = tp.matmul(c, p)?;
                let sq = tp.square(m);
                Ok(tp.sum(sq))
            }, &b, step).unwrap()),
            ("add_bias", gradient_check(|tp, p| {
                let c = tp.constant(a.clone());
                let m = tp.add_bias(c, p)?;
                let sq = tp.square(m);
                Ok(tp.sum(sq))
            }, &bias, step).unwrap()),
            ("add_sub_mul", gradient_check(|tp, p| {
                let o = tp.constant(other.clone());
                let s = tp.add(p, o)?;
                let d = tp.sub(s, p)?;
                let m = tp.mul(p, d)?;
                let m2 = tp.mul(m, p)?;
                Ok(tp.sum(m2))
            }, &a, step).unwrap()),
            ("min", gradient_check(|tp, p| {
                let o = tp.constant(other.clone());
                let m = tp.min(p, o)?;
                let sq = tp.square(m);
                Ok(tp.sum(sq))
            }, &a, step).unwrap()),
            ("leaky_exp_scale", gradient_check(|tp, p| {
                let l = tp.leaky_relu(p, 0.2);
                let e = tp.exp(l);
                let s = tp.scale(e, 0.7);
                let c = tp.add_const(s, 1.5);
                let sq = tp.square(c);
                Ok(tp.mean(sq))
            }, &a, step).unwrap()),
            ("log_softmax_gather_rowsum", gradient_check(|tp, p| {
                let l = tp.log_softmax(p)?;
                let g = tp.gather_cols(l, vec![0, 2, 1, 3, 3, 0], 2)?;
                let w = tp.constant(other.clone());
                let lw = tp.mul(l, w)?;
                let r = tp.row_sum(lw);
                let s1 = tp.sum(g);
                let s2 = tp.sum(r);
                let sq = tp.square(s2);
                let out = tp.add(s1, sq)?;
                Ok(out)
            }, &a, step).unwrap()),
            ("edge_combine_max_pool", gradient_check(|tp, p| {
                let x = tp.constant(feats.clone());
                let c = tp.matmul(x, p)?;
                let n = tp.matmul(x, p)?;
                let n = tp.scale(n, -0.5);
                let e = tp.edge_combine(c, n, &graph)?;
                let r = tp.leaky_relu(e, 0.2);
                let m = tp.neighbor_max_pool(r, &graph)?;
                let sq = tp.square(m);
                Ok(tp.sum(sq))
            }, &weights, step).unwrap()),
            ("edge_conv_weight", gradient_check(|tp, p| {
                let x = tp.constant(feats.clone());
                let w = tp.constant(weights.clone());
                let c = tp.matmul(x, w)?;
                let n = tp.scale(c, -0.5);
                let b = tp.constant(Tensor::from_fn(&[4], |i| 0.1 * i as f64 - 0.15));
                let e = tp.edge_conv(c, n, p, b, &graph, 0.2)?;
                let sq = tp.square(e);
                Ok(tp.sum(sq))
            }, &square, step).unwrap()),
            ("edge_conv_inputs", gradient_check(|tp, p| {
                let x = tp.constant(feats.clone());
                let c = tp.matmul(x, p)?;
                let n = tp.matmul(x, p)?;
                let n = tp.scale(n, 0.7);
                let w = tp.constant(square.clone());
                let b = tp.param(Tensor::from_fn(&[4], |i| 0.1 * i as f64 - 0.15));
                let e = tp.edge_conv(c, n, w, b, &graph, 0.2)?;
                let sq = tp.square(e);
                Ok(tp.sum(sq))
            }, &weights, step).unwrap()),
            ("reshape", gradient_check(|tp, p| {
                let r = tp.reshape(p, &[12])?;
                let l = tp.log_softmax(r)?;
                let g = tp.gather_cols(l, vec![5], 1)?;
                Ok(tp.sum(g))
            }, &a, step).unwrap()),
        ];
        for (name, err) in checks {
            assert!(err < tol, "{name}: {err}");
        }
    }

    #[test]
    fn fused_edge_conv_matches_the_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pts = random(&[9, 2], &mut rng);
        let graph = knn_graph(&pts, 4).unwrap();
        let (c0, n0) = (random(&[9, 3], &mut rng), random(&[9, 3], &mut rng));
        let (w0, b0) = (random(&[3, 5], &mut rng), random(&[5], &mut rng));
        let run = |fused: bool| {
            let mut tp = Tape::new();
            let (c, n, w, b) = (
                tp.param(c0.clone()),
                tp.param(n0.clone()),
                tp.param(w0.clone()),
                tp.param(b0.clone()),
            );
            let out = if fused {
                tp.edge_conv(c, n, w, b, &graph, 0.2).unwrap()
            } else {
                let e = tp.edge_combine(c, n, &graph).unwrap();
                let e = tp.leaky_relu(e, 0.2);
                let e = tp.matmul(e, w).unwrap();
                let e = tp.add_bias(e, b).unwrap();
                let e = tp.leaky_relu(e, 0.2);
                tp.neighbor_max_pool(e, &graph).unwrap()
            };
            let value = tp.value(out).data().to_vec();
            let sq = tp.square(out);
            let s = tp.sum(sq);
            tp.backward(s).unwrap();
            let grads: Vec<Vec<f64>> = [c, n, w, b].iter().map(|&v| tp.grad(v).unwrap().to_vec()).collect();
            (value, grads)
        };
        let (fv, fg) = run(true);
        let (cv, cg) = run(false);
        assert_eq!(fv, cv);
        for (a, b) in fg.iter().flatten().zip(cg.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            ("w".to_string(), random(&[3, 2], &mut rng)),
            ("b".to_string(), Tensor::from_fn(&[2], |i| [1e-300, -7.25][i])),
        ];
        let mut s = String::new();
        write_params(&mut s, &params);
        assert!(s.starts_with("DIFFMATH-PARAMS v1\n"));
        assert_eq!(read_params(&s, 1).unwrap(), params);
        assert!(matches!(
            read_params("DIFFMATH-PARAMS v2\n", 1),
            Err(Error::UnsupportedVersion(_))
        ));
        assert!(matches!(read_params("DIFFMATH-PARAMS v1\nw 2 2\n1 2 3\n", 1), Err(Error::Parse { line: 3, .. })));
    }
}
