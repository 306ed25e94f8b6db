//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. Inputs always
//! precede outputs, so a single reverse sweep from the loss visits nodes in a
//! valid topological order.

use super::gemm::{gemm, Layout};
use super::ops::{self, gelu_derivative};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        la: Layout,
        lb: Layout,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Attention(Box<AttentionCache>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Reshape(Var),
    SwapAxes12 {
        x: Var,
        dims: [usize; 4],
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherCols {
        table: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    table: Var,
    buckets: Vec<usize>,
    batch: usize,
    seq: usize,
    heads: usize,
    scale: f64,
    /// Softmax weights, `batch × heads × seq × seq`.
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf that requires one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient for `v`, or zeros shaped like `like`.
    pub fn take_or_zeros(&mut self, v: Var, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dim_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// 2-D matrix product `a·b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => {
                self.record_matmul(a, b, 1, Layout::row_major(m, k), Layout::row_major(k, n))
            }
            _ => Err(self.dim_err("matmul", a, b)),
        }
    }

    /// Batched product of 3-D tensors, `a[i]·b[i]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (batch, m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[ba, m, k], &[bb, r, c]) if ba == bb => {
                let (k2, n) = if transpose_b { (c, r) } else { (r, c) };
                if k != k2 {
                    return Err(self.dim_err("bmm", a, b));
                }
                (ba, m, k, n)
            }
            _ => return Err(self.dim_err("bmm", a, b)),
        };
        let lb = if transpose_b {
            Layout::row_major(n, k).t()
        } else {
            Layout::row_major(k, n)
        };
        self.record_matmul(a, b, batch, Layout::row_major(m, k), lb)
    }

    fn record_matmul(&mut self, a: Var, b: Var, batch: usize, la: Layout, lb: Layout) -> Result<Var> {
        let (m, n) = (la.rows, lb.cols);
        let (sa, sb, sc) = (la.rows * la.cols, lb.rows * lb.cols, m * n);
        let mut out = vec![0.0; batch * sc];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    &av[i * sa..(i + 1) * sa],
                    la,
                    &bv[i * sb..(i + 1) * sb],
                    lb,
                    0.0,
                    &mut out[i * sc..(i + 1) * sc],
                    Layout::row_major(m, n),
                );
            }
        }
        let shape = if batch == 1 && self.value(a).ndim() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, batch, la, lb }, rg))
    }

    /// `x·w + b` for `x: n × k`, `w: k × m`, `b: m`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, k, m) = match (self.shape(x), self.shape(w), self.shape(b)) {
            (&[n, k], &[k2, m], &[m2]) if k == k2 && m == m2 => (n, k, m),
            _ => return Err(self.dim_err("linear", x, w)),
        };
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(
            self.value(x).data(),
            Layout::row_major(n, k),
            self.value(w).data(),
            Layout::row_major(k, m),
            1.0,
            &mut out,
            Layout::row_major(n, m),
        );
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Multi-head softmax attention over `batch` sequences of `seq` tokens.
    ///
    /// `q`, `k` and `v` are `(batch·seq) × width` with heads in contiguous column
    /// blocks. Head `h` adds `table[h, buckets[i·seq + j]]` to the scaled logit of
    /// query `i` and key `j`. The result has the shape of `q`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        table: Var,
        buckets: &[usize],
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        if q == k || q == v || k == v {
            return Err(Error::Contract(
                "attention needs distinct query, key and value nodes".into(),
            ));
        }
        let (rows, width) = self.value(q).dims2()?;
        if self.shape(k) != [rows, width] || self.shape(v) != [rows, width] {
            return Err(self.dim_err("attention", q, k));
        }
        if heads == 0 || width % heads != 0 || batch == 0 || rows % batch != 0 {
            return Err(Error::Contract(format!(
                "attention: {rows} × {width} does not split into {batch} sequences and {heads} heads"
            )));
        }
        let seq = rows / batch;
        let (th, nb) = self.value(table).dims2()?;
        if th != heads || buckets.len() != seq * seq || buckets.iter().any(|&j| j >= nb) {
            return Err(Error::Contract(format!(
                "attention: bias table {th} × {nb} or {} bucket ids do not fit {heads} heads and {seq} tokens",
                buckets.len()
            )));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let head = Layout {
            rows: seq,
            cols: dh,
            row_stride: width,
            col_stride: 1,
        };
        let square = Layout::row_major(seq, seq);
        let tt = seq * seq;
        let mut probs = vec![0.0; batch * heads * tt];
        let mut out = vec![0.0; rows * width];
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            let tab = self.value(table).data();
            for bi in 0..batch {
                for h in 0..heads {
                    let off = bi * seq * width + h * dh;
                    let p = &mut probs[(bi * heads + h) * tt..][..tt];
                    gemm(&qv[off..], head, &kv[off..], head.t(), 0.0, p, square);
                    let bias = &tab[h * nb..(h + 1) * nb];
                    for (pij, &bucket) in p.iter_mut().zip(buckets) {
                        *pij = *pij * scale + bias[bucket];
                    }
                    for row in p.chunks_mut(seq) {
                        ops::softmax_in_place(row);
                    }
                    gemm(p, square, &vv[off..], head, 0.0, &mut out[off..], head);
                }
            }
        }
        let rg = self.needs(&[q, k, v, table]);
        let cache = AttentionCache {
            q,
            k,
            v,
            table,
            buckets: buckets.to_vec(),
            batch,
            seq,
            heads,
            scale,
            probs,
        };
        Ok(self.push(Tensor::new(vec![rows, width], out)?, Op::Attention(Box::new(cache)), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(self.dim_err(name, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds `bias` to every trailing block of `x`; `bias.shape` must be a suffix of `x.shape`.
    pub fn add_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(self.dim_err("add_broadcast", x, bias));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        if !b.is_empty() {
            for chunk in out.chunks_mut(b.len()) {
                for (o, &bv) in chunk.iter_mut().zip(b) {
                    *o += bv;
                }
            }
        }
        let t = Tensor::new(xs.to_vec(), out)?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(t, Op::AddBroadcast { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let t =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * factor).collect()).expect("shape preserved");
        let rg = self.needs(&[x]);
        self.push(t, Op::Scale { x, factor }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = ops::gelu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = ops::softmax_rows(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// LayerNorm over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (t, means, rstds) = ops::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta))?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `[a, b, c, d] → [a, c, b, d]`; splits or merges attention heads.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let dims: [usize; 4] = self
            .shape(x)
            .try_into()
            .map_err(|_| Error::Contract(format!("swap_axes12 needs a 4-D tensor, got {:?}", self.shape(x))))?;
        let out = swap12(self.value(x).data(), dims);
        let t = Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::SwapAxes12 { x, dims }, rg))
    }

    /// Picks rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "select_rows: row {bad} out of range for {r} rows"
            )));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![rows.len(), c], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    /// `out[r, j] = table[r, index[j]]`.
    pub fn gather_cols(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2()?;
        if let Some(&bad) = index.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!(
                "gather_cols: column {bad} out of range for {c} columns"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(r * index.len());
        for i in 0..r {
            let row = src.row(i);
            out.extend(index.iter().map(|&j| row[j]));
        }
        let t = Tensor::new(vec![r, index.len()], out)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            t,
            Op::GatherCols {
                table,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean squared error against a fixed target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::Dimension {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = target.len().max(1) as f64;
        let loss = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.needs(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op, node.requires_grad) {
                (Some(g), Op::Leaf, true) => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient matches leaf shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, la, lb } => {
                let (m, n) = (la.rows, lb.cols);
                let (sa, sb, sc) = (la.rows * la.cols, lb.rows * lb.cols, m * n);
                let lg = Layout::row_major(m, n);
                if self.nodes[a.0].requires_grad {
                    let bv = self.value(*b).data();
                    let ga = slot(grads, *a, self.value(*a).len());
                    for i in 0..*batch {
                        gemm(
                            &g[i * sc..(i + 1) * sc],
                            lg,
                            &bv[i * sb..(i + 1) * sb],
                            lb.t(),
                            1.0,
                            &mut ga[i * sa..(i + 1) * sa],
                            *la,
                        );
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.value(*a).data();
                    let gb = slot(grads, *b, self.value(*b).len());
                    for i in 0..*batch {
                        gemm(
                            &av[i * sa..(i + 1) * sa],
                            la.t(),
                            &g[i * sc..(i + 1) * sc],
                            lg,
                            1.0,
                            &mut gb[i * sb..(i + 1) * sb],
                            *lb,
                        );
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).dims2().expect("2-D");
                let m = self.value(*b).len();
                let lg = Layout::row_major(n, m);
                if self.nodes[x.0].requires_grad {
                    let wv = self.value(*w).data();
                    let gx = slot(grads, *x, n * k);
                    gemm(g, lg, wv, Layout::row_major(k, m).t(), 1.0, gx, Layout::row_major(n, k));
                }
                if self.nodes[w.0].requires_grad {
                    let xv = self.value(*x).data();
                    let gw = slot(grads, *w, k * m);
                    gemm(xv, Layout::row_major(n, k).t(), g, lg, 1.0, gw, Layout::row_major(k, m));
                }
                self.accumulate(grads, *b, |dst| {
                    for row in g.chunks(m.max(1)) {
                        axpy(dst, row, 1.0);
                    }
                });
            }
            Op::Attention(c) => self.attention_backward(c, g, grads),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |dst| axpy(dst, g, 1.0));
                self.accumulate(grads, *b, |dst| axpy(dst, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |dst| axpy(dst, g, 1.0));
                self.accumulate(grads, *b, |dst| axpy(dst, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |dst| {
                    for ((d, gi), bi) in dst.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |dst| {
                    for ((d, gi), ai) in dst.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddBroadcast { x, bias } => {
                self.accumulate(grads, *x, |dst| axpy(dst, g, 1.0));
                self.accumulate(grads, *bias, |dst| {
                    if !dst.is_empty() {
                        for chunk in g.chunks(dst.len()) {
                            axpy(dst, chunk, 1.0);
                        }
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |dst| axpy(dst, g, *factor));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |dst| {
                    for ((d, gi), xi) in dst.iter_mut().zip(g).zip(xv) {
                        *d += gi * gelu_derivative(*xi);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().expect("softmax output has an axis");
                self.accumulate(grads, *x, |dst| {
                    for ((d, gr), yr) in dst.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((di, gi), yi) in d.iter_mut().zip(gr).zip(yr) {
                            *di += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let xhat = |r: usize, j: usize| (xv[r * d + j] - means[r]) * rstds[r];
                self.accumulate(grads, *gamma, |dst| {
                    for (r, gr) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            dst[j] += gr[j] * xhat(r, j);
                        }
                    }
                });
                self.accumulate(grads, *beta, |dst| {
                    for gr in g.chunks(d) {
                        axpy(dst, gr, 1.0);
                    }
                });
                self.accumulate(grads, *x, |dst| {
                    for (r, (dr, gr)) in dst.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            mean_g += gh;
                            mean_gx += gh * xhat(r, j);
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for j in 0..d {
                            let gh = gr[j] * gam[j];
                            dr[j] += rstds[r] * (gh - mean_g - xhat(r, j) * mean_gx);
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |dst| axpy(dst, g, 1.0));
            }
            Op::SwapAxes12 { x, dims } => {
                let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                self.accumulate(grads, *x, |dst| axpy(dst, &back, 1.0));
            }
            Op::SelectRows { x, rows } => {
                let c = *node.value.shape().last().expect("2-D");
                self.accumulate(grads, *x, |dst| {
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut dst[r * c..(r + 1) * c], &g[k * c..(k + 1) * c], 1.0);
                    }
                });
            }
            Op::GatherCols { table, index } => {
                let c = self.value(*table).shape()[1];
                let w = index.len();
                self.accumulate(grads, *table, |dst| {
                    for (r, gr) in g.chunks(w.max(1)).enumerate() {
                        for (&j, gi) in index.iter().zip(gr) {
                            dst[r * c + j] += gi;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |dst| dst.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = 2.0 * g[0] / target.len().max(1) as f64;
                self.accumulate(grads, *pred, |dst| {
                    for ((d, p), t) in dst.iter_mut().zip(pv).zip(target) {
                        *d += scale * (p - t);
                    }
                });
            }
        }
    }

    fn attention_backward(&self, c: &AttentionCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, width) = self.value(c.q).dims2().expect("2-D");
        let (seq, heads) = (c.seq, c.heads);
        let dh = width / heads;
        let nb = self.value(c.table).shape()[1];
        let tt = seq * seq;
        let head = Layout {
            rows: seq,
            cols: dh,
            row_stride: width,
            col_stride: 1,
        };
        let square = Layout::row_major(seq, seq);
        let mut take = |v: Var, len: usize| -> Option<Vec<f64>> {
            self.nodes[v.0]
                .requires_grad
                .then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; len]))
        };
        let mut gq = take(c.q, rows * width);
        let mut gk = take(c.k, rows * width);
        let mut gv = take(c.v, rows * width);
        let mut gt = take(c.table, heads * nb);
        let (qv, kv, vv) = (self.value(c.q).data(), self.value(c.k).data(), self.value(c.v).data());
        let mut ds = vec![0.0; tt];
        for bi in 0..c.batch {
            for h in 0..heads {
                let off = bi * seq * width + h * dh;
                let p = &c.probs[(bi * heads + h) * tt..][..tt];
                if let Some(gv) = gv.as_mut() {
                    gemm(p, square.t(), &g[off..], head, 1.0, &mut gv[off..], head);
                }
                gemm(&g[off..], head, &vv[off..], head.t(), 0.0, &mut ds, square);
                for (dr, pr) in ds.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot: f64 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (d, &pi) in dr.iter_mut().zip(pr) {
                        *d = pi * (*d - dot);
                    }
                }
                if let Some(gt) = gt.as_mut() {
                    let row = &mut gt[h * nb..(h + 1) * nb];
                    for (&d, &bucket) in ds.iter().zip(&c.buckets) {
                        row[bucket] += d;
                    }
                }
                ds.iter_mut().for_each(|d| *d *= c.scale);
                if let Some(gq) = gq.as_mut() {
                    gemm(&ds, square, &kv[off..], head, 1.0, &mut gq[off..], head);
                }
                if let Some(gk) = gk.as_mut() {
                    gemm(&ds, square.t(), &qv[off..], head, 1.0, &mut gk[off..], head);
                }
            }
        }
        for (v, buf) in [(c.q, gq), (c.k, gk), (c.v, gv), (c.table, gt)] {
            if buf.is_some() {
                grads[v.0] = buf;
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if self.nodes[v.0].requires_grad {
            f(slot(grads, v, self.value(v).len()));
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn swap12(src: &[f64], [a, b, c, d]: [usize; 4]) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let from = ((i * b + j) * c + k) * d;
                let to = ((i * c + k) * b + j) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}
