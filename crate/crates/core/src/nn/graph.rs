//! Reverse-mode differentiation over a fixed set of matrix primitives.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Each
//! node keeps its value plus whatever the primitive needs for its adjoint, and
//! [`Graph::backward`] walks the record in reverse, accumulating parameter
//! gradients into a [`Grads`].

use crate::error::{Error, Result};
use crate::nn::ctc;
use crate::nn::params::{Grads, ParamId, ParamStore};
use crate::nn::tensor::{gemm, Mat};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat>,
    },
    ConcatCols(Var, Var),
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { base: Var, idx: Vec<usize>, src: Var },
    GatherCols { x: Var, idx: Vec<usize> },
    RowDiff(Var),
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        width: usize,
        cols: Mat,
    },
    Mse(Var, Var),
    Ctc { logits: Var, dlogits: Mat },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    params: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    /// A graph with no parameters; only constants can enter it.
    pub fn detached() -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf; repeated requests for one id share a single node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let value = self.params.expect("graph has a parameter store").get(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Product of `a` and `b`, each optionally transposed.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims {k} vs {k2} ({ar}x{ac}{} by {br}x{bc}{})",
                if ta { "^T" } else { "" },
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = Mat::zeros(m, n);
        gemm(1.0, self.value(a), ta, self.value(b), tb, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(bias) != (1, c) {
            return Err(Error::shape(format!(
                "bias {:?} for {r}x{c} input",
                self.shape(bias)
            )));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Mat {
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Mat::from_vec(r, c, data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scaled(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
            0.5 * x * (1.0 + t)
        });
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise normalization followed by a learned `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::shape("layer norm gain/bias width"));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Mat::zeros(r, c);
        let mut out = Mat::zeros(r, c);
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(i);
            for j in 0..c {
                xh[j] = (row[j] - mean) * rs;
            }
            let o = out.row_mut(i);
            for j in 0..c {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Scaled dot-product attention over `heads` column groups of already
    /// projected queries, keys and values. Output has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, f) = self.shape(q);
        let (nk, fk) = self.shape(k);
        if heads == 0 || f % heads != 0 {
            return Err(Error::shape(format!(
                "width {f} not divisible into {heads} heads"
            )));
        }
        if fk != f || self.shape(v) != (nk, f) {
            return Err(Error::shape("attention key/value shape"));
        }
        if nk == 0 {
            return Err(Error::shape("attention over an empty key set"));
        }
        let dh = f / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Mat::zeros(nq, f);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Mat::zeros(nq, nk);
            for i in 0..nq {
                let qi = &qv.row(i)[off..off + dh];
                let pr = p.row_mut(i);
                let mut mx = f64::NEG_INFINITY;
                for (j, pj) in pr.iter_mut().enumerate() {
                    let kj = &kv.row(j)[off..off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    *pj = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for pj in pr.iter_mut() {
                    *pj = (*pj - mx).exp();
                    z += *pj;
                }
                for pj in pr.iter_mut() {
                    *pj /= z;
                }
                let orow = &mut out.row_mut(i)[off..off + dh];
                for (j, &pj) in p.row(i).iter().enumerate() {
                    let vj = &vv.row(j)[off..off + dh];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Per-head attention weights of the most recent `attention` node `v`.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::shape(format!("concat rows {ra} vs {rb}")));
        }
        let mut out = Mat::zeros(ra, ca + cb);
        for i in 0..ra {
            let o = out.row_mut(i);
            o[..ca].copy_from_slice(self.nodes[a.0].value.row(i));
            o[ca..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatCols(a, b), ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(x).gather_rows(idx)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Copy of `base` whose rows `idx` are replaced by the rows of `src`.
    pub fn scatter_rows(&mut self, base: Var, idx: &[usize], src: Var) -> Result<Var> {
        let (n, c) = self.shape(base);
        if self.shape(src) != (idx.len(), c) {
            return Err(Error::shape(format!(
                "scatter {:?} rows into {n}x{c} at {} indices",
                self.shape(src),
                idx.len()
            )));
        }
        let mut out = self.value(base).clone();
        for (s, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            out.row_mut(i).copy_from_slice(self.nodes[src.0].value.row(s));
        }
        let ng = self.ng(base) || self.ng(src);
        Ok(self.push(
            out,
            Op::ScatterRows {
                base,
                idx: idx.to_vec(),
                src,
            },
            ng,
        ))
    }

    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::IndexOutOfRange { index: bad, len: c });
        }
        let xv = self.value(x);
        let mut out = Mat::zeros(r, idx.len());
        for i in 0..r {
            let src = xv.row(i);
            for (o, &j) in out.row_mut(i).iter_mut().zip(idx) {
                *o = src[j];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// First temporal difference: row `t` of the output is `x[t+1] - x[t]`.
    pub fn row_diff(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let n = r.saturating_sub(1);
        let xv = self.value(x);
        let mut out = Mat::zeros(n, c);
        for t in 0..n {
            let (a, b) = (xv.row(t), xv.row(t + 1));
            for ((o, x0), x1) in out.row_mut(t).iter_mut().zip(a).zip(b) {
                *o = x1 - x0;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::RowDiff(x), ng)
    }

    /// Zero-padded "same" cross-correlation along rows. `kernel` is
    /// `(width * c_in) x c_out` with tap `j` occupying rows `j*c_in..(j+1)*c_in`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var, width: usize) -> Result<Var> {
        if width % 2 == 0 {
            return Err(Error::shape(format!(
                "conv1d needs an odd kernel width, got {width}"
            )));
        }
        let (n, cin) = self.shape(x);
        let (kr, cout) = self.shape(kernel);
        if kr != width * cin || self.shape(bias) != (1, cout) {
            return Err(Error::shape(format!(
                "conv1d kernel {kr}x{cout} for width {width}, {cin} input channels"
            )));
        }
        let pad = width / 2;
        let xv = self.value(x);
        let mut cols = Mat::zeros(n, width * cin);
        for t in 0..n {
            let row = cols.row_mut(t);
            for j in 0..width {
                let s = t as isize + j as isize - pad as isize;
                if s >= 0 && (s as usize) < n {
                    row[j * cin..(j + 1) * cin].copy_from_slice(xv.row(s as usize));
                }
            }
        }
        let mut out = Mat::zeros(n, cout);
        gemm(1.0, &cols, false, self.value(kernel), false, 0.0, &mut out);
        let b = self.value(bias).data().to_vec();
        for t in 0..n {
            for (o, bv) in out.row_mut(t).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(kernel) || self.ng(bias);
        Ok(self.push(
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                width,
                cols,
            },
            ng,
        ))
    }

    /// Mean squared difference over all entries, as a `1 x 1` node. Two empty
    /// operands give zero.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len();
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let loss = if n == 0 { 0.0 } else { s / n as f64 };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Mat::scalar(loss), Op::Mse(a, b), ng))
    }

    /// CTC negative log-likelihood of `targets` under per-frame `logits`
    /// (`T x (vocab + 1)`, blank = last column).
    pub fn ctc_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, dlogits) = ctc::ctc_loss_and_grad(self.value(logits), targets)?;
        let ng = self.ng(logits);
        Ok(self.push(Mat::scalar(loss), Op::Ctc { logits, dlogits }, ng))
    }

    /// `sum_i w_i * x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::invalid("weighted sum of no terms"))?;
        let (r, c) = self.shape(first.0);
        let mut out = Mat::zeros(r, c);
        for &(v, w) in terms {
            if self.shape(v) != (r, c) {
                return Err(Error::shape("weighted sum operand shapes differ"));
            }
            for (o, x) in out.data_mut().iter_mut().zip(self.nodes[v.0].value.data()) {
                *o += w * x;
            }
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Grads {
        let store = self.params.expect("backward needs a parameter store");
        let mut grads = Grads::zeros_like(store);
        let mut adj = self.backward_nodes(loss);
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, adj[i].take()) {
                grads.accumulate(*id, &g);
            }
        }
        grads
    }

    /// Gradient of `loss` with respect to an arbitrary node, zeros if it does
    /// not influence the loss. Constants only carry gradients when created
    /// through [`Graph::input`].
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Mat {
        let mut adj = self.backward_nodes(loss);
        let (r, c) = self.shape(wrt);
        adj[wrt.0].take().unwrap_or_else(|| Mat::zeros(r, c))
    }

    /// A leaf that participates in differentiation (for input gradients).
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn backward_nodes(&self, loss: Var) -> Vec<Option<Mat>> {
        assert_eq!(self.shape(loss), (1, 1), "backward from a non-scalar node");
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
            // Leaves keep their adjoint for the caller.
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                adj[i] = Some(g);
            }
        }
        adj
    }

    fn acc(&self, adj: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, adj: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    if *ta {
                        gemm(1.0, bv, *tb, g, true, 0.0, &mut da);
                    } else {
                        gemm(1.0, g, false, bv, !*tb, 0.0, &mut da);
                    }
                    self.acc(adj, *a, da);
                }
                if self.ng(*b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    if *tb {
                        gemm(1.0, g, true, av, *ta, 0.0, &mut db);
                    } else {
                        gemm(1.0, av, !*ta, g, false, 0.0, &mut db);
                    }
                    self.acc(adj, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                if self.ng(*bias) {
                    let mut db = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    self.acc(adj, *bias, db);
                }
                self.acc(adj, *x, g.clone());
            }
            Op::Add(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(adj, *a, g.clone());
                self.acc(adj, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(adj, *a, hadamard(g, self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(adj, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::Scale(a, s) => self.acc(adj, *a, g.scaled(*s)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *dv *= yv * (1.0 - yv);
                }
                self.acc(adj, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    let u = GELU_C * (xv + 0.044715 * xv * xv * xv);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xv * xv);
                    *dv *= 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                }
                self.acc(adj, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = xhat.shape();
                let gv = self.value(*gain).data();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = Mat::zeros(1, c);
                    let mut db = Mat::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
                            db.data_mut()[j] += g.get(i, j);
                        }
                    }
                    self.acc(adj, *gain, dg);
                    self.acc(adj, *bias, db);
                }
                if self.ng(*x) {
                    let mut dx = Mat::zeros(r, c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let xh = xhat.row(i);
                        let gr = g.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let out = dx.row_mut(i);
                        for j in 0..c {
                            out[j] = rstd[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.acc(adj, *x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (nq, f) = qv.shape();
                let nk = kv.rows();
                let dh = f / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(nq, f);
                let mut dk = Mat::zeros(nk, f);
                let mut dv = Mat::zeros(nk, f);
                let mut ds = vec![0.0; nk];
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    for i in 0..nq {
                        let go = &g.row(i)[off..off + dh];
                        let pr = p.row(i);
                        // dV += P^T dO; dP = dO V^T
                        let mut dot = 0.0;
                        for j in 0..nk {
                            let vj = &vv.row(j)[off..off + dh];
                            let dp = go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                            ds[j] = dp;
                            dot += dp * pr[j];
                            let dvj = &mut dv.row_mut(j)[off..off + dh];
                            for (d, gx) in dvj.iter_mut().zip(go) {
                                *d += pr[j] * gx;
                            }
                        }
                        for j in 0..nk {
                            ds[j] = pr[j] * (ds[j] - dot) * scale;
                        }
                        let qi = &qv.row(i)[off..off + dh];
                        for j in 0..nk {
                            if ds[j] == 0.0 {
                                continue;
                            }
                            let kj = &kv.row(j)[off..off + dh];
                            let dqi = &mut dq.row_mut(i)[off..off + dh];
                            for (d, kx) in dqi.iter_mut().zip(kj) {
                                *d += ds[j] * kx;
                            }
                            let dkj = &mut dk.row_mut(j)[off..off + dh];
                            for (d, qx) in dkj.iter_mut().zip(qi) {
                                *d += ds[j] * qx;
                            }
                        }
                    }
                }
                self.acc(adj, *q, dq);
                self.acc(adj, *k, dk);
                self.acc(adj, *v, dv);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let r = g.rows();
                let mut da = Mat::zeros(r, ca);
                let mut db = Mat::zeros(r, cb);
                for i in 0..r {
                    da.row_mut(i).copy_from_slice(&g.row(i)[..ca]);
                    db.row_mut(i).copy_from_slice(&g.row(i)[ca..]);
                }
                self.acc(adj, *a, da);
                self.acc(adj, *b, db);
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut dx = Mat::zeros(r, c);
                for (o, &i) in idx.iter().enumerate() {
                    for (d, gv) in dx.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d += gv;
                    }
                }
                self.acc(adj, *x, dx);
            }
            Op::ScatterRows { base, idx, src } => {
                if self.ng(*src) {
                    self.acc(adj, *src, g.gather_rows(idx).expect("validated"));
                }
                if self.ng(*base) {
                    let mut db = g.clone();
                    for &i in idx {
                        db.row_mut(i).fill(0.0);
                    }
                    self.acc(adj, *base, db);
                }
            }
            Op::GatherCols { x, idx } => {
                let (r, c) = self.shape(*x);
                let mut dx = Mat::zeros(r, c);
                for i in 0..r {
                    let dr = dx.row_mut(i);
                    for (gv, &j) in g.row(i).iter().zip(idx) {
                        dr[j] += gv;
                    }
                }
                self.acc(adj, *x, dx);
            }
            Op::RowDiff(x) => {
                let (r, c) = self.shape(*x);
                let mut dx = Mat::zeros(r, c);
                for t in 0..g.rows() {
                    for j in 0..c {
                        let gv = g.get(t, j);
                        dx.data_mut()[(t + 1) * c + j] += gv;
                        dx.data_mut()[t * c + j] -= gv;
                    }
                }
                self.acc(adj, *x, dx);
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                width,
                cols,
            } => {
                let kv = self.value(*kernel);
                if self.ng(*kernel) {
                    let mut dk = Mat::zeros(kv.rows(), kv.cols());
                    gemm(1.0, cols, true, g, false, 0.0, &mut dk);
                    self.acc(adj, *kernel, dk);
                }
                if self.ng(*bias) {
                    let mut db = Mat::zeros(1, g.cols());
                    for t in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row(t)) {
                            *d += v;
                        }
                    }
                    self.acc(adj, *bias, db);
                }
                if self.ng(*x) {
                    let (n, cin) = self.shape(*x);
                    let mut dcols = Mat::zeros(n, width * cin);
                    gemm(1.0, g, false, kv, true, 0.0, &mut dcols);
                    let pad = width / 2;
                    let mut dx = Mat::zeros(n, cin);
                    for t in 0..n {
                        for j in 0..*width {
                            let s = t as isize + j as isize - pad as isize;
                            if s >= 0 && (s as usize) < n {
                                let src = &dcols.row(t)[j * cin..(j + 1) * cin];
                                for (d, v) in dx.row_mut(s as usize).iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    self.acc(adj, *x, dx);
                }
            }
            Op::Mse(a, b) => {
                let n = self.value(*a).len();
                if n == 0 {
                    return;
                }
                let s = 2.0 * g.item() / n as f64;
                let (r, c) = self.shape(*a);
                let data = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(x, y)| s * (x - y))
                    .collect();
                let da = Mat::from_vec(r, c, data).expect("shape");
                if self.ng(*b) {
                    self.acc(adj, *b, da.scaled(-1.0));
                }
                self.acc(adj, *a, da);
            }
            Op::Ctc { logits, dlogits } => {
                self.acc(adj, *logits, dlogits.scaled(g.item()));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(adj, v, g.scaled(w));
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Mat::from_vec(a.rows(), a.cols(), data).expect("same shape")
}
