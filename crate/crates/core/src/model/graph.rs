//! A minimal reverse-mode differentiation tape over 2-D tensors.
//!
//! Nodes are appended in evaluation order, so walking them backwards is a
//! valid topological order. Parameter nodes borrow their values from the
//! [`ModelParams`] the graph was built against; their gradients are
//! accumulated into a bundle of the same shape.

use super::params::ModelParams;
use crate::ctc::{ctc_nll, CtcInstance};
use crate::error::Result;
use crate::tensor::{log_sum_exp, matmul, matmul_at, matmul_bt, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Mask(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Im2Col {
        x: Var,
        filter: usize,
        stride: usize,
        pad: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    RelScores {
        q: Var,
        k: Var,
        rel: Var,
        clip: usize,
        scale: f64,
    },
    Softmax(Var),
    LogSoftmax(Var),
    MeanRows(Var),
    Ctc {
        x: Var,
        grad: Tensor,
    },
    CrossEntropy {
        x: Var,
        class: usize,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ModelParams,
    nodes: Vec<Node>,
}

pub const LN_EPS: f64 = 1e-5;

#[inline]
fn rel_index(i: usize, j: usize, clip: usize) -> usize {
    let d = (j as isize - i as isize).clamp(-(clip as isize), clip as isize);
    (d + clip as isize) as usize
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params.tensors()[*i],
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, deps: &[Var]) -> Var {
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Var {
        let id = self.params.id(name);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBt(a, b), &[a, b])
    }

    /// `x + b` with the single row `b` broadcast over all rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let mut v = self.value(x).clone();
        let bias = self.value(b);
        assert_eq!((bias.rows, bias.cols), (1, v.cols), "add_row bias shape");
        for r in 0..v.rows {
            for (o, &bv) in v.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        self.push(v, Op::AddRow(x, b), &[x, b])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        v.data.iter_mut().for_each(|e| *e = e.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    /// Elementwise product with a constant mask (inverted dropout).
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let mut v = self.value(x).clone();
        assert_eq!(mask.len(), v.len());
        v.data.iter_mut().zip(&mask).for_each(|(e, m)| *e *= m);
        self.push(v, Op::Mask(x, mask), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (gv, bv) = (self.value(g), self.value(b));
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gg), &bb) in out.row_mut(r).iter_mut().zip(&gv.data).zip(&bv.data) {
                *o = *o * gg + bb;
            }
        }
        self.push(out, Op::LayerNorm { x, g, b, xhat, inv_std }, &[x, g, b])
    }

    /// Unfolds a `T × D` input into `T' × (filter·D)` windows with symmetric
    /// zero padding, so a strided 1-D convolution becomes a matmul.
    pub fn im2col(&mut self, x: Var, filter: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (t_in, d) = xv.shape();
        let t_out = (t_in + 2 * pad).saturating_sub(filter) / stride + 1;
        let mut out = Tensor::zeros(t_out, filter * d);
        for t in 0..t_out {
            for f in 0..filter {
                let src = (t * stride + f) as isize - pad as isize;
                if src < 0 || src as usize >= t_in {
                    continue;
                }
                out.row_mut(t)[f * d..(f + 1) * d].copy_from_slice(xv.row(src as usize));
            }
        }
        self.push(out, Op::Im2Col { x, filter, stride, pad }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(xv.rows, width);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in &parts {
            let pv = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[off..off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let deps = parts.clone();
        self.push(out, Op::ConcatCols(parts), &deps)
    }

    /// Attention logits with key-side relative positions:
    /// `s_ij = scale · q_i · (k_j + a_{clip(j − i)})`.
    pub fn rel_scores(&mut self, q: Var, k: Var, rel: Var, clip: usize, scale: f64) -> Var {
        let (qv, kv, av) = (self.value(q), self.value(k), self.value(rel));
        let mut s = matmul_bt(qv, kv);
        let qa = matmul_bt(qv, av);
        let n = s.cols;
        for i in 0..s.rows {
            let row = s.row_mut(i);
            for (j, e) in row.iter_mut().enumerate().take(n) {
                *e = (*e + qa.at(i, rel_index(i, j, clip))) * scale;
            }
        }
        self.push(s, Op::RelScores { q, k, rel, clip, scale }, &[q, k, rel])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                s += *e;
            }
            row.iter_mut().for_each(|e| *e /= s);
        }
        self.push(v, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = crate::tensor::log_softmax_rows(self.value(x));
        self.push(v, Op::LogSoftmax(x), &[x])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(1, xv.cols);
        for r in 0..xv.rows {
            for (o, v) in out.data.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.scale(1.0 / xv.rows as f64);
        self.push(out, Op::MeanRows(x), &[x])
    }

    /// CTC negative log-likelihood of `target` under log-probabilities `x`.
    pub fn ctc_loss(&mut self, x: Var, target: &[u32]) -> Result<Var> {
        let inst = CtcInstance::new(self.value(x).clone(), target.to_vec())?;
        let (nll, grad) = ctc_nll(&inst)?;
        Ok(self.push(Tensor::from_vec(1, 1, vec![nll]), Op::Ctc { x, grad }, &[x]))
    }

    /// Cross-entropy of a single row of logits against `class`.
    pub fn cross_entropy(&mut self, x: Var, class: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1);
        let loss = log_sum_exp(&xv.data) - xv.data[class];
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::CrossEntropy { x, class }, &[x])
    }

    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let s: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let deps: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::WeightedSum(terms), &deps)
    }

    /// Back-propagates `seed · ∂loss` and adds parameter gradients into `grads`.
    pub fn backward(&self, loss: Var, seed: f64, grads: &mut ModelParams) {
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[loss.0] = Some(Tensor::from_vec(1, 1, vec![seed]));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = g[idx].take() else { continue };
            let send = |v: Var, t: Tensor, g: &mut Vec<Option<Tensor>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut g[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            let wants = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {}
                Op::Param(i) => grads.tensors_mut()[*i].add_assign(&gout),
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        send(*a, matmul_bt(&gout, self.value(*b)), &mut g);
                    }
                    if wants(*b) {
                        send(*b, matmul_at(self.value(*a), &gout), &mut g);
                    }
                }
                Op::MatMulBt(a, b) => {
                    if wants(*a) {
                        send(*a, matmul(&gout, self.value(*b)), &mut g);
                    }
                    if wants(*b) {
                        send(*b, matmul_at(&gout, self.value(*a)), &mut g);
                    }
                }
                Op::AddRow(x, b) => {
                    if wants(*b) {
                        let mut gb = Tensor::zeros(1, gout.cols);
                        for r in 0..gout.rows {
                            gb.data.iter_mut().zip(gout.row(r)).for_each(|(o, v)| *o += v);
                        }
                        send(*b, gb, &mut g);
                    }
                    send(*x, gout, &mut g);
                }
                Op::Add(a, b) => {
                    send(*a, gout.clone(), &mut g);
                    send(*b, gout, &mut g);
                }
                Op::Relu(x) => {
                    let out = node.value.as_ref().unwrap();
                    let mut gx = gout;
                    gx.data.iter_mut().zip(&out.data).for_each(|(e, &o)| {
                        if o <= 0.0 {
                            *e = 0.0
                        }
                    });
                    send(*x, gx, &mut g);
                }
                Op::Mask(x, m) => {
                    let mut gx = gout;
                    gx.data.iter_mut().zip(m).for_each(|(e, m)| *e *= m);
                    send(*x, gx, &mut g);
                }
                Op::LayerNorm { x, g: gn, b, xhat, inv_std } => {
                    let gamma = self.value(*gn);
                    let (rows, cols) = xhat.shape();
                    if wants(*gn) || wants(*b) {
                        let mut dg = Tensor::zeros(1, cols);
                        let mut db = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dg.data[c] += gout.at(r, c) * xhat.at(r, c);
                                db.data[c] += gout.at(r, c);
                            }
                        }
                        send(*gn, dg, &mut g);
                        send(*b, db, &mut g);
                    }
                    if wants(*x) {
                        let mut dx = Tensor::zeros(rows, cols);
                        let n = cols as f64;
                        for r in 0..rows {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for c in 0..cols {
                                let d = gout.at(r, c) * gamma.data[c];
                                sum_d += d;
                                sum_dx += d * xhat.at(r, c);
                            }
                            for c in 0..cols {
                                let d = gout.at(r, c) * gamma.data[c];
                                *dx.at_mut(r, c) = inv_std[r] * (d - sum_d / n - xhat.at(r, c) * sum_dx / n);
                            }
                        }
                        send(*x, dx, &mut g);
                    }
                }
                Op::Im2Col { x, filter, stride, pad } => {
                    let xv = self.value(*x);
                    let (t_in, d) = xv.shape();
                    let mut dx = Tensor::zeros(t_in, d);
                    for t in 0..gout.rows {
                        for f in 0..*filter {
                            let src = (t * stride + f) as isize - *pad as isize;
                            if src < 0 || src as usize >= t_in {
                                continue;
                            }
                            let grow = &gout.row(t)[f * d..(f + 1) * d];
                            dx.row_mut(src as usize).iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                        }
                    }
                    send(*x, dx, &mut g);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..gout.rows {
                        dx.row_mut(r)[*start..*start + gout.cols].copy_from_slice(gout.row(r));
                    }
                    send(*x, dx, &mut g);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut dp = Tensor::zeros(gout.rows, w);
                        for r in 0..gout.rows {
                            dp.row_mut(r).copy_from_slice(&gout.row(r)[off..off + w]);
                        }
                        off += w;
                        send(p, dp, &mut g);
                    }
                }
                Op::RelScores { q, k, rel, clip, scale } => {
                    let (qv, kv, av) = (self.value(*q), self.value(*k), self.value(*rel));
                    let mut ds = gout;
                    ds.scale(*scale);
                    // bucket score gradients by relative offset
                    let mut gr = Tensor::zeros(ds.rows, av.rows);
                    for i in 0..ds.rows {
                        for j in 0..ds.cols {
                            *gr.at_mut(i, rel_index(i, j, *clip)) += ds.at(i, j);
                        }
                    }
                    if wants(*q) {
                        let mut dq = matmul(&ds, kv);
                        dq.add_assign(&matmul(&gr, av));
                        send(*q, dq, &mut g);
                    }
                    if wants(*k) {
                        send(*k, matmul_at(&ds, qv), &mut g);
                    }
                    if wants(*rel) {
                        send(*rel, matmul_at(&gr, qv), &mut g);
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut dx = gout;
                    for r in 0..y.rows {
                        let dotp: f64 = dx.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        dx.row_mut(r).iter_mut().zip(y.row(r)).for_each(|(e, &yy)| *e = yy * (*e - dotp));
                    }
                    send(*x, dx, &mut g);
                }
                Op::LogSoftmax(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut dx = gout;
                    for r in 0..y.rows {
                        let s: f64 = dx.row(r).iter().sum();
                        dx.row_mut(r).iter_mut().zip(y.row(r)).for_each(|(e, &yy)| *e -= yy.exp() * s);
                    }
                    send(*x, dx, &mut g);
                }
                Op::MeanRows(x) => {
                    let rows = self.value(*x).rows;
                    let mut dx = Tensor::zeros(rows, gout.cols);
                    for r in 0..rows {
                        dx.row_mut(r).iter_mut().zip(&gout.data).for_each(|(o, v)| *o = v / rows as f64);
                    }
                    send(*x, dx, &mut g);
                }
                Op::Ctc { x, grad } => {
                    let mut dx = grad.clone();
                    dx.scale(gout.data[0]);
                    send(*x, dx, &mut g);
                }
                Op::CrossEntropy { x, class } => {
                    let xv = self.value(*x);
                    let lse = log_sum_exp(&xv.data);
                    let mut dx = Tensor::zeros(1, xv.cols);
                    for (c, o) in dx.data.iter_mut().enumerate() {
                        *o = gout.data[0] * ((xv.data[c] - lse).exp() - if c == *class { 1.0 } else { 0.0 });
                    }
                    send(*x, dx, &mut g);
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        send(v, Tensor::from_vec(1, 1, vec![w * gout.data[0]]), &mut g);
                    }
                }
            }
        }
    }
}
