//! Tape-based reverse-mode differentiation over 2-D row-major values.
//!
//! A [`Tape`] borrows the parameter set it differentiates; parameter nodes
//! reference those tensors instead of copying them, and their gradients are
//! written straight into a caller-provided [`ParamSet`] of the same layout.

use super::tensor::{gemm, Tensor};
use super::{ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Param(ParamId),
    Input,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Vec<Var>),
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<Vec<bool>>,
        probs: Vec<f64>,
    },
    Rows(Var, Vec<usize>),
    GatherSum(Var, Vec<usize>),
    CrossEntropySum {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    FactorGrid {
        u: Var,
        sizes: [usize; 4],
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    /// Attention probabilities `[heads, s, s]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// A constant.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        assert_eq!(tb.rows(), k, "matmul inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out).expect("shape"), Op::MatMul(a, b), ng)
    }

    /// `[m,k] · [n,k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        assert_eq!(tb.cols(), k, "matmul_bt inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (1, k), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out).expect("shape"), Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.len(), tb.len(), "add operands differ in size");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = [ta.rows(), ta.cols()];
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), Op::Add(a, b), ng)
    }

    /// Adds a row vector `b` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        assert_eq!(tb.len(), n, "add_row width");
        let mut data = ta.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let shape = [ta.rows(), n];
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let shape = [ta.rows(), ta.cols()];
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), Op::Scale(a, factor), ng)
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, vars: Vec<Var>) -> Var {
        let total = vars.iter().map(|&v| self.value(v).item()).sum();
        let ng = vars.iter().any(|&v| self.ng(v));
        self.push(Tensor::scalar(total), Op::Sum(vars), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| gelu(x)).collect();
        let shape = [ta.rows(), ta.cols()];
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), Op::Gelu(a), ng)
    }

    /// Elementwise product with a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), mask.len());
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = [ta.rows(), ta.cols()];
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), Op::Dropout(a, mask), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = (tx.rows(), tx.cols());
        assert_eq!(tg.len(), n);
        assert_eq!(tb.len(), n);
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            Tensor::from_vec(&[m, n], out).expect("shape"),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention over `[s, d]` projections.
    /// `key_mask[j] == false` hides key `j` from every query.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, key_mask: Option<Vec<bool>>) -> Var {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (s, d) = (tq.rows(), tq.cols());
        assert!(heads > 0 && d % heads == 0);
        assert_eq!((tk.rows(), tk.cols()), (s, d));
        assert_eq!((tv.rows(), tv.cols()), (s, d));
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let visible = |j: usize| key_mask.as_ref().is_none_or(|m| m[j]);
        let mut probs = vec![0.0; heads * s * s];
        let mut out = vec![0.0; s * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..s {
                let p = &mut probs[(h * s + i) * s..(h * s + i + 1) * s];
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in (0..s).filter(|&j| visible(j)) {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let sc = dot(qi, kj) * scale;
                    p[j] = sc;
                    max = max.max(sc);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut z = 0.0;
                for j in 0..s {
                    if visible(j) {
                        p[j] = (p[j] - max).exp();
                        z += p[j];
                    }
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..s {
                    if visible(j) {
                        p[j] /= z;
                        let vj = &vd[j * d + off..j * d + off + dh];
                        for (oc, vc) in o.iter_mut().zip(vj) {
                            *oc += p[j] * vc;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Tensor::from_vec(&[s, d], out).expect("shape"),
            Op::Attention {
                q,
                k,
                v,
                heads,
                key_mask,
                probs,
            },
            ng,
        )
    }

    /// Selects rows of `a` (also serves as an embedding lookup).
    pub fn rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in &rows {
            data.extend_from_slice(ta.row(r));
        }
        let shape = [rows.len(), n];
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&shape, data).expect("shape"), Op::Rows(a, rows), ng)
    }

    /// Sum of the selected rows of `a`, as a single row.
    pub fn gather_sum(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = vec![0.0; n];
        for &r in &rows {
            for (x, y) in data.iter_mut().zip(ta.row(r)) {
                *x += y;
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::from_vec(&[1, n], data).expect("shape"), Op::GatherSum(a, rows), ng)
    }

    /// Summed (not averaged) cross-entropy of each row of `logits` against its label.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let tl = self.value(logits);
        let (m, c) = (tl.rows(), tl.cols());
        assert_eq!(labels.len(), m);
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for r in 0..m {
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[r * c..(r + 1) * c];
            let mut z = 0.0;
            for (pj, x) in p.iter_mut().zip(row) {
                *pj = (x - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            total += max + z.ln() - row[labels[r]];
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum {
                logits,
                labels,
                probs,
            },
            ng,
        )
    }

    /// Expands per-axis scores into one score per `(cell, kind)` plus a final
    /// extra score. `u` holds `[sx | sy | sz | kinds | 1]` entries; cells are
    /// enumerated `(y, z, x)` with kinds innermost.
    pub fn factor_grid(&mut self, u: Var, sizes: [usize; 4]) -> Var {
        let [sx, sy, sz, nk] = sizes;
        let tu = self.value(u);
        assert_eq!(tu.len(), sx + sy + sz + nk + 1);
        let ud = tu.data();
        let (ux, uy, uz, ua) = (&ud[..sx], &ud[sx..sx + sy], &ud[sx + sy..sx + sy + sz], &ud[sx + sy + sz..]);
        let mut out = Vec::with_capacity(sx * sy * sz * nk + 1);
        for y in 0..sy {
            for z in 0..sz {
                for x in 0..sx {
                    let base = ux[x] + uy[y] + uz[z];
                    out.extend(ua[..nk].iter().map(|a| base + a));
                }
            }
        }
        out.push(ua[nk]);
        let n = out.len();
        let ng = self.ng(u);
        self.push(Tensor::from_vec(&[1, n], out).expect("shape"), Op::FactorGrid { u, sizes }, ng)
    }

    /// Accumulates `scale * d(loss)/d(param)` into `grads`, which must share
    /// the tape's parameter layout.
    pub fn backward(&self, loss: Var, grads: &mut ParamSet, scale: f64) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        if !self.ng(loss) {
            return;
        }
        let mut node_grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(vec![scale]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut node_grads, grads);
        }
    }

    fn slot<'a>(
        &self,
        v: Var,
        node_grads: &'a mut [Option<Vec<f64>>],
        pgrads: &'a mut ParamSet,
    ) -> Option<&'a mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        match node.op {
            Op::Param(id) => Some(pgrads.get_mut(id).data_mut()),
            _ => {
                let len = self.value(v).len();
                Some(node_grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
            }
        }
    }

    fn accumulate(&self, v: Var, delta: &[f64], ng: &mut [Option<Vec<f64>>], pg: &mut ParamSet) {
        if let Some(s) = self.slot(v, ng, pg) {
            for (x, d) in s.iter_mut().zip(delta) {
                *x += d;
            }
        }
    }

    fn backward_node(&self, idx: usize, g: &[f64], ng: &mut [Option<Vec<f64>>], pg: &mut ParamSet) {
        match &self.nodes[idx].op {
            Op::Param(_) | Op::Input => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if let Some(s) = self.slot(a, ng, pg) {
                    gemm(m, n, k, g, (n, 1), tb.data(), (1, n), s, true);
                }
                if let Some(s) = self.slot(b, ng, pg) {
                    gemm(k, m, n, ta.data(), (1, k), g, (n, 1), s, true);
                }
            }
            &Op::MatMulBt(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if let Some(s) = self.slot(a, ng, pg) {
                    gemm(m, n, k, g, (n, 1), tb.data(), (k, 1), s, true);
                }
                if let Some(s) = self.slot(b, ng, pg) {
                    gemm(n, m, k, g, (1, n), ta.data(), (k, 1), s, true);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(a, g, ng, pg);
                self.accumulate(b, g, ng, pg);
            }
            &Op::AddRow(a, b) => {
                self.accumulate(a, g, ng, pg);
                if let Some(s) = self.slot(b, ng, pg) {
                    let n = s.len();
                    for row in g.chunks_exact(n) {
                        for (x, d) in s.iter_mut().zip(row) {
                            *x += d;
                        }
                    }
                }
            }
            &Op::Scale(a, f) => {
                if let Some(s) = self.slot(a, ng, pg) {
                    for (x, d) in s.iter_mut().zip(g) {
                        *x += f * d;
                    }
                }
            }
            Op::Sum(vars) => {
                for &v in vars {
                    self.accumulate(v, g, ng, pg);
                }
            }
            &Op::Gelu(a) => {
                let ta = self.value(a);
                if let Some(s) = self.slot(a, ng, pg) {
                    for ((x, d), &v) in s.iter_mut().zip(g).zip(ta.data()) {
                        *x += d * gelu_grad(v);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(s) = self.slot(*a, ng, pg) {
                    for ((x, d), m) in s.iter_mut().zip(g).zip(mask) {
                        *x += d * m;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain);
                let n = tg.len();
                let m = rstd.len();
                if let Some(s) = self.slot(*x, ng, pg) {
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let xr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxhat[j] = gr[j] * tg.data()[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / n as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let sr = &mut s[r * n..(r + 1) * n];
                        for j in 0..n {
                            sr[j] += rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                }
                if let Some(s) = self.slot(*gain, ng, pg) {
                    for r in 0..m {
                        for j in 0..n {
                            s[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(s) = self.slot(*bias, ng, pg) {
                    for r in 0..m {
                        for j in 0..n {
                            s[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                key_mask,
                probs,
            } => self.attention_backward([*q, *k, *v], *heads, key_mask.as_deref(), probs, g, ng, pg),
            Op::Rows(a, rows) => {
                if let Some(s) = self.slot(*a, ng, pg) {
                    let n = g.len() / rows.len().max(1);
                    for (i, &r) in rows.iter().enumerate() {
                        for (x, d) in s[r * n..(r + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *x += d;
                        }
                    }
                }
            }
            Op::GatherSum(a, rows) => {
                if let Some(s) = self.slot(*a, ng, pg) {
                    let n = g.len();
                    for &r in rows {
                        for (x, d) in s[r * n..(r + 1) * n].iter_mut().zip(g) {
                            *x += d;
                        }
                    }
                }
            }
            Op::CrossEntropySum { logits, labels, probs } => {
                if let Some(s) = self.slot(*logits, ng, pg) {
                    let c = probs.len() / labels.len().max(1);
                    let g0 = g[0];
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == label { 1.0 } else { 0.0 };
                            s[r * c + j] += g0 * (probs[r * c + j] - target);
                        }
                    }
                }
            }
            &Op::FactorGrid { u, sizes } => {
                let [sx, sy, sz, nk] = sizes;
                if let Some(s) = self.slot(u, ng, pg) {
                    let (ux, rest) = s.split_at_mut(sx);
                    let (uy, rest) = rest.split_at_mut(sy);
                    let (uz, ua) = rest.split_at_mut(sz);
                    let mut i = 0;
                    for y in 0..sy {
                        for z in 0..sz {
                            for x in 0..sx {
                                for a in 0..nk {
                                    let d = g[i];
                                    ux[x] += d;
                                    uy[y] += d;
                                    uz[z] += d;
                                    ua[a] += d;
                                    i += 1;
                                }
                            }
                        }
                    }
                    ua[nk] += g[i];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        [q, k, v]: [Var; 3],
        heads: usize,
        key_mask: Option<&[bool]>,
        probs: &[f64],
        g: &[f64],
        ng: &mut [Option<Vec<f64>>],
        pg: &mut ParamSet,
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (s, d) = (tq.rows(), tq.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let visible = |j: usize| key_mask.is_none_or(|m| m[j]);
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![0.0; s * d];
        let mut dk = vec![0.0; s * d];
        let mut dv = vec![0.0; s * d];
        let mut dp = vec![0.0; s];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..s {
                let p = &probs[(h * s + i) * s..(h * s + i + 1) * s];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut weighted = 0.0;
                for j in 0..s {
                    if !visible(j) {
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = dot(gi, vj);
                    weighted += p[j] * dp[j];
                    for (x, gc) in dv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *x += p[j] * gc;
                    }
                }
                for j in 0..s {
                    if !visible(j) {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] += ds * kd[j * d + off + c];
                        dk[j * d + off + c] += ds * qd[i * d + off + c];
                    }
                }
            }
        }
        self.accumulate(q, &dq, ng, pg);
        self.accumulate(k, &dk, ng, pg);
        self.accumulate(v, &dv, ng, pg);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(values: &[(&str, &[usize], Vec<f64>)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, s, v) in values {
            p.push(*n, Tensor::from_vec(s, v.clone()).unwrap());
        }
        p
    }

    /// Central differences over every coordinate of every parameter.
    fn check(p: &ParamSet, build: impl Fn(&mut Tape) -> Var) {
        let mut grads = p.zeros_like();
        {
            let mut tape = Tape::new(p);
            let loss = build(&mut tape);
            tape.backward(loss, &mut grads, 1.0);
        }
        let eval = |q: &ParamSet| {
            let mut tape = Tape::new(q);
            let l = build(&mut tape);
            tape.value(l).item()
        };
        let eps = 1e-5;
        let mut q = p.clone();
        for (id, name, t) in p.iter() {
            for i in 0..t.len() {
                let orig = t.data()[i];
                q.get_mut(id).data_mut()[i] = orig + eps;
                let fp = eval(&q);
                q.get_mut(id).data_mut()[i] = orig - eps;
                let fm = eval(&q);
                q.get_mut(id).data_mut()[i] = orig;
                let num = (fp - fm) / (2.0 * eps);
                let ana = grads.get(id).data()[i];
                assert!(
                    (num - ana).abs() <= 1e-6 * (1.0 + num.abs()),
                    "{name}[{i}]: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    fn seq(n: usize, a: f64, b: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64) * a + b).sin()).collect()
    }

    #[test]
    fn matmul_ops_gradients() {
        let p = params(&[("a", &[3, 4], seq(12, 0.7, 0.1)), ("b", &[4, 2], seq(8, 1.3, 0.5)), ("c", &[5, 4], seq(20, 0.9, 0.2))]);
        check(&p, |t| {
            let (a, b, c) = (t.param(ParamId(0)), t.param(ParamId(1)), t.param(ParamId(2)));
            let ab = t.matmul(a, b);
            let act = t.matmul_bt(a, c);
            let l1 = t.cross_entropy_sum(ab, vec![1, 0, 1]);
            let l2 = t.cross_entropy_sum(act, vec![4, 0, 2]);
            t.sum(vec![l1, l2])
        });
    }

    #[test]
    fn layer_norm_gelu_rows_gradients() {
        let p = params(&[
            ("x", &[3, 5], seq(15, 1.7, 0.3)),
            ("g", &[5], seq(5, 0.4, 1.0)),
            ("b", &[5], seq(5, 0.8, 0.0)),
            ("w", &[5, 4], seq(20, 0.6, 0.9)),
        ]);
        check(&p, |t| {
            let (x, g, b, w) = (t.param(ParamId(0)), t.param(ParamId(1)), t.param(ParamId(2)), t.param(ParamId(3)));
            let h = t.layer_norm(x, g, b);
            let h = t.gelu(h);
            let h = t.add_row(h, b);
            let h = t.scale(h, 1.5);
            let y = t.matmul(h, w);
            let r = t.rows(y, vec![2, 0, 2]);
            let s = t.gather_sum(x, vec![1, 1, 2]);
            let s = t.matmul(s, w);
            let l1 = t.cross_entropy_sum(r, vec![3, 1, 0]);
            let l2 = t.cross_entropy_sum(s, vec![2]);
            t.sum(vec![l1, l2])
        });
    }

    #[test]
    fn attention_gradients_with_mask() {
        let p = params(&[
            ("q", &[4, 6], seq(24, 0.37, 0.2)),
            ("k", &[4, 6], seq(24, 0.53, 0.7)),
            ("v", &[4, 6], seq(24, 0.71, 1.1)),
        ]);
        check(&p, |t| {
            let (q, k, v) = (t.param(ParamId(0)), t.param(ParamId(1)), t.param(ParamId(2)));
            let a = t.attention(q, k, v, 2, Some(vec![true, true, false, true]));
            t.cross_entropy_sum(a, vec![0, 5, 2, 3])
        });
    }

    #[test]
    fn factor_grid_gradients() {
        let p = params(&[("u", &[1, 2 + 3 + 2 + 3 + 1], seq(11, 0.9, 0.4))]);
        check(&p, |t| {
            let u = t.param(ParamId(0));
            let l = t.factor_grid(u, [2, 3, 2, 3]);
            assert_eq!(t.value(l).len(), 2 * 3 * 2 * 3 + 1);
            t.cross_entropy_sum(l, vec![17])
        });
    }

    #[test]
    fn attention_rows_normalize_and_skip_masked_keys() {
        let p = params(&[("q", &[3, 4], seq(12, 0.3, 0.0))]);
        let mut t = Tape::new(&p);
        let q = t.param(ParamId(0));
        let a = t.attention(q, q, q, 2, Some(vec![true, false, true]));
        let probs = t.attention_probs(a).unwrap();
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[1], 0.0);
        }
    }

    #[test]
    fn inputs_receive_no_gradient() {
        let p = params(&[("w", &[2, 2], vec![1.0, 2.0, 3.0, 4.0])]);
        let mut grads = p.zeros_like();
        let mut t = Tape::new(&p);
        let x = t.input(Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap());
        let w = t.param(ParamId(0));
        let y = t.matmul(x, w);
        let l = t.cross_entropy_sum(y, vec![0]);
        t.backward(l, &mut grads, 1.0);
        assert!(grads.get(ParamId(0)).data().iter().any(|v| *v != 0.0));
    }
}
