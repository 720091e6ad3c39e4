//! Tape-based reverse-mode differentiation over [`Tensor`] matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every parameter leaf. Operations are coarse (linear layer, multi-head
//! attention, layer norm, fused losses) so a forward pass stays a few hundred
//! nodes long.

use std::collections::HashMap;
use std::rc::Rc;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Source row for [`Graph::gather`]: `(source index, row)`; `None` yields a
/// zero row.
pub type RowRef = Option<(u32, u32)>;

/// Sparse linear map entry: `out[o] += w * x[i]`.
pub type SparseEntry = (u32, u32, f64);

pub const LN_EPS: f64 = 1e-5;

/// Asymmetric-loss hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AslParams {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    pub eps: f64,
}

impl Default for AslParams {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
            eps: 1e-7,
        }
    }
}

/// Loss of one entry and its derivative with respect to the (unclamped)
/// probability.
pub fn asl_term(p: f64, target: f64, params: &AslParams) -> (f64, f64) {
    let clamped = p.clamp(params.eps, 1.0 - params.eps);
    let dclamp = if p > params.eps && p < 1.0 - params.eps { 1.0 } else { 0.0 };
    let p = clamped;
    if target > 0.5 {
        let g = params.gamma_pos;
        let w = (1.0 - p).powf(g);
        let loss = -w * p.ln();
        let dw = if g == 0.0 { 0.0 } else { -g * (1.0 - p).powf(g - 1.0) };
        let d = -dw * p.ln() - w / p;
        (loss, d * dclamp)
    } else {
        let pm = (p - params.margin).max(0.0);
        if pm <= 0.0 {
            return (0.0, 0.0);
        }
        let g = params.gamma_neg;
        let w = pm.powf(g);
        let l1 = (1.0 - pm).ln();
        let loss = -w * l1;
        let dw = if g == 0.0 { 0.0 } else { g * pm.powf(g - 1.0) };
        let d = -dw * l1 + w / (1.0 - pm);
        (loss, d * dclamp)
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Attention layout: `batch` groups of `nq` query rows and `nk` key rows.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub heads: usize,
    /// `[batch, nq, nk]` allowed flags; `None` allows everything.
    pub mask: Option<Rc<Vec<bool>>>,
}

enum Op {
    Leaf,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    MatmulBt { a: Var, b: Var },
    Add(Var, Var),
    AddTiled { x: Var, v: Var },
    Scale(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    ConcatCols(Var, Var),
    Gather { sources: Vec<Var>, index: Rc<Vec<RowRef>> },
    SparseMap { x: Var, map: Rc<Vec<SparseEntry>> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<f64> },
    RowDot { x: Var, w: Var, b: Var },
    Reshape(Var),
    CrossEntropy { logits: Var, targets: Rc<Vec<Option<u32>>>, probs: Vec<f64>, count: usize },
    Asl { logits: Var, dldz: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass. Build with [`Graph::new`], evaluate expressions through
/// the op methods, and differentiate with [`Graph::backward`].
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient is reported for it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Parameter leaf; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// `x [R, I] * w [I, O] + b [1, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: input dim {} vs weight rows {}", xv.cols, wv.rows);
        let (r, i, o) = (xv.rows, xv.cols, wv.cols);
        let mut out = Tensor::zeros(r, o);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), o);
            for row in out.data.chunks_exact_mut(o) {
                row.copy_from_slice(&bv.data);
            }
        }
        gemm(r, i, o, &xv.data, (i, 1), &wv.data, (o, 1), &mut out.data, 1.0);
        self.push(out, Op::Linear { x, w, b })
    }

    /// `a [R, D] * b [V, D]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols);
        let (r, d, v) = (av.rows, av.cols, bv.rows);
        let mut out = Tensor::zeros(r, v);
        gemm(r, d, v, &av.data, (d, 1), &bv.data, (1, d), &mut out.data, 0.0);
        self.push(out, Op::MatmulBt { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        self.push(out, Op::Add(a, b))
    }

    /// Adds `v [P, D]` to `x [k * P, D]`, repeating `v` every `P` rows.
    pub fn add_tiled(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        assert_eq!(xv.cols, vv.cols);
        assert!(vv.rows > 0 && xv.rows % vv.rows == 0, "add_tiled: {} rows not a multiple of {}", xv.rows, vv.rows);
        let mut out = xv.clone();
        let block = vv.data.len();
        for chunk in out.data.chunks_exact_mut(block) {
            for (a, b) in chunk.iter_mut().zip(&vv.data) {
                *a += b;
            }
        }
        self.push(out, Op::AddTiled { x, v })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|v| v * s).collect());
        self.push(out, Op::Scale(x, s))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols;
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let mut out = Tensor::zeros(xv.rows, d);
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; xv.rows];
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                o[c] = h * gv.data[c] + bv.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_vec(xv.rows, xv.cols, xv.data.iter().map(|&v| gelu(v)).collect());
        self.push(out, Op::Gelu(x))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols row mismatch");
        let cols = av.cols + bv.cols;
        let mut out = Tensor::zeros(av.rows, cols);
        for r in 0..av.rows {
            let o = out.row_mut(r);
            o[..av.cols].copy_from_slice(av.row(r));
            o[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    /// Builds a new matrix row by row from rows of `sources` (all sharing a
    /// column count). Covers concatenation, selection, padding and
    /// broadcasting of learned queries.
    pub fn gather(&mut self, sources: &[Var], index: Vec<RowRef>) -> Var {
        let cols = self.value(sources[0]).cols;
        for s in sources {
            assert_eq!(self.value(*s).cols, cols, "gather: column mismatch");
        }
        let mut out = Tensor::zeros(index.len(), cols);
        for (r, src) in index.iter().enumerate() {
            if let Some((s, row)) = src {
                out.row_mut(r).copy_from_slice(self.value(sources[*s as usize]).row(*row as usize));
            }
        }
        self.push(
            out,
            Op::Gather {
                sources: sources.to_vec(),
                index: Rc::new(index),
            },
        )
    }

    /// Fixed sparse linear map over rows: `out[o] = sum w * x[i]`.
    pub fn sparse_map(&mut self, x: Var, out_rows: usize, map: Rc<Vec<SparseEntry>>) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(out_rows, xv.cols);
        for &(o, i, w) in map.iter() {
            let src = xv.row(i as usize);
            for (a, b) in out.row_mut(o as usize).iter_mut().zip(src) {
                *a += w * b;
            }
        }
        self.push(out, Op::SparseMap { x, map })
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values. Query rows whose mask row is empty produce
    /// zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert_eq!(kv.cols, d);
        assert_eq!(vv.cols, d);
        assert_eq!(qv.rows, spec.batch * spec.nq, "attention: query rows");
        assert_eq!(kv.rows, spec.batch * spec.nk, "attention: key rows");
        assert_eq!(vv.rows, kv.rows);
        assert!(spec.heads > 0 && d % spec.heads == 0, "attention: heads must divide dim");
        let (b_n, nq, nk, h_n) = (spec.batch, spec.nq, spec.nk, spec.heads);
        let dh = d / h_n;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows, d);
        let mut probs = vec![0.0; b_n * h_n * nq * nk];
        let mut scores = vec![0.0; nk];
        for b in 0..b_n {
            for h in 0..h_n {
                let off = h * dh;
                for i in 0..nq {
                    let qrow = &qv.row(b * nq + i)[off..off + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..nk {
                        let allowed = spec.mask.as_ref().is_none_or(|m| m[(b * nq + i) * nk + j]);
                        if allowed {
                            let krow = &kv.row(b * nk + j)[off..off + dh];
                            let s = qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>() * scale;
                            scores[j] = s;
                            mx = mx.max(s);
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    if mx == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = if *s == f64::NEG_INFINITY { 0.0 } else { (*s - mx).exp() };
                        z += *s;
                    }
                    let pbase = ((b * h_n + h) * nq + i) * nk;
                    let orow = &mut out.data[(b * nq + i) * d + off..(b * nq + i) * d + off + dh];
                    for j in 0..nk {
                        let p = scores[j] / z;
                        probs[pbase + j] = p;
                        if p != 0.0 {
                            let vrow = &vv.row(b * nk + j)[off..off + dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, spec, probs })
    }

    /// Per-row dot product with a row of `w`, plus a bias: for
    /// `x [G * Q, D]`, `w [Q, D]`, `b [1, Q]` returns `[G * Q, 1]`.
    pub fn row_dot(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols, wv.cols);
        assert_eq!(bv.len(), wv.rows);
        let q = wv.rows;
        assert_eq!(xv.rows % q, 0);
        let mut out = Tensor::zeros(xv.rows, 1);
        for r in 0..xv.rows {
            let qi = r % q;
            out.data[r] = xv.row(r).iter().zip(wv.row(qi)).map(|(a, b)| a * b).sum::<f64>() + bv.data[qi];
        }
        self.push(out, Op::RowDot { x, w, b })
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols);
        let out = Tensor::from_vec(rows, cols, xv.data.clone());
        self.push(out, Op::Reshape(x))
    }

    /// Mean softmax cross-entropy over rows with a target; `None` rows are
    /// ignored. Returns a `1 x 1` node (zero when nothing is targeted).
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<u32>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let v = lv.cols;
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lz = z.ln() + mx;
            for c in 0..v {
                probs[r * v + c] = (row[c] - lz).exp();
            }
            total += lz - row[*t as usize];
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: Rc::new(targets),
                probs,
                count,
            },
        )
    }

    /// Mean asymmetric loss over all entries of `logits` (sigmoid applied
    /// inside); `targets` has one 0/1 entry per logit.
    pub fn asymmetric_loss(&mut self, logits: Var, targets: Vec<f64>, params: &AslParams) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), targets.len());
        let n = targets.len() as f64;
        let mut total = 0.0;
        let mut dldz = vec![0.0; targets.len()];
        for (i, (&z, &t)) in lv.data.iter().zip(&targets).enumerate() {
            let p = sigmoid(z);
            let (l, dp) = asl_term(p, t, params);
            total += l;
            dldz[i] = dp * p * (1.0 - p) / n;
        }
        self.push(
            Tensor::scalar(total / n),
            Op::Asl { logits, dldz },
        )
    }

    /// Reverse pass from a `1 x 1` node. Returns gradients of every
    /// parameter leaf that influenced `loss`.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients {
            grads: vec![None; store.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => accumulate(&mut out.grads[id.0], g),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (r, ii, o) = (xv.rows, xv.cols, wv.cols);
                    let mut gx = Tensor::zeros(r, ii);
                    gemm(r, o, ii, &g.data, (o, 1), &wv.data, (1, o), &mut gx.data, 0.0);
                    let mut gw = Tensor::zeros(ii, o);
                    gemm(ii, r, o, &xv.data, (1, ii), &g.data, (o, 1), &mut gw.data, 0.0);
                    if let Some(b) = b {
                        let mut gb = Tensor::zeros(1, o);
                        for row in g.data.chunks_exact(o) {
                            for (a, v) in gb.data.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                }
                Op::MatmulBt { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (r, d, v) = (av.rows, av.cols, bv.rows);
                    let mut ga = Tensor::zeros(r, d);
                    gemm(r, v, d, &g.data, (v, 1), &bv.data, (d, 1), &mut ga.data, 0.0);
                    let mut gb = Tensor::zeros(v, d);
                    gemm(v, r, d, &g.data, (1, v), &av.data, (d, 1), &mut gb.data, 0.0);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::AddTiled { x, v } => {
                    let vv = self.value(*v);
                    let mut gv = Tensor::zeros(vv.rows, vv.cols);
                    for chunk in g.data.chunks_exact(vv.len()) {
                        for (a, b) in gv.data.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[v.0], gv);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Scale(x, s) => {
                    let gx = Tensor::from_vec(g.rows, g.cols, g.data.iter().map(|v| v * s).collect());
                    accumulate(&mut grads[x.0], gx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gv = self.value(*gamma);
                    let d = g.cols;
                    let mut gx = Tensor::zeros(g.rows, d);
                    let mut ggamma = Tensor::zeros(1, d);
                    let mut gbeta = Tensor::zeros(1, d);
                    let mut gxhat = vec![0.0; d];
                    for r in 0..g.rows {
                        let gy = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for c in 0..d {
                            ggamma.data[c] += gy[c] * xh[c];
                            gbeta.data[c] += gy[c];
                            gxhat[c] = gy[c] * gv.data[c];
                            mean_g += gxhat[c];
                            mean_gx += gxhat[c] * xh[c];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        let o = gx.row_mut(r);
                        for c in 0..d {
                            o[c] = rstd[r] * (gxhat[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gamma.0], ggamma);
                    accumulate(&mut grads[beta.0], gbeta);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let gx = Tensor::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&xv.data).map(|(gy, &xx)| gy * gelu_grad(xx)).collect(),
                    );
                    accumulate(&mut grads[x.0], gx);
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols;
                    let bc = self.value(*b).cols;
                    let mut ga = Tensor::zeros(g.rows, ac);
                    let mut gb = Tensor::zeros(g.rows, bc);
                    for r in 0..g.rows {
                        let row = g.row(r);
                        ga.row_mut(r).copy_from_slice(&row[..ac]);
                        gb.row_mut(r).copy_from_slice(&row[ac..]);
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Gather { sources, index } => {
                    let mut gs: Vec<Tensor> = sources
                        .iter()
                        .map(|s| {
                            let v = self.value(*s);
                            Tensor::zeros(v.rows, v.cols)
                        })
                        .collect();
                    for (r, src) in index.iter().enumerate() {
                        if let Some((s, row)) = src {
                            let dst = gs[*s as usize].row_mut(*row as usize);
                            for (a, b) in dst.iter_mut().zip(g.row(r)) {
                                *a += b;
                            }
                        }
                    }
                    for (s, gt) in sources.iter().zip(gs) {
                        accumulate(&mut grads[s.0], gt);
                    }
                }
                Op::SparseMap { x, map } => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    for &(o, i, w) in map.iter() {
                        let src = g.row(o as usize);
                        for (a, b) in gx.row_mut(i as usize).iter_mut().zip(src) {
                            *a += w * b;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, spec, probs, &g);
                    accumulate(&mut grads[q.0], gq);
                    accumulate(&mut grads[k.0], gk);
                    accumulate(&mut grads[v.0], gv);
                }
                Op::RowDot { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let q = wv.rows;
                    let mut gx = Tensor::zeros(xv.rows, xv.cols);
                    let mut gw = Tensor::zeros(wv.rows, wv.cols);
                    let mut gb = Tensor::zeros(1, q);
                    for r in 0..xv.rows {
                        let qi = r % q;
                        let go = g.data[r];
                        gb.data[qi] += go;
                        let xr = xv.row(r);
                        let wr = wv.row(qi);
                        for c in 0..xv.cols {
                            gx.data[r * xv.cols + c] += go * wr[c];
                            gw.data[qi * xv.cols + c] += go * xr[c];
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[w.0], gw);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Reshape(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads[x.0], Tensor::from_vec(xv.rows, xv.cols, g.data));
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    let lv = self.value(*logits);
                    let mut gl = Tensor::zeros(lv.rows, lv.cols);
                    if *count > 0 {
                        let s = g.item() / *count as f64;
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = t else { continue };
                            let row = gl.row_mut(r);
                            for (c, v) in row.iter_mut().enumerate() {
                                *v = s * probs[r * lv.cols + c];
                            }
                            row[*t as usize] -= s;
                        }
                    }
                    accumulate(&mut grads[logits.0], gl);
                }
                Op::Asl { logits, dldz } => {
                    let lv = self.value(*logits);
                    let s = g.item();
                    let gl = Tensor::from_vec(lv.rows, lv.cols, dldz.iter().map(|d| d * s).collect());
                    accumulate(&mut grads[logits.0], gl);
                }
            }
        }
        out
    }

    #[allow(clippy::type_complexity)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, spec: &AttnSpec, probs: &[f64], g: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let (b_n, nq, nk, h_n) = (spec.batch, spec.nq, spec.nk, spec.heads);
        let dh = d / h_n;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.rows, d);
        let mut gk = Tensor::zeros(kv.rows, d);
        let mut gvv = Tensor::zeros(vv.rows, d);
        let mut gp = vec![0.0; nk];
        for b in 0..b_n {
            for h in 0..h_n {
                let off = h * dh;
                for i in 0..nq {
                    let pbase = ((b * h_n + h) * nq + i) * nk;
                    let p = &probs[pbase..pbase + nk];
                    let go = &g.row(b * nq + i)[off..off + dh];
                    let mut dot = 0.0;
                    for j in 0..nk {
                        if p[j] == 0.0 {
                            gp[j] = 0.0;
                            continue;
                        }
                        let vrow = &vv.row(b * nk + j)[off..off + dh];
                        gp[j] = go.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        dot += p[j] * gp[j];
                        let gvrow = &mut gvv.data[(b * nk + j) * d + off..(b * nk + j) * d + off + dh];
                        for (a, c) in gvrow.iter_mut().zip(go) {
                            *a += p[j] * c;
                        }
                    }
                    let qrow = &qv.row(b * nq + i)[off..off + dh];
                    for j in 0..nk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let gs = p[j] * (gp[j] - dot) * scale;
                        let krow = &kv.row(b * nk + j)[off..off + dh];
                        let gqrow = &mut gq.data[(b * nq + i) * d + off..(b * nq + i) * d + off + dh];
                        for (a, c) in gqrow.iter_mut().zip(krow) {
                            *a += gs * c;
                        }
                        let gkrow = &mut gk.data[(b * nk + j) * d + off..(b * nk + j) * d + off + dh];
                        for (a, c) in gkrow.iter_mut().zip(qrow) {
                            *a += gs * c;
                        }
                    }
                }
            }
        }
        (gq, gk, gvv)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}
