//! Eager computation graph with recorded backward closures.
//!
//! Each op validates shapes, computes its output immediately, and appends a
//! node whose closure knows how to push gradients to its parents. The
//! backward pass walks nodes in reverse recording order, which is a valid
//! topological order because parents always precede children. Both passes
//! are single-threaded and allocation-order deterministic: two backward
//! passes over identical graphs produce bit-identical gradients.

use rand::Rng;

use super::{TensorBase, TensorError};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

type BackFn<S> = Box<dyn Fn(&[Node<S>], &[S], &mut Grads<S>)>;

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    back: Option<BackFn<S>>,
}

/// Per-node gradient buffers; empty vector means "no gradient yet".
pub(crate) struct Grads<S: Scalar> {
    bufs: Vec<Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    fn new(n: usize) -> Self {
        Self { bufs: vec![Vec::new(); n] }
    }

    /// Gradient buffer for `idx`, zero-initialized on first touch.
    fn buf(&mut self, idx: usize, len: usize) -> &mut [S] {
        if self.bufs[idx].is_empty() {
            self.bufs[idx] = vec![S::zero(); len];
        }
        &mut self.bufs[idx]
    }
}

/// Boolean attention mask over query/key positions; `true` = may attend.
#[derive(Debug, Clone)]
pub struct AttnMask {
    t_q: usize,
    t_k: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// Rejects masks with a fully-masked query row: softmax over an empty
    /// set has no value to give that row.
    pub fn new(t_q: usize, t_k: usize, allowed: Vec<bool>) -> Result<Self, TensorError> {
        if allowed.len() != t_q * t_k {
            return Err(TensorError::LengthMismatch {
                op: "attention mask",
                len: allowed.len(),
                shape: vec![t_q, t_k],
            });
        }
        for row in 0..t_q {
            if !allowed[row * t_k..(row + 1) * t_k].iter().any(|&a| a) {
                return Err(TensorError::FullyMaskedRow { row });
            }
        }
        Ok(Self { t_q, t_k, allowed })
    }

    /// Strictly causal square mask: position t may attend to positions <= t.
    pub fn causal(t: usize) -> Self {
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allowed[i * t + j] = true;
            }
        }
        Self { t_q: t, t_k: t, allowed }
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.t_k + k]
    }
}

/// Attention weights captured at forward time, for inspection only.
pub struct AttnRecord<S: Scalar> {
    pub node: NodeId,
    pub groups: usize,
    pub t_q: usize,
    pub t_k: usize,
    /// `[groups * t_q * t_k]`, masked-out entries exactly zero.
    pub weights: Vec<S>,
}

/// Reverse-mode autodiff tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Grads<S>,
    attn_records: Vec<AttnRecord<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Grads::new(0), attn_records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, back: Option<BackFn<S>>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, requires_grad, back });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a leaf copied from a value tensor, inheriting its grad flag.
    pub fn input(&mut self, t: &TensorBase<S>) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), None)
    }

    /// Inserts a non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<NodeId, TensorError> {
        let t = TensorBase::new(shape, data)?;
        Ok(self.input(&t))
    }

    #[inline]
    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    #[inline]
    pub fn data(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: NodeId) -> TensorBase<S> {
        TensorBase::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node invariant")
    }

    /// Gradient of `id` after [`Graph::backward`]; `None` if none reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.bufs.get(id.0).filter(|b| !b.is_empty()).map(|b| b.as_slice())
    }

    pub fn recorded_attention(&self) -> &[AttnRecord<S>] {
        &self.attn_records
    }

    /// Runs reverse-mode accumulation from a scalar loss. Resets any
    /// previous gradients first, so repeated calls are idempotent.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: node.shape.clone() });
        }
        self.grads = Grads::new(self.nodes.len());
        self.grads.bufs[loss.0] = vec![S::one()];
        for i in (0..=loss.0).rev() {
            if self.grads.bufs[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(back) = self.nodes[i].back.as_ref() else { continue };
            let g = std::mem::take(&mut self.grads.bufs[i]);
            back(&self.nodes, &g, &mut self.grads);
            self.grads.bufs[i] = g;
        }
        Ok(())
    }

    // ---- elementwise and broadcast ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_op("add", a, b, |x, y| x + y, |_x, _y| (S::one(), S::one()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_op("sub", a, b, |x, y| x - y, |_x, _y| (S::one(), -S::one()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_op("mul", a, b, |x, y| x * y, |x, y| (y, x))
    }

    /// Same-shape binary op with local derivatives `(d/da, d/db)`.
    fn zip_op(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S + 'static,
        df: impl Fn(S, S) -> (S, S) + 'static,
    ) -> Result<NodeId, TensorError> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(TensorError::ShapeMismatch { op, lhs: na.shape.clone(), rhs: nb.shape.clone() });
        }
        let data: Vec<S> = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
        let req = na.requires_grad || nb.requires_grad;
        let (a_req, b_req) = (na.requires_grad, nb.requires_grad);
        let shape = na.shape.clone();
        let len = data.len();
        let back: BackFn<S> = Box::new(move |nodes, g, grads| {
            if a_req {
                let buf = grads.buf(a.0, len);
                for i in 0..len {
                    let (da, _) = df(nodes[a.0].data[i], nodes[b.0].data[i]);
                    buf[i] += g[i] * da;
                }
            }
            if b_req {
                let buf = grads.buf(b.0, len);
                for i in 0..len {
                    let (_, db) = df(nodes[a.0].data[i], nodes[b.0].data[i]);
                    buf[i] += g[i] * db;
                }
            }
        });
        Ok(self.push(shape, data, req, req.then_some(back)))
    }

    /// Multiplies every element by a compile-time constant.
    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId, TensorError> {
        let n = &self.nodes[x.0];
        let data: Vec<S> = n.data.iter().map(|&v| v * c).collect();
        let req = n.requires_grad;
        let shape = n.shape.clone();
        let len = data.len();
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, len);
            for i in 0..len {
                buf[i] += g[i] * c;
            }
        });
        Ok(self.push(shape, data, req, req.then_some(back)))
    }

    /// Broadcast add: `b`'s shape must be a trailing suffix of `x`'s shape.
    /// The only broadcasting form this graph supports.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (nx, nb) = (&self.nodes[x.0], &self.nodes[b.0]);
        let (xs, bs) = (&nx.shape, &nb.shape);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != bs[..] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: xs.clone(),
                rhs: bs.clone(),
            });
        }
        let bn = nb.data.len();
        let reps = nx.data.len() / bn;
        let mut data = nx.data.clone();
        for r in 0..reps {
            let row = &mut data[r * bn..(r + 1) * bn];
            for (o, &bv) in row.iter_mut().zip(&nb.data) {
                *o += bv;
            }
        }
        let req = nx.requires_grad || nb.requires_grad;
        let (x_req, b_req) = (nx.requires_grad, nb.requires_grad);
        let shape = nx.shape.clone();
        let len = data.len();
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            if x_req {
                let buf = grads.buf(x.0, len);
                for i in 0..len {
                    buf[i] += g[i];
                }
            }
            if b_req {
                let buf = grads.buf(b.0, bn);
                for r in 0..reps {
                    for j in 0..bn {
                        buf[j] += g[r * bn + j];
                    }
                }
            }
        });
        Ok(self.push(shape, data, req, req.then_some(back)))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let [m, k] = two_dims("matmul", &na.shape)?;
        let [k2, n] = two_dims("matmul", &nb.shape)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let data = matmul_ikj(&na.data, &nb.data, m, k, n);
        let req = na.requires_grad || nb.requires_grad;
        let (a_req, b_req) = (na.requires_grad, nb.requires_grad);
        let back: BackFn<S> = Box::new(move |nodes, g, grads| {
            if a_req {
                // dA = g . B^T, written as row dots for unit stride.
                let bd = &nodes[b.0].data;
                let buf = grads.buf(a.0, m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let arow = &mut buf[i * k..(i + 1) * k];
                    for l in 0..k {
                        let brow = &bd[l * n..(l + 1) * n];
                        let mut s = S::zero();
                        for j in 0..n {
                            s += grow[j] * brow[j];
                        }
                        arow[l] += s;
                    }
                }
            }
            if b_req {
                // dB = A^T . g, accumulated as axpy over g rows.
                let ad = &nodes[a.0].data;
                let buf = grads.buf(b.0, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for l in 0..k {
                        let ail = ad[i * k + l];
                        if ail == S::zero() {
                            continue;
                        }
                        let brow = &mut buf[l * n..(l + 1) * n];
                        for j in 0..n {
                            brow[j] += ail * grow[j];
                        }
                    }
                }
            }
        });
        Ok(self.push(vec![m, n], data, req, req.then_some(back)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let [m, n] = two_dims("transpose", &nx.shape)?;
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = nx.data[i * n + j];
            }
        }
        let req = nx.requires_grad;
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, m * n);
            for i in 0..m {
                for j in 0..n {
                    buf[i * n + j] += g[j * m + i];
                }
            }
        });
        Ok(self.push(vec![n, m], data, req, req.then_some(back)))
    }

    /// Same data, new shape; element count must be preserved.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim { op: "reshape", shape });
        }
        if numel != nx.data.len() {
            return Err(TensorError::LengthMismatch { op: "reshape", len: nx.data.len(), shape });
        }
        let data = nx.data.clone();
        let req = nx.requires_grad;
        let len = data.len();
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, len);
            for i in 0..len {
                buf[i] += g[i];
            }
        });
        Ok(self.push(shape, data, req, req.then_some(back)))
    }

    // ---- activations and normalization ----

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let data: Vec<S> = nx.data.iter().map(|&v| sigmoid_scalar(v)).collect();
        let req = nx.requires_grad;
        let shape = nx.shape.clone();
        let len = data.len();
        let back: BackFn<S> = Box::new(move |nodes, g, grads| {
            let buf = grads.buf(x.0, len);
            for i in 0..len {
                let y = sigmoid_scalar(nodes[x.0].data[i]);
                buf[i] += g[i] * y * (S::one() - y);
            }
        });
        Ok(self.push(shape, data, req, req.then_some(back)))
    }

    /// GELU (tanh approximation); the feed-forward nonlinearity.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let data: Vec<S> = nx.data.iter().map(|&v| gelu_scalar(v)).collect();
        let req = nx.requires_grad;
        let shape = nx.shape.clone();
        let len = data.len();
        let back: BackFn<S> = Box::new(move |nodes, g, grads| {
            let buf = grads.buf(x.0, len);
            for i in 0..len {
                buf[i] += g[i] * gelu_grad_scalar(nodes[x.0].data[i]);
            }
        });
        Ok(self.push(shape, data, req, req.then_some(back)))
    }

    /// Row-wise softmax over the last dimension, stabilized by max
    /// subtraction. Rows sum to one exactly up to rounding.
    pub fn softmax_lastdim(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let n = *nx.shape.last().expect("rank >= 1");
        let rows = nx.data.len() / n;
        let mut data = nx.data.clone();
        for r in 0..rows {
            softmax_row(&mut data[r * n..(r + 1) * n]);
        }
        let req = nx.requires_grad;
        let shape = nx.shape.clone();
        let out_data = data.clone();
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, rows * n);
            for r in 0..rows {
                let y = &out_data[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let mut dot = S::zero();
                for j in 0..n {
                    dot += gr[j] * y[j];
                }
                let br = &mut buf[r * n..(r + 1) * n];
                for j in 0..n {
                    br[j] += y[j] * (gr[j] - dot);
                }
            }
        });
        Ok(self.push(shape, data, req, req.then_some(back)))
    }

    /// Layer normalization over the last dimension with learnable gain/bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArg { op: "layer_norm", msg: format!("eps must be > 0, got {eps}") });
        }
        let (nx, ng, nb) = (&self.nodes[x.0], &self.nodes[gamma.0], &self.nodes[beta.0]);
        let n = *nx.shape.last().expect("rank >= 1");
        if ng.shape != [n] {
            return Err(TensorError::ShapeMismatch { op: "layer_norm gamma", lhs: nx.shape.clone(), rhs: ng.shape.clone() });
        }
        if nb.shape != [n] {
            return Err(TensorError::ShapeMismatch { op: "layer_norm beta", lhs: nx.shape.clone(), rhs: nb.shape.clone() });
        }
        let rows = nx.data.len() / n;
        let epss = S::from_f64(eps);
        let inv_n = S::one() / S::from_f64(n as f64);
        let mut data = vec![S::zero(); nx.data.len()];
        for r in 0..rows {
            let xr = &nx.data[r * n..(r + 1) * n];
            let (mean, inv_std) = row_moments(xr, inv_n, epss);
            let out = &mut data[r * n..(r + 1) * n];
            for j in 0..n {
                out[j] = (xr[j] - mean) * inv_std * ng.data[j] + nb.data[j];
            }
        }
        let req = nx.requires_grad || ng.requires_grad || nb.requires_grad;
        let (x_req, g_req, b_req) = (nx.requires_grad, ng.requires_grad, nb.requires_grad);
        let shape = nx.shape.clone();
        let back: BackFn<S> = Box::new(move |nodes, g, grads| {
            let xd = &nodes[x.0].data;
            let gam = &nodes[gamma.0].data;
            for r in 0..rows {
                let xr = &xd[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let (mean, inv_std) = row_moments(xr, inv_n, epss);
                if b_req {
                    let bb = grads.buf(beta.0, n);
                    for j in 0..n {
                        bb[j] += gr[j];
                    }
                }
                if g_req {
                    let gb = grads.buf(gamma.0, n);
                    for j in 0..n {
                        gb[j] += gr[j] * (xr[j] - mean) * inv_std;
                    }
                }
                if x_req {
                    // dx = inv_std * (gh - mean(gh) - xhat * mean(gh*xhat))
                    let mut sum_gh = S::zero();
                    let mut sum_ghx = S::zero();
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv_std;
                        let gh = gr[j] * gam[j];
                        sum_gh += gh;
                        sum_ghx += gh * xhat;
                    }
                    let mean_gh = sum_gh * inv_n;
                    let mean_ghx = sum_ghx * inv_n;
                    let xb = grads.buf(x.0, rows * n);
                    let xbr = &mut xb[r * n..(r + 1) * n];
                    for j in 0..n {
                        let xhat = (xr[j] - mean) * inv_std;
                        let gh = gr[j] * gam[j];
                        xbr[j] += inv_std * (gh - mean_gh - xhat * mean_ghx);
                    }
                }
            }
        });
        Ok(self.push(shape, data, req, req.then_some(back)))
    }

    // ---- attention ----

    /// Scaled dot-product attention over groups. `q` is `[G, Tq, d]` (or
    /// `[Tq, d]` for a single group), `k`/`v` are `[G, Tk, d]`. The optional
    /// mask is shared across groups; masked-out weights are exactly zero, so
    /// masked positions cannot influence the output even at the bit level.
    pub fn scaled_dot_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: Option<&AttnMask>,
    ) -> Result<NodeId, TensorError> {
        let (sq, sk, sv) = (
            self.nodes[q.0].shape.clone(),
            self.nodes[k.0].shape.clone(),
            self.nodes[v.0].shape.clone(),
        );
        let (groups, t_q, d) = group_dims("scaled_dot_attention", &sq)?;
        let (gk, t_k, dk) = group_dims("scaled_dot_attention", &sk)?;
        let (gv, t_kv, dv) = group_dims("scaled_dot_attention", &sv)?;
        if gk != groups || gv != groups || dk != d || dv != d || t_kv != t_k {
            return Err(TensorError::ShapeMismatch { op: "scaled_dot_attention", lhs: sq, rhs: if gk != groups || dk != d { sk } else { sv } });
        }
        if let Some(m) = mask {
            if m.t_q != t_q || m.t_k != t_k {
                return Err(TensorError::ShapeMismatch {
                    op: "scaled_dot_attention mask",
                    lhs: vec![t_q, t_k],
                    rhs: vec![m.t_q, m.t_k],
                });
            }
        }
        let allowed: Option<Vec<bool>> = mask.map(|m| m.allowed.clone());
        let scale = S::from_f64(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (&self.nodes[q.0].data, &self.nodes[k.0].data, &self.nodes[v.0].data);
        let mut weights = vec![S::zero(); groups * t_q * t_k];
        let mut data = vec![S::zero(); groups * t_q * d];
        for g in 0..groups {
            let qg = &qd[g * t_q * d..(g + 1) * t_q * d];
            let kg = &kd[g * t_k * d..(g + 1) * t_k * d];
            let vg = &vd[g * t_k * d..(g + 1) * t_k * d];
            for i in 0..t_q {
                let qi = &qg[i * d..(i + 1) * d];
                let wrow = &mut weights[(g * t_q + i) * t_k..(g * t_q + i + 1) * t_k];
                let mut max = S::neg_infinity();
                for j in 0..t_k {
                    if allowed.as_ref().map_or(true, |a| a[i * t_k + j]) {
                        let kj = &kg[j * d..(j + 1) * d];
                        let mut s = S::zero();
                        for c in 0..d {
                            s += qi[c] * kj[c];
                        }
                        let s = s * scale;
                        wrow[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                let mut z = S::zero();
                for j in 0..t_k {
                    if allowed.as_ref().map_or(true, |a| a[i * t_k + j]) {
                        wrow[j] = (wrow[j] - max).exp();
                        z += wrow[j];
                    } else {
                        wrow[j] = S::zero();
                    }
                }
                let out = &mut data[(g * t_q + i) * d..(g * t_q + i + 1) * d];
                for j in 0..t_k {
                    wrow[j] = wrow[j] / z;
                    if wrow[j] != S::zero() {
                        let vj = &vg[j * d..(j + 1) * d];
                        for c in 0..d {
                            out[c] += wrow[j] * vj[c];
                        }
                    }
                }
            }
        }
        let req = self.nodes[q.0].requires_grad || self.nodes[k.0].requires_grad || self.nodes[v.0].requires_grad;
        let (q_req, k_req, v_req) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let out_shape = if sq.len() == 2 { vec![t_q, d] } else { vec![groups, t_q, d] };
        let w_for_back = weights.clone();
        let back: BackFn<S> = Box::new(move |nodes, g_out, grads| {
            let qd = &nodes[q.0].data;
            let kd = &nodes[k.0].data;
            let vd = &nodes[v.0].data;
            for g in 0..groups {
                for i in 0..t_q {
                    let gi = &g_out[(g * t_q + i) * d..(g * t_q + i + 1) * d];
                    let wrow = &w_for_back[(g * t_q + i) * t_k..(g * t_q + i + 1) * t_k];
                    let qi = &qd[(g * t_q + i) * d..(g * t_q + i + 1) * d];
                    // dA_j = <g_i, v_j>; softmax backward; then chain to q, k.
                    let mut da = vec![S::zero(); t_k];
                    let mut dot = S::zero();
                    for j in 0..t_k {
                        if wrow[j] != S::zero() {
                            let vj = &vd[(g * t_k + j) * d..(g * t_k + j + 1) * d];
                            let mut s = S::zero();
                            for c in 0..d {
                                s += gi[c] * vj[c];
                            }
                            da[j] = s;
                            dot += s * wrow[j];
                        }
                    }
                    if v_req {
                        let vb = grads.buf(v.0, groups * t_k * d);
                        for j in 0..t_k {
                            if wrow[j] != S::zero() {
                                let vbj = &mut vb[(g * t_k + j) * d..(g * t_k + j + 1) * d];
                                for c in 0..d {
                                    vbj[c] += wrow[j] * gi[c];
                                }
                            }
                        }
                    }
                    if q_req || k_req {
                        for j in 0..t_k {
                            if wrow[j] == S::zero() {
                                continue;
                            }
                            let ds = wrow[j] * (da[j] - dot) * scale;
                            if ds == S::zero() {
                                continue;
                            }
                            if q_req {
                                let kj = &kd[(g * t_k + j) * d..(g * t_k + j + 1) * d];
                                let qb = grads.buf(q.0, groups * t_q * d);
                                let qbi = &mut qb[(g * t_q + i) * d..(g * t_q + i + 1) * d];
                                for c in 0..d {
                                    qbi[c] += ds * kj[c];
                                }
                            }
                            if k_req {
                                let kb = grads.buf(k.0, groups * t_k * d);
                                let kbj = &mut kb[(g * t_k + j) * d..(g * t_k + j + 1) * d];
                                for c in 0..d {
                                    kbj[c] += ds * qi[c];
                                }
                            }
                        }
                    }
                }
            }
        });
        let id = self.push(out_shape, data, req, req.then_some(back));
        self.attn_records.push(AttnRecord { node: id, groups, t_q, t_k, weights });
        Ok(id)
    }

    // ---- gather / scatter and layout ops ----

    /// Row gather: `out[i] = table[indices[i]]`. Gradient scatter-adds back,
    /// so repeated indices accumulate.
    pub fn embedding(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let nt = &self.nodes[table.0];
        let [v, d] = two_dims("embedding", &nt.shape)?;
        if indices.is_empty() {
            return Err(TensorError::InvalidArg { op: "embedding", msg: "empty index list".into() });
        }
        for &ix in indices {
            if ix >= v {
                return Err(TensorError::IndexOutOfBounds { op: "embedding", index: ix, bound: v });
            }
        }
        let n = indices.len();
        let mut data = vec![S::zero(); n * d];
        for (i, &ix) in indices.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&nt.data[ix * d..(ix + 1) * d]);
        }
        let req = nt.requires_grad;
        let idx: Vec<usize> = indices.to_vec();
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(table.0, v * d);
            for (i, &ix) in idx.iter().enumerate() {
                let row = &mut buf[ix * d..(ix + 1) * d];
                for c in 0..d {
                    row[c] += g[i * d + c];
                }
            }
        });
        Ok(self.push(vec![n, d], data, req, req.then_some(back)))
    }

    /// Per-group row selection from `[B, T, d]`: `out[b] = x[b, idx[b]]`.
    /// Used to read the hidden state at each stay's final valid step.
    pub fn select_step(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let [b, t, d] = three_dims("select_step", &nx.shape)?;
        if indices.len() != b {
            return Err(TensorError::LengthMismatch { op: "select_step", len: indices.len(), shape: vec![b] });
        }
        for &ix in indices {
            if ix >= t {
                return Err(TensorError::IndexOutOfBounds { op: "select_step", index: ix, bound: t });
            }
        }
        let mut data = vec![S::zero(); b * d];
        for (bi, &ix) in indices.iter().enumerate() {
            data[bi * d..(bi + 1) * d].copy_from_slice(&nx.data[(bi * t + ix) * d..(bi * t + ix + 1) * d]);
        }
        let req = nx.requires_grad;
        let idx: Vec<usize> = indices.to_vec();
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, b * t * d);
            for (bi, &ix) in idx.iter().enumerate() {
                let row = &mut buf[(bi * t + ix) * d..(bi * t + ix + 1) * d];
                for c in 0..d {
                    row[c] += g[bi * d + c];
                }
            }
        });
        Ok(self.push(vec![b, d], data, req, req.then_some(back)))
    }

    /// Stacks K same-shaped `[n, d]` tensors into `[n, K, d]` token groups.
    pub fn stack_tokens(&mut self, xs: &[NodeId]) -> Result<NodeId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArg { op: "stack_tokens", msg: "empty input list".into() });
        }
        let first = self.nodes[xs[0].0].shape.clone();
        let [n, d] = two_dims("stack_tokens", &first)?;
        for &x in &xs[1..] {
            if self.nodes[x.0].shape != first {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_tokens",
                    lhs: first.clone(),
                    rhs: self.nodes[x.0].shape.clone(),
                });
            }
        }
        let k = xs.len();
        let mut data = vec![S::zero(); n * k * d];
        for (ti, &x) in xs.iter().enumerate() {
            let xd = &self.nodes[x.0].data;
            for i in 0..n {
                data[(i * k + ti) * d..(i * k + ti + 1) * d].copy_from_slice(&xd[i * d..(i + 1) * d]);
            }
        }
        let req = xs.iter().any(|&x| self.nodes[x.0].requires_grad);
        let parents: Vec<(usize, bool)> =
            xs.iter().map(|&x| (x.0, self.nodes[x.0].requires_grad)).collect();
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            for (ti, &(p, p_req)) in parents.iter().enumerate() {
                if !p_req {
                    continue;
                }
                let buf = grads.buf(p, n * d);
                for i in 0..n {
                    let src = &g[(i * k + ti) * d..(i * k + ti + 1) * d];
                    let dst = &mut buf[i * d..(i + 1) * d];
                    for c in 0..d {
                        dst[c] += src[c];
                    }
                }
            }
        });
        Ok(self.push(vec![n, k, d], data, req, req.then_some(back)))
    }

    /// Mean over the token axis of `[G, K, d]`, yielding `[G, d]`.
    pub fn mean_tokens(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let [g_count, k, d] = three_dims("mean_tokens", &nx.shape)?;
        let inv_k = S::one() / S::from_f64(k as f64);
        let mut data = vec![S::zero(); g_count * d];
        for gi in 0..g_count {
            let out = &mut data[gi * d..(gi + 1) * d];
            for t in 0..k {
                let row = &nx.data[(gi * k + t) * d..(gi * k + t + 1) * d];
                for c in 0..d {
                    out[c] += row[c];
                }
            }
            for c in 0..d {
                out[c] *= inv_k;
            }
        }
        let req = nx.requires_grad;
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, g_count * k * d);
            for gi in 0..g_count {
                let src = &g[gi * d..(gi + 1) * d];
                for t in 0..k {
                    let dst = &mut buf[(gi * k + t) * d..(gi * k + t + 1) * d];
                    for c in 0..d {
                        dst[c] += src[c] * inv_k;
                    }
                }
            }
        });
        Ok(self.push(vec![g_count, d], data, req, req.then_some(back)))
    }

    /// `[B*T, H*dh] -> [B*H, T, dh]`: regroups rows so each head attends
    /// within its own group. Pure permutation.
    pub fn split_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let [n, d] = two_dims("split_heads", &nx.shape)?;
        if n != batch * seq || heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidArg {
                op: "split_heads",
                msg: format!("shape [{n}, {d}] incompatible with batch={batch} seq={seq} heads={heads}"),
            });
        }
        let dh = d / heads;
        let mut data = vec![S::zero(); n * d];
        for b in 0..batch {
            for t in 0..seq {
                let src = (b * seq + t) * d;
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    data[dst..dst + dh].copy_from_slice(&nx.data[src + h * dh..src + (h + 1) * dh]);
                }
            }
        }
        let req = nx.requires_grad;
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, n * d);
            for b in 0..batch {
                for t in 0..seq {
                    let src = (b * seq + t) * d;
                    for h in 0..heads {
                        let dst = ((b * heads + h) * seq + t) * dh;
                        for c in 0..dh {
                            buf[src + h * dh + c] += g[dst + c];
                        }
                    }
                }
            }
        });
        Ok(self.push(vec![batch * heads, seq, dh], data, req, req.then_some(back)))
    }

    /// Inverse of [`Graph::split_heads`]: `[B*H, T, dh] -> [B*T, H*dh]`.
    pub fn merge_heads(
        &mut self,
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let [gh, t, dh] = three_dims("merge_heads", &nx.shape)?;
        if gh != batch * heads || t != seq {
            return Err(TensorError::InvalidArg {
                op: "merge_heads",
                msg: format!("shape [{gh}, {t}, {dh}] incompatible with batch={batch} seq={seq} heads={heads}"),
            });
        }
        let d = heads * dh;
        let mut data = vec![S::zero(); batch * seq * d];
        for b in 0..batch {
            for ti in 0..seq {
                let dst = (b * seq + ti) * d;
                for h in 0..heads {
                    let src = ((b * heads + h) * seq + ti) * dh;
                    data[dst + h * dh..dst + (h + 1) * dh].copy_from_slice(&nx.data[src..src + dh]);
                }
            }
        }
        let req = nx.requires_grad;
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, batch * heads * seq * dh);
            for b in 0..batch {
                for ti in 0..seq {
                    let dst = (b * seq + ti) * d;
                    for h in 0..heads {
                        let src = ((b * heads + h) * seq + ti) * dh;
                        for c in 0..dh {
                            buf[src + c] += g[dst + h * dh + c];
                        }
                    }
                }
            }
        });
        Ok(self.push(vec![batch * seq, d], data, req, req.then_some(back)))
    }

    // ---- reductions and losses ----

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let total: S = nx.data.iter().copied().sum();
        let req = nx.requires_grad;
        let len = nx.data.len();
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, len);
            for i in 0..len {
                buf[i] += g[0];
            }
        });
        Ok(self.push(vec![1], vec![total], req, req.then_some(back)))
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[x.0];
        let len = nx.data.len();
        let inv = S::one() / S::from_f64(len as f64);
        let total: S = nx.data.iter().copied().sum::<S>() * inv;
        let req = nx.requires_grad;
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, len);
            for i in 0..len {
                buf[i] += g[0] * inv;
            }
        });
        Ok(self.push(vec![1], vec![total], req, req.then_some(back)))
    }

    /// Mean binary cross-entropy computed in logit space:
    /// `max(x, 0) - x*y + ln(1 + e^{-|x|})`. Stable for any finite logit.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[S]) -> Result<NodeId, TensorError> {
        let nx = &self.nodes[logits.0];
        if nx.shape.len() != 1 {
            return Err(TensorError::RankError { op: "bce_with_logits", expected: "rank 1 logits", got: nx.shape.clone() });
        }
        if targets.len() != nx.data.len() {
            return Err(TensorError::LengthMismatch {
                op: "bce_with_logits",
                len: targets.len(),
                shape: nx.shape.clone(),
            });
        }
        for &t in targets {
            if t != S::zero() && t != S::one() {
                return Err(TensorError::InvalidArg { op: "bce_with_logits", msg: format!("labels must be 0 or 1, got {t}") });
            }
        }
        let n = nx.data.len();
        let inv_n = S::one() / S::from_f64(n as f64);
        let mut total = S::zero();
        for (&x, &y) in nx.data.iter().zip(targets) {
            let pos = if x > S::zero() { x } else { S::zero() };
            total += pos - x * y + (-x.abs()).exp().ln_1p();
        }
        total *= inv_n;
        let req = nx.requires_grad;
        let y: Vec<S> = targets.to_vec();
        let back: BackFn<S> = Box::new(move |nodes, g, grads| {
            let buf = grads.buf(logits.0, n);
            for i in 0..n {
                let p = sigmoid_scalar(nodes[logits.0].data[i]);
                buf[i] += g[0] * (p - y[i]) * inv_n;
            }
        });
        Ok(self.push(vec![1], vec![total], req, req.then_some(back)))
    }

    /// Inverted dropout, identity when `p == 0`. The surviving mask is fixed
    /// at call time, so the recorded graph stays deterministic.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArg { op: "dropout", msg: format!("p must be in [0, 1), got {p}") });
        }
        if p == 0.0 {
            return Ok(x);
        }
        let nx = &self.nodes[x.0];
        let keep = 1.0 - p;
        let scale = S::from_f64(1.0 / keep);
        let mask: Vec<S> = (0..nx.data.len())
            .map(|_| if rng.gen::<f64>() < keep { scale } else { S::zero() })
            .collect();
        let data: Vec<S> = nx.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let req = nx.requires_grad;
        let shape = nx.shape.clone();
        let len = data.len();
        let back: BackFn<S> = Box::new(move |_nodes, g, grads| {
            let buf = grads.buf(x.0, len);
            for i in 0..len {
                buf[i] += g[i] * mask[i];
            }
        });
        Ok(self.push(shape, data, req, req.then_some(back)))
    }
}

// ---- scalar kernels ----

#[inline]
fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

#[inline]
fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mut max = S::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut z = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v = *v / z;
    }
}

fn row_moments<S: Scalar>(row: &[S], inv_n: S, eps: S) -> (S, S) {
    let mut mean = S::zero();
    for &v in row {
        mean += v;
    }
    mean *= inv_n;
    let mut var = S::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var *= inv_n;
    (mean, S::one() / (var + eps).sqrt())
}

fn matmul_ikj<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            if ail == S::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
    out
}

fn two_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 2], TensorError> {
    match shape {
        [a, b] => Ok([*a, *b]),
        _ => Err(TensorError::RankError { op, expected: "rank 2", got: shape.to_vec() }),
    }
}

fn three_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 3], TensorError> {
    match shape {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(TensorError::RankError { op, expected: "rank 3", got: shape.to_vec() }),
    }
}

/// `[T, d]` counts as one group; `[G, T, d]` as G groups.
fn group_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    match shape {
        [t, d] => Ok((1, *t, *d)),
        [g, t, d] => Ok((*g, *t, *d)),
        _ => Err(TensorError::RankError { op, expected: "rank 2 or 3", got: shape.to_vec() }),
    }
}
