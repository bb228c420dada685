//! Dense tensors with tape-free reverse-mode autodiff.
//!
//! Every `Tensor` is a node in a dynamically built graph: non-leaf nodes keep
//! their parents alive through `Rc` and carry a backward closure. Calling
//! [`Tensor::backward`] on a scalar walks the graph in reverse topological
//! order and accumulates gradients into every reachable leaf that requires
//! them. Leaf gradients accumulate additively across calls until explicitly
//! zeroed, which is what windowed BPTT needs.
//!
//! All arithmetic is 64-bit. Graphs are single-threaded (`Rc`); parallelism
//! lives inside the kernels only.

pub mod kernels;

use crate::error::{MelodiError, Result};
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense n-dimensional tensor participating in reverse-mode autodiff.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

/// Boolean attention mask over a q x k score matrix. Not differentiable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub q: usize,
    pub k: usize,
    pub allowed: Vec<bool>,
}

impl Mask {
    pub fn new(q: usize, k: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), q * k);
        Mask { q, k, allowed }
    }

    pub fn all_allowed(q: usize, k: usize) -> Self {
        Mask {
            q,
            k,
            allowed: vec![true; q * k],
        }
    }

    pub fn at(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.k + j]
    }
}

fn node(
    shape: Vec<usize>,
    data: Vec<f64>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
) -> Tensor {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    let requires_grad = parents.iter().any(|p| p.requires_grad());
    Tensor {
        inner: Rc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents: if requires_grad { parents } else { Vec::new() },
            backward: if requires_grad { backward } else { None },
        }),
    }
}

impl Tensor {
    /// Constant leaf; gradients do not flow into it.
    pub fn leaf(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf shape/data mismatch"
        );
        node(shape, data, Vec::new(), None)
    }

    /// Trainable leaf: backward populates and accumulates its grad.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: true,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![1], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::leaf(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    /// Row count for 2-d tensors.
    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    /// Column count for 2-d tensors.
    pub fn cols(&self) -> usize {
        *self.inner.shape.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar");
        self.inner.data.borrow()[0]
    }

    /// In-place mutation of a leaf's values (optimizer updates).
    pub fn set_data(&self, new: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(v) => kernels::axpy(v, contribution, 1.0),
            None => *g = Some(contribution.to_vec()),
        }
    }

    /// New leaf sharing this tensor's current values; cuts the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.inner.shape.clone(), self.to_vec())
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(MelodiError::ShapeMismatch {
                context: "backward expects a scalar loss",
                lhs: self.inner.shape.clone(),
                rhs: vec![1],
            });
        }
        let order = topo_order(self);
        self.accumulate_grad(&[1.0]);
        for t in order.iter().rev() {
            let grad = t.inner.grad.borrow().clone();
            let Some(grad) = grad else { continue };
            if let Some(back) = &t.inner.backward {
                back(&grad);
            }
            // Intermediate grads are scratch; only leaves keep theirs.
            if t.inner.backward.is_some() {
                *t.inner.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_shape_eq(self, other, "add");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        node(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(g);
                }
            })),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_shape_eq(self, other, "mul");
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        node(
            self.inner.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                if a.requires_grad() {
                    let bd = b.data();
                    let contrib: Vec<f64> = g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect();
                    a.accumulate_grad(&contrib);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let contrib: Vec<f64> = g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect();
                    b.accumulate_grad(&contrib);
                }
            })),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        let a = self.clone();
        node(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let contrib: Vec<f64> = g.iter().map(|g| g * c).collect();
                a.accumulate_grad(&contrib);
            })),
        )
    }

    /// Gaussian error linear unit (tanh approximation, differentiated exactly).
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh()))
            .collect();
        let a = self.clone();
        node(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let ad = a.data();
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(g, &x)| {
                        let u = C * (x + A * x * x * x);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                drop(ad);
                a.accumulate_grad(&contrib);
            })),
        )
    }

    // ---- reductions / linear algebra ----

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let a = self.clone();
        let n = self.len();
        node(
            vec![1],
            vec![s],
            vec![self.clone()],
            Some(Box::new(move |g| {
                a.accumulate_grad(&vec![g[0]; n]);
            })),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.inner.shape.len() != 2
            || other.inner.shape.len() != 2
            || self.cols() != other.rows()
        {
            return Err(MelodiError::ShapeMismatch {
                context: "matmul inner extents",
                lhs: self.inner.shape.clone(),
                rhs: other.inner.shape.clone(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data(), &other.data(), &mut out, m, k, n);
        let (a, b) = (self.clone(), other.clone());
        Ok(node(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                if a.requires_grad() {
                    // dA = G . B^T
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_tb(g, &b.data(), &mut da, m, n, k);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = A^T . G
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_ta(&a.data(), g, &mut db, k, m, n);
                    b.accumulate_grad(&db);
                }
            })),
        ))
    }

    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.inner.shape.len(), 2);
        let (m, n) = (self.rows(), self.cols());
        let d = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        drop(d);
        let a = self.clone();
        node(
            vec![n, m],
            out,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut contrib = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        contrib[i * n + j] = g[j * m + i];
                    }
                }
                a.accumulate_grad(&contrib);
            })),
        )
    }

    // ---- structural ----

    /// Vertical stack of 2-d tensors with equal column counts.
    pub fn concat_rows(parts: &[Tensor]) -> Tensor {
        let parts: Vec<Tensor> = parts.iter().filter(|p| p.rows() > 0).cloned().collect();
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = parts[0].cols();
        let total: usize = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(total * cols);
        for p in &parts {
            assert_eq!(p.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(&p.data());
        }
        let caps = parts.clone();
        node(
            vec![total, cols],
            data,
            parts,
            Some(Box::new(move |g| {
                let mut off = 0;
                for p in &caps {
                    let n = p.rows() * p.cols();
                    if p.requires_grad() {
                        p.accumulate_grad(&g[off..off + n]);
                    }
                    off += n;
                }
            })),
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        let cols = self.cols();
        assert!(start + len <= self.rows());
        let data = self.data()[start * cols..(start + len) * cols].to_vec();
        let a = self.clone();
        let total = self.len();
        node(
            vec![len, cols],
            data,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut contrib = vec![0.0; total];
                contrib[start * cols..(start + len) * cols].copy_from_slice(g);
                a.accumulate_grad(&contrib);
            })),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert!(start + len <= n);
        let d = self.data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        drop(d);
        let a = self.clone();
        node(
            vec![m, len],
            out,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut contrib = vec![0.0; m * n];
                for i in 0..m {
                    contrib[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                a.accumulate_grad(&contrib);
            })),
        )
    }

    /// Horizontal stack of 2-d tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let m = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for p in parts {
            assert_eq!(p.rows(), m, "concat_cols row mismatch");
            let w = p.cols();
            let d = p.data();
            for i in 0..m {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let caps: Vec<Tensor> = parts.to_vec();
        node(
            vec![m, total],
            data,
            parts.to_vec(),
            Some(Box::new(move |g| {
                let mut off = 0;
                for p in &caps {
                    let w = p.cols();
                    if p.requires_grad() {
                        let mut contrib = vec![0.0; m * w];
                        for i in 0..m {
                            contrib[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        p.accumulate_grad(&contrib);
                    }
                    off += w;
                }
            })),
        )
    }

    /// out[i] = self.flat[indices[i]]; covers embedding lookups and
    /// relative-bias table expansion. Backward scatter-adds.
    pub fn gather(&self, indices: &[usize], out_shape: Vec<usize>) -> Tensor {
        assert_eq!(out_shape.iter().product::<usize>(), indices.len());
        let d = self.data();
        let data: Vec<f64> = indices.iter().map(|&i| d[i]).collect();
        drop(d);
        let a = self.clone();
        let idx = indices.to_vec();
        let src_len = self.len();
        node(
            out_shape,
            data,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut contrib = vec![0.0; src_len];
                for (gi, &i) in g.iter().zip(&idx) {
                    contrib[i] += gi;
                }
                a.accumulate_grad(&contrib);
            })),
        )
    }

    /// Adds a length-`cols` bias vector to every row.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(bias.len(), n, "add_row bias length");
        let bd = bias.to_vec();
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % n])
            .collect();
        let (a, b) = (self.clone(), bias.clone());
        node(
            vec![m, n],
            data,
            vec![self.clone(), bias.clone()],
            Some(Box::new(move |g| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let mut contrib = vec![0.0; n];
                    for (i, gi) in g.iter().enumerate() {
                        contrib[i % n] += gi;
                    }
                    b.accumulate_grad(&contrib);
                }
            })),
        )
    }

    // ---- normalization / probability ----

    /// Row-wise softmax with optional boolean mask; masked entries are
    /// exactly zero. Stabilized by row-max subtraction.
    pub fn softmax_rows(&self, mask: Option<&Mask>) -> Result<Tensor> {
        let (m, n) = (self.rows(), self.cols());
        if let Some(mk) = mask {
            if mk.q != m || mk.k != n {
                return Err(MelodiError::ShapeMismatch {
                    context: "softmax mask",
                    lhs: vec![m, n],
                    rhs: vec![mk.q, mk.k],
                });
            }
        }
        let d = self.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let live = |j: usize| mask.map_or(true, |mk| mk.at(i, j));
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if live(j) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(MelodiError::DegenerateRow { row: i });
            }
            let mut z = 0.0;
            for j in 0..n {
                if live(j) {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= z;
            }
        }
        drop(d);
        let a = self.clone();
        let probs = out.clone();
        let mask_owned = mask.cloned();
        Ok(node(
            vec![m, n],
            out,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut contrib = vec![0.0; m * n];
                for i in 0..m {
                    let p = &probs[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..n {
                        let live = mask_owned.as_ref().map_or(true, |mk| mk.at(i, j));
                        if live {
                            contrib[i * n + j] = p[j] * (gr[j] - dot);
                        }
                    }
                }
                a.accumulate_grad(&contrib);
            })),
        ))
    }

    /// Row-wise layer norm with learned gain/offset.
    pub fn layer_norm(&self, gain: &Tensor, offset: &Tensor, eps: f64) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        assert_eq!(gain.len(), n);
        assert_eq!(offset.len(), n);
        let d = self.data();
        let gd = gain.to_vec();
        let od = offset.to_vec();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_sigma = vec![0.0; m];
        for i in 0..m {
            let row = &d[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_sigma[i] = is;
            for j in 0..n {
                let xh = (row[j] - mu) * is;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * gd[j] + od[j];
            }
        }
        drop(d);
        let (a, gn, of) = (self.clone(), gain.clone(), offset.clone());
        node(
            vec![m, n],
            out,
            vec![self.clone(), gain.clone(), offset.clone()],
            Some(Box::new(move |g| {
                let gd = gn.to_vec();
                if a.requires_grad() {
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..m {
                        let xh = &xhat[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dxh: Vec<f64> = (0..n).map(|j| gr[j] * gd[j]).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / n as f64;
                        for j in 0..n {
                            contrib[i * n + j] =
                                inv_sigma[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    a.accumulate_grad(&contrib);
                }
                if gn.requires_grad() {
                    let mut contrib = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            contrib[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    gn.accumulate_grad(&contrib);
                }
                if of.requires_grad() {
                    let mut contrib = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            contrib[j] += g[i * n + j];
                        }
                    }
                    of.accumulate_grad(&contrib);
                }
            })),
        )
    }

    /// Mean cross-entropy of `logits[rows x vocab]` against target ids,
    /// skipping rows where `mask` is false. Fused forward/backward.
    pub fn cross_entropy(&self, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
        let (m, v) = (self.rows(), self.cols());
        assert_eq!(targets.len(), m);
        assert_eq!(mask.len(), m);
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(MelodiError::DegenerateRow { row: 0 });
        }
        let d = self.data();
        let mut probs = vec![0.0; m * v];
        let mut loss = 0.0;
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            let row = &d[i * v..(i + 1) * v];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[i * v + j] /= z;
            }
            loss -= probs[i * v + targets[i]].ln();
        }
        drop(d);
        loss /= count as f64;
        let a = self.clone();
        let tg = targets.to_vec();
        let mk = mask.to_vec();
        Ok(node(
            vec![1],
            vec![loss],
            vec![self.clone()],
            Some(Box::new(move |g| {
                let scale = g[0] / count as f64;
                let mut contrib = vec![0.0; m * v];
                for i in 0..m {
                    if !mk[i] {
                        continue;
                    }
                    for j in 0..v {
                        let indicator = if j == tg[i] { 1.0 } else { 0.0 };
                        contrib[i * v + j] = scale * (probs[i * v + j] - indicator);
                    }
                }
                a.accumulate_grad(&contrib);
            })),
        ))
    }

    /// Per-head convex combination of cross- and self-attention outputs:
    /// head h of the output is sigmoid(alpha[h])*cross + (1-sigmoid)*self.
    /// Both inputs are [rows x heads*head_dim] with heads laid out in column
    /// blocks; applied before the shared output projection.
    pub fn gated_merge(
        self_heads: &Tensor,
        cross_heads: &Tensor,
        alpha_logits: &Tensor,
        heads: usize,
    ) -> Result<Tensor> {
        if self_heads.shape() != cross_heads.shape() {
            return Err(MelodiError::ShapeMismatch {
                context: "gated_merge inputs",
                lhs: self_heads.shape().to_vec(),
                rhs: cross_heads.shape().to_vec(),
            });
        }
        let (m, n) = (self_heads.rows(), self_heads.cols());
        assert_eq!(alpha_logits.len(), heads);
        assert_eq!(n % heads, 0, "dim not divisible by heads");
        let hd = n / heads;
        let alphas: Vec<f64> = alpha_logits
            .to_vec()
            .iter()
            .map(|a| 1.0 / (1.0 + (-a).exp()))
            .collect();
        let sd = self_heads.data();
        let cd = cross_heads.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for h in 0..heads {
                let al = alphas[h];
                for j in 0..hd {
                    let k = i * n + h * hd + j;
                    out[k] = al * cd[k] + (1.0 - al) * sd[k];
                }
            }
        }
        drop(sd);
        drop(cd);
        let (s, c, a) = (self_heads.clone(), cross_heads.clone(), alpha_logits.clone());
        Ok(node(
            vec![m, n],
            out,
            vec![self_heads.clone(), cross_heads.clone(), alpha_logits.clone()],
            Some(Box::new(move |g| {
                if s.requires_grad() {
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..m {
                        for h in 0..heads {
                            for j in 0..hd {
                                let k = i * n + h * hd + j;
                                contrib[k] = g[k] * (1.0 - alphas[h]);
                            }
                        }
                    }
                    s.accumulate_grad(&contrib);
                }
                if c.requires_grad() {
                    let mut contrib = vec![0.0; m * n];
                    for i in 0..m {
                        for h in 0..heads {
                            for j in 0..hd {
                                let k = i * n + h * hd + j;
                                contrib[k] = g[k] * alphas[h];
                            }
                        }
                    }
                    c.accumulate_grad(&contrib);
                }
                if a.requires_grad() {
                    let sd = s.data();
                    let cd = c.data();
                    let mut contrib = vec![0.0; heads];
                    for i in 0..m {
                        for h in 0..heads {
                            let dsig = alphas[h] * (1.0 - alphas[h]);
                            for j in 0..hd {
                                let k = i * n + h * hd + j;
                                contrib[h] += g[k] * (cd[k] - sd[k]) * dsig;
                            }
                        }
                    }
                    a.accumulate_grad(&contrib);
                }
            })),
        ))
    }

    /// Inverted dropout with a caller-supplied keep mask (deterministic
    /// streams are the caller's job). `keep[i]` false zeroes the entry;
    /// survivors are scaled by 1/keep_prob.
    pub fn dropout_with_mask(&self, keep: &[bool], keep_prob: f64) -> Tensor {
        assert_eq!(keep.len(), self.len());
        let inv = 1.0 / keep_prob;
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(keep)
            .map(|(x, &k)| if k { x * inv } else { 0.0 })
            .collect();
        let a = self.clone();
        let keep = keep.to_vec();
        node(
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let contrib: Vec<f64> = g
                    .iter()
                    .zip(&keep)
                    .map(|(g, &k)| if k { g * inv } else { 0.0 })
                    .collect();
                a.accumulate_grad(&contrib);
            })),
        )
    }
}

fn assert_shape_eq(a: &Tensor, b: &Tensor, ctx: &str) {
    assert_eq!(a.shape(), b.shape(), "{ctx}: shape mismatch");
}

fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    // Iterative post-order DFS; graphs from long segments are deep.
    let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
    seen.insert(root.inner.id);
    while let Some((t, child)) = stack.pop() {
        let parents = &t.inner.parents;
        if child < parents.len() {
            stack.push((t.clone(), child + 1));
            let p = parents[child].clone();
            if p.inner.requires_grad && seen.insert(p.inner.id) {
                stack.push((p, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

/// Named trainable tensor.
#[derive(Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            trainable: true,
        }
    }
}

/// Max relative error between analytic gradients and central differences,
/// sampled over at most `max_coords` coordinates per parameter.
///
/// `f` rebuilds the scalar loss from the current parameter values each call.
pub fn grad_check<F>(params: &[Parameter], f: F, eps: f64, max_coords: usize) -> f64
where
    F: Fn() -> Tensor,
{
    for p in params {
        p.tensor.zero_grad();
    }
    let loss = f();
    loss.backward().expect("grad_check backward");
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            p.tensor
                .grad()
                .unwrap_or_else(|| vec![0.0; p.tensor.len()])
        })
        .collect();

    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.tensor.len();
        let stride = (n / max_coords).max(1);
        for ci in (0..n).step_by(stride) {
            let orig = p.tensor.data()[ci];
            let bump = |v: f64| -> f64 {
                let mut d = p.tensor.to_vec();
                d[ci] = v;
                p.tensor.set_data(&d);
                let out = f().item();
                d[ci] = orig;
                p.tensor.set_data(&d);
                out
            };
            let plus = bump(orig + eps);
            let minus = bump(orig - eps);
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            // Central differences at eps ~1e-5 carry an absolute noise floor of
            // roughly 1e-11, so a relative comparison is only meaningful for
            // coordinates whose gradient magnitude clears that floor. The 1e-4
            // denominator floor turns the check into an absolute one (tolerance
            // scaled by 1e-4) for near-zero gradients instead of amplifying
            // rounding noise.
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-4);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
