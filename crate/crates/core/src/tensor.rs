//! Dense f64 tensors on a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every tensor created during a forward pass as a node in a
//! flat arena; [`Var`] is a copyable handle into that arena. Operations
//! compute their result eagerly and, when any input requires gradients,
//! record a backward rule. [`Tape::backward`] replays the rules in exact
//! reverse recording order, accumulating gradients into every reachable node.
//!
//! Invariants maintained by every public operation:
//! - `product(shape) == data.len()` and all extents are positive
//! - all stored values are finite, or the operation returned an error
//! - a gradient buffer, when present, has the same length as its node's data

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A plain tensor value: shape plus row-major data. Used for moving values
/// in and out of a [`Tape`] and for storing parameters between steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape {
                op: "tensor",
                details: format!("zero extent in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                details: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place perturbation (finite differences).
    /// The caller is responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Handle to a tensor node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Vec<f64>>,
}

/// A recorded operation: reads the output gradient off the arena and
/// accumulates into its inputs.
struct OpRecord {
    backward: Box<dyn Fn(&mut [Node])>,
}

/// Reverse-mode gradient tape. Single-owner: one tape per forward/backward
/// pair; distinct tapes are independent and may live on distinct threads.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<OpRecord>,
}

fn accumulate(nodes: &mut [Node], idx: usize, g: &[f64]) {
    let node = &mut nodes[idx];
    if !node.requires_grad {
        return;
    }
    debug_assert_eq!(node.data.len(), g.len());
    match &mut node.grad {
        Some(buf) => {
            for (b, gi) in buf.iter_mut().zip(g) {
                *b += gi;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

fn out_grad(nodes: &[Node], idx: usize) -> Option<Vec<f64>> {
    nodes[idx].grad.clone()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Register a leaf tensor. Leaves keep their gradients across backward
    /// passes; everything derived from them is transient.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            data: t.data,
            shape: t.shape,
            requires_grad,
            is_leaf: true,
            grad: None,
        });
        Var(id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn const_scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v), false)
    }

    pub fn const_vector(&mut self, data: &[f64]) -> Result<Var> {
        Ok(self.leaf(Tensor::vector(data.to_vec())?, false))
    }

    pub fn ones(&mut self, shape: &[usize]) -> Var {
        let numel = shape.iter().product();
        self.leaf(
            Tensor { shape: shape.to_vec(), data: vec![1.0; numel] },
            false,
        )
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::Shape {
                op: "scalar_value",
                details: format!("expected one element, shape is {:?}", n.shape),
            });
        }
        Ok(n.data[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.data.clone() }
    }

    /// Gradient of a node after [`Tape::backward`]; `None` when no gradient
    /// reached it (or it does not require gradients).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(
        &mut self,
        op: &'static str,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { data, shape, requires_grad, is_leaf: false, grad: None });
        Ok(Var(id))
    }

    fn record(&mut self, backward: impl Fn(&mut [Node]) + 'static) {
        self.ops.push(OpRecord { backward: Box::new(backward) });
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Shape {
                op,
                details: format!(
                    "{:?} vs {:?}",
                    self.nodes[a.0].shape, self.nodes[b.0].shape
                ),
            });
        }
        Ok(())
    }

    // ── Arithmetic ───────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push("add", data, shape, req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                accumulate(nodes, a.0, &g);
                accumulate(nodes, b.0, &g);
            });
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push("sub", data, shape, req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                accumulate(nodes, a.0, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                accumulate(nodes, b.0, &neg);
            });
        }
        Ok(out)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        let shape = self.nodes[a.0].shape.clone();
        let out = self.push("mul", data, shape, req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let da: Vec<f64> =
                    g.iter().zip(&nodes[b.0].data).map(|(gi, y)| gi * y).collect();
                let db: Vec<f64> =
                    g.iter().zip(&nodes[a.0].data).map(|(gi, x)| gi * x).collect();
                accumulate(nodes, a.0, &da);
                accumulate(nodes, b.0, &db);
            });
        }
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::Domain { op: "scale", details: format!("factor {c} not finite") });
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let req = self.requires(x);
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push("scale", data, shape, req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let dx: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                accumulate(nodes, x.0, &dx);
            });
        }
        Ok(out)
    }

    /// Matrix product of `a: [m, k]` and `b: [k, n]`.
    /// Backward accumulates `g · bᵀ` into `a` and `aᵀ · g` into `b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                details: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += ad[i * k + p] * bd[p * n + j];
                    }
                    data[i * n + j] = acc;
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        let out = self.push("matmul", data, vec![m, n], req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                // dA[i,p] = Σ_j g[i,j] · B[p,j]
                let da: Vec<f64> = {
                    let bd = &nodes[b.0].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    da
                };
                // dB[p,j] = Σ_i A[i,p] · g[i,j]
                let db: Vec<f64> = {
                    let ad = &nodes[a.0].data;
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ad[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] = acc;
                        }
                    }
                    db
                };
                accumulate(nodes, a.0, &da);
                accumulate(nodes, b.0, &db);
            });
        }
        Ok(out)
    }

    /// Matrix-vector product of `w: [m, k]` and `x: [k]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (sw, sx) = (&self.nodes[w.0].shape, &self.nodes[x.0].shape);
        if sw.len() != 2 || sx.len() != 1 || sw[1] != sx[0] {
            return Err(Error::Shape {
                op: "matvec",
                details: format!("{sw:?} x {sx:?}"),
            });
        }
        let (m, k) = (sw[0], sw[1]);
        let mut data = vec![0.0; m];
        {
            let wd = &self.nodes[w.0].data;
            let xd = &self.nodes[x.0].data;
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..k {
                    acc += wd[i * k + j] * xd[j];
                }
                data[i] = acc;
            }
        }
        let req = self.requires(w) || self.requires(x);
        let out = self.push("matvec", data, vec![m], req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let dw: Vec<f64> = {
                    let xd = &nodes[x.0].data;
                    let mut dw = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..k {
                            dw[i * k + j] = g[i] * xd[j];
                        }
                    }
                    dw
                };
                let dx: Vec<f64> = {
                    let wd = &nodes[w.0].data;
                    let mut dx = vec![0.0; k];
                    for j in 0..k {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += wd[i * k + j] * g[i];
                        }
                        dx[j] = acc;
                    }
                    dx
                };
                accumulate(nodes, w.0, &dw);
                accumulate(nodes, x.0, &dx);
            });
        }
        Ok(out)
    }

    /// Inner product of two equal-length vectors; returns a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 1 || sb.len() != 1 || sa[0] != sb[0] {
            return Err(Error::Shape { op: "dot", details: format!("{sa:?} . {sb:?}") });
        }
        let v = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .sum();
        let req = self.requires(a) || self.requires(b);
        let out = self.push("dot", vec![v], vec![1], req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let g0 = g[0];
                let da: Vec<f64> = nodes[b.0].data.iter().map(|y| g0 * y).collect();
                let db: Vec<f64> = nodes[a.0].data.iter().map(|x| g0 * x).collect();
                accumulate(nodes, a.0, &da);
                accumulate(nodes, b.0, &db);
            });
        }
        Ok(out)
    }

    // ── Element-wise maps ───────────────────────────────────────────────

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        data: Vec<f64>,
        dx_fn: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + 'static,
    ) -> Result<Var> {
        let req = self.requires(x);
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push(op, data, shape, req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let dx = dx_fn(&g, &nodes[x.0].data, &nodes[out.0].data);
                accumulate(nodes, x.0, &dx);
            });
        }
        Ok(out)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        self.unary("tanh", x, data, |g, _x, y| {
            g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect()
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|v| sigmoid(*v)).collect();
        self.unary("sigmoid", x, data, |g, _x, y| {
            g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect()
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|v| v.max(0.0)).collect();
        self.unary("relu", x, data, |g, x, _y| {
            g.iter()
                .zip(x)
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                .collect()
        })
    }

    /// Leaky ReLU; the negative branch (including exactly zero) uses `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !slope.is_finite() {
            return Err(Error::Domain {
                op: "leaky_relu",
                details: format!("slope {slope} not finite"),
            });
        }
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|v| if *v > 0.0 { *v } else { slope * v })
            .collect();
        self.unary("leaky_relu", x, data, move |g, x, _y| {
            g.iter()
                .zip(x)
                .map(|(gi, xi)| if *xi > 0.0 { *gi } else { gi * slope })
                .collect()
        })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].data.iter().map(|v| v.exp()).collect();
        self.unary("exp", x, data, |g, _x, y| {
            g.iter().zip(y).map(|(gi, yi)| gi * yi).collect()
        })
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[x.0].data.iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                details: format!("non-positive entry {bad}"),
            });
        }
        let data = self.nodes[x.0].data.iter().map(|v| v.ln()).collect();
        self.unary("log", x, data, |g, x, _y| {
            g.iter().zip(x).map(|(gi, xi)| gi / xi).collect()
        })
    }

    // ── Structured ops ──────────────────────────────────────────────────

    /// Numerically stabilized softmax over a rank-1 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 1 {
            return Err(Error::Shape {
                op: "softmax",
                details: format!("expected rank-1 input, got {shape:?}"),
            });
        }
        let xs = &self.nodes[x.0].data;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        self.unary("softmax", x, data, |g, _x, y| {
            // dx = y ⊙ (g − (y · g))
            let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
            y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect()
        })
    }

    /// Sum of all elements; returns a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v: f64 = self.nodes[x.0].data.iter().sum();
        let req = self.requires(x);
        let out = self.push("sum", vec![v], vec![1], req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let dx = vec![g[0]; nodes[x.0].data.len()];
                accumulate(nodes, x.0, &dx);
            });
        }
        Ok(out)
    }

    /// View with a new shape of identical element count. Gradient passes
    /// through unchanged.
    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if new_shape.iter().any(|&e| e == 0) || numel != self.nodes[x.0].data.len() {
            return Err(Error::Shape {
                op: "reshape",
                details: format!(
                    "{:?} ({} elements) into {new_shape:?}",
                    self.nodes[x.0].shape,
                    self.nodes[x.0].data.len()
                ),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let req = self.requires(x);
        let out = self.push("reshape", data, new_shape.to_vec(), req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                accumulate(nodes, x.0, &g);
            });
        }
        Ok(out)
    }

    /// Concatenate along `axis`. All shapes must agree off-axis; the backward
    /// rule splits the output gradient back to the inputs.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape { op: "concat", details: "empty input list".into() });
        }
        let rank = self.nodes[xs[0].0].shape.len();
        if axis >= rank {
            return Err(Error::Shape {
                op: "concat",
                details: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != rank
                || s.iter()
                    .zip(&self.nodes[xs[0].0].shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    details: format!(
                        "off-axis disagreement: {:?} vs {:?}",
                        self.nodes[xs[0].0].shape, s
                    ),
                });
            }
        }
        let mut shape = self.nodes[xs[0].0].shape.clone();
        shape[axis] = xs.iter().map(|&x| self.nodes[x.0].shape[axis]).sum();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let total_axis = shape[axis];

        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for &x in xs {
            let ext = self.nodes[x.0].shape[axis];
            let src = &self.nodes[x.0].data;
            for o in 0..outer {
                let dst_base = o * total_axis * inner + offset * inner;
                let src_base = o * ext * inner;
                data[dst_base..dst_base + ext * inner]
                    .copy_from_slice(&src[src_base..src_base + ext * inner]);
            }
            offset += ext;
        }

        let req = xs.iter().any(|&x| self.requires(x));
        let out = self.push("concat", data, shape, req)?;
        if req {
            let inputs: Vec<Var> = xs.to_vec();
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let mut offset = 0;
                for &x in &inputs {
                    let ext = nodes[x.0].shape[axis];
                    let mut dx = vec![0.0; nodes[x.0].data.len()];
                    for o in 0..outer {
                        let src_base = o * total_axis * inner + offset * inner;
                        let dst_base = o * ext * inner;
                        dx[dst_base..dst_base + ext * inner]
                            .copy_from_slice(&g[src_base..src_base + ext * inner]);
                    }
                    accumulate(nodes, x.0, &dx);
                    offset += ext;
                }
            });
        }
        Ok(out)
    }

    /// Stack rank-1 tensors of equal length into a `[n, d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::Shape { op: "stack_rows", details: "empty input list".into() });
        }
        let d = self.nodes[rows[0].0].data.len();
        let mut reshaped = Vec::with_capacity(rows.len());
        for &r in rows {
            reshaped.push(self.reshape(r, &[1, d])?);
        }
        self.concat(&reshaped, 0)
    }

    /// Contiguous slice `[start, start + len)` of a rank-1 tensor. The
    /// backward rule scatters the gradient back into place.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 1 || start + len > shape[0] || len == 0 {
            return Err(Error::Shape {
                op: "slice",
                details: format!("[{start}, {}) of {shape:?}", start + len),
            });
        }
        let total = shape[0];
        let data = self.nodes[x.0].data[start..start + len].to_vec();
        let req = self.requires(x);
        let out = self.push("slice", data, vec![len], req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let mut dx = vec![0.0; total];
                dx[start..start + len].copy_from_slice(&g);
                accumulate(nodes, x.0, &dx);
            });
        }
        Ok(out)
    }

    /// Extract row `i` of a `[n, d]` matrix as a rank-1 tensor. The backward
    /// rule scatters the gradient back into that row.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        if shape.len() != 2 {
            return Err(Error::Shape {
                op: "row",
                details: format!("expected rank-2 input, got {shape:?}"),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        if i >= n {
            return Err(Error::Shape {
                op: "row",
                details: format!("row {i} out of range for {n} rows"),
            });
        }
        let data = self.nodes[x.0].data[i * d..(i + 1) * d].to_vec();
        let req = self.requires(x);
        let out = self.push("row", data, vec![d], req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let mut dx = vec![0.0; n * d];
                dx[i * d..(i + 1) * d].copy_from_slice(&g);
                accumulate(nodes, x.0, &dx);
            });
        }
        Ok(out)
    }

    /// Element-wise max over a nonempty set of same-shape tensors. The
    /// gradient routes to the first input (in the given order) attaining
    /// each coordinate's maximum.
    pub fn reduce_max_elementwise(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Domain {
                op: "reduce_max_elementwise",
                details: "empty input set".into(),
            });
        }
        for &x in xs {
            self.check_same_shape("reduce_max_elementwise", xs[0], x)?;
        }
        let numel = self.nodes[xs[0].0].data.len();
        let mut data = self.nodes[xs[0].0].data.clone();
        let mut argmax = vec![0usize; numel];
        for (i, &x) in xs.iter().enumerate().skip(1) {
            for (k, v) in self.nodes[x.0].data.iter().enumerate() {
                if *v > data[k] {
                    data[k] = *v;
                    argmax[k] = i;
                }
            }
        }
        let req = xs.iter().any(|&x| self.requires(x));
        let shape = self.nodes[xs[0].0].shape.clone();
        let out = self.push("reduce_max_elementwise", data, shape, req)?;
        if req {
            let inputs: Vec<Var> = xs.to_vec();
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                for (i, &x) in inputs.iter().enumerate() {
                    let dx: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(k, gk)| if argmax[k] == i { *gk } else { 0.0 })
                        .collect();
                    accumulate(nodes, x.0, &dx);
                }
            });
        }
        Ok(out)
    }

    /// Pairwise ranking hinge over a stock cross-section:
    /// `Σ_{q≠k} max(0, −(pred_q − pred_k)(target_q − target_k))`, summed over
    /// ordered pairs. Inactive pairs (including exact zeros) contribute no
    /// gradient.
    pub fn pairwise_rank_hinge(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (&self.nodes[pred.0].shape, &self.nodes[target.0].shape);
        if sp.len() != 1 || st.len() != 1 || sp[0] != st[0] {
            return Err(Error::Shape {
                op: "pairwise_rank_hinge",
                details: format!("{sp:?} vs {st:?}"),
            });
        }
        let n = sp[0];
        let mut total = 0.0;
        {
            let p = &self.nodes[pred.0].data;
            let t = &self.nodes[target.0].data;
            for q in 0..n {
                for k in 0..n {
                    if q == k {
                        continue;
                    }
                    let m = -(p[q] - p[k]) * (t[q] - t[k]);
                    if m > 0.0 {
                        total += m;
                    }
                }
            }
        }
        let req = self.requires(pred) || self.requires(target);
        let out = self.push("pairwise_rank_hinge", vec![total], vec![1], req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let g0 = g[0];
                let (dp, dt) = {
                    let p = &nodes[pred.0].data;
                    let t = &nodes[target.0].data;
                    let mut dp = vec![0.0; n];
                    let mut dt = vec![0.0; n];
                    for q in 0..n {
                        for k in 0..n {
                            if q == k {
                                continue;
                            }
                            let dpred = p[q] - p[k];
                            let dtrue = t[q] - t[k];
                            if -dpred * dtrue > 0.0 {
                                dp[q] -= g0 * dtrue;
                                dp[k] += g0 * dtrue;
                                dt[q] -= g0 * dpred;
                                dt[k] += g0 * dpred;
                            }
                        }
                    }
                    (dp, dt)
                };
                accumulate(nodes, pred.0, &dp);
                accumulate(nodes, target.0, &dt);
            });
        }
        Ok(out)
    }

    /// Forward `c·x` with a deliberately wrong backward rule (half the true
    /// derivative). Exists only so gradient-checker fault-injection tests
    /// have a known-bad case to detect.
    #[cfg(test)]
    pub(crate) fn scale_with_corrupted_backward(&mut self, x: Var, c: f64) -> Result<Var> {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let req = self.requires(x);
        let shape = self.nodes[x.0].shape.clone();
        let out = self.push("scale_corrupted", data, shape, req)?;
        if req {
            self.record(move |nodes| {
                let Some(g) = out_grad(nodes, out.0) else { return };
                let dx: Vec<f64> = g.iter().map(|gi| gi * c * 0.5).collect();
                accumulate(nodes, x.0, &dx);
            });
        }
        Ok(out)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Replays the recorded operations in
    /// exact reverse order. Leaf gradients accumulate across repeated calls;
    /// interior gradients are recomputed from scratch each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.data.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                details: format!("loss must be scalar, shape is {:?}", node.shape),
            });
        }
        for node in &mut self.nodes {
            if !node.is_leaf {
                node.grad = None;
            }
        }
        accumulate(&mut self.nodes, loss.0, &[1.0]);
        let nodes = &mut self.nodes;
        for op in self.ops.iter().rev() {
            (op.backward)(nodes);
        }
        Ok(())
    }

    /// Clear every gradient buffer, including leaves.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Compare the analytic gradient of `f` at `x0` against central finite
/// differences with the given step. Returns the maximum over coordinates of
/// `|analytic − numeric| / max(|analytic|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x0: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let y = f(&mut tape, x)?;
    if tape.numel(y) != 1 {
        return Err(Error::Shape {
            op: "finite_diff_check",
            details: format!("f must return a scalar, got {:?}", tape.shape_of(y)),
        });
    }
    tape.backward(y)?;
    let analytic: Vec<f64> = tape
        .grad(x)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x0.numel()]);

    let eval = |data: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(data.clone(), false);
        let y = f(&mut t, v)?;
        t.scalar_value(y)
    };

    let mut max_rel: f64 = 0.0;
    let mut probe = x0.clone();
    for i in 0..x0.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalars() {
        let mut tape = Tape::new();
        let eye = tape.constant(tensor(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m = tape.constant(tensor(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let prod = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(prod), tape.value(m));

        let a = tape.constant(tensor(&[1, 1], &[2.0]));
        let b = tape.constant(tensor(&[1, 1], &[3.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_exactly() {
        let mut rng = crate::layers::seeded_rng(11);
        let a_data: Vec<f64> = (0..20).map(|_| crate::layers::uniform(&mut rng, 1.0)).collect();
        let b_data: Vec<f64> = (0..15).map(|_| crate::layers::uniform(&mut rng, 1.0)).collect();

        // Independent O(n^3) re-computation with the same accumulation order.
        let mut expected = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..5 {
                    acc += a_data[i * 5 + p] * b_data[p * 3 + j];
                }
                expected[i * 3 + j] = acc;
            }
        }

        let mut tape = Tape::new();
        let a = tape.constant(tensor(&[4, 5], &a_data));
        let b = tape.constant(tensor(&[5, 3], &b_data));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), expected.as_slice());
    }

    #[test]
    fn matmul_identity_associativity_bitwise() {
        let mut rng = crate::layers::seeded_rng(5);
        let a_data: Vec<f64> = (0..9).map(|_| crate::layers::uniform(&mut rng, 2.0)).collect();
        let b_data: Vec<f64> = (0..9).map(|_| crate::layers::uniform(&mut rng, 2.0)).collect();
        let eye = tensor(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);

        let run = |left_identity: Option<()>, right_identity: Option<()>| {
            let mut t = Tape::new();
            let a = t.constant(tensor(&[3, 3], &a_data));
            let b = t.constant(tensor(&[3, 3], &b_data));
            let i = t.constant(eye.clone());
            let prod = match (left_identity, right_identity) {
                (Some(()), None) => {
                    let ai = t.matmul(a, i).unwrap();
                    t.matmul(ai, b).unwrap()
                }
                (None, Some(())) => {
                    let ib = t.matmul(i, b).unwrap();
                    t.matmul(a, ib).unwrap()
                }
                _ => t.matmul(a, b).unwrap(),
            };
            t.value(prod).to_vec()
        };

        let plain = run(None, None);
        assert_eq!(run(Some(()), None), plain);
        assert_eq!(run(None, Some(())), plain);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(tensor(&[2, 3], &[0.0; 6]));
        let b = tape.constant(tensor(&[2, 3], &[0.0; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.const_vector(&[-1.0, 0.0, 2.0]).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r), &[0.0, 0.0, 2.0]);

        let x = tape.const_vector(&[-1.0]).unwrap();
        let l = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(l), &[-0.2]);

        let x = tape.const_vector(&[0.0]).unwrap();
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s), &[0.5]);

        let x = tape.const_vector(&[1.0, -1.0]).unwrap();
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.const_vector(&[4.2, 4.2, 4.2]).unwrap();
        let s = tape.softmax(x).unwrap();
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = tape.const_vector(&[0.0, 2.0_f64.ln()]).unwrap();
        let s = tape.softmax(x).unwrap();
        let vals = tape.value(s);
        assert!((vals[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((vals[1] - 2.0 / 3.0).abs() < 1e-12);

        // Stability: large inputs must not overflow.
        let x = tape.const_vector(&[1000.0, 1000.0]).unwrap();
        let s = tape.softmax(x).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn empty_tensors_are_rejected() {
        assert!(matches!(
            Tensor::new(vec![0], vec![]),
            Err(Error::Shape { op: "tensor", .. })
        ));
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.const_vector(&[1.0, 2.0]).unwrap();
        let b = tape.const_vector(&[3.0]).unwrap();
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);

        let single = tape.concat(&[a], 0).unwrap();
        assert_eq!(tape.value(single), tape.value(a));

        let m = tape.constant(tensor(&[2, 2], &[1., 2., 3., 4.]));
        let bad = tape.const_vector(&[1.0]).unwrap();
        assert!(matches!(tape.concat(&[m, bad], 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_gradient_splits_back() {
        // d/dx of sum(concat(x, y)) is all-ones on each input; verified
        // against central finite differences on a joint packing.
        let x0 = tensor(&[5], &[0.3, -0.7, 1.1, 0.2, -0.4]);
        let err = finite_diff_check(
            |tape, x| {
                let left = tape.reshape(x, &[5])?;
                let fixed = tape.const_vector(&[2.0, -1.0])?;
                let cat = tape.concat(&[left, fixed], 0)?;
                let weights = tape.const_vector(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])?;
                let weighted = tape.mul(cat, weights)?;
                tape.sum(weighted)
            },
            &x0,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "concat gradient error {err}");
    }

    #[test]
    fn reduce_max_examples() {
        let mut tape = Tape::new();
        let a = tape.const_vector(&[1.0, 4.0]).unwrap();
        let b = tape.const_vector(&[3.0, 2.0]).unwrap();
        let m = tape.reduce_max_elementwise(&[a, b]).unwrap();
        assert_eq!(tape.value(m), &[3.0, 4.0]);

        let s = tape.reduce_max_elementwise(&[a]).unwrap();
        assert_eq!(tape.value(s), tape.value(a));

        assert!(matches!(
            tape.reduce_max_elementwise(&[]),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn reduce_max_matches_scan_oracle() {
        let mut rng = crate::layers::seeded_rng(23);
        let vecs: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..7).map(|_| crate::layers::uniform(&mut rng, 3.0)).collect())
            .collect();

        // Per-coordinate scan oracle.
        let mut expected = vec![f64::NEG_INFINITY; 7];
        for v in &vecs {
            for (k, x) in v.iter().enumerate() {
                if *x > expected[k] {
                    expected[k] = *x;
                }
            }
        }

        let mut tape = Tape::new();
        let vars: Vec<Var> = vecs
            .iter()
            .map(|v| tape.const_vector(v).unwrap())
            .collect();
        let m = tape.reduce_max_elementwise(&vars).unwrap();
        assert_eq!(tape.value(m), expected.as_slice());
    }

    #[test]
    fn reduce_max_gradient_ties_go_to_first() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor(&[2], &[1.0, 5.0]), true);
        let b = tape.leaf(tensor(&[2], &[1.0, 2.0]), true);
        let m = tape.reduce_max_elementwise(&[a, b]).unwrap();
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_non_scalar_loss_is_shape_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::Shape { op: "backward", .. })));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // d/dx (x + x) = 2
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5), true);
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_on_leaves() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn finite_diff_of_sum_is_exact() {
        let x0 = tensor(&[4], &[0.5, -1.0, 2.0, 0.1]);
        let err = finite_diff_check(|tape, x| tape.sum(x), &x0, 1e-3).unwrap();
        assert!(err < 1e-10, "sum gradient error {err}");
    }

    #[test]
    fn finite_diff_of_sigmoid_sum() {
        let x0 = tensor(&[5], &[0.3, -0.9, 1.7, 0.0, -2.2]);
        let err = finite_diff_check(
            |tape, x| {
                let s = tape.sigmoid(x)?;
                tape.sum(s)
            },
            &x0,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "sigmoid gradient error {err}");
    }

    #[test]
    fn rank_hinge_matches_hand_example() {
        let mut tape = Tape::new();
        let p = tape.const_vector(&[0.2, 0.1]).unwrap();
        let t = tape.const_vector(&[0.1, 0.3]).unwrap();
        let l = tape.pairwise_rank_hinge(p, t).unwrap();
        assert!((tape.scalar_value(l).unwrap() - 0.04).abs() < 1e-15);
    }

    fn op_cases() -> Vec<(&'static str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> {
        vec![
            ("tanh", Box::new(|t: &mut Tape, x| {
                let y = t.tanh(x)?;
                t.sum(y)
            })),
            ("sigmoid", Box::new(|t: &mut Tape, x| {
                let y = t.sigmoid(x)?;
                t.sum(y)
            })),
            ("relu", Box::new(|t: &mut Tape, x| {
                let y = t.relu(x)?;
                t.sum(y)
            })),
            ("leaky_relu", Box::new(|t: &mut Tape, x| {
                let y = t.leaky_relu(x, 0.2)?;
                t.sum(y)
            })),
            ("exp", Box::new(|t: &mut Tape, x| {
                let y = t.exp(x)?;
                t.sum(y)
            })),
            ("softmax", Box::new(|t: &mut Tape, x| {
                let y = t.softmax(x)?;
                let w = t.const_vector(&[1.0, -2.0, 3.0, 0.5, 2.0, -1.0, 0.7, 1.3])?;
                let p = t.mul(y, w)?;
                t.sum(p)
            })),
            ("mul_self", Box::new(|t: &mut Tape, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            })),
            ("rank_hinge", Box::new(|t: &mut Tape, x| {
                let target = t.const_vector(&[0.03, -0.01, 0.02, -0.04, 0.01, 0.0, 0.05, -0.02])?;
                t.pairwise_rank_hinge(x, target)
            })),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn differentiable_ops_pass_finite_diff(raw in proptest::collection::vec(0.0f64..0.2, 8)) {
            // Keep entries pairwise separated (the rank hinge kinks where two
            // predictions tie) and away from zero (relu/leaky kinks).
            let vals: Vec<f64> = raw
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let magnitude = v + 0.1 + 0.5 * (i / 2) as f64;
                    if i % 2 == 0 { magnitude } else { -magnitude }
                })
                .collect();
            let x0 = tensor(&[8], &vals);
            for (name, f) in op_cases() {
                let err = finite_diff_check(f.as_ref(), &x0, 1e-3).unwrap();
                prop_assert!(err < 1e-4, "{name} gradient error {err}");
            }
        }

        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 2..12),
            seed in 0u64..1000,
        ) {
            let mut tape = Tape::new();
            let x = tape.const_vector(&vals).unwrap();
            let s = tape.softmax(x).unwrap();
            let out = tape.value(s).to_vec();
            let total: f64 = out.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(out.iter().all(|v| *v >= 0.0));

            // Permute, recompute, compare.
            let n = vals.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = crate::layers::seeded_rng(seed);
            for i in (1..n).rev() {
                let j = (crate::layers::uniform(&mut rng, 0.5) + 0.5) * (i as f64 + 1.0);
                let j = (j as usize).min(i);
                perm.swap(i, j);
            }
            let permuted: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
            let xp = tape.const_vector(&permuted).unwrap();
            let sp = tape.softmax(xp).unwrap();
            let outp = tape.value(sp);
            for (k, &i) in perm.iter().enumerate() {
                prop_assert!((outp[k] - out[i]).abs() < 1e-12);
            }
        }
    }
}
