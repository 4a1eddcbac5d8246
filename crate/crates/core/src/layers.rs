//! Reusable layers: GRU cell, temporal attention aggregator, graph attention
//! layer, and dense layers. Each is a thin composition over [`crate::tensor`]
//! ops; parameters live in [`Param`] buffers between steps and are bound onto
//! a tape per forward pass.

use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Negative-branch slope of the GAT scoring nonlinearity.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One draw from uniform(-bound, bound).
pub fn uniform(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    rng.gen_range(-bound..bound)
}

/// Whether a parameter participates in the L2 penalty. Weight matrices and
/// attention vectors do; bias terms do not.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
}

/// A named, persistent parameter buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub path: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

impl Param {
    /// Seeded uniform init in ±1/√fan_in.
    pub fn init(
        path: impl Into<String>,
        kind: ParamKind,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Param {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| uniform(rng, bound)).collect();
        Param {
            path: path.into(),
            kind,
            value: Tensor::new(shape, data).expect("init produces a valid tensor"),
        }
    }

    pub fn zeros(path: impl Into<String>, kind: ParamKind, shape: Vec<usize>) -> Param {
        Param { path: path.into(), kind, value: Tensor::zeros(shape) }
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Var {
        tape.leaf(self.value.clone(), trainable)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

/// `activation(W x (+ b))`.
pub fn dense(
    tape: &mut Tape,
    w: Var,
    b: Option<Var>,
    x: Var,
    activation: Activation,
) -> Result<Var> {
    let mut y = tape.matvec(w, x)?;
    if let Some(b) = b {
        y = tape.add(y, b)?;
    }
    match activation {
        Activation::Identity => Ok(y),
        Activation::Relu => tape.relu(y),
        Activation::Tanh => tape.tanh(y),
        Activation::Sigmoid => tape.sigmoid(y),
    }
}

// ── GRU ──────────────────────────────────────────────────────────────────

/// Update/reset/candidate gate parameters of a GRU cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: Param,
    pub u_update: Param,
    pub b_update: Param,
    pub w_reset: Param,
    pub u_reset: Param,
    pub b_reset: Param,
    pub w_cand: Param,
    pub u_cand: Param,
    pub b_cand: Param,
}

impl GruParams {
    pub fn new(prefix: &str, input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = |name: &str, rng: &mut ChaCha8Rng| {
            Param::init(
                format!("{prefix}.{name}"),
                ParamKind::Weight,
                vec![hidden_dim, input_dim],
                input_dim,
                rng,
            )
        };
        let u = |name: &str, rng: &mut ChaCha8Rng| {
            Param::init(
                format!("{prefix}.{name}"),
                ParamKind::Weight,
                vec![hidden_dim, hidden_dim],
                hidden_dim,
                rng,
            )
        };
        let b = |name: &str, rng: &mut ChaCha8Rng| {
            Param::init(
                format!("{prefix}.{name}"),
                ParamKind::Bias,
                vec![hidden_dim],
                hidden_dim,
                rng,
            )
        };
        GruParams {
            input_dim,
            hidden_dim,
            w_update: w("w_update", rng),
            u_update: u("u_update", rng),
            b_update: b("b_update", rng),
            w_reset: w("w_reset", rng),
            u_reset: u("u_reset", rng),
            b_reset: b("b_reset", rng),
            w_cand: w("w_cand", rng),
            u_cand: u("u_cand", rng),
            b_cand: b("b_cand", rng),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_update,
            &self.u_update,
            &self.b_update,
            &self.w_reset,
            &self.u_reset,
            &self.b_reset,
            &self.w_cand,
            &self.u_cand,
            &self.b_cand,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_update,
            &mut self.u_update,
            &mut self.b_update,
            &mut self.w_reset,
            &mut self.u_reset,
            &mut self.b_reset,
            &mut self.w_cand,
            &mut self.u_cand,
            &mut self.b_cand,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GruVars {
        self.bind_with(tape, &mut |p, tape| p.bind(tape, trainable))
    }

    /// Bind through an arbitrary Var source; fields follow `params()` order.
    pub fn bind_with(
        &self,
        tape: &mut Tape,
        source: &mut dyn FnMut(&Param, &mut Tape) -> Var,
    ) -> GruVars {
        GruVars {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_update: source(&self.w_update, tape),
            u_update: source(&self.u_update, tape),
            b_update: source(&self.b_update, tape),
            w_reset: source(&self.w_reset, tape),
            u_reset: source(&self.u_reset, tape),
            b_reset: source(&self.b_reset, tape),
            w_cand: source(&self.w_cand, tape),
            u_cand: source(&self.u_cand, tape),
            b_cand: source(&self.b_cand, tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: Var,
    pub u_update: Var,
    pub b_update: Var,
    pub w_reset: Var,
    pub u_reset: Var,
    pub b_reset: Var,
    pub w_cand: Var,
    pub u_cand: Var,
    pub b_cand: Var,
}

/// Standard gated recurrence (Cho et al. form):
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `c = tanh(W_c x + U_c (r ⊙ h) + b_c)`, `h' = z ⊙ h + (1 − z) ⊙ c`.
/// Returns every hidden state plus the last one.
pub fn gru_forward(
    tape: &mut Tape,
    gru: &GruVars,
    sequence: &[Var],
    h0: Var,
) -> Result<(Vec<Var>, Var)> {
    if sequence.is_empty() {
        return Err(Error::Shape { op: "gru_forward", details: "empty sequence".into() });
    }
    for &x in sequence {
        if tape.shape_of(x) != [gru.input_dim] {
            return Err(Error::Shape {
                op: "gru_forward",
                details: format!(
                    "input shape {:?}, expected [{}]",
                    tape.shape_of(x),
                    gru.input_dim
                ),
            });
        }
    }
    if tape.shape_of(h0) != [gru.hidden_dim] {
        return Err(Error::Shape {
            op: "gru_forward",
            details: format!(
                "h0 shape {:?}, expected [{}]",
                tape.shape_of(h0),
                gru.hidden_dim
            ),
        });
    }

    let ones = tape.ones(&[gru.hidden_dim]);
    let mut h = h0;
    let mut states = Vec::with_capacity(sequence.len());
    for &x in sequence {
        let zx = tape.matvec(gru.w_update, x)?;
        let zh = tape.matvec(gru.u_update, h)?;
        let z_pre = tape.add(zx, zh)?;
        let z_pre = tape.add(z_pre, gru.b_update)?;
        let z = tape.sigmoid(z_pre)?;

        let rx = tape.matvec(gru.w_reset, x)?;
        let rh = tape.matvec(gru.u_reset, h)?;
        let r_pre = tape.add(rx, rh)?;
        let r_pre = tape.add(r_pre, gru.b_reset)?;
        let r = tape.sigmoid(r_pre)?;

        let gated = tape.mul(r, h)?;
        let cx = tape.matvec(gru.w_cand, x)?;
        let ch = tape.matvec(gru.u_cand, gated)?;
        let c_pre = tape.add(cx, ch)?;
        let c_pre = tape.add(c_pre, gru.b_cand)?;
        let c = tape.tanh(c_pre)?;

        let keep = tape.mul(z, h)?;
        let omz = tape.sub(ones, z)?;
        let take = tape.mul(omz, c)?;
        h = tape.add(keep, take)?;
        states.push(h);
    }
    Ok((states, h))
}

// ── Temporal attention ──────────────────────────────────────────────────

/// Projection matrix and scoring vector of the feed-forward attention
/// aggregator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub hidden_dim: usize,
    pub w0: Param,
    pub score: Param,
}

impl AttnParams {
    pub fn new(prefix: &str, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttnParams {
            hidden_dim,
            w0: Param::init(
                format!("{prefix}.w0"),
                ParamKind::Weight,
                vec![hidden_dim, hidden_dim],
                hidden_dim,
                rng,
            ),
            score: Param::init(
                format!("{prefix}.score"),
                ParamKind::Weight,
                vec![hidden_dim],
                hidden_dim,
                rng,
            ),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w0, &self.score]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w0, &mut self.score]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> AttnVars {
        self.bind_with(tape, &mut |p, tape| p.bind(tape, trainable))
    }

    pub fn bind_with(
        &self,
        tape: &mut Tape,
        source: &mut dyn FnMut(&Param, &mut Tape) -> Var,
    ) -> AttnVars {
        AttnVars {
            hidden_dim: self.hidden_dim,
            w0: source(&self.w0, tape),
            score: source(&self.score, tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub hidden_dim: usize,
    pub w0: Var,
    pub score: Var,
}

/// Feed-forward attention: scalar scores `s_j = score · tanh(W₀ h_j)`,
/// weights `α = softmax(s)`, output `Σ_j α_j h_j`. Returns the aggregated
/// vector and α (exposed for export).
pub fn temporal_attention(
    tape: &mut Tape,
    attn: &AttnVars,
    states: &[Var],
) -> Result<(Var, Var)> {
    if states.is_empty() {
        return Err(Error::Shape {
            op: "temporal_attention",
            details: "empty state list".into(),
        });
    }
    let mut scores = Vec::with_capacity(states.len());
    for &h in states {
        let proj = tape.matvec(attn.w0, h)?;
        let act = tape.tanh(proj)?;
        scores.push(tape.dot(attn.score, act)?);
    }
    let score_vec = tape.concat(&scores, 0)?;
    let alpha = tape.softmax(score_vec)?;
    let stacked = tape.stack_rows(states)?;
    let alpha_row = tape.reshape(alpha, &[1, states.len()])?;
    let agg = tape.matmul(alpha_row, stacked)?;
    let out = tape.reshape(agg, &[attn.hidden_dim])?;
    Ok((out, alpha))
}

// ── Graph attention ─────────────────────────────────────────────────────

/// Feature transform `W₁` (aggregation), attention transform `W₂`, and the
/// attention vector projecting concatenated pair embeddings to a scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w1: Param,
    pub w2: Param,
    pub attn: Param,
}

impl GatParams {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        GatParams {
            in_dim,
            out_dim,
            w1: Param::init(
                format!("{prefix}.w1"),
                ParamKind::Weight,
                vec![out_dim, in_dim],
                in_dim,
                rng,
            ),
            w2: Param::init(
                format!("{prefix}.w2"),
                ParamKind::Weight,
                vec![out_dim, in_dim],
                in_dim,
                rng,
            ),
            attn: Param::init(
                format!("{prefix}.attn"),
                ParamKind::Weight,
                vec![2 * out_dim],
                2 * out_dim,
                rng,
            ),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.w1, &self.w2, &self.attn]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.w1, &mut self.w2, &mut self.attn]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GatVars {
        self.bind_with(tape, &mut |p, tape| p.bind(tape, trainable))
    }

    pub fn bind_with(
        &self,
        tape: &mut Tape,
        source: &mut dyn FnMut(&Param, &mut Tape) -> Var,
    ) -> GatVars {
        GatVars {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            w1: source(&self.w1, tape),
            w2: source(&self.w2, tape),
            attn: source(&self.attn, tape),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatVars {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w1: Var,
    pub w2: Var,
    pub attn: Var,
}

/// Single-head graph attention over an explicit neighbor structure.
///
/// For each node `q`: scores `e_qn = LeakyReLU(attn · [W₂f_q ∥ W₂f_n])` over
/// its neighbor list, `β_q = softmax(e_q)`, output
/// `ReLU(Σ_n β_qn W₁ f_n)`. Returns per-node outputs and the β rows
/// (aligned with each node's neighbor list), exposed for export.
pub fn gat_forward(
    tape: &mut Tape,
    gat: &GatVars,
    neighbors: &[Vec<usize>],
    features: &[Var],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let n = features.len();
    if neighbors.len() != n {
        return Err(Error::Graph(format!(
            "{} neighbor lists for {n} nodes",
            neighbors.len()
        )));
    }
    for &f in features {
        if tape.shape_of(f) != [gat.in_dim] {
            return Err(Error::Shape {
                op: "gat_forward",
                details: format!(
                    "feature shape {:?}, expected [{}]",
                    tape.shape_of(f),
                    gat.in_dim
                ),
            });
        }
    }

    let mut w1f = Vec::with_capacity(n);
    let mut w2f = Vec::with_capacity(n);
    for &f in features {
        w1f.push(tape.matvec(gat.w1, f)?);
        w2f.push(tape.matvec(gat.w2, f)?);
    }

    let mut outputs = Vec::with_capacity(n);
    let mut betas = Vec::with_capacity(n);
    for q in 0..n {
        let nbrs = &neighbors[q];
        if nbrs.is_empty() {
            return Err(Error::Graph(format!("node {q} has an empty neighborhood")));
        }
        if let Some(&bad) = nbrs.iter().find(|&&i| i >= n) {
            return Err(Error::Graph(format!("node {q} lists unknown neighbor {bad}")));
        }
        let mut scores = Vec::with_capacity(nbrs.len());
        for &nb in nbrs {
            let pair = tape.concat(&[w2f[q], w2f[nb]], 0)?;
            let e = tape.dot(gat.attn, pair)?;
            scores.push(tape.leaky_relu(e, DEFAULT_LEAKY_SLOPE)?);
        }
        let score_vec = tape.concat(&scores, 0)?;
        let beta = tape.softmax(score_vec)?;

        let nbr_feats: Vec<Var> = nbrs.iter().map(|&nb| w1f[nb]).collect();
        let stacked = tape.stack_rows(&nbr_feats)?;
        let beta_row = tape.reshape(beta, &[1, nbrs.len()])?;
        let agg = tape.matmul(beta_row, stacked)?;
        let agg = tape.reshape(agg, &[gat.out_dim])?;
        outputs.push(tape.relu(agg)?);
        betas.push(beta);
    }
    Ok((outputs, betas))
}

/// Complete graph with self-loops over `n` nodes.
pub fn complete_graph(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|_| (0..n).collect()).collect()
}
