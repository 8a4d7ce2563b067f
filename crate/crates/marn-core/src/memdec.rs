//! Attended memory decoder: relevance scoring of every vocabulary word
//! against its memory entry, the memory distribution P_m, and convex
//! fusion with the basis distribution.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::memory::MemoryBank;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scorer widths. `attn` is the perceptron width A'; `u_dim` = 0 drops the
/// auxiliary term entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemDecDims {
    pub attn: usize,
    pub m: usize,
    pub hidden: usize,
    pub embed: usize,
    pub vocab: usize,
    pub u_dim: usize,
}

/// Learnable arrays of the relevance scorer
/// q_i = v . tanh(W_c c_t + W_g g_i + W'_e e_prev + W_e e_i + W_h h_prev + W_u u_i + b).
#[derive(Debug, Clone, PartialEq)]
pub struct MemDecParams {
    pub dims: MemDecDims,
    /// [attn]
    pub v: Tensor,
    /// [attn, 2m]
    pub w_c: Tensor,
    /// [attn, m]
    pub w_g: Tensor,
    /// [attn, embed] applied to e_{t-1}
    pub w_e_prev: Tensor,
    /// [attn, embed] applied to e_i
    pub w_e: Tensor,
    /// [attn, hidden]
    pub w_h: Tensor,
    /// [attn, u_dim], absent when u_dim = 0
    pub w_u: Option<Tensor>,
    /// [attn]
    pub b: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct MemDecVars {
    pub v: Var,
    pub w_c: Var,
    pub w_g: Var,
    pub w_e_prev: Var,
    pub w_e: Var,
    pub w_h: Var,
    pub w_u: Option<Var>,
    pub b: Var,
}

impl MemDecParams {
    pub fn init<R: Rng>(dims: MemDecDims, rng: &mut R) -> Self {
        let a = dims.attn;
        let mat = |rows: usize, cols: usize, rng: &mut R| {
            Tensor::uniform_init(alloc::vec![rows, cols], cols, rng)
        };
        MemDecParams {
            dims,
            v: Tensor::uniform_init(alloc::vec![a], a, rng),
            w_c: mat(a, 2 * dims.m, rng),
            w_g: mat(a, dims.m, rng),
            w_e_prev: mat(a, dims.embed, rng),
            w_e: mat(a, dims.embed, rng),
            w_h: mat(a, dims.hidden, rng),
            w_u: (dims.u_dim > 0).then(|| mat(a, dims.u_dim, rng)),
            b: Tensor::uniform_init(alloc::vec![a], a, rng),
        }
    }

    /// Canonical block order; `memdec/w_u` appears only when present.
    pub fn blocks(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = alloc::vec![
            ("memdec/v", &self.v),
            ("memdec/w_c", &self.w_c),
            ("memdec/w_g", &self.w_g),
            ("memdec/w_e_prev", &self.w_e_prev),
            ("memdec/w_e", &self.w_e),
            ("memdec/w_h", &self.w_h),
        ];
        if let Some(w_u) = &self.w_u {
            out.push(("memdec/w_u", w_u));
        }
        out.push(("memdec/b", &self.b));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = alloc::vec![
            ("memdec/v", &mut self.v),
            ("memdec/w_c", &mut self.w_c),
            ("memdec/w_g", &mut self.w_g),
            ("memdec/w_e_prev", &mut self.w_e_prev),
            ("memdec/w_e", &mut self.w_e),
            ("memdec/w_h", &mut self.w_h),
        ];
        if let Some(w_u) = &mut self.w_u {
            out.push(("memdec/w_u", w_u));
        }
        out.push(("memdec/b", &mut self.b));
        out
    }

    pub fn register(&self, tape: &mut Tape, requires_grad: bool) -> MemDecVars {
        MemDecVars {
            v: tape.leaf(&self.v, requires_grad),
            w_c: tape.leaf(&self.w_c, requires_grad),
            w_g: tape.leaf(&self.w_g, requires_grad),
            w_e_prev: tape.leaf(&self.w_e_prev, requires_grad),
            w_e: tape.leaf(&self.w_e, requires_grad),
            w_h: tape.leaf(&self.w_h, requires_grad),
            w_u: self.w_u.as_ref().map(|t| tape.leaf(t, requires_grad)),
            b: tape.leaf(&self.b, requires_grad),
        }
    }

    pub fn from_blocks(
        dims: MemDecDims,
        mut take: impl FnMut(&'static str) -> Result<Tensor>,
    ) -> Result<Self> {
        Ok(MemDecParams {
            dims,
            v: take("memdec/v")?,
            w_c: take("memdec/w_c")?,
            w_g: take("memdec/w_g")?,
            w_e_prev: take("memdec/w_e_prev")?,
            w_e: take("memdec/w_e")?,
            w_h: take("memdec/w_h")?,
            w_u: if dims.u_dim > 0 {
                Some(take("memdec/w_u")?)
            } else {
                None
            },
            b: take("memdec/b")?,
        })
    }
}

/// Memory matrices registered as constants on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MemoryVars {
    pub g_mat: Var,
    pub e_mat: Var,
    pub u_mat: Option<Var>,
}

impl MemoryVars {
    pub fn register(tape: &mut Tape, bank: &MemoryBank, requires_grad: bool) -> Self {
        let (g, e, u) = bank.matrices();
        MemoryVars {
            g_mat: tape.leaf(&g, requires_grad),
            e_mat: tape.leaf(&e, requires_grad),
            u_mat: u.map(|t| tape.leaf(&t, requires_grad)),
        }
    }
}

/// Word-dependent score terms W_g g_i + W_e e_i (+ W_u u_i) for all i at
/// once: an [attn, K] matrix, constant across steps of one pass.
pub fn word_static(tape: &mut Tape, vars: &MemDecVars, mem: &MemoryVars) -> Result<Var> {
    let g_term = tape.matmul(vars.w_g, mem.g_mat)?;
    let e_term = tape.matmul(vars.w_e, mem.e_mat)?;
    let mut acc = tape.add(g_term, e_term)?;
    if let (Some(w_u), Some(u_mat)) = (vars.w_u, mem.u_mat) {
        let u_term = tape.matmul(w_u, u_mat)?;
        acc = tape.add(acc, u_term)?;
    }
    Ok(acc)
}

/// Relevance scores q for one step given the precomputed word-static
/// matrix: q = v^T tanh(static + (W_c c_t + W'_e e_prev + W_h h_prev + b)).
pub fn step_scores(
    tape: &mut Tape,
    vars: &MemDecVars,
    static_mat: Var,
    c_t: Var,
    e_prev: Var,
    h_prev: Var,
) -> Result<Var> {
    let c_term = tape.matmul(vars.w_c, c_t)?;
    let e_term = tape.matmul(vars.w_e_prev, e_prev)?;
    let h_term = tape.matmul(vars.w_h, h_prev)?;
    let mut step = tape.add(c_term, e_term)?;
    step = tape.add(step, h_term)?;
    step = tape.add(step, vars.b)?;
    let pre = tape.broadcast_add_col(static_mat, step)?;
    let act = tape.tanh(pre);
    tape.matmul(vars.v, act)
}

/// Full per-step relevance scoring against the memory bank (the step term
/// is computed once and broadcast across all K words).
pub fn relevance_scores(
    tape: &mut Tape,
    vars: &MemDecVars,
    mem: &MemoryVars,
    c_t: Var,
    e_prev: Var,
    h_prev: Var,
) -> Result<Var> {
    let static_mat = word_static(tape, vars, mem)?;
    step_scores(tape, vars, static_mat, c_t, e_prev, h_prev)
}

/// P_m = softmax(q).
pub fn memory_probabilities(tape: &mut Tape, q: Var) -> Result<Var> {
    tape.softmax(q)
}

/// Convex fusion weight, in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
}

impl FusionConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(CoreError::Config(alloc::format!(
                "lambda {lambda} outside [0, 1]"
            )));
        }
        Ok(FusionConfig { lambda })
    }
}

/// P = (1 - lambda) P_b + lambda P_m over plain distributions. Inputs and
/// output are validated to sum to 1 within 1e-6 with no negative entries.
pub fn fuse_probabilities(p_b: &[f64], p_m: &[f64], cfg: FusionConfig) -> Result<Vec<f64>> {
    if p_b.len() != p_m.len() {
        return Err(CoreError::Shape {
            op: "fuse_probabilities",
            lhs: alloc::vec![p_b.len()],
            rhs: alloc::vec![p_m.len()],
        });
    }
    check_distribution("P_b", p_b)?;
    check_distribution("P_m", p_m)?;
    let lambda = cfg.lambda;
    let fused: Vec<f64> = p_b
        .iter()
        .zip(p_m)
        .map(|(&b, &m)| (1.0 - lambda) * b + lambda * m)
        .collect();
    check_distribution("fused P", &fused)?;
    Ok(fused)
}

/// Sanity gate used at every decode step: non-negative, sums to 1 ± 1e-6.
pub fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(CoreError::Numeric(alloc::format!(
            "{name} has a negative or non-finite entry"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(CoreError::Numeric(alloc::format!(
            "{name} sums to {s}, expected 1 within 1e-6"
        )));
    }
    Ok(())
}
