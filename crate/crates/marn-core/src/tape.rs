//! Reverse-mode autodiff over a flat operation tape.
//!
//! Ops append nodes in execution order; `backward` replays them in exact
//! reverse order, accumulating vector-Jacobian products. Tapes are rebuilt
//! per training step (define-by-run) and are single-owner.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [p,q]x[q,r] -> [p,r]; also [p,q]x[q] -> [p] and [q]x[q,r] -> [r].
    Matmul { a: Var, b: Var },
    Dot { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Abs { a: Var },
    Softmax { a: Var },
    Concat { a: Var, b: Var },
    Stack { parts: Vec<Var> },
    Column { a: Var, idx: usize },
    AdjacentDiff { a: Var },
    BroadcastAddCol { mat: Var, col: Var },
    Sum { a: Var },
    /// ln(max(a[idx], LOG_CLAMP)), scalar output.
    PickLog { a: Var, idx: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
///
/// Vars that did not participate in the loss (or do not require grad)
/// read back as zeros.
pub struct Grads {
    grads: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn tensor(&self, v: Var, shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), self.grads[v.0].clone()).expect("grad shape")
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite forward value");
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

    /// Register a tensor as a leaf. `requires_grad` marks it as a
    /// differentiation target.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.clone(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Tensor::scalar(x), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (p, q, r, out_shape) = matmul_dims("matmul", va.shape(), vb.shape())?;
        let mut out = vec![0.0; p * r];
        let (da, db) = (va.data(), vb.data());
        for i in 0..p {
            for k in 0..q {
                let aik = da[i * q + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &db[k * r..(k + 1) * r];
                let orow = &mut out[i * r..(i + 1) * r];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out).expect("matmul shape"),
            Op::Matmul { a, b },
            rg,
        ))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_vector() || va.shape() != vb.shape() {
            return Err(shape_err("dot", va.shape(), vb.shape()));
        }
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::Dot { a, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, data).expect("zip shape"), op(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| x * c).collect();
        let shape = va.shape().to_vec();
        let rg = self.needs(&[a]);
        self.push(Tensor::new(shape, data).expect("scale"), Op::Scale { a, c }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, libm::tanh, |a| Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / (1.0 + libm::exp(-x)), |a| Op::Sigmoid { a })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, f64::abs, |a| Op::Abs { a })
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl Fn(Var) -> Op) -> Var {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        let rg = self.needs(&[a]);
        self.push(Tensor::new(shape, data).expect("map"), op(a), rg)
    }

    /// Numerically stable softmax over a non-empty vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if !va.is_vector() || va.is_empty() {
            return Err(CoreError::Contract(alloc::format!(
                "softmax wants a non-empty vector, got shape {:?}",
                va.shape()
            )));
        }
        let data = softmax_slice(va.data());
        let shape = va.shape().to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(shape, data).expect("softmax"),
            Op::Softmax { a },
            rg,
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.is_vector() || !vb.is_vector() {
            return Err(shape_err("concat", va.shape(), vb.shape()));
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::vector(data), Op::Concat { a, b }, rg))
    }

    /// Stack n same-shaped parts: scalars become an n-vector, m-vectors an
    /// [n, m] matrix.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(CoreError::Contract("stack of zero parts".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() > 1 {
            return Err(CoreError::Contract(
                "stack parts must be scalars or vectors".into(),
            ));
        }
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            let vp = self.value(p);
            if vp.shape() != first.as_slice() {
                return Err(shape_err("stack", &first, vp.shape()));
            }
            data.extend_from_slice(vp.data());
        }
        let shape = if first.is_empty() {
            vec![parts.len()]
        } else {
            vec![parts.len(), first[0]]
        };
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(shape, data).expect("stack"),
            Op::Stack {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Column `idx` of a matrix as a vector.
    pub fn column(&mut self, a: Var, idx: usize) -> Result<Var> {
        let va = self.value(a);
        if !va.is_matrix() {
            return Err(CoreError::Contract(alloc::format!(
                "column wants a matrix, got shape {:?}",
                va.shape()
            )));
        }
        let (rows, cols) = (va.shape()[0], va.shape()[1]);
        if idx >= cols {
            return Err(CoreError::Lookup(alloc::format!(
                "column {idx} out of range for {rows}x{cols} matrix"
            )));
        }
        let data: Vec<f64> = (0..rows).map(|r| va.data()[r * cols + idx]).collect();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::vector(data), Op::Column { a, idx }, rg))
    }

    /// d[i] = a[i+1] - a[i] over a vector of length >= 2.
    pub fn adjacent_diff(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if !va.is_vector() || va.len() < 2 {
            return Err(CoreError::Contract(alloc::format!(
                "adjacent_diff wants a vector of length >= 2, got shape {:?}",
                va.shape()
            )));
        }
        let d = va.data();
        let data: Vec<f64> = d.windows(2).map(|w| w[1] - w[0]).collect();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::vector(data), Op::AdjacentDiff { a }, rg))
    }

    /// Add a column vector to every column of a matrix.
    pub fn broadcast_add_col(&mut self, mat: Var, col: Var) -> Result<Var> {
        let (vm, vc) = (self.value(mat), self.value(col));
        if !vm.is_matrix() || !vc.is_vector() || vm.shape()[0] != vc.len() {
            return Err(shape_err("broadcast_add_col", vm.shape(), vc.shape()));
        }
        let (rows, cols) = (vm.shape()[0], vm.shape()[1]);
        let mut data = vm.data().to_vec();
        for r in 0..rows {
            let cv = vc.data()[r];
            for x in &mut data[r * cols..(r + 1) * cols] {
                *x += cv;
            }
        }
        let rg = self.needs(&[mat, col]);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data).expect("broadcast_add_col"),
            Op::BroadcastAddCol { mat, col },
            rg,
        ))
    }

    /// Sum of all entries, scalar output.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// ln of entry `idx`, clamped at [`LOG_CLAMP`] (with a warning when the
    /// clamp engages).
    pub fn pick_log(&mut self, a: Var, idx: usize) -> Result<Var> {
        let va = self.value(a);
        if !va.is_vector() || idx >= va.len() {
            return Err(CoreError::Lookup(alloc::format!(
                "pick_log index {idx} out of range for length {}",
                va.len()
            )));
        }
        let p = va.data()[idx];
        if p < LOG_CLAMP {
            log::warn!("probability {p:.3e} at target {idx} clamped to {LOG_CLAMP:.0e}");
        }
        let v = libm::log(p.max(LOG_CLAMP));
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::PickLog { a, idx }, rg))
    }

    /// Reverse pass from a scalar loss. Returns a gradient per tape var;
    /// vars off the loss path read back as zero.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(CoreError::Contract(alloc::format!(
                "backward wants a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Split off the output gradient so input grads can be borrowed mutably.
            let g = core::mem::take(&mut grads[i]);
            self.accumulate(i, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (p, q, r, _) = matmul_dims("matmul", va.shape(), vb.shape()).expect("checked");
                let (da, db) = (va.data(), vb.data());
                if self.nodes[a.0].requires_grad {
                    // dA = G B^T
                    let ga = &mut grads[a.0];
                    for ii in 0..p {
                        for kk in 0..q {
                            let mut s = 0.0;
                            for jj in 0..r {
                                s += g[ii * r + jj] * db[kk * r + jj];
                            }
                            ga[ii * q + kk] += s;
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T G
                    let gb = &mut grads[b.0];
                    for kk in 0..q {
                        for ii in 0..p {
                            let aik = da[ii * q + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for jj in 0..r {
                                gb[kk * r + jj] += aik * g[ii * r + jj];
                            }
                        }
                    }
                }
            }
            Op::Dot { a, b } => {
                let s = g[0];
                if self.nodes[a.0].requires_grad {
                    let vb = self.value(*b).data();
                    for (ga, &bv) in grads[a.0].iter_mut().zip(vb) {
                        *ga += s * bv;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let va = self.value(*a).data();
                    for (gb, &av) in grads[b.0].iter_mut().zip(va) {
                        *gb += s * av;
                    }
                }
            }
            Op::Add { a, b } => {
                for (v, sign) in [(a, 1.0), (b, 1.0)] {
                    if self.nodes[v.0].requires_grad {
                        for (gv, &gi) in grads[v.0].iter_mut().zip(g) {
                            *gv += sign * gi;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                for (v, sign) in [(a, 1.0), (b, -1.0)] {
                    if self.nodes[v.0].requires_grad {
                        for (gv, &gi) in grads[v.0].iter_mut().zip(g) {
                            *gv += sign * gi;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let vb = self.value(*b).data();
                    for ((ga, &gi), &bv) in grads[a.0].iter_mut().zip(g).zip(vb) {
                        *ga += gi * bv;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let va = self.value(*a).data();
                    for ((gb, &gi), &av) in grads[b.0].iter_mut().zip(g).zip(va) {
                        *gb += gi * av;
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[a.0].requires_grad {
                    for (ga, &gi) in grads[a.0].iter_mut().zip(g) {
                        *ga += c * gi;
                    }
                }
            }
            Op::Tanh { a } => {
                if self.nodes[a.0].requires_grad {
                    let y = node.value.data();
                    for ((ga, &gi), &yv) in grads[a.0].iter_mut().zip(g).zip(y) {
                        *ga += gi * (1.0 - yv * yv);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.nodes[a.0].requires_grad {
                    let y = node.value.data();
                    for ((ga, &gi), &yv) in grads[a.0].iter_mut().zip(g).zip(y) {
                        *ga += gi * yv * (1.0 - yv);
                    }
                }
            }
            Op::Abs { a } => {
                if self.nodes[a.0].requires_grad {
                    // Subgradient at 0 taken as 0.
                    let x = self.value(*a).data();
                    for ((ga, &gi), &xv) in grads[a.0].iter_mut().zip(g).zip(x) {
                        *ga += gi * if xv > 0.0 { 1.0 } else if xv < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Softmax { a } => {
                if self.nodes[a.0].requires_grad {
                    let y = node.value.data();
                    let dot: f64 = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                    for ((ga, &gi), &yi) in grads[a.0].iter_mut().zip(g).zip(y) {
                        *ga += yi * (gi - dot);
                    }
                }
            }
            Op::Concat { a, b } => {
                let na = self.value(*a).len();
                if self.nodes[a.0].requires_grad {
                    for (ga, &gi) in grads[a.0].iter_mut().zip(&g[..na]) {
                        *ga += gi;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    for (gb, &gi) in grads[b.0].iter_mut().zip(&g[na..]) {
                        *gb += gi;
                    }
                }
            }
            Op::Stack { parts } => {
                let part_len = self.value(parts[0]).len();
                for (k, &p) in parts.iter().enumerate() {
                    if self.nodes[p.0].requires_grad {
                        let src = &g[k * part_len..(k + 1) * part_len];
                        for (gp, &gi) in grads[p.0].iter_mut().zip(src) {
                            *gp += gi;
                        }
                    }
                }
            }
            Op::Column { a, idx } => {
                if self.nodes[a.0].requires_grad {
                    let cols = self.value(*a).shape()[1];
                    for (r, &gi) in g.iter().enumerate() {
                        grads[a.0][r * cols + idx] += gi;
                    }
                }
            }
            Op::AdjacentDiff { a } => {
                if self.nodes[a.0].requires_grad {
                    let ga = &mut grads[a.0];
                    for (k, &gi) in g.iter().enumerate() {
                        ga[k + 1] += gi;
                        ga[k] -= gi;
                    }
                }
            }
            Op::BroadcastAddCol { mat, col } => {
                let (rows, cols) = {
                    let s = self.value(*mat).shape();
                    (s[0], s[1])
                };
                if self.nodes[mat.0].requires_grad {
                    for (gm, &gi) in grads[mat.0].iter_mut().zip(g) {
                        *gm += gi;
                    }
                }
                if self.nodes[col.0].requires_grad {
                    for r in 0..rows {
                        let s: f64 = g[r * cols..(r + 1) * cols].iter().sum();
                        grads[col.0][r] += s;
                    }
                }
            }
            Op::Sum { a } => {
                if self.nodes[a.0].requires_grad {
                    let gi = g[0];
                    for ga in grads[a.0].iter_mut() {
                        *ga += gi;
                    }
                }
            }
            Op::PickLog { a, idx } => {
                if self.nodes[a.0].requires_grad {
                    // Inside the clamp region the op is constant.
                    let p = self.value(*a).data()[*idx];
                    if p >= LOG_CLAMP {
                        grads[a.0][*idx] += g[0] / p;
                    }
                }
            }
        }
    }
}

/// Stable softmax of a plain slice (max subtraction).
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| libm::exp(v - m)).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> CoreError {
    CoreError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Normalize matmul operand ranks to (p, q, r, output shape).
fn matmul_dims(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(usize, usize, usize, Vec<usize>)> {
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok((a[0], a[1], b[1], vec![a[0], b[1]])),
        (2, 1) if a[1] == b[0] => Ok((a[0], a[1], 1, vec![a[0]])),
        (1, 2) if a[0] == b[0] => Ok((1, a[0], b[1], vec![b[1]])),
        _ => Err(shape_err(op, a, b)),
    }
}
