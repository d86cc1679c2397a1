//! Reverse-mode automatic differentiation over a recorded tape of 2-D `f64`
//! tensors, the Adam update and a central finite-difference gradient check.
//!
//! A [`Tape`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so recording order is a topological order and
//! [`Tape::backward`] is a single reverse sweep. Parameters enter the tape
//! through [`Tape::param`] with a slot number; everything entered through
//! [`Tape::constant`] receives no gradient.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{exp, sqrt};

/// Dense row-major matrix. Scalars are `1×1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("Tensor::new", format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn from_rows<const C: usize>(rows: &[[f64; C]]) -> Self {
        Self { rows: rows.len(), cols: C, data: rows.iter().flatten().copied().collect() }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows as RGB triples; requires 3 columns.
    pub fn to_rgb(&self) -> Vec<[f64; 3]> {
        debug_assert_eq!(self.cols, 3);
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    /// Max over consecutive groups of `k` rows; stores the winning row per output entry.
    GroupMax(Var, Vec<usize>),
    Sum(Var),
    MeanAll(Var),
    Frobenius(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, keyed by parameter slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    by_slot: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.by_slot.get(slot).and_then(|g| g.as_ref())
    }

    pub fn slots(&self) -> &[Option<Tensor>] {
        &self.by_slot
    }

    pub fn into_slots(self) -> Vec<Option<Tensor>> {
        self.by_slot
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{op} produced a non-finite value")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    /// Leaf that receives a gradient under `slot`.
    pub fn param(&mut self, slot: usize, t: Tensor) -> Var {
        self.push(Op::Param(slot), t, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.rows {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", x.shape(), y.shape())));
        }
        let (n, k, m) = (x.rows, x.cols, y.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let s = x.data[i * k + p];
                if s == 0.0 {
                    continue;
                }
                let brow = &y.data[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += s * bv;
                }
            }
        }
        let t = Tensor { rows: n, cols: m, data: out };
        check_finite("matmul", &t)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), t, g))
    }

    /// Elementwise sum of equal shapes, or row broadcast when `b` is `1×m`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let g = self.needs(a) || self.needs(b);
        if x.shape() == y.shape() {
            let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
            let t = Tensor { rows: x.rows, cols: x.cols, data };
            check_finite("add", &t)?;
            return Ok(self.push(Op::Add(a, b), t, g));
        }
        if y.rows == 1 && y.cols == x.cols {
            let m = x.cols;
            let mut data = x.data.clone();
            for row in data.chunks_exact_mut(m) {
                for (o, &bv) in row.iter_mut().zip(&y.data) {
                    *o += bv;
                }
            }
            let t = Tensor { rows: x.rows, cols: m, data };
            check_finite("add", &t)?;
            return Ok(self.push(Op::AddRow(a, b), t, g));
        }
        Err(Error::shape("add", format!("{:?} + {:?}", x.shape(), y.shape())))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("sub", format!("{:?} - {:?}", x.shape(), y.shape())));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        check_finite("sub", &t)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), t, g))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", format!("{:?} ⊙ {:?}", x.shape(), y.shape())));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let t = Tensor { rows: x.rows, cols: x.cols, data };
        check_finite("mul", &t)?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), t, g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let x = self.value(a);
        let t = Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().map(|v| v * s).collect() };
        check_finite("scale", &t)?;
        let g = self.needs(a);
        Ok(self.push(Op::Scale(a, s), t, g))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect() };
        let g = self.needs(a);
        self.push(Op::Relu(a), t, g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor { rows: x.rows, cols: x.cols, data: x.data.iter().map(|&v| 1.0 / (1.0 + exp(-v))).collect() };
        let g = self.needs(a);
        self.push(Op::Sigmoid(a), t, g)
    }

    /// Concatenation along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let rows = self.value(first).rows;
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).rows != rows) {
            return Err(Error::shape("concat", format!("row counts {rows} and {}", self.value(*bad).rows)));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let g = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor { rows, cols, data }, g))
    }

    /// Rows of `a` selected by `indices` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of range for {} rows", x.rows)));
        }
        let mut data = Vec::with_capacity(indices.len() * x.cols);
        for &i in indices {
            data.extend_from_slice(x.row(i));
        }
        let t = Tensor { rows: indices.len(), cols: x.cols, data };
        let g = self.needs(a);
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), t, g))
    }

    /// Column-wise max over consecutive groups of `k` rows: `[n·k, m] → [n, m]`.
    /// Ties go to the earlier row.
    pub fn group_max(&mut self, a: Var, k: usize) -> Result<Var> {
        let x = self.value(a);
        if k == 0 || !x.rows.is_multiple_of(k) {
            return Err(Error::shape("group_max", format!("{} rows not divisible into groups of {k}", x.rows)));
        }
        let (n, m) = (x.rows / k, x.cols);
        let mut data = vec![0.0; n * m];
        let mut arg = vec![0usize; n * m];
        for i in 0..n {
            let out = &mut data[i * m..(i + 1) * m];
            let win = &mut arg[i * m..(i + 1) * m];
            out.copy_from_slice(x.row(i * k));
            win.fill(i * k);
            for j in 1..k {
                let r = i * k + j;
                for ((o, w), &v) in out.iter_mut().zip(win.iter_mut()).zip(x.row(r)) {
                    if v > *o {
                        *o = v;
                        *w = r;
                    }
                }
            }
        }
        let g = self.needs(a);
        Ok(self.push(Op::GroupMax(a, arg), Tensor { rows: n, cols: m, data }, g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let g = self.needs(a);
        self.push(Op::Sum(a), Tensor::scalar(s), g)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.data.len().max(1) as f64;
        let g = self.needs(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s), g)
    }

    /// `sqrt(Σ x²)`.
    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let s = sqrt(self.value(a).data.iter().map(|v| v * v).sum());
        let g = self.needs(a);
        self.push(Op::Frobenius(a), Tensor::scalar(s), g)
    }

    /// Hash of the active linear piece: relu input signs and max winners.
    /// Equal signatures at two points mean no kink lies between them along
    /// the segment's endpoints' pieces, so finite differences are meaningful.
    pub fn piece_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &v in &self.nodes[a.0].value.data {
                        mix((v > 0.0) as u64);
                    }
                }
                Op::GroupMax(_, arg) => {
                    for &r in arg {
                        mix(r as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Gradient of the scalar `loss` with respect to every parameter slot.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let slots = self
            .nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Param(s) => Some(s + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut by_slot: Vec<Option<Tensor>> = vec![None; slots];
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(slot) => {
                    let t = Tensor { rows: node.value.rows, cols: node.value.cols, data: g };
                    match &mut by_slot[*slot] {
                        Some(acc) => acc.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b),
                        empty => *empty = Some(t),
                    }
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (x.rows, x.cols, y.cols);
                    if self.needs(*a) {
                        let mut ga = vec![0.0; n * k];
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let brow = &y.data[p * m..(p + 1) * m];
                                ga[i * k + p] = grow.iter().zip(brow).map(|(u, v)| u * v).sum();
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; k * m];
                        for i in 0..n {
                            let grow = &g[i * m..(i + 1) * m];
                            for p in 0..k {
                                let s = x.data[i * k + p];
                                if s == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *o += s * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.needs(*b) {
                        let m = self.value(*b).cols;
                        let mut gb = vec![0.0; m];
                        for row in g.chunks_exact(m) {
                            gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let y = &self.value(*b).data;
                        accumulate(&mut grads, *a, g.iter().zip(y).map(|(u, v)| u * v).collect());
                    }
                    if self.needs(*b) {
                        let x = &self.value(*a).data;
                        accumulate(&mut grads, *b, g.iter().zip(x).map(|(u, v)| u * v).collect());
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.iter().map(|v| v * s).collect()),
                Op::Relu(a) => {
                    let x = &self.value(*a).data;
                    accumulate(&mut grads, *a, g.iter().zip(x).map(|(u, &v)| if v > 0.0 { *u } else { 0.0 }).collect());
                }
                Op::Sigmoid(a) => {
                    let y = &node.value.data;
                    accumulate(&mut grads, *a, g.iter().zip(y).map(|(u, s)| u * s * (1.0 - s)).collect());
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows;
                    let cols = node.value.cols;
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols;
                        if self.needs(p) {
                            let mut gp = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * cols + offset..r * cols + offset + pc]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        offset += pc;
                    }
                }
                Op::GatherRows(a, idx) => {
                    let x = self.value(*a);
                    let m = x.cols;
                    let mut ga = vec![0.0; x.rows * m];
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in ga[i * m..(i + 1) * m].iter_mut().zip(&g[r * m..(r + 1) * m]) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GroupMax(a, arg) => {
                    let x = self.value(*a);
                    let m = x.cols;
                    let mut ga = vec![0.0; x.rows * m];
                    for (e, (&r, &gv)) in arg.iter().zip(&g).enumerate() {
                        ga[r * m + e % m] += gv;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).data.len();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).data.len();
                    accumulate(&mut grads, *a, vec![g[0] / n.max(1) as f64; n]);
                }
                Op::Frobenius(a) => {
                    let norm = node.value.data[0];
                    let x = &self.value(*a).data;
                    // At the origin the norm has no gradient; use the zero subgradient.
                    let s = if norm > 0.0 { g[0] / norm } else { 0.0 };
                    accumulate(&mut grads, *a, x.iter().map(|v| v * s).collect());
                }
            }
        }
        Ok(Gradients { by_slot })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        empty => *empty = Some(g),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments per parameter tensor. Step counts are kept per tensor so a
/// tensor that starts training late still gets full bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            first: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            steps: vec![0; params.len()],
        }
    }

    /// Bias-corrected Adam update of every parameter that has a gradient.
    /// Parameters with `None` are left untouched, moments included.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::shape("adam_step", format!("{} params vs {} moment sets", params.len(), self.first.len())));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (slot, param) in params.iter_mut().enumerate() {
            let Some(g) = grads.get(slot).and_then(|g| g.as_ref()) else { continue };
            if g.data.len() != param.data.len() {
                return Err(Error::shape("adam_step", format!("slot {slot}: grad {:?} vs param {:?}", g.shape(), param.shape())));
            }
            self.steps[slot] += 1;
            let t = self.steps[slot] as i32;
            let c1 = 1.0 - libm::pow(beta1, t as f64);
            let c2 = 1.0 - libm::pow(beta2, t as f64);
            let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
            for (((w, &gi), mi), vi) in param.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (sqrt(vhat) + eps);
            }
        }
        Ok(())
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |g − fd| / max(1e−8, |g| + |fd|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose probes straddle a kink.
    pub skipped: usize,
}

/// Finite-difference formula used by the gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation `O(h²)`.
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, truncation `O(h⁴)`.
    FivePoint,
}

impl Stencil {
    fn offsets(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::FivePoint => &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)],
        }
    }
}

/// Central-difference check of `analytic` against `f` at `point`.
pub fn grad_check<F>(mut f: F, analytic: &[f64], point: &[f64], eps: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    grad_check_piecewise(|x| f(x).map(|v| (v, 0)), analytic, point, eps)
}

/// Like [`grad_check`] for piecewise-smooth functions: `f` also returns a
/// signature of the active piece, and coordinates where any probe lands on
/// a different piece than `point` are skipped.
pub fn grad_check_piecewise<F>(f: F, analytic: &[f64], point: &[f64], eps: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, u64)>,
{
    grad_check_stencil(f, analytic, point, eps, Stencil::Central)
}

/// [`grad_check_piecewise`] with a selectable difference formula.
pub fn grad_check_stencil<F>(mut f: F, analytic: &[f64], point: &[f64], eps: f64, stencil: Stencil) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, u64)>,
{
    if analytic.len() != point.len() {
        return Err(Error::shape("grad_check", format!("{} gradient entries for {} coordinates", analytic.len(), point.len())));
    }
    let (f0, sig0) = f(point)?;
    if !f0.is_finite() {
        return Err(Error::Numerical("grad_check: non-finite value at the base point".into()));
    }
    let mut x = point.to_vec();
    let mut report = GradCheck { max_rel_error: 0.0, worst_index: 0, checked: 0, skipped: 0 };
    for i in 0..point.len() {
        let mut fd = 0.0;
        let mut same_piece = true;
        for &(step, weight) in stencil.offsets() {
            x[i] = point[i] + step * eps;
            let (v, sig) = f(&x)?;
            if !v.is_finite() {
                return Err(Error::Numerical(format!("grad_check: non-finite value probing coordinate {i}")));
            }
            same_piece &= sig == sig0;
            fd += weight * v;
        }
        x[i] = point[i];
        if !same_piece {
            report.skipped += 1;
            continue;
        }
        let fd = fd / eps;
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + fd.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Runs `build` on a fresh tape with the given parameters and returns the
    /// loss value, piece signature and flattened parameter gradient.
    fn eval<F>(params: &[Tensor], build: &F) -> (f64, u64, Vec<f64>)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let flat = params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| grads.get(i).map(|g| g.data.clone()).unwrap_or_else(|| vec![0.0; p.data.len()]))
            .collect();
        (tape.value(loss).data[0], tape.piece_signature(), flat)
    }

    fn check_op<F>(shapes: &[(usize, usize)], seed: u64, build: F) -> GradCheck
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = shapes.iter().map(|&(r, c)| random(&mut rng, r, c)).collect();
        let (_, _, analytic) = eval(&params, &build);
        let point: Vec<f64> = params.iter().flat_map(|p| p.data.clone()).collect();
        let unflatten = |x: &[f64]| {
            let mut off = 0;
            params
                .iter()
                .map(|p| {
                    let t = Tensor::new(p.rows, p.cols, x[off..off + p.data.len()].to_vec()).unwrap();
                    off += p.data.len();
                    t
                })
                .collect::<Vec<_>>()
        };
        grad_check_piecewise(
            |x| {
                let (v, s, _) = eval(&unflatten(x), &build);
                Ok((v, s))
            },
            &analytic,
            &point,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn forward_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(1, 2, vec![-1.0, 2.0]).unwrap());
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).data(), &[0.5]);
        let m = t.constant(Tensor::new(100, 3, vec![0.1; 300]).unwrap());
        let f = t.frobenius_norm(m);
        assert!((t.value(f).data()[0] - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        let e = t.matmul(a, b).unwrap_err();
        assert!(matches!(e, Error::Shape { op: "matmul", .. }));
        let c = t.constant(Tensor::zeros(3, 3));
        assert!(matches!(t.mul(a, c), Err(Error::Shape { op: "mul", .. })));
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
        assert!(matches!(t.gather_rows(a, &[5]), Err(Error::Shape { op: "gather_rows", .. })));
        assert!(matches!(t.group_max(c, 2), Err(Error::Shape { op: "group_max", .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.param(0, Tensor::zeros(2, 2));
        assert!(matches!(t.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn sum_and_norm_gradients() {
        let mut t = Tape::new();
        let x = t.param(0, Tensor::new(1, 3, vec![1.0, -2.0, 5.0]).unwrap());
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().get(0).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.param(0, Tensor::new(1, 2, vec![3.0, 4.0]).unwrap());
        let n = t.frobenius_norm(x);
        let g = t.backward(n).unwrap();
        let g = g.get(0).unwrap().data();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::new(1, 2, vec![1.0, 2.0]).unwrap());
        let p = t.param(1, Tensor::new(1, 2, vec![3.0, 4.0]).unwrap());
        let m = t.mul(c, p).unwrap();
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert!(g.get(0).is_none());
        assert_eq!(g.get(1).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_duplicates_accumulate() {
        let mut t = Tape::new();
        let x = t.param(0, Tensor::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let g = t.gather_rows(x, &[2, 0, 2, 2]).unwrap();
        let s = t.sum(g);
        assert_eq!(t.backward(s).unwrap().get(0).unwrap().data(), &[1.0, 0.0, 3.0]);
    }

    #[test]
    fn every_op_passes_gradient_check() {
        let cases: Vec<(&str, Vec<(usize, usize)>, fn(&mut Tape, &[Var]) -> Var)> = vec![
            ("matmul", vec![(4, 3), (3, 5)], |t, v| {
                let m = t.matmul(v[0], v[1]).unwrap();
                let q = t.mul(m, m).unwrap();
                t.sum(q)
            }),
            ("add_row", vec![(4, 3), (1, 3)], |t, v| {
                let a = t.add(v[0], v[1]).unwrap();
                let q = t.mul(a, a).unwrap();
                t.mean_all(q)
            }),
            ("sub_scale", vec![(2, 3), (2, 3)], |t, v| {
                let d = t.sub(v[0], v[1]).unwrap();
                let s = t.scale(d, -1.7).unwrap();
                t.frobenius_norm(s)
            }),
            ("relu_sigmoid", vec![(5, 4)], |t, v| {
                let r = t.relu(v[0]);
                let s = t.sigmoid(v[0]);
                let p = t.mul(r, s).unwrap();
                t.sum(p)
            }),
            ("concat_gather", vec![(4, 2), (4, 3)], |t, v| {
                let c = t.concat(&[v[0], v[1]]).unwrap();
                let g = t.gather_rows(c, &[3, 1, 1, 0, 2]).unwrap();
                let q = t.mul(g, g).unwrap();
                t.sum(q)
            }),
            ("group_max", vec![(6, 3)], |t, v| {
                let m = t.group_max(v[0], 3).unwrap();
                let q = t.mul(m, m).unwrap();
                t.sum(q)
            }),
        ];
        for (name, shapes, build) in cases {
            for seed in 0..5 {
                let r = check_op(&shapes, seed, build);
                assert!(r.max_rel_error < 1e-4, "{name} seed {seed}: {r:?}");
                assert!(r.checked > 0);
            }
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = [random(&mut rng, 3, 4), random(&mut rng, 4, 2)];
        let l1 = |t: &mut Tape, v: &[Var]| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let s = t.sigmoid(m);
            t.sum(s)
        };
        let l2 = |t: &mut Tape, v: &[Var]| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let r = t.relu(m);
            t.frobenius_norm(r)
        };
        let (a, b) = (0.3, -2.5);
        let combo = |t: &mut Tape, v: &[Var]| {
            let x = l1(t, v);
            let y = l2(t, v);
            let xs = t.scale(x, a).unwrap();
            let ys = t.scale(y, b).unwrap();
            t.add(xs, ys).unwrap()
        };
        let (_, _, g1) = eval(&params, &l1);
        let (_, _, g2) = eval(&params, &l2);
        let (_, _, gc) = eval(&params, &combo);
        for i in 0..gc.len() {
            assert!((gc[i] - (a * g1[i] + b * g2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn deterministic_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = [random(&mut rng, 8, 5)];
        let f = |t: &mut Tape, v: &[Var]| {
            let m = t.group_max(v[0], 4).unwrap();
            let s = t.sigmoid(m);
            t.frobenius_norm(s)
        };
        let (_, _, a) = eval(&params, &f);
        let (_, _, b) = eval(&params, &f);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn grad_check_scalar_square() {
        let r = grad_check(|x| Ok(x[0] * x[0]), &[6.0], &[3.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn five_point_stencil_is_exact_on_quartics() {
        let f = |x: &[f64]| Ok((x[0] * x[0] * x[0] * x[0] - 2.0 * x[0] * x[0] * x[0], 0));
        let g = 4.0 * 8.0 - 6.0 * 4.0;
        let central = grad_check_stencil(f, &[g], &[2.0], 1e-2, Stencil::Central).unwrap();
        let five = grad_check_stencil(f, &[g], &[2.0], 1e-2, Stencil::FivePoint).unwrap();
        assert!(central.max_rel_error > 1e-6);
        assert!(five.max_rel_error < 1e-12, "{five:?}");
    }

    #[test]
    fn grad_check_skips_relu_kink() {
        let f = |x: &[f64]| {
            let mut t = Tape::new();
            let v = t.param(0, Tensor::new(1, 1, x.to_vec()).unwrap());
            let r = t.relu(v);
            let s = t.sum(r);
            Ok((t.value(s).data()[0], t.piece_signature()))
        };
        let r = grad_check_piecewise(f, &[0.0], &[0.0], 1e-5).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 0);
        assert!(grad_check(|x| Ok(x[0].sqrt()), &[1.0], &[-1.0], 1e-5).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = AdamConfig::default();
        let mut params = vec![Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap()];
        let mut st = AdamState::new(cfg, &params);
        let g = vec![Some(Tensor::new(1, 3, vec![0.7, -3.0, 100.0]).unwrap())];
        st.step(&mut params, &g).unwrap();
        let moved: Vec<f64> = params[0].data().iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| (a - b).abs()).collect();
        for m in moved {
            assert!((m - cfg.lr).abs() < 1e-9);
        }
        assert_eq!(st.steps[0], 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = vec![Tensor::new(1, 2, vec![1.0, 2.0]).unwrap()];
        let mut st = AdamState::new(AdamConfig::default(), &params);
        st.step(&mut params, &[Some(Tensor::zeros(1, 2))]).unwrap();
        assert_eq!(params[0].data(), &[1.0, 2.0]);
        assert_eq!(st.first[0], vec![0.0, 0.0]);
        assert_eq!(st.second[0], vec![0.0, 0.0]);
        st.step(&mut params, &[None]).unwrap();
        assert_eq!(st.steps[0], 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut params = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(cfg, &params);
        for _ in 0..200 {
            let x = params[0].data()[0];
            st.step(&mut params, &[Some(Tensor::scalar(2.0 * x))]).unwrap();
        }
        assert!(params[0].data()[0].abs() < 0.05, "x = {}", params[0].data()[0]);
    }
}
