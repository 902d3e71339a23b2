//! Reverse-mode tape.
//!
//! Every operation appends one node holding its output value plus the input
//! indices needed for the vector-Jacobian product. `backward` walks the nodes
//! once in reverse insertion order (SSA order is already topological) and
//! accumulates gradients additively, so fan-out works without bookkeeping.
//!
//! Gradients only flow into leaves registered with a name and a tensor whose
//! `requires_grad` flag is set; everything else is a constant and records no
//! backward work. Any operation that would produce a non-finite value fails
//! with the operation name.

use std::collections::BTreeMap;

use crate::{Error, Result};

use super::tensor::{Elem, Tensor};

/// Handle to a value on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Gradients keyed by trainable-leaf name.
pub type GradMap<E> = BTreeMap<String, Tensor<E>>;

enum Node {
    Leaf,
    Add { a: usize, b: usize },
    AddN { inputs: Vec<usize> },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Neg { a: usize },
    Exp { a: usize },
    Minimum { a: usize, b: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    Matmul { a: usize, b: usize },
    Transpose { a: usize },
    Gelu { a: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Embedding { table: usize, ids: Vec<usize> },
    CausalSoftmax { s: usize },
    LogSoftmax { x: usize, axis: usize },
    GatherCols { x: usize, idx: Vec<usize> },
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    Sum { a: usize },
    Mean { a: usize },
}

pub struct Tape<E: Elem> {
    vals: Vec<Tensor<E>>,
    nodes: Vec<Node>,
    names: Vec<Option<String>>,
    needs: Vec<bool>,
    consumed: bool,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), nodes: Vec::new(), names: Vec::new(), needs: Vec::new(), consumed: false }
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.vals[v.0]
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Registers a leaf. It becomes a trainable gradient target only when the
    /// tensor's `requires_grad` flag is set; the name is recorded either way.
    pub fn leaf(&mut self, name: &str, t: &Tensor<E>) -> Var {
        let needs = t.requires_grad();
        self.push_named(t.clone(), Node::Leaf, needs, Some(name.to_string()))
    }

    /// Registers a constant; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push_named(t, Node::Leaf, false, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(E::from_f64(v)))
    }

    fn push_named(&mut self, t: Tensor<E>, node: Node, needs: bool, name: Option<String>) -> Var {
        self.vals.push(t);
        self.nodes.push(node);
        self.needs.push(needs);
        self.names.push(name);
        Var(self.vals.len() - 1)
    }

    fn push_op(&mut self, op: &'static str, out: Tensor<E>, node: Node, needs: bool) -> Result<Var> {
        if !out.is_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(self.push_named(out, node, needs, None))
    }

    fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Self::shape_err(
                op,
                format!("{:?} vs {:?}", self.vals[a.0].shape(), self.vals[b.0].shape()),
            ));
        }
        Ok(())
    }

    // ---- element-wise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x + y);
        self.push_op("add", out, Node::Add { a: a.0, b: b.0 }, self.needs(a) || self.needs(b))
    }

    /// Sum of any number of same-shape tensors.
    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Self::shape_err("add_n", "empty input list".into()))?;
        let mut data = self.vals[first.0].data().to_vec();
        for v in &inputs[1..] {
            self.same_shape("add_n", first, *v)?;
            for (d, x) in data.iter_mut().zip(self.vals[v.0].data()) {
                *d = *d + *x;
            }
        }
        let out = Tensor::new(self.vals[first.0].shape().to_vec(), data)?;
        let needs = inputs.iter().any(|v| self.needs(*v));
        self.push_op("add_n", out, Node::AddN { inputs: inputs.iter().map(|v| v.0).collect() }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x - y);
        self.push_op("sub", out, Node::Sub { a: a.0, b: b.0 }, self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| x * y);
        self.push_op("mul", out, Node::Mul { a: a.0, b: b.0 }, self.needs(a) || self.needs(b))
    }

    /// `[m, n] + [n]`, broadcasting the row vector over every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_row", a)?;
        let bt = &self.vals[b.0];
        if bt.shape() != [n] {
            return Err(Self::shape_err("add_row", format!("[{m}, {n}] + {:?}", bt.shape())));
        }
        let at = &self.vals[a.0];
        let mut data = at.data().to_vec();
        for i in 0..m {
            for (d, x) in data[i * n..(i + 1) * n].iter_mut().zip(bt.data()) {
                *d = *d + *x;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push_op("add_row", out, Node::AddRow { a: a.0, b: b.0 }, self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ce = E::from_f64(c);
        let out = map(&self.vals[a.0], |x| x * ce);
        self.push_op("scale", out, Node::Scale { a: a.0, c }, self.needs(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ce = E::from_f64(c);
        let out = map(&self.vals[a.0], |x| x + ce);
        self.push_op("add_scalar", out, Node::AddScalar { a: a.0 }, self.needs(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.vals[a.0], |x| -x);
        self.push_op("neg", out, Node::Neg { a: a.0 }, self.needs(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.vals[a.0], |x| x.exp());
        self.push_op("exp", out, Node::Exp { a: a.0 }, self.needs(a))
    }

    /// Element-wise minimum. Where the operands tie, the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let out = zip_map(&self.vals[a.0], &self.vals[b.0], |x, y| if x <= y { x } else { y });
        self.push_op("minimum", out, Node::Minimum { a: a.0, b: b.0 }, self.needs(a) || self.needs(b))
    }

    /// Clamp into `[lo, hi]`. The gradient passes through inside the closed
    /// interval and is zero outside. Infinite bounds give an exact no-op.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Self::shape_err("clamp", format!("lo {lo} > hi {hi}")));
        }
        let (le, he) = (E::from_f64(lo), E::from_f64(hi));
        let out = map(&self.vals[a.0], |x| if x < le { le } else if x > he { he } else { x });
        self.push_op("clamp", out, Node::Clamp { a: a.0, lo, hi }, self.needs(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = map(&self.vals[a.0], gelu_fwd);
        self.push_op("gelu", out, Node::Gelu { a: a.0 }, self.needs(a))
    }

    // ---- linear algebra ----

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.vals[v.0].shape();
        if s.len() != 2 {
            return Err(Self::shape_err(op, format!("expected 2-d tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Self::shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let data = matmul_nn(self.vals[a.0].data(), self.vals[b.0].data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        self.push_op("matmul", out, Node::Matmul { a: a.0, b: b.0 }, self.needs(a) || self.needs(b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.vals[a.0].data();
        let mut data = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        self.push_op("transpose", out, Node::Transpose { a: a.0 }, self.needs(a))
    }

    /// Per-row layer normalization with learned gain and bias (epsilon inside
    /// the square root).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.vals[gain.0].shape() != [n] || self.vals[bias.0].shape() != [n] {
            return Err(Self::shape_err("layer_norm", format!("gain/bias must be [{n}]")));
        }
        let xs = self.vals[x.0].data();
        let g = self.vals[gain.0].data();
        let b = self.vals[bias.0].data();
        let epse = E::from_f64(eps);
        let mut data = vec![E::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let (mean, var) = mean_var(row);
            let inv = (var + epse).sqrt().recip();
            for j in 0..n {
                data[i * n + j] = g[j] * ((row[j] - mean) * inv) + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push_op("layer_norm", out, Node::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps }, needs)
    }

    /// Row gather: `out[t] = table[ids[t]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return Err(Self::shape_err("embedding", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Self::shape_err("embedding", format!("id {bad} out of range for table [{v}, {d}]")));
        }
        let src = self.vals[table.0].data();
        let mut data = vec![E::zero(); ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            data[t * d..(t + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push_op("embedding", out, Node::Embedding { table: table.0, ids: ids.to_vec() }, self.needs(table))
    }

    /// Softmax of a square score matrix where row `i` is restricted to columns
    /// `0..=i`; masked entries are exactly zero, so causality is exact by
    /// construction.
    pub fn causal_softmax(&mut self, s: Var) -> Result<Var> {
        let (m, n) = self.dims2("causal_softmax", s)?;
        if m != n {
            return Err(Self::shape_err("causal_softmax", format!("expected square scores, got [{m}, {n}]")));
        }
        let src = self.vals[s.0].data();
        let mut data = vec![E::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..i * n + i + 1];
            let mx = max_of(row);
            let mut z = E::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                data[i * n + j] = e;
                z = z + e;
            }
            for d in &mut data[i * n..i * n + i + 1] {
                *d = *d / z;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push_op("causal_softmax", out, Node::CausalSoftmax { s: s.0 }, self.needs(s))
    }

    /// Log-softmax along `axis`. Adding a constant to every lane leaves the
    /// output unchanged up to rounding.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.vals[x.0].shape().to_vec();
        if axis >= shape.len() {
            return Err(Self::shape_err("log_softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        if shape[axis] == 0 {
            return Err(Self::shape_err("log_softmax", "empty axis".into()));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.vals[x.0].data();
        let mut data = vec![E::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = src[base];
                for l in 1..len {
                    let v = src[base + l * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut z = E::zero();
                for l in 0..len {
                    z = z + (src[base + l * inner] - mx).exp();
                }
                let lse = mx + z.ln();
                for l in 0..len {
                    data[base + l * inner] = src[base + l * inner] - lse;
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push_op("log_softmax", out, Node::LogSoftmax { x: x.0, axis }, self.needs(x))
    }

    /// `out[i] = x[i, idx[i]]` as a 1-d tensor.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_cols", x)?;
        if idx.len() != m {
            return Err(Self::shape_err("gather_cols", format!("{} indices for {m} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Self::shape_err("gather_cols", format!("column {bad} out of range for [{m}, {n}]")));
        }
        let src = self.vals[x.0].data();
        let data: Vec<E> = idx.iter().enumerate().map(|(i, &j)| src[i * n + j]).collect();
        let out = Tensor::new(vec![m], data)?;
        self.push_op("gather_cols", out, Node::GatherCols { x: x.0, idx: idx.to_vec() }, self.needs(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if start + len > n || len == 0 {
            return Err(Self::shape_err("slice_cols", format!("cols {start}..{} of [{m}, {n}]", start + len)));
        }
        let src = self.vals[x.0].data();
        let mut data = vec![E::zero(); m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push_op("slice_cols", out, Node::SliceCols { x: x.0, start }, self.needs(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", x)?;
        if start + len > m || len == 0 {
            return Err(Self::shape_err("slice_rows", format!("rows {start}..{} of [{m}, {n}]", start + len)));
        }
        let src = self.vals[x.0].data();
        let data = src[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        self.push_op("slice_rows", out, Node::SliceRows { x: x.0, start }, self.needs(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_cols", "empty part list".into()));
        }
        let (m, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = self.dims2("concat_cols", *p)?;
            if pm != m {
                return Err(Self::shape_err("concat_cols", format!("row counts differ: {pm} vs {m}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![E::zero(); m * n];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = self.vals[p.0].data();
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::new(vec![m, n], data)?;
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push_op("concat_cols", out, Node::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, needs)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.vals[a.0].data().iter().fold(E::zero(), |acc, &v| acc + v);
        self.push_op("sum", Tensor::scalar(s), Node::Sum { a: a.0 }, self.needs(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.vals[a.0].numel();
        let s = self.vals[a.0].data().iter().fold(E::zero(), |acc, &v| acc + v);
        let m = s / E::from_f64(n as f64);
        self.push_op("mean", Tensor::scalar(m), Node::Mean { a: a.0 }, self.needs(a))
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss. Returns one gradient tensor per
    /// trainable leaf (zeros when a leaf never influenced the loss); frozen
    /// leaves and constants get no entry. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap<E>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::NotScalar { shape: self.vals[loss.0].shape().to_vec() });
        }
        self.consumed = true;

        let n = self.vals.len();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
        grads[loss.0] = Some(vec![E::one()]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.needs[i] {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if self.names[i].is_some() {
                grads[i] = Some(g);
            }
        }

        let mut out = GradMap::new();
        for i in 0..n {
            if let (Some(name), true) = (&self.names[i], self.needs[i]) {
                let shape = self.vals[i].shape().to_vec();
                let data = grads[i].take().unwrap_or_else(|| vec![E::zero(); self.vals[i].numel()]);
                out.insert(name.clone(), Tensor::new(shape, data)?);
            }
        }
        Ok(out)
    }

    fn accum(grads: &mut [Option<Vec<E>>], target: usize, numel: usize, f: impl FnOnce(&mut [E])) {
        let slot = grads[target].get_or_insert_with(|| vec![E::zero(); numel]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[E], grads: &mut Vec<Option<Vec<E>>>) {
        let needs = |v: usize| self.needs[v];
        let numel = |v: usize| self.vals[v].numel();
        match &self.nodes[i] {
            Node::Leaf => {}
            Node::Add { a, b } => {
                for &t in [a, b].iter() {
                    if needs(*t) {
                        Self::accum(grads, *t, numel(*t), |s| add_into(s, g));
                    }
                }
            }
            Node::AddN { inputs } => {
                for &t in inputs {
                    if needs(t) {
                        Self::accum(grads, t, numel(t), |s| add_into(s, g));
                    }
                }
            }
            Node::Sub { a, b } => {
                if needs(*a) {
                    Self::accum(grads, *a, numel(*a), |s| add_into(s, g));
                }
                if needs(*b) {
                    Self::accum(grads, *b, numel(*b), |s| {
                        for (d, &x) in s.iter_mut().zip(g) {
                            *d = *d - x;
                        }
                    });
                }
            }
            Node::Mul { a, b } => {
                if needs(*a) {
                    let bv = self.vals[*b].data();
                    Self::accum(grads, *a, numel(*a), |s| {
                        for ((d, &x), &y) in s.iter_mut().zip(g).zip(bv) {
                            *d = *d + x * y;
                        }
                    });
                }
                if needs(*b) {
                    let av = self.vals[*a].data();
                    Self::accum(grads, *b, numel(*b), |s| {
                        for ((d, &x), &y) in s.iter_mut().zip(g).zip(av) {
                            *d = *d + x * y;
                        }
                    });
                }
            }
            Node::AddRow { a, b } => {
                if needs(*a) {
                    Self::accum(grads, *a, numel(*a), |s| add_into(s, g));
                }
                if needs(*b) {
                    let n = numel(*b);
                    Self::accum(grads, *b, n, |s| {
                        for (t, &x) in g.iter().enumerate() {
                            s[t % n] = s[t % n] + x;
                        }
                    });
                }
            }
            Node::Scale { a, c } => {
                if needs(*a) {
                    let ce = E::from_f64(*c);
                    Self::accum(grads, *a, numel(*a), |s| {
                        for (d, &x) in s.iter_mut().zip(g) {
                            *d = *d + x * ce;
                        }
                    });
                }
            }
            Node::AddScalar { a } => {
                if needs(*a) {
                    Self::accum(grads, *a, numel(*a), |s| add_into(s, g));
                }
            }
            Node::Neg { a } => {
                if needs(*a) {
                    Self::accum(grads, *a, numel(*a), |s| {
                        for (d, &x) in s.iter_mut().zip(g) {
                            *d = *d - x;
                        }
                    });
                }
            }
            Node::Exp { a } => {
                if needs(*a) {
                    let out = self.vals[i].data();
                    Self::accum(grads, *a, numel(*a), |s| {
                        for ((d, &x), &y) in s.iter_mut().zip(g).zip(out) {
                            *d = *d + x * y;
                        }
                    });
                }
            }
            Node::Minimum { a, b } => {
                let av = self.vals[*a].data();
                let bv = self.vals[*b].data();
                if needs(*a) {
                    Self::accum(grads, *a, numel(*a), |s| {
                        for (j, (d, &x)) in s.iter_mut().zip(g).enumerate() {
                            if av[j] <= bv[j] {
                                *d = *d + x;
                            }
                        }
                    });
                }
                if needs(*b) {
                    Self::accum(grads, *b, numel(*b), |s| {
                        for (j, (d, &x)) in s.iter_mut().zip(g).enumerate() {
                            if av[j] > bv[j] {
                                *d = *d + x;
                            }
                        }
                    });
                }
            }
            Node::Clamp { a, lo, hi } => {
                if needs(*a) {
                    let av = self.vals[*a].data();
                    let (le, he) = (E::from_f64(*lo), E::from_f64(*hi));
                    Self::accum(grads, *a, numel(*a), |s| {
                        for (j, (d, &x)) in s.iter_mut().zip(g).enumerate() {
                            if av[j] >= le && av[j] <= he {
                                *d = *d + x;
                            }
                        }
                    });
                }
            }
            Node::Matmul { a, b } => {
                let (m, k) = (self.vals[*a].shape()[0], self.vals[*a].shape()[1]);
                let n = self.vals[*b].shape()[1];
                if needs(*a) {
                    let da = matmul_nt(g, self.vals[*b].data(), m, n, k);
                    Self::accum(grads, *a, numel(*a), |s| add_into(s, &da));
                }
                if needs(*b) {
                    let db = matmul_tn(self.vals[*a].data(), g, m, k, n);
                    Self::accum(grads, *b, numel(*b), |s| add_into(s, &db));
                }
            }
            Node::Transpose { a } => {
                if needs(*a) {
                    let (m, n) = (self.vals[*a].shape()[0], self.vals[*a].shape()[1]);
                    Self::accum(grads, *a, numel(*a), |s| {
                        for i2 in 0..m {
                            for j in 0..n {
                                s[i2 * n + j] = s[i2 * n + j] + g[j * m + i2];
                            }
                        }
                    });
                }
            }
            Node::Gelu { a } => {
                if needs(*a) {
                    let av = self.vals[*a].data();
                    Self::accum(grads, *a, numel(*a), |s| {
                        for (j, (d, &x)) in s.iter_mut().zip(g).enumerate() {
                            *d = *d + x * gelu_bwd(av[j]);
                        }
                    });
                }
            }
            Node::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = (self.vals[*x].shape()[0], self.vals[*x].shape()[1]);
                let xs = self.vals[*x].data();
                let gv = self.vals[*gain].data();
                let epse = E::from_f64(*eps);
                let ne = E::from_f64(n as f64);
                for row in 0..m {
                    let xr = &xs[row * n..(row + 1) * n];
                    let gr = &g[row * n..(row + 1) * n];
                    let (mean, var) = mean_var(xr);
                    let inv = (var + epse).sqrt().recip();
                    if needs(*gain) {
                        Self::accum(grads, *gain, n, |s| {
                            for j in 0..n {
                                s[j] = s[j] + gr[j] * ((xr[j] - mean) * inv);
                            }
                        });
                    }
                    if needs(*bias) {
                        Self::accum(grads, *bias, n, |s| add_into(s, gr));
                    }
                    if needs(*x) {
                        let mut sum_dxh = E::zero();
                        let mut sum_dxh_xh = E::zero();
                        let mut dxh = vec![E::zero(); n];
                        for j in 0..n {
                            let xh = (xr[j] - mean) * inv;
                            dxh[j] = gr[j] * gv[j];
                            sum_dxh = sum_dxh + dxh[j];
                            sum_dxh_xh = sum_dxh_xh + dxh[j] * xh;
                        }
                        let mean_dxh = sum_dxh / ne;
                        let mean_dxh_xh = sum_dxh_xh / ne;
                        Self::accum(grads, *x, m * n, |s| {
                            for j in 0..n {
                                let xh = (xr[j] - mean) * inv;
                                s[row * n + j] = s[row * n + j] + inv * (dxh[j] - mean_dxh - xh * mean_dxh_xh);
                            }
                        });
                    }
                }
            }
            Node::Embedding { table, ids } => {
                if needs(*table) {
                    let d = self.vals[*table].shape()[1];
                    Self::accum(grads, *table, numel(*table), |s| {
                        for (t, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                s[id * d + j] = s[id * d + j] + g[t * d + j];
                            }
                        }
                    });
                }
            }
            Node::CausalSoftmax { s: sv } => {
                if needs(*sv) {
                    let n = self.vals[*sv].shape()[1];
                    let y = self.vals[i].data();
                    Self::accum(grads, *sv, numel(*sv), |s| {
                        for row in 0..n {
                            let mut dot = E::zero();
                            for j in 0..=row {
                                dot = dot + g[row * n + j] * y[row * n + j];
                            }
                            for j in 0..=row {
                                let yj = y[row * n + j];
                                s[row * n + j] = s[row * n + j] + yj * (g[row * n + j] - dot);
                            }
                        }
                    });
                }
            }
            Node::LogSoftmax { x, axis } => {
                if needs(*x) {
                    let shape = self.vals[*x].shape();
                    let (outer, len, inner) = axis_split(shape, *axis);
                    let y = self.vals[i].data();
                    Self::accum(grads, *x, numel(*x), |s| {
                        for o in 0..outer {
                            for i2 in 0..inner {
                                let base = o * len * inner + i2;
                                let mut gsum = E::zero();
                                for l in 0..len {
                                    gsum = gsum + g[base + l * inner];
                                }
                                for l in 0..len {
                                    let p = y[base + l * inner].exp();
                                    s[base + l * inner] = s[base + l * inner] + g[base + l * inner] - p * gsum;
                                }
                            }
                        }
                    });
                }
            }
            Node::GatherCols { x, idx } => {
                if needs(*x) {
                    let n = self.vals[*x].shape()[1];
                    Self::accum(grads, *x, numel(*x), |s| {
                        for (i2, &j) in idx.iter().enumerate() {
                            s[i2 * n + j] = s[i2 * n + j] + g[i2];
                        }
                    });
                }
            }
            Node::SliceCols { x, start } => {
                if needs(*x) {
                    let n = self.vals[*x].shape()[1];
                    let w = self.vals[i].shape()[1];
                    let m = self.vals[i].shape()[0];
                    Self::accum(grads, *x, numel(*x), |s| {
                        for i2 in 0..m {
                            for j in 0..w {
                                s[i2 * n + start + j] = s[i2 * n + start + j] + g[i2 * w + j];
                            }
                        }
                    });
                }
            }
            Node::SliceRows { x, start } => {
                if needs(*x) {
                    let n = self.vals[*x].shape()[1];
                    let rows = self.vals[i].shape()[0];
                    Self::accum(grads, *x, numel(*x), |s| {
                        add_into(&mut s[start * n..(start + rows) * n], g);
                    });
                }
            }
            Node::ConcatCols { parts } => {
                let m = self.vals[i].shape()[0];
                let n = self.vals[i].shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.vals[p].shape()[1];
                    if needs(p) {
                        let local_off = off;
                        Self::accum(grads, p, m * w, |s| {
                            for i2 in 0..m {
                                for j in 0..w {
                                    s[i2 * w + j] = s[i2 * w + j] + g[i2 * n + local_off + j];
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Node::Sum { a } => {
                if needs(*a) {
                    Self::accum(grads, *a, numel(*a), |s| {
                        for d in s.iter_mut() {
                            *d = *d + g[0];
                        }
                    });
                }
            }
            Node::Mean { a } => {
                if needs(*a) {
                    let scale = g[0] / E::from_f64(numel(*a) as f64);
                    Self::accum(grads, *a, numel(*a), |s| {
                        for d in s.iter_mut() {
                            *d = *d + scale;
                        }
                    });
                }
            }
        }
    }
}

// ---- kernels and scalar helpers ----

fn map<E: Elem>(t: &Tensor<E>, f: impl Fn(E) -> E) -> Tensor<E> {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip_map<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn add_into<E: Elem>(dst: &mut [E], src: &[E]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn max_of<E: Elem>(row: &[E]) -> E {
    let mut mx = row[0];
    for &v in &row[1..] {
        if v > mx {
            mx = v;
        }
    }
    mx
}

fn mean_var<E: Elem>(row: &[E]) -> (E, E) {
    let n = E::from_f64(row.len() as f64);
    let mut sum = E::zero();
    for &v in row {
        sum = sum + v;
    }
    let mean = sum / n;
    let mut var = E::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    (mean, var / n)
}

/// `a [m, k] x b [k, n]`.
pub(crate) fn matmul_nn<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a [m, n] x b^T` where `b` is `[k, n]`, giving `[m, k]`.
fn matmul_nt<E: Elem>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = E::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * k + l] = acc;
        }
    }
    out
}

/// `a^T x b` where `a` is `[m, k]` and `b` is `[m, n]`, giving `[k, n]`.
fn matmul_tn<E: Elem>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let orow = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Decomposes `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_fwd<E: Elem>(x: E) -> E {
    let c0 = E::from_f64(0.7978845608028654); // sqrt(2/pi)
    let c1 = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_bwd<E: Elem>(x: E) -> E {
    let c0 = E::from_f64(0.7978845608028654);
    let c1 = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (E::one() + three * c1 * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    /// [DERIVED] 2x2 matmul against a hand-expanded triple loop.
    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.constant(t64(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b).unwrap();
        // oracle: out[i][j] = sum_l a[i][l] * b[l][j], expanded by hand
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 2]));
        assert_eq!(tape.matmul(a, b).unwrap_err().code(), "shape");
    }

    /// [TRIVIAL] log-softmax of a constant row is uniform: -ln(4) each.
    #[test]
    fn log_softmax_uniform_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![4], vec![0.0; 4]));
        let y = tape.log_softmax(x, 0).unwrap();
        let want = -(4.0f64).ln();
        for &v in tape.value(y).data() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_probabilities_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![2, 3], vec![1.0, -2.0, 0.5, 10.0, 10.0, 10.0]));
        let y = tape.log_softmax(x, 1).unwrap();
        for row in 0..2 {
            let s: f64 = tape.value(y).data()[row * 3..(row + 1) * 3].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_shift_invariance() {
        let vals = vec![0.3, -1.2, 4.0, 2.2];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![4], vals.clone()));
        let shifted = tape.constant(t64(vec![4], vals.iter().map(|v| v + 123.25).collect()));
        let y0 = tape.log_softmax(x, 0).unwrap();
        let y1 = tape.log_softmax(shifted, 0).unwrap();
        for (a, b) in tape.value(y0).data().iter().zip(tape.value(y1).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn log_softmax_rejects_bad_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        assert_eq!(tape.log_softmax(x, 2).unwrap_err().code(), "shape");
    }

    #[test]
    fn nonfinite_output_carries_op_name() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![1], vec![1e308]));
        let y = tape.add(x, x).unwrap_err();
        match y {
            Error::NonFinite { op } => assert_eq!(op, "add"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn exp_overflow_is_nonfinite() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![1], vec![1000.0]));
        assert_eq!(tape.exp(x).unwrap_err().code(), "nonfinite");
    }

    /// [DERIVED] gradient of sum(a*b) wrt a is b; fan-out accumulates.
    #[test]
    fn backward_accumulates_over_fanout() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf("a", &t64(vec![2], vec![3.0, -1.0]).with_grad(true));
        // loss = sum(a*a) -> d/da = 2a
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["a"].data(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf("a", &t64(vec![2], vec![1.0, 2.0]).with_grad(true));
        let err = tape.backward(a).unwrap_err();
        assert_eq!(err.code(), "notscalar");
    }

    #[test]
    fn backward_consumes_tape() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf("a", &t64(vec![1], vec![2.0]).with_grad(true));
        let loss = tape.sum(a).unwrap();
        tape.backward(loss).unwrap();
        let loss2 = Var(loss.0);
        assert_eq!(tape.backward(loss2).unwrap_err().code(), "tape");
    }

    #[test]
    fn frozen_leaves_get_no_entry_and_unused_trainable_gets_zeros() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf("a", &t64(vec![1], vec![2.0]).with_grad(true));
        let _b = tape.leaf("b", &t64(vec![1], vec![5.0])); // frozen
        let c = tape.leaf("c", &t64(vec![2], vec![1.0, 1.0]).with_grad(true)); // unused
        let _ = c;
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["a"].data(), &[1.0]);
        assert!(!grads.contains_key("b"));
        assert_eq!(grads["c"].data(), &[0.0, 0.0]);
    }

    /// Causality: the softmax row for position t ignores scores past t.
    #[test]
    fn causal_softmax_masks_future_exactly() {
        let mut tape = Tape::<f64>::new();
        let s1 = tape.constant(t64(vec![3, 3], vec![1.0, 99.0, 99.0, 0.5, -0.5, 99.0, 1.0, 2.0, 3.0]));
        let s2 = tape.constant(t64(vec![3, 3], vec![1.0, -99.0, 7.0, 0.5, -0.5, 0.0, 1.0, 2.0, 3.0]));
        let y1 = tape.causal_softmax(s1).unwrap();
        let y2 = tape.causal_softmax(s2).unwrap();
        // rows 0 and 1 identical bit for bit; masked entries exactly zero
        assert_eq!(tape.value(y1).data()[..6], tape.value(y2).data()[..6]);
        assert_eq!(tape.value(y1).data()[1], 0.0);
        assert_eq!(tape.value(y1).data()[2], 0.0);
        assert_eq!(tape.value(y1).data()[5], 0.0);
    }

    #[test]
    fn minimum_ties_send_gradient_to_first() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf("a", &t64(vec![1], vec![2.0]).with_grad(true));
        let b = tape.leaf("b", &t64(vec![1], vec![2.0]).with_grad(true));
        let m = tape.minimum(a, b).unwrap();
        let loss = tape.sum(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads["a"].data(), &[1.0]);
        assert_eq!(grads["b"].data(), &[0.0]);
    }

    #[test]
    fn clamp_with_infinite_bounds_is_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(vec![3], vec![-5.0, 0.0, 7.5]));
        let c = tape.clamp(a, f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert_eq!(tape.value(c).data(), &[-5.0, 0.0, 7.5]);
    }

    #[test]
    fn embedding_gathers_rows_and_scatters_grads() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf("t", &t64(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad(true));
        let e = tape.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(e).unwrap();
        let grads = tape.backward(loss).unwrap();
        // row 2 used twice, row 0 once, row 1 never
        assert_eq!(grads["t"].data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros(vec![3, 2]));
        assert_eq!(tape.embedding(table, &[3]).unwrap_err().code(), "shape");
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let a = tape.slice_cols(x, 0, 2).unwrap();
        let b = tape.slice_cols(x, 2, 2).unwrap();
        let y = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }
}
