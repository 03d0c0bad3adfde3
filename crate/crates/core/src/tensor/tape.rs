use alloc::vec;
use alloc::vec::Vec;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::math;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRows(Var, Var),
    MulScalar(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    SliceLast(Var, usize),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Gather(Var, Vec<usize>),
    AttendHeads {
        w: Var,
        v: Var,
        heads: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order of the dataflow graph and `backward` is a single
/// reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    param_vars: Vec<Option<Var>>,
}

fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// `c (+)= op(a) * op(b)` for row-major operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    // a is m×k (or stored k×m when transposed), b is k×n (or n×k).
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slice lengths cover every index reachable through the given
    // dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    /// Adjoint of `v` from the most recent `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads
            .get(v.0)
            .filter(|g| !g.is_empty())
            .map(|g| g.as_slice())
    }

    /// Records a constant (never differentiated) value.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    /// Records a leaf tensor; its adjoint is tracked when `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Snapshots a parameter onto the tape. Repeated calls return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(id),
            t.requires_grad(),
        );
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    // ---- operations -------------------------------------------------------

    /// Matrix product treating `a` as rows × k (all leading axes flattened)
    /// and `b` as a k × n matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || cols_of(sa) != sb[0] {
            return Err(Error::dims("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.node(a).value.len() / k;
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::MatMul(a, b), ng))
    }

    /// Adds the vector `b` (length = last axis of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = cols_of(self.shape(a));
        if self.node(b).value.len() != c {
            return Err(Error::dims("add_row", self.shape(a), self.shape(b)));
        }
        let bv = &self.node(b).value;
        let mut out = self.value(a).to_vec();
        for r in out.chunks_exact_mut(c) {
            r.iter_mut().zip(bv).for_each(|(x, y)| *x += y);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, Op::AddRow(a, b), ng))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise (Hadamard) product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Scales row `r` of `x` by `s[r]`; `s` holds one value per row of `x`.
    pub fn mul_rows(&mut self, s: Var, x: Var) -> Result<Var> {
        let c = cols_of(self.shape(x));
        let rows = self.node(x).value.len() / c;
        if self.node(s).value.len() != rows {
            return Err(Error::dims("mul_rows", self.shape(s), self.shape(x)));
        }
        let sv = &self.node(s).value;
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(c)
            .zip(sv)
            .flat_map(|(r, &w)| r.iter().map(move |v| v * w))
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[s, x]);
        Ok(self.push(shape, out, Op::MulRows(s, x), ng))
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(shape, out, op, ng)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v * c, Op::MulScalar(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map_unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, math::sigmoid, Op::Sigmoid(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map_unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let axis = self.shape(x).len().saturating_sub(1);
        if self.shape(x).is_empty() {
            let out = vec![1.0];
            let ng = self.ng(&[x]);
            return Ok(self.push(
                Vec::new(),
                out,
                Op::Softmax {
                    x,
                    outer: 1,
                    len: 1,
                    inner: 1,
                },
                ng,
            ));
        }
        self.softmax_axis(x, axis)
    }

    /// Softmax along `axis` (the other axes index independent distributions).
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, _) = self.axis_split(x, axis)?;
        let mut out = self.value(x).to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let at = |r: usize| (o * len + r) * inner + i;
                for r in 0..len {
                    buf[r] = out[at(r)];
                }
                softmax_in_place(&mut buf)?;
                for r in 0..len {
                    out[at(r)] = buf[r];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_lastdim(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::dims("concat_lastdim", self.shape(first), s));
            }
            widths.push(cols_of(s));
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = self.ng(xs);
        Ok(self.push(shape, out, Op::Concat(xs.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.node(x).value.len() || shape.contains(&0) {
            return Err(Error::dims("reshape", self.shape(x), &shape));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), ng))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dims("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), ng))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_lastdim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = cols_of(&s);
        if len == 0 || start + len > c {
            return Err(Error::Index {
                op: "slice_lastdim",
                index: start + len,
                len: c,
            });
        }
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::SliceLast(x, start), ng))
    }

    fn axis_split(&self, x: Var, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(Error::Index {
                op: "reduce",
                index: axis,
                len: s.len(),
            });
        }
        let outer = s[..axis].iter().product();
        let inner = s[axis + 1..].iter().product();
        let mut shape = s[..axis].to_vec();
        shape.extend_from_slice(&s[axis + 1..]);
        Ok((outer, s[axis], inner, shape))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, shape) = self.axis_split(x, axis)?;
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for r in 0..len {
                let src = &v[(o * len + r) * inner..(o * len + r + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
            let inv = 1.0 / len as f64;
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Max over `axis`. The backward pass routes to the first maximal index.
    pub fn max_reduce(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner, shape) = self.axis_split(x, axis)?;
        let v = self.value(x);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for r in 0..len {
                let base = (o * len + r) * inner;
                for i in 0..inner {
                    let val = v[base + i];
                    let slot = o * inner + i;
                    if r == 0 || val > out[slot] {
                        out[slot] = val;
                        argmax[slot] = base + i;
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::MaxAxis { x, argmax }, ng))
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let ng = self.ng(&[x]);
        self.push(Vec::new(), vec![s], Op::SumAll(x), ng)
    }

    /// Selects slices along axis 0; the backward pass scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || idx.is_empty() {
            return Err(Error::dims("gather_rows", &s, &[idx.len()]));
        }
        let n = s[0];
        let w = self.node(x).value.len() / n;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                len: n,
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&v[i * w..(i + 1) * w]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Gather(x, idx.to_vec()), ng))
    }

    /// Multi-head weighted aggregation.
    ///
    /// `w` is M×k×h attention weights, `v` is M×k×d values with `h | d`.
    /// Head `t` combines the value slice `t·d/h .. (t+1)·d/h` with its own
    /// weights; the head outputs are laid out contiguously (concatenated).
    pub fn attend_heads(&mut self, w: Var, v: Var) -> Result<Var> {
        let (sw, sv) = (self.shape(w), self.shape(v));
        if sw.len() != 3 || sv.len() != 3 || sw[0] != sv[0] || sw[1] != sv[1] {
            return Err(Error::dims("attend_heads", sw, sv));
        }
        let (m, k, h, d) = (sw[0], sw[1], sw[2], sv[2]);
        if d % h != 0 {
            return Err(Error::config("head count must divide the value width"));
        }
        let dh = d / h;
        let (wv, vv) = (self.value(w), self.value(v));
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let dst = &mut out[i * d..(i + 1) * d];
            for j in 0..k {
                let row = &vv[(i * k + j) * d..(i * k + j + 1) * d];
                let wr = &wv[(i * k + j) * h..(i * k + j + 1) * h];
                for (t, &a) in wr.iter().enumerate() {
                    let span = t * dh..(t + 1) * dh;
                    dst[span.clone()]
                        .iter_mut()
                        .zip(&row[span])
                        .for_each(|(o, x)| *o += a * x);
                }
            }
        }
        let ng = self.ng(&[w, v]);
        Ok(self.push(vec![m, d], out, Op::AttendHeads { w, v, heads: h }, ng))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dims("cross_entropy", s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                len: c,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_exact_mut(c).zip(labels) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + math::ln(row.iter().map(|&v| math::exp(v - mx)).sum::<f64>());
            loss += lse - row[l];
            row.iter_mut().for_each(|v| *v = math::exp(*v - lse));
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("cross_entropy"));
        }
        loss /= labels.len() as f64;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Propagates d`loss` to every reachable node and accumulates parameter
    /// gradients into `store`. Calling it again adds the gradients a second
    /// time.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract("backward requires a scalar loss"));
        }
        let n = self.nodes.len();
        self.grads.clear();
        self.grads.resize(n, Vec::new());
        self.grads[loss.0] = vec![1.0];

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || self.grads[idx].is_empty() {
                continue;
            }
            let g = core::mem::take(&mut self.grads[idx]);
            self.backprop_node(idx, &g);
            if let Op::Param(id) = self.nodes[idx].op {
                if let Some(pg) = store.get_mut(id).grad_mut() {
                    pg.iter_mut().zip(&g).for_each(|(p, d)| *p += d);
                }
            }
            self.grads[idx] = g;
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[idx];

        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }

        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let k = nodes[b.0].shape[0];
                let nn = nodes[b.0].shape[1];
                let m = nodes[a.0].value.len() / k;
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = slot!(*a) {
                    gemm(m, nn, k, g, false, bv, true, da, true);
                }
                if let Some(db) = slot!(*b) {
                    gemm(k, m, nn, av, true, g, false, db, true);
                }
            }
            Op::AddRow(a, b) => {
                let c = nodes[b.0].value.len();
                accumulate(nodes, grads, *a, g, 1.0);
                if let Some(db) = slot!(*b) {
                    for r in g.chunks_exact(c) {
                        db.iter_mut().zip(r).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(nodes, grads, *a, g, 1.0);
                accumulate(nodes, grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                accumulate(nodes, grads, *a, g, 1.0);
                accumulate(nodes, grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(da) = slot!(*a) {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if let Some(db) = slot!(*b) {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            Op::MulRows(s, x) => {
                let c = cols_of(&nodes[x.0].shape);
                let (sv, xv) = (&nodes[s.0].value, &nodes[x.0].value);
                if let Some(ds) = slot!(*s) {
                    for (r, d) in ds.iter_mut().enumerate() {
                        let span = r * c..(r + 1) * c;
                        *d += g[span.clone()]
                            .iter()
                            .zip(&xv[span])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
                if let Some(dx) = slot!(*x) {
                    for (r, &w) in sv.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        dx[span.clone()]
                            .iter_mut()
                            .zip(&g[span])
                            .for_each(|(d, x)| *d += w * x);
                    }
                }
            }
            Op::MulScalar(x, c) => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, g, 1.0),
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                if let Some(dx) = slot!(*x) {
                    for ((d, v), &inp) in dx.iter_mut().zip(g).zip(xv) {
                        if inp > 0.0 {
                            *d += v;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                if let Some(dx) = slot!(*x) {
                    for ((d, v), &s) in dx.iter_mut().zip(g).zip(y) {
                        *d += v * s * (1.0 - s);
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = &nodes[x.0].value;
                if let Some(dx) = slot!(*x) {
                    for ((d, v), &inp) in dx.iter_mut().zip(g).zip(xv) {
                        if inp >= *lo && inp <= *hi {
                            *d += v;
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                if let Some(dx) = slot!(*x) {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |r: usize| (o * len + r) * inner + i;
                            let dot: f64 = (0..*len).map(|r| g[at(r)] * y[at(r)]).sum();
                            for r in 0..*len {
                                dx[at(r)] += y[at(r)] * (g[at(r)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat(xs) => {
                let total = cols_of(&node.shape);
                let rows = g.len() / total;
                let mut offset = 0;
                for x in xs {
                    let w = cols_of(&nodes[x.0].shape);
                    if let Some(dx) = slot!(*x) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            dx[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                if let Some(dx) = slot!(*x) {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SliceLast(x, start) => {
                let c = cols_of(&nodes[x.0].shape);
                let len = cols_of(&node.shape);
                if let Some(dx) = slot!(*x) {
                    for (dr, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        dr[*start..*start + len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let inv = 1.0 / *len as f64;
                if let Some(dx) = slot!(*x) {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for r in 0..*len {
                            let base = (o * len + r) * inner;
                            dx[base..base + inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, v)| *d += v * inv);
                        }
                    }
                }
            }
            Op::MaxAxis { x, argmax, .. } => {
                if let Some(dx) = slot!(*x) {
                    for (&src, v) in argmax.iter().zip(g) {
                        dx[src] += v;
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(dx) = slot!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Gather(x, idx) => {
                let w = g.len() / idx.len();
                if let Some(dx) = slot!(*x) {
                    for (r, &i) in idx.iter().enumerate() {
                        dx[i * w..(i + 1) * w]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::AttendHeads { w, v, heads } => {
                let sw = &nodes[w.0].shape;
                let (m, k, h) = (sw[0], sw[1], *heads);
                let d = nodes[v.0].shape[2];
                let dh = d / h;
                let (wv, vv) = (&nodes[w.0].value, &nodes[v.0].value);
                if let Some(dw) = slot!(*w) {
                    for i in 0..m {
                        let gi = &g[i * d..(i + 1) * d];
                        for j in 0..k {
                            let row = &vv[(i * k + j) * d..(i * k + j + 1) * d];
                            for t in 0..h {
                                let span = t * dh..(t + 1) * dh;
                                dw[(i * k + j) * h + t] += gi[span.clone()]
                                    .iter()
                                    .zip(&row[span])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(dv) = slot!(*v) {
                    for i in 0..m {
                        let gi = &g[i * d..(i + 1) * d];
                        for j in 0..k {
                            let base = (i * k + j) * d;
                            for t in 0..h {
                                let a = wv[(i * k + j) * h + t];
                                let span = t * dh..(t + 1) * dh;
                                dv[base + span.start..base + span.end]
                                    .iter_mut()
                                    .zip(&gi[span])
                                    .for_each(|(o, x)| *o += a * x);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = cols_of(&nodes[logits.0].shape);
                let scale = g[0] / labels.len() as f64;
                if let Some(dl) = slot!(*logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Vec<f64>], v: Var) -> Option<&'a mut Vec<f64>> {
    let target = &nodes[v.0];
    if !target.needs_grad {
        return None;
    }
    let buf = &mut grads[v.0];
    if buf.is_empty() {
        *buf = vec![0.0; target.value.len()];
    }
    Some(buf)
}

/// Adds `sign · g` into the gradient of `v`, copying when the slot is still empty.
fn accumulate(nodes: &[Node], grads: &mut [Vec<f64>], v: Var, g: &[f64], sign: f64) {
    if !nodes[v.0].needs_grad {
        return;
    }
    let buf = &mut grads[v.0];
    if buf.is_empty() {
        *buf = if sign == 1.0 {
            g.to_vec()
        } else {
            g.iter().map(|x| sign * x).collect()
        };
    } else {
        buf.iter_mut().zip(g).for_each(|(d, x)| *d += sign * x);
    }
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() || row.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax"));
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - mx);
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    Ok(())
}
