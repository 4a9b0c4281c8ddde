//! Reverse-mode differentiation on a Wengert list.
//!
//! Every operation appends a node to the [`Tape`]; node indices are therefore a
//! topological order and `backward` walks them in reverse. Gradients of
//! intermediate nodes live only for the duration of one `backward` call, leaf
//! gradients accumulate until [`Tape::zero_grad`].

use super::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise function applied by [`Tape::unary`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Exp,
    Log,
    /// `ln(1 + e^x)`, evaluated without overflow.
    Softplus,
    Scale(f64),
    AddScalar(f64),
    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Reduce {
        kind: Reduce,
        input: Var,
        axis: Option<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    L2Norm(Var),
    RowNorms(Var),
    SegmentSoftmax {
        input: Var,
        segments: Vec<usize>,
    },
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    SegmentSum {
        input: Var,
        segments: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row count and row width of a tensor viewed as a list of rows.
fn rows_of(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [n] => Some((*n, 1)),
        [n, c] => Some((*n, *c)),
        _ => None,
    }
}

struct Broadcast {
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Broadcast {
    #[inline]
    fn index(dims: (usize, usize), r: usize, c: usize) -> usize {
        let rr = if dims.0 == 1 { 0 } else { r };
        let cc = if dims.1 == 1 { 0 } else { c };
        rr * dims.1 + cc
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad())
    }

    fn derived(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let rg = self.needs_grad(parents);
        let mut t = Tensor::new(shape, values, rg).expect("operation produced consistent shape");
        t.set_requires_grad(rg);
        self.push(t, op)
    }

    /// Registers a tensor as a leaf. Gradients are recorded for it when its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn values(&self, var: Var) -> &[f64] {
        self.nodes[var.0].value.values()
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Gradient accumulated on a leaf by previous `backward` calls.
    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes[var.0].value.grad()
    }

    pub fn take_grad(&mut self, var: Var) -> Option<Vec<f64>> {
        self.nodes[var.0].value.grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let arow = &av[i * k..(i + 1) * k];
            let mut p = 0;
            while p + 4 <= k {
                let x = [arow[p], arow[p + 1], arow[p + 2], arow[p + 3]];
                if x != [0.0; 4] {
                    let b0 = &bv[p * n..(p + 1) * n];
                    let b1 = &bv[(p + 1) * n..(p + 2) * n];
                    let b2 = &bv[(p + 2) * n..(p + 3) * n];
                    let b3 = &bv[(p + 3) * n..(p + 4) * n];
                    for ((((o, y0), y1), y2), y3) in row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
                    {
                        *o += x[0] * y0 + x[1] * y1 + x[2] * y2 + x[3] * y3;
                    }
                }
                p += 4;
            }
            for p in p..k {
                let x = arow[p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Broadcast, Vec<usize>), TensorError> {
        let ta = self.value(a);
        let tb = self.value(b);
        let mismatch = || TensorError::ShapeMismatch {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let (da, db) = match (ta.as_2d(), tb.as_2d()) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(mismatch()),
        };
        let dim = |x: usize, y: usize| {
            if x == y || y == 1 {
                Some(x)
            } else if x == 1 {
                Some(y)
            } else {
                None
            }
        };
        let rows = dim(da.0, db.0).ok_or_else(mismatch)?;
        let cols = dim(da.1, db.1).ok_or_else(mismatch)?;
        let n = rows * cols;
        let shape = if ta.len() == n {
            ta.shape().to_vec()
        } else if tb.len() == n {
            tb.shape().to_vec()
        } else {
            vec![rows, cols]
        };
        Ok((
            Broadcast {
                rows,
                cols,
                a: da,
                b: db,
            },
            shape,
        ))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (bc, shape) = self.broadcast(name, a, b)?;
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = Vec::with_capacity(bc.rows * bc.cols);
        for r in 0..bc.rows {
            for c in 0..bc.cols {
                let x = av[Broadcast::index(bc.a, r, c)];
                let y = bv[Broadcast::index(bc.b, r, c)];
                out.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        Ok(self.derived(shape, out, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var, TensorError> {
        let xv = self.values(x);
        let out: Vec<f64> = match kind {
            Unary::Relu => xv.iter().map(|v| v.max(0.0)).collect(),
            Unary::LeakyRelu(alpha) => xv
                .iter()
                .map(|&v| if v > 0.0 { v } else { alpha * v })
                .collect(),
            Unary::Sigmoid => xv.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Exp => xv.iter().map(|v| v.exp()).collect(),
            Unary::Log => {
                if let Some(&bad) = xv.iter().find(|v| !(**v > 0.0)) {
                    return Err(TensorError::LogDomain(bad));
                }
                xv.iter().map(|v| v.ln()).collect()
            }
            Unary::Softplus => xv.iter().map(|&v| softplus(v)).collect(),
            Unary::Scale(c) => xv.iter().map(|v| v * c).collect(),
            Unary::AddScalar(c) => xv.iter().map(|v| v + c).collect(),
            Unary::ClampMin(floor) => xv.iter().map(|v| v.max(floor)).collect(),
        };
        let shape = self.shape(x).to_vec();
        Ok(self.derived(shape, out, Op::Unary(kind, x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var, TensorError> {
        self.unary(Unary::LeakyRelu(alpha), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Log, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var, TensorError> {
        self.unary(Unary::ClampMin(floor), x)
    }

    /// Sum or mean over one axis (removing it), or over everything when
    /// `axis` is `None`.
    pub fn reduce(
        &mut self,
        x: Var,
        kind: Reduce,
        axis: Option<usize>,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let xv = self.values(x);
        let (out_shape, out) = match axis {
            None => {
                if kind == Reduce::Mean && xv.is_empty() {
                    return Err(TensorError::EmptyInput("mean"));
                }
                let s = compensated_sum(xv);
                let v = match kind {
                    Reduce::Sum => s,
                    Reduce::Mean => s / xv.len() as f64,
                };
                (Vec::new(), vec![v])
            }
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(TensorError::InvalidAxis {
                        op: "reduce",
                        axis: ax,
                        shape,
                    });
                }
                let (outer, n, inner) = split_axis(&shape, ax);
                if kind == Reduce::Mean && n == 0 {
                    return Err(TensorError::EmptyInput("mean"));
                }
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let base = (o * n + j) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += xv[base + i];
                        }
                    }
                }
                if kind == Reduce::Mean {
                    let inv = 1.0 / n as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                let mut s = shape.clone();
                s.remove(ax);
                (s, out)
            }
        };
        Ok(self.derived(
            out_shape,
            out,
            Op::Reduce {
                kind,
                input: x,
                axis,
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, Reduce::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        self.reduce(x, Reduce::Mean, axis)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or(TensorError::EmptyInput("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let vals = self.values(v);
                out.extend_from_slice(&vals[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.derived(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Euclidean norm of all values as a scalar. The gradient at the origin is
    /// taken as zero.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.values(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(self.derived(Vec::new(), vec![n], Op::L2Norm(x), &[x]))
    }

    /// Euclidean norm of every row of a 2-D tensor, shape `[rows]`.
    pub fn row_norms(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => {
                return Err(TensorError::InvalidArgument {
                    op: "row_norms",
                    detail: format!("expected a 2-D tensor, got shape {s:?}"),
                })
            }
        };
        let xv = self.values(x);
        let out = (0..r)
            .map(|i| {
                xv[i * c..(i + 1) * c]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(self.derived(vec![r], out, Op::RowNorms(x), &[x]))
    }

    /// Softmax within each group of entries sharing a segment id, stabilized
    /// by subtracting the group maximum.
    pub fn segment_softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var, TensorError> {
        let xv = self.values(x);
        if xv.is_empty() {
            return Err(TensorError::EmptyInput("segment_softmax"));
        }
        if self.shape(x).len() != 1 || segments.len() != xv.len() {
            return Err(TensorError::InvalidArgument {
                op: "segment_softmax",
                detail: format!(
                    "expected a 1-D tensor with one segment id per entry, got shape {:?} and {} ids",
                    self.shape(x),
                    segments.len()
                ),
            });
        }
        let nseg = segments.iter().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; nseg];
        for (&v, &s) in xv.iter().zip(segments) {
            if v > max[s] {
                max[s] = v;
            }
        }
        let mut denom = vec![0.0; nseg];
        let mut out: Vec<f64> = xv
            .iter()
            .zip(segments)
            .map(|(&v, &s)| {
                let e = (v - max[s]).exp();
                denom[s] += e;
                e
            })
            .collect();
        for (o, &s) in out.iter_mut().zip(segments) {
            *o /= denom[s];
        }
        let n = out.len();
        Ok(self.derived(
            vec![n],
            out,
            Op::SegmentSoftmax {
                input: x,
                segments: segments.to_vec(),
            },
            &[x],
        ))
    }

    /// Selects rows (or entries of a 1-D tensor) by index.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (n, width) = rows_of(&shape).ok_or_else(|| TensorError::InvalidArgument {
            op: "gather_rows",
            detail: format!("expected a 1-D or 2-D tensor, got shape {shape:?}"),
        })?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {n} rows"),
            });
        }
        let xv = self.values(x);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&xv[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        Ok(self.derived(
            out_shape,
            out,
            Op::GatherRows {
                input: x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Sums rows into `num_segments` buckets; empty buckets are zero rows.
    pub fn segment_sum(
        &mut self,
        x: Var,
        segments: &[usize],
        num_segments: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let (n, width) = rows_of(&shape).ok_or_else(|| TensorError::InvalidArgument {
            op: "segment_sum",
            detail: format!("expected a 1-D or 2-D tensor, got shape {shape:?}"),
        })?;
        if segments.len() != n || segments.iter().any(|&s| s >= num_segments) {
            return Err(TensorError::InvalidArgument {
                op: "segment_sum",
                detail: format!(
                    "{} segment ids for {n} rows into {num_segments} buckets",
                    segments.len()
                ),
            });
        }
        let xv = self.values(x);
        let mut out = vec![0.0; num_segments * width];
        for (r, &s) in segments.iter().enumerate() {
            let dst = &mut out[s * width..(s + 1) * width];
            for (o, v) in dst.iter_mut().zip(&xv[r * width..(r + 1) * width]) {
                *o += v;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = num_segments;
        Ok(self.derived(
            out_shape,
            out,
            Op::SegmentSum {
                input: x,
                segments: segments.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.values(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let values = self.values(x).to_vec();
        Ok(self.derived(shape, values, Op::Reshape(x), &[x]))
    }

    /// Accumulates `d loss / d leaf` into every reachable leaf that requires a
    /// gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.requires_grad() {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.values();
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].value.requires_grad();
        // Lazily allocated gradient slot of a parent.
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.values(*a), self.values(*b));
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = ta.as_2d().expect("checked at construction");
                let db = tb.as_2d().expect("checked at construction");
                let (av, bv) = (ta.values(), tb.values());
                let rows = da.0.max(db.0);
                let cols = da.1.max(db.1);
                let (wa, wb) = (wants(*a), wants(*b));
                if wa {
                    let ga = slot(grads, *a, av.len());
                    for r in 0..rows {
                        for c in 0..cols {
                            let o = r * cols + c;
                            let ia = Broadcast::index(da, r, c);
                            let ib = Broadcast::index(db, r, c);
                            ga[ia] += match kind {
                                Binary::Add | Binary::Sub => g[o],
                                Binary::Mul => g[o] * bv[ib],
                                Binary::Div => g[o] / bv[ib],
                            };
                        }
                    }
                }
                if wb {
                    let gb = slot(grads, *b, bv.len());
                    for r in 0..rows {
                        for c in 0..cols {
                            let o = r * cols + c;
                            let ia = Broadcast::index(da, r, c);
                            let ib = Broadcast::index(db, r, c);
                            gb[ib] += match kind {
                                Binary::Add => g[o],
                                Binary::Sub => -g[o],
                                Binary::Mul => g[o] * av[ia],
                                Binary::Div => -g[o] * av[ia] / (bv[ib] * bv[ib]),
                            };
                        }
                    }
                }
            }
            Op::Unary(kind, x) => {
                if !wants(*x) {
                    return;
                }
                let xv = self.values(*x);
                let gx = slot(grads, *x, xv.len());
                for j in 0..xv.len() {
                    let v = xv[j];
                    let d = match kind {
                        Unary::Relu => {
                            if v > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::LeakyRelu(alpha) => {
                            if v > 0.0 {
                                1.0
                            } else {
                                *alpha
                            }
                        }
                        Unary::Sigmoid => out[j] * (1.0 - out[j]),
                        Unary::Exp => out[j],
                        Unary::Log => 1.0 / v,
                        Unary::Softplus => sigmoid(v),
                        Unary::Scale(c) => *c,
                        Unary::AddScalar(_) => 1.0,
                        Unary::ClampMin(floor) => {
                            if v > *floor {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    gx[j] += g[j] * d;
                }
            }
            Op::Reduce { kind, input, axis } => {
                if !wants(*input) {
                    return;
                }
                let shape = self.shape(*input);
                let len = self.values(*input).len();
                let gx = slot(grads, *input, len);
                match axis {
                    None => {
                        let d = match kind {
                            Reduce::Sum => g[0],
                            Reduce::Mean => g[0] / len as f64,
                        };
                        gx.iter_mut().for_each(|v| *v += d);
                    }
                    Some(ax) => {
                        let (outer, n, inner) = split_axis(shape, *ax);
                        let scale = match kind {
                            Reduce::Sum => 1.0,
                            Reduce::Mean => 1.0 / n as f64,
                        };
                        for o in 0..outer {
                            for j in 0..n {
                                let base = (o * n + j) * inner;
                                for k in 0..inner {
                                    gx[base + k] += g[o * inner + k] * scale;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if wants(v) {
                        let len = self.values(v).len();
                        let gv = slot(grads, v, len);
                        for o in 0..outer {
                            let src =
                                &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, s) in gv[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src)
                            {
                                *d += s;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::L2Norm(x) => {
                if !wants(*x) {
                    return;
                }
                let norm = out[0];
                let xv = self.values(*x);
                let gx = slot(grads, *x, xv.len());
                if norm > 0.0 {
                    for (d, v) in gx.iter_mut().zip(xv) {
                        *d += g[0] * v / norm;
                    }
                }
            }
            Op::RowNorms(x) => {
                if !wants(*x) {
                    return;
                }
                let c = self.shape(*x)[1];
                let xv = self.values(*x);
                let gx = slot(grads, *x, xv.len());
                for (r, &norm) in out.iter().enumerate() {
                    if norm > 0.0 {
                        for k in r * c..(r + 1) * c {
                            gx[k] += g[r] * xv[k] / norm;
                        }
                    }
                }
            }
            Op::SegmentSoftmax { input, segments } => {
                if !wants(*input) {
                    return;
                }
                let nseg = segments.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; nseg];
                for ((&y, &gy), &s) in out.iter().zip(g).zip(segments) {
                    dot[s] += y * gy;
                }
                let gx = slot(grads, *input, out.len());
                for j in 0..out.len() {
                    gx[j] += out[j] * (g[j] - dot[segments[j]]);
                }
            }
            Op::GatherRows { input, index } => {
                if !wants(*input) {
                    return;
                }
                let shape = self.shape(*input);
                let (_, width) = rows_of(shape).expect("checked at construction");
                let len = self.values(*input).len();
                let gx = slot(grads, *input, len);
                for (r, &i) in index.iter().enumerate() {
                    for k in 0..width {
                        gx[i * width + k] += g[r * width + k];
                    }
                }
            }
            Op::SegmentSum { input, segments } => {
                if !wants(*input) {
                    return;
                }
                let shape = self.shape(*input);
                let (_, width) = rows_of(shape).expect("checked at construction");
                let len = self.values(*input).len();
                let gx = slot(grads, *input, len);
                for (r, &s) in segments.iter().enumerate() {
                    for k in 0..width {
                        gx[r * width + k] += g[s * width + k];
                    }
                }
            }
            Op::Reshape(x) => {
                if !wants(*x) {
                    return;
                }
                let gx = slot(grads, *x, g.len());
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + carry
}
