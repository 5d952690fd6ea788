use super::ops::{self, ConvGeom};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator identity, used for reporting and for gradient fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Relu,
    Exp,
    Sigmoid,
    Abs,
    Pow,
    Concat,
    Split,
    Reshape,
    Mean,
    SumAxis,
    Softmax,
    Matmul,
    Conv2d,
    L2NormalizeRows,
    IndexRows,
}

impl OpKind {
    /// Every operator with a backward rule.
    pub const DIFFERENTIABLE: [OpKind; 20] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::Sigmoid,
        OpKind::Abs,
        OpKind::Pow,
        OpKind::Concat,
        OpKind::Split,
        OpKind::Reshape,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::Softmax,
        OpKind::Matmul,
        OpKind::Conv2d,
        OpKind::L2NormalizeRows,
        OpKind::IndexRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Abs => "abs",
            OpKind::Pow => "pow",
            OpKind::Concat => "concat",
            OpKind::Split => "split",
            OpKind::Reshape => "reshape",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::Softmax => "softmax_axis",
            OpKind::Matmul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::IndexRows => "index_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        std::iter::once(OpKind::Leaf)
            .chain(Self::DIFFERENTIABLE)
            .find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    Abs(Var),
    Pow(Var, f64),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Mean(Var),
    SumAxis { input: Var, axis: usize },
    Softmax { input: Var, axis: usize },
    Matmul(Var, Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeom },
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    IndexRows { input: Var, rows: Vec<usize> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Abs(..) => OpKind::Abs,
            Op::Pow(..) => OpKind::Pow,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Split,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Mean(..) => OpKind::Mean,
            Op::SumAxis { .. } => OpKind::SumAxis,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::L2NormalizeRows { .. } => OpKind::L2NormalizeRows,
            Op::IndexRows { .. } => OpKind::IndexRows,
        }
    }
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Counters collected while recording.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TapeDiagnostics {
    /// Rows whose norm fell below the normalization floor.
    pub zero_norm_rows: usize,
}

/// Smallest norm used as a divisor by [`Tape::l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Define-by-run recording of a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    diagnostics: TapeDiagnostics,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Corrupt the backward rule of one operator (inputs receive 1.5× their
    /// true gradient). Only meant for negative controls of the gradient checker.
    pub fn with_fault(fault: Option<OpKind>) -> Self {
        Self {
            fault,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> &TapeDiagnostics {
        &self.diagnostics
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss w.r.t. `v` after [`Tape::backward`]. Nodes that
    /// require gradients but were unreachable from the loss report zeros.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// True when every recorded value and gradient is finite.
    pub fn all_finite(&self) -> bool {
        self.nodes.iter().all(|n| n.value.is_finite())
            && self
                .grads
                .iter()
                .flatten()
                .all(|g| g.iter().all(|x| x.is_finite()))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let shape = ops::broadcast_shape(name, self.shape(a), self.shape(b))?;
        let ma = ops::broadcast_map(self.shape(a), &shape);
        let mb = ops::broadcast_map(self.shape(b), &shape);
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(da[ops::at(&ma, i)], db[ops::at(&mb, i)])).collect();
        Ok(Tensor { shape, data })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), ops::sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// `x^p`. At `x = 0` with `p < 1` the backward rule uses 0.
    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Pow(a, p), |x| x.powf(p))
    }

    // ---- shape ---------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = ops::axis_extents(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { op: "split", axis, shape });
        }
        if sizes.iter().sum::<usize>() != shape[axis] || sizes.contains(&0) {
            return Err(TensorError::Invalid {
                op: "split",
                msg: format!("sizes {sizes:?} do not partition axis {axis} of {shape:?}"),
            });
        }
        let (outer, len, inner) = ops::axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &size in sizes {
            let mut piece_shape = shape.clone();
            piece_shape[axis] = size;
            let src = self.data(a);
            let mut data = Vec::with_capacity(outer * size * inner);
            for o in 0..outer {
                let from = (o * len + start) * inner;
                data.extend_from_slice(&src[from..from + size * inner]);
            }
            let t = Tensor { shape: piece_shape, data };
            out.push(self.push(t, Op::Slice { input: a, axis, start }, &[a]));
            start += size;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    // ---- reductions ----------------------------------------------------

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sum over one axis; the axis is dropped from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { op: "sum_axis", axis, shape });
        }
        let (outer, len, inner) = ops::axis_extents(&shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..][..inner];
                for (acc, x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let t = Tensor { shape: out_shape, data };
        Ok(self.push(t, Op::SumAxis { input: a, axis }, &[a]))
    }

    pub fn softmax_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { op: "softmax_axis", axis, shape });
        }
        let (outer, len, inner) = ops::axis_extents(&shape, axis);
        let mut data = vec![0.0; self.data(a).len()];
        ops::softmax(self.data(a), outer, len, inner, &mut data);
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::Softmax { input: a, axis }, &[a]))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        ops::gemm(m, k, n, self.data(a), false, self.data(b), false, 0.0, &mut data);
        let t = Tensor { shape: vec![m, n], data };
        Ok(self.push(t, Op::Matmul(a, b), &[a, b]))
    }

    /// Square-kernel cross-correlation. `input` is `C_in×H×W` or
    /// `B×C_in×H×W`; `weight` is `C_out×C_in×k×k`. Output keeps the input rank.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: si.clone(),
            rhs: sw.clone(),
        };
        let (batch, c_in, h, w) = match *si.as_slice() {
            [c, h, w] => (1, c, h, w),
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(mismatch()),
        };
        if sw.len() != 4 || sw[1] != c_in || sw[2] != sw[3] {
            return Err(mismatch());
        }
        let c_out = sw[0];
        let geom = ConvGeom::new(c_in, h, w, sw[2], stride, padding).ok_or_else(|| TensorError::Invalid {
            op: "conv2d",
            msg: format!("kernel {} stride {stride} padding {padding} does not fit {h}×{w}", sw[2]),
        })?;
        let (kp, p) = (geom.patch_len(), geom.out_pixels());
        let mut data = vec![0.0; batch * c_out * p];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kp * p] };
        let (x, wt) = (self.data(input), self.data(weight));
        for b in 0..batch {
            let img = &x[b * c_in * h * w..(b + 1) * c_in * h * w];
            let out = &mut data[b * c_out * p..(b + 1) * c_out * p];
            if geom.is_pointwise() {
                ops::gemm(c_out, kp, p, wt, false, img, false, 0.0, out);
            } else {
                ops::im2col(&geom, img, &mut col);
                ops::gemm(c_out, kp, p, wt, false, &col, false, 0.0, out);
            }
        }
        let shape = if si.len() == 3 {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::Conv2d { input, weight, geom }, &[input, weight]))
    }

    /// Scale every row of an `N×D` matrix to unit ℓ2 norm, dividing by
    /// `max(norm, 1e-12)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "l2_normalize_rows",
                msg: format!("expected a matrix, got shape {shape:?}"),
            });
        }
        let d = shape[1];
        let src = self.data(a);
        let mut data = Vec::with_capacity(src.len());
        let mut norms = Vec::with_capacity(shape[0]);
        let mut guarded = 0;
        for row in src.chunks(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < NORM_FLOOR {
                guarded += 1;
            }
            let n = norm.max(NORM_FLOOR);
            data.extend(row.iter().map(|x| x / n));
            norms.push(norm);
        }
        self.diagnostics.zero_norm_rows += guarded;
        let t = Tensor { shape, data };
        Ok(self.push(t, Op::L2NormalizeRows { input: a, norms }, &[a]))
    }

    /// Gather rows (slices along axis 0) by index; indices may repeat.
    pub fn index_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(TensorError::Invalid {
                op: "index_rows",
                msg: format!("rows {rows:?} invalid for shape {shape:?}"),
            });
        }
        let stride: usize = shape[1..].iter().product();
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&src[r * stride..(r + 1) * stride]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let t = Tensor { shape: out_shape, data };
        Ok(self.push(t, Op::IndexRows { input: a, rows: rows.to_vec() }, &[a]))
    }

    // ---- composites ----------------------------------------------------

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let m = self.mean(a);
        self.scale(m, n as f64)
    }

    /// Mean over one axis; the axis is dropped.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(a).get(axis).ok_or_else(|| TensorError::BadAxis {
            op: "mean_axis",
            axis,
            shape: self.shape(a).to_vec(),
        })?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    // ---- backward ------------------------------------------------------

    /// Propagate d(loss)/d(node) to every node that requires gradients.
    /// A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut contrib = self.input_grads(i, &g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                for (_, c) in contrib.iter_mut() {
                    c.iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            for (v, c) in contrib {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(c),
                }
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![0.0; node.value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient contributions of node `i` (with upstream gradient `g`) to
    /// each of its inputs that requires gradients.
    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if wants(v) {
                        res.push((v, self.reduce_broadcast(v, node.value.shape(), g, |_, gi| s * gi)));
                    }
                }
            }
            Op::Mul(a, b) => {
                let shape = node.value.shape();
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let mo = ops::broadcast_map(self.shape(other), shape);
                        let od = self.data(other);
                        res.push((v, self.reduce_broadcast(v, shape, g, |o, gi| gi * od[ops::at(&mo, o)])));
                    }
                }
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|x| c * x).collect())),
            Op::AddScalar(a) => res.push((*a, g.to_vec())),
            Op::Relu(a) => {
                let x = self.data(*a);
                res.push((*a, g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect()));
            }
            Op::Exp(a) => res.push((*a, g.iter().zip(out).map(|(gi, y)| gi * y).collect())),
            Op::Sigmoid(a) => res.push((*a, g.iter().zip(out).map(|(gi, s)| gi * s * (1.0 - s)).collect())),
            Op::Abs(a) => {
                let x = self.data(*a);
                let d = g.iter().zip(x).map(|(gi, &xi)| {
                    if xi > 0.0 {
                        *gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                res.push((*a, d.collect()));
            }
            Op::Pow(a, p) => {
                let x = self.data(*a);
                let d = g.iter().zip(x).map(|(gi, &xi)| {
                    if xi == 0.0 && *p < 1.0 {
                        0.0
                    } else {
                        gi * p * xi.powf(p - 1.0)
                    }
                });
                res.push((*a, d.collect()));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, len, inner) = ops::axis_extents(shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let size = self.shape(v)[*axis];
                    if wants(v) {
                        let mut d = Vec::with_capacity(outer * size * inner);
                        for o in 0..outer {
                            let from = (o * len + offset) * inner;
                            d.extend_from_slice(&g[from..from + size * inner]);
                        }
                        res.push((v, d));
                    }
                    offset += size;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = self.shape(*input);
                let (outer, len, inner) = ops::axis_extents(shape, *axis);
                let size = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let to = (o * len + start) * inner;
                    d[to..to + size * inner].copy_from_slice(&g[o * size * inner..(o + 1) * size * inner]);
                }
                res.push((*input, d));
            }
            Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                res.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::SumAxis { input, axis } => {
                let (outer, len, inner) = ops::axis_extents(self.shape(*input), *axis);
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        d.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                res.push((*input, d));
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = ops::axis_extents(node.value.shape(), *axis);
                let mut d = vec![0.0; out.len()];
                for o in 0..outer {
                    let base = o * len * inner;
                    for j in 0..inner {
                        let dot: f64 = (0..len).map(|l| g[base + l * inner + j] * out[base + l * inner + j]).sum();
                        for l in 0..len {
                            let k = base + l * inner + j;
                            d[k] = out[k] * (g[k] - dot);
                        }
                    }
                }
                res.push((*input, d));
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if wants(*a) {
                    let mut d = vec![0.0; m * k];
                    ops::gemm(m, n, k, g, false, self.data(*b), true, 0.0, &mut d);
                    res.push((*a, d));
                }
                if wants(*b) {
                    let mut d = vec![0.0; k * n];
                    ops::gemm(k, m, n, self.data(*a), true, g, false, 0.0, &mut d);
                    res.push((*b, d));
                }
            }
            Op::Conv2d { input, weight, geom } => {
                let c_out = self.shape(*weight)[0];
                let (kp, p) = (geom.patch_len(), geom.out_pixels());
                let img_len = geom.c_in * geom.h * geom.w;
                let x = self.data(*input);
                let wt = self.data(*weight);
                let batch = x.len() / img_len;
                let mut dw = wants(*weight).then(|| vec![0.0; c_out * kp]);
                let mut dx = wants(*input).then(|| vec![0.0; x.len()]);
                let mut col = vec![0.0; if geom.is_pointwise() { 0 } else { kp * p }];
                let mut dcol = vec![0.0; kp * p];
                for b in 0..batch {
                    let img = &x[b * img_len..(b + 1) * img_len];
                    let gb = &g[b * c_out * p..(b + 1) * c_out * p];
                    if let Some(dw) = dw.as_mut() {
                        let cols: &[f64] = if geom.is_pointwise() {
                            img
                        } else {
                            ops::im2col(geom, img, &mut col);
                            &col
                        };
                        ops::gemm(c_out, p, kp, gb, false, cols, true, 1.0, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dimg = &mut dx[b * img_len..(b + 1) * img_len];
                        if geom.is_pointwise() {
                            ops::gemm(kp, c_out, p, wt, true, gb, false, 0.0, dimg);
                        } else {
                            ops::gemm(kp, c_out, p, wt, true, gb, false, 0.0, &mut dcol);
                            ops::col2im(geom, &dcol, dimg);
                        }
                    }
                }
                if let Some(dx) = dx {
                    res.push((*input, dx));
                }
                if let Some(dw) = dw {
                    res.push((*weight, dw));
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let d = self.shape(*input)[1];
                let mut dx = Vec::with_capacity(out.len());
                for ((y, gr), &norm) in out.chunks(d).zip(g.chunks(d)).zip(norms) {
                    if norm < NORM_FLOOR {
                        dx.extend(gr.iter().map(|gi| gi / NORM_FLOOR));
                    } else {
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        dx.extend(y.iter().zip(gr).map(|(yi, gi)| (gi - yi * dot) / norm));
                    }
                }
                res.push((*input, dx));
            }
            Op::IndexRows { input, rows } => {
                let src = self.shape(*input);
                let stride: usize = src[1..].iter().product();
                let mut d = vec![0.0; src[0] * stride];
                for (k, &r) in rows.iter().enumerate() {
                    for (acc, gi) in d[r * stride..(r + 1) * stride].iter_mut().zip(&g[k * stride..]) {
                        *acc += gi;
                    }
                }
                res.push((*input, d));
            }
        }
        res
    }

    /// Sum `f(out_index, g[out_index])` back onto the (possibly broadcast)
    /// shape of `v`.
    fn reduce_broadcast(&self, v: Var, out_shape: &[usize], g: &[f64], f: impl Fn(usize, f64) -> f64) -> Vec<f64> {
        let map = ops::broadcast_map(self.shape(v), out_shape);
        let mut d = vec![0.0; self.nodes[v.0].value.numel()];
        for (o, &gi) in g.iter().enumerate() {
            d[ops::at(&map, o)] += f(o, gi);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_and_relu_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_slice(&[1.0, 2.0]));
        let b = tape.constant(Tensor::from_slice(&[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let x = tape.constant(Tensor::from_slice(&[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m_data: Vec<f64> = (0..9).map(|i| i as f64 * 1.5 - 3.0).collect();
        let m = tape.constant(t(&[3, 3], &m_data));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), m_data.as_slice());
    }

    #[test]
    fn sum_axis_values_and_shape() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let s = tape.sum_axis(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);
        let f = tape.constant(Tensor::zeros(&[3, 4, 5]));
        let h = tape.sum_axis(f, 1).unwrap();
        assert_eq!(tape.shape(h), &[3, 5]);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
        assert!(tape.sum_axis(f, 3).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_slice(&[0.0, 3f64.ln()]));
        let s = tape.softmax_axis(a, 0).unwrap();
        let v = tape.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        let c = tape.constant(Tensor::full(&[2, 4], 7.0));
        let s = tape.softmax_axis(c, 1).unwrap();
        assert!(tape.value(s).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_slice(&[0.0, 2.0, -2.0]));
        let s = tape.sigmoid(a);
        let v = tape.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_known_row_and_zero_guard() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[3.0, 4.0, 0.0, 0.0]));
        let n = tape.l2_normalize_rows(a).unwrap();
        assert_eq!(&tape.value(n).data()[..2], &[0.6, 0.8]);
        assert_eq!(&tape.value(n).data()[2..], &[0.0, 0.0]);
        assert_eq!(tape.diagnostics().zero_norm_rows, 1);
    }

    #[test]
    fn conv_identity_and_summation() {
        let mut tape = Tape::new();
        let x_data: Vec<f64> = (0..8).map(|i| i as f64 + 0.5).collect();
        let x = tape.constant(t(&[2, 2, 2], &x_data));
        let eye = tape.constant(t(&[2, 2, 1, 1], &[1., 0., 0., 1.]));
        let y = tape.conv2d(x, eye, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), x_data.as_slice());

        // one output channel, weights [w0, w1]: out[h,w] = w0 x[0,h,w] + w1 x[1,h,w]
        let w = tape.constant(t(&[1, 2, 1, 1], &[2.0, -0.5]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        let expected: Vec<f64> = (0..4).map(|p| 2.0 * x_data[p] - 0.5 * x_data[4 + p]).collect();
        assert_eq!(tape.value(y).data(), expected.as_slice());
    }

    #[test]
    fn conv3x3_all_ones_border_counts() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 4, 4]);
        assert_eq!(v.at(&[0, 0, 0]), 4.0);
        assert_eq!(v.at(&[0, 0, 2]), 6.0);
        assert_eq!(v.at(&[0, 1, 1]), 9.0);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[2, 2, 1, 1]));
        assert!(tape.conv2d(x, w, 1, 0).is_err());
    }

    #[test]
    fn backward_linear_and_sigmoid() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_slice(&[0.5, -1.0, 2.0]));
        let x = tape.constant(Tensor::from_slice(&[3.0, 4.0, 5.0]));
        let wx = tape.mul(w, x).unwrap();
        let loss = tape.sum(wx);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[3.0, 4.0, 5.0]);
        assert!(tape.grad(x).is_none());

        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_of_constant_is_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_slice(&[1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(3.0));
        let loss = tape.add_scalar(c, 1.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_slice(&[1.0, 2.0]));
        let r = tape.relu(w);
        assert!(matches!(tape.backward(r), Err(TensorError::NonScalarLoss(_))));
        let l = tape.mean(r);
        tape.backward(l).unwrap();
        assert_eq!(tape.backward(l), Err(TensorError::BackwardTwice));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let sq = tape.mul(w, w).unwrap();
        let y = tape.add(sq, w).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[7.0]);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 2, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(tape.value(c).data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let parts = tape.split(c, 1, &[1, 2]).unwrap();
        assert_eq!(tape.value(parts[0]), tape.value(a));
        assert_eq!(tape.value(parts[1]), tape.value(b));
        assert!(tape.split(c, 1, &[1, 1]).is_err());
    }

    #[test]
    fn pow_zero_base_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_slice(&[0.0, 4.0]));
        let y = tape.pow(x, 0.5);
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.25]);
        assert!(tape.all_finite());
    }

    #[test]
    fn op_names_roundtrip() {
        for k in OpKind::DIFFERENTIABLE {
            assert_eq!(OpKind::from_name(k.name()), Some(k));
        }
    }
}
