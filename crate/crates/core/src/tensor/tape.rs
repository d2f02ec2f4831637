use std::fmt;

use super::Tensor;
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the built-in primitive set.
///
/// `backward` returns one gradient per input, shaped like that input.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Tensor<T>;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Tensor<T>>;
}

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Log1p(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    MeanOverSet(Var, Vec<Vec<usize>>),
    CategoryMean(Var),
    /// Input, weight, bias and the rectified pre-mean activation.
    CategoryLayer(Var, Var, Var, Tensor<T>),
    NeighborMean(Var, usize),
    Concat(Vec<Var>),
    SliceLast(Var, usize),
    DiagGather(Var),
    TransposeLast2(Var),
    Reshape(Var),
    Expand(Var, usize, usize),
    Custom(Vec<Var>, Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every op's inputs precede it
/// and a single reverse sweep visits each node once.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when the node does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, materializing zeros when `v` is disconnected.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
}

fn lead_rows(shape: &[usize], last: usize) -> usize {
    if last == 0 {
        0
    } else {
        shape.iter().product::<usize>() / last
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input; gradients are reported for it.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Fixed input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    fn unary(&mut self, x: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let needs = self.needs(x);
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let needs = self.needs(a) || self.needs(b);
        self.push(value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e * s);
        self.unary(x, v, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|e| e + s);
        self.unary(x, v, Op::AddScalar(x))
    }

    /// `x[..., n] · w[n, p] -> [..., p]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        assert_eq!(ws.len(), 2, "matmul rhs must be 2-D, got {ws:?}");
        let (n, p) = (ws[0], ws[1]);
        assert_eq!(
            xs.last().copied().unwrap_or(1),
            n,
            "matmul inner dims: {xs:?} · {ws:?}"
        );
        let rows = lead_rows(xs, n);
        let mut shape = xs.to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        *shape.last_mut().unwrap() = p;
        let out = T::gemm_new(rows, n, p, self.value(x).data(), n as isize, 1, self.value(w).data(), p as isize, 1);
        self.binary(x, w, Tensor::new(shape, out), Op::MatMul(x, w))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let p = self.value(b).len();
        assert_eq!(self.value(x).last_dim(), p, "bias length mismatch");
        let mut v = self.value(x).clone();
        let bias = self.value(b).data();
        if p > 0 {
            for row in v.data_mut().chunks_mut(p) {
                for (e, &bb) in row.iter_mut().zip(bias) {
                    *e += bb;
                }
            }
        }
        self.binary(x, b, v, Op::AddBias(x, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { T::zero() });
        self.unary(x, v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| T::one() / (T::one() + (-e).exp()));
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn log1p(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.ln_1p());
        self.unary(x, v, Op::Log1p(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        self.unary(x, v, Op::Exp(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / T::of(t.len() as f64));
        self.unary(x, v, Op::Mean(x))
    }

    /// Means over index sets of the leading axis; an empty set yields zeros.
    pub fn mean_over_set(&mut self, x: Var, sets: Vec<Vec<usize>>) -> Var {
        let t = self.value(x);
        let n = t.shape().first().copied().unwrap_or(1);
        let row = if n == 0 { 0 } else { t.len() / n };
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        shape[0] = sets.len();
        let mut out = vec![T::zero(); sets.len() * row];
        for (s, set) in sets.iter().enumerate() {
            if set.is_empty() {
                continue;
            }
            let inv = T::one() / T::of(set.len() as f64);
            let dst = &mut out[s * row..(s + 1) * row];
            for &i in set {
                assert!(i < n, "set index {i} out of range {n}");
                for (d, &e) in dst.iter_mut().zip(&t.data()[i * row..(i + 1) * row]) {
                    *d += e * inv;
                }
            }
        }
        self.unary(x, Tensor::new(shape, out), Op::MeanOverSet(x, sets))
    }

    /// Relation-category mean over the two user axes of `[..., K, K, 4w]`.
    ///
    /// Feature block `c` of position `(k, j)` averages block `c` over the
    /// positions `(k', j')` in category `c + 1` relative to `(k, j)`: the
    /// position itself, same row, same column, and neither.
    pub fn category_mean(&mut self, x: Var) -> Var {
        let v = category_mean_kernel(self.value(x));
        self.unary(x, v, Op::CategoryMean(x))
    }

    /// `category_mean(relu(x · w + b))` as one node.
    pub fn category_layer(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        assert_eq!(ws.len(), 2, "category_layer weight must be 2-D, got {ws:?}");
        let (n, p) = (ws[0], ws[1]);
        assert_eq!(xs.last().copied(), Some(n), "category_layer inner dims: {xs:?} · {ws:?}");
        assert_eq!(self.value(b).len(), p, "bias length mismatch");
        let rows = lead_rows(xs, n);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = p;
        let bias = self.value(b).data();
        let mut z = Vec::with_capacity(rows * p);
        for _ in 0..rows {
            z.extend_from_slice(bias);
        }
        T::gemm(rows, n, p, self.value(x).data(), n as isize, 1, self.value(w).data(), p as isize, 1, T::one(), &mut z);
        let zero = T::zero();
        for e in z.iter_mut() {
            *e = if *e < zero { zero } else { *e };
        }
        let act = Tensor::new(shape, z);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        if !needs {
            let mut out = act;
            category_mean_in_place(&mut out);
            return self.push(out, Op::Constant, false);
        }
        let out = category_mean_kernel(&act);
        self.push(out, Op::CategoryLayer(x, w, b, act), needs)
    }

    /// For axis `axis` of length `n`, replaces each slice by the mean of the
    /// other `n - 1` slices (zeros when `n == 1`).
    pub fn neighbor_mean(&mut self, x: Var, axis: usize) -> Var {
        let v = neighbor_mean_kernel(self.value(x), axis);
        self.unary(x, v, Op::NeighborMean(x, axis))
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let first = self.value(xs[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                let s = self.value(v).shape();
                assert_eq!(&s[..s.len() - 1], lead, "concat leading shape mismatch");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let needs = xs.iter().any(|&v| self.needs(v));
        self.push(Tensor::new(shape, out), Op::Concat(xs.to_vec()), needs)
    }

    /// `x[..., start..start + len]` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let w = t.last_dim();
        assert!(start + len <= w, "slice {start}+{len} exceeds width {w}");
        let rows = lead_rows(t.shape(), w);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * w + start..r * w + start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.unary(x, Tensor::new(shape, out), Op::SliceLast(x, start))
    }

    /// `[..., K, K, f] -> [..., K, f]` picking the `(k, k)` entries.
    pub fn diag_gather(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        assert!(s.len() >= 3, "diag_gather needs [..., K, K, f], got {s:?}");
        let (k, k2, f) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
        assert_eq!(k, k2, "diag_gather over non-square {s:?}");
        let groups: usize = s[..s.len() - 3].iter().product();
        let mut out = Vec::with_capacity(groups * k * f);
        for g in 0..groups {
            for i in 0..k {
                let off = ((g * k + i) * k + i) * f;
                out.extend_from_slice(&t.data()[off..off + f]);
            }
        }
        let mut shape = s[..s.len() - 3].to_vec();
        shape.extend([k, f]);
        self.unary(x, Tensor::new(shape, out), Op::DiagGather(x))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let v = transpose_last2_kernel(self.value(x));
        self.unary(x, v, Op::TransposeLast2(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        self.unary(x, v, Op::Reshape(x))
    }

    /// Inserts a new axis of length `n` at position `axis`, repeating `x`.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Var {
        let t = self.value(x);
        let s = t.shape();
        assert!(axis <= s.len(), "expand axis {axis} beyond rank {}", s.len());
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &t.data()[o * inner..(o + 1) * inner];
            for _ in 0..n {
                out.extend_from_slice(src);
            }
        }
        let mut shape = s[..axis].to_vec();
        shape.push(n);
        shape.extend_from_slice(&s[axis..]);
        self.unary(x, Tensor::new(shape, out), Op::Expand(x, axis, n))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[Var]) -> Var {
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&vals)
        };
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, Op::Custom(inputs.to_vec(), op), needs)
    }

    /// Reverse sweep from a scalar output. Panics if `out` is not scalar.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(
            self.value(out).len(),
            1,
            "backward needs a scalar output, got shape {:?}",
            self.value(out).shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), T::one()));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, dg) in self.input_grads(node, &g) {
                if !self.needs(input) {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|e| -e))],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.zip_map(vb, |d, x| d * x)),
                    (*b, g.zip_map(va, |d, x| d * x)),
                ]
            }
            Op::Scale(x, s) => {
                let s = *s;
                vec![(*x, g.map(|e| e * s))]
            }
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::MatMul(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, p) = (vw.shape()[0], vw.shape()[1]);
                let rows = lead_rows(vx.shape(), n);
                let mut mut_out = Vec::new();
                if self.needs(*x) {
                    let dx = T::gemm_new(rows, p, n, g.data(), p as isize, 1, vw.data(), 1, p as isize);
                    mut_out.push((*x, Tensor::new(vx.shape().to_vec(), dx)));
                }
                if self.needs(*w) {
                    // xᵀ · g
                    let dw = T::gemm_new(n, rows, p, vx.data(), 1, n as isize, g.data(), p as isize, 1);
                    mut_out.push((*w, Tensor::new(vec![n, p], dw)));
                }
                mut_out
            }
            Op::AddBias(x, b) => {
                let p = self.value(*b).len();
                let mut db = vec![T::zero(); p];
                if p > 0 {
                    for row in g.data().chunks(p) {
                        for (d, &e) in db.iter_mut().zip(row) {
                            *d += e;
                        }
                    }
                }
                vec![
                    (*x, g.clone()),
                    (*b, Tensor::new(self.value(*b).shape().to_vec(), db)),
                ]
            }
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(self.value(*x), |d, e| if e > T::zero() { d } else { T::zero() }),
            )],
            Op::Sigmoid(x) => vec![(*x, g.zip_map(y, |d, s| d * s * (T::one() - s)))],
            Op::Log1p(x) => vec![(*x, g.zip_map(self.value(*x), |d, e| d / (T::one() + e)))],
            Op::Exp(x) => vec![(*x, g.zip_map(y, |d, e| d * e))],
            Op::Sum(x) => {
                let d = g.item();
                vec![(*x, Tensor::full(self.value(*x).shape(), d))]
            }
            Op::Mean(x) => {
                let vx = self.value(*x);
                let d = g.item() / T::of(vx.len() as f64);
                vec![(*x, Tensor::full(vx.shape(), d))]
            }
            Op::MeanOverSet(x, sets) => {
                let vx = self.value(*x);
                let n = vx.shape().first().copied().unwrap_or(1);
                let row = if n == 0 { 0 } else { vx.len() / n };
                let mut dx = Tensor::zeros(vx.shape());
                for (s, set) in sets.iter().enumerate() {
                    if set.is_empty() {
                        continue;
                    }
                    let inv = T::one() / T::of(set.len() as f64);
                    let src = &g.data()[s * row..(s + 1) * row];
                    for &i in set {
                        for (d, &e) in dx.data_mut()[i * row..(i + 1) * row].iter_mut().zip(src) {
                            *d += e * inv;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            // both averaging operators are symmetric, so the adjoint reuses the kernel
            Op::CategoryMean(x) => vec![(*x, category_mean_kernel(g))],
            Op::NeighborMean(x, axis) => vec![(*x, neighbor_mean_kernel(g, *axis))],
            Op::CategoryLayer(x, w, b, act) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, p) = (vw.shape()[0], vw.shape()[1]);
                let rows = lead_rows(vx.shape(), n);
                let mut gz = category_mean_kernel(g);
                let zero = T::zero();
                for (d, &a) in gz.data_mut().iter_mut().zip(act.data()) {
                    *d = if a > zero { *d } else { zero };
                }
                let mut out = Vec::with_capacity(3);
                if self.needs(*x) {
                    let dx = T::gemm_new(rows, p, n, gz.data(), p as isize, 1, vw.data(), 1, p as isize);
                    out.push((*x, Tensor::new(vx.shape().to_vec(), dx)));
                }
                if self.needs(*w) {
                    let dw = T::gemm_new(n, rows, p, vx.data(), 1, n as isize, gz.data(), p as isize, 1);
                    out.push((*w, Tensor::new(vec![n, p], dw)));
                }
                if self.needs(*b) {
                    let mut db = vec![zero; p];
                    for row in gz.data().chunks_exact(p) {
                        for (d, &e) in db.iter_mut().zip(row) {
                            *d += e;
                        }
                    }
                    out.push((*b, Tensor::new(self.value(*b).shape().to_vec(), db)));
                }
                out
            }
            Op::Concat(xs) => {
                let total = g.last_dim();
                let rows = lead_rows(g.shape(), total);
                let mut off = 0;
                xs.iter()
                    .map(|&v| {
                        let s = self.value(v).shape().to_vec();
                        let w = s[s.len() - 1];
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        off += w;
                        (v, Tensor::new(s, d))
                    })
                    .collect()
            }
            Op::SliceLast(x, start) => {
                let vx = self.value(*x);
                let w = vx.last_dim();
                let len = g.last_dim();
                let rows = lead_rows(vx.shape(), w);
                let mut dx = Tensor::zeros(vx.shape());
                for r in 0..rows {
                    dx.data_mut()[r * w + start..r * w + start + len]
                        .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![(*x, dx)]
            }
            Op::DiagGather(x) => {
                let vx = self.value(*x);
                let s = vx.shape();
                let (k, f) = (s[s.len() - 2], s[s.len() - 1]);
                let groups: usize = s[..s.len() - 3].iter().product();
                let mut dx = Tensor::zeros(s);
                for gi in 0..groups {
                    for i in 0..k {
                        let off = ((gi * k + i) * k + i) * f;
                        let src = ((gi * k) + i) * f;
                        dx.data_mut()[off..off + f].copy_from_slice(&g.data()[src..src + f]);
                    }
                }
                vec![(*x, dx)]
            }
            Op::TransposeLast2(x) => vec![(*x, transpose_last2_kernel(g))],
            Op::Reshape(x) => vec![(*x, g.clone().reshaped(self.value(*x).shape()))],
            Op::Expand(x, axis, n) => {
                let vx = self.value(*x);
                let s = vx.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis..].iter().product();
                let mut dx = Tensor::zeros(s);
                for o in 0..outer {
                    let dst = &mut dx.data_mut()[o * inner..(o + 1) * inner];
                    for m in 0..*n {
                        let src = &g.data()[(o * n + m) * inner..(o * n + m + 1) * inner];
                        for (d, &e) in dst.iter_mut().zip(src) {
                            *d += e;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&vals, y, g);
                assert_eq!(grads.len(), inputs.len(), "{} returned wrong gradient count", op.name());
                inputs.iter().copied().zip(grads).collect()
            }
        }
    }
}

fn transpose_last2_kernel<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    assert!(s.len() >= 2, "transpose needs rank ≥ 2");
    let (a, b) = (s[s.len() - 2], s[s.len() - 1]);
    let groups: usize = s[..s.len() - 2].iter().product();
    let mut out = vec![T::zero(); t.len()];
    for g in 0..groups {
        let base = g * a * b;
        for i in 0..a {
            for j in 0..b {
                out[base + j * a + i] = t.data()[base + i * b + j];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

fn neighbor_mean_kernel<T: Scalar>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let s = t.shape();
    assert!(axis < s.len(), "neighbor_mean axis out of range");
    let n = s[axis];
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = Tensor::zeros(s);
    if n < 2 {
        return out;
    }
    let inv = T::one() / T::of((n - 1) as f64);
    let mut total = vec![T::zero(); inner];
    for o in 0..outer {
        let block = &t.data()[o * n * inner..(o + 1) * n * inner];
        total.iter_mut().for_each(|x| *x = T::zero());
        for slice in block.chunks(inner) {
            for (acc, &e) in total.iter_mut().zip(slice) {
                *acc += e;
            }
        }
        let dst = &mut out.data_mut()[o * n * inner..(o + 1) * n * inner];
        for (d_slice, s_slice) in dst.chunks_mut(inner).zip(block.chunks(inner)) {
            for ((d, &e), &tot) in d_slice.iter_mut().zip(s_slice).zip(&total) {
                *d = (tot - e) * inv;
            }
        }
    }
    out
}

fn category_mean_kernel<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = t.clone();
    category_mean_in_place(&mut out);
    out
}

/// Category means of `[..., K, K, 4w]`, overwriting the input.
fn category_mean_in_place<T: Scalar>(t: &mut Tensor<T>) {
    let s = t.shape();
    assert!(s.len() >= 3, "category_mean needs [..., K, K, 4w], got {s:?}");
    let (k, k2, f) = (s[s.len() - 3], s[s.len() - 2], s[s.len() - 1]);
    assert_eq!(k, k2, "category_mean over non-square {s:?}");
    assert_eq!(f % 4, 0, "category_mean feature width {f} not a multiple of 4");
    let w = f / 4;
    if t.is_empty() || w == 0 {
        return;
    }
    // fixed block widths let the per-cell loops unroll
    match w {
        8 => category_blocks::<T, 8>(t.data_mut(), k, w),
        16 => category_blocks::<T, 16>(t.data_mut(), k, w),
        _ => category_blocks::<T, 0>(t.data_mut(), k, w),
    }
}

/// `W` is the block width when nonzero, else `w` is used.
fn category_blocks<T: Scalar, const W: usize>(data: &mut [T], k: usize, w: usize) {
    let w = if W == 0 { w } else { W };
    let f = 4 * w;
    let zero = T::zero();
    let (inv1, inv2) = if k > 1 {
        let m = T::of((k - 1) as f64);
        (T::one() / m, T::one() / (m * m))
    } else {
        (zero, zero)
    };
    // row totals of blocks 2 and 4, column totals of blocks 3 and 4
    let mut row = vec![zero; k * 2 * w];
    let mut col = vec![zero; k * 2 * w];
    let mut all = vec![zero; w];
    let add = |acc: &mut [T], x: &[T]| acc.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
    for block in data.chunks_exact_mut(k * k * f) {
        row.fill(zero);
        col.fill(zero);
        all.fill(zero);
        for (cells, r) in block.chunks_exact(k * f).zip(row.chunks_exact_mut(2 * w)) {
            let (r2, r4) = r.split_at_mut(w);
            for (cell, c) in cells.chunks_exact(f).zip(col.chunks_exact_mut(2 * w)) {
                add(r2, &cell[w..2 * w]);
                add(r4, &cell[3 * w..]);
                add(c, &cell[2 * w..]);
            }
            add(&mut all, r4);
        }
        for (cells, r) in block.chunks_exact_mut(k * f).zip(row.chunks_exact(2 * w)) {
            let (r2, r4) = r.split_at(w);
            for (cell, c) in cells.chunks_exact_mut(f).zip(col.chunks_exact(2 * w)) {
                let (c3, c4) = c.split_at(w);
                let (_, x) = cell.split_at_mut(w);
                let (x2, x) = x.split_at_mut(w);
                let (x3, x4) = x.split_at_mut(w);
                for (o, &r) in x2.iter_mut().zip(r2) {
                    *o = (r - *o) * inv1;
                }
                for (o, &c) in x3.iter_mut().zip(c3) {
                    *o = (c - *o) * inv1;
                }
                for (((o, &a), &r), &c) in x4.iter_mut().zip(&all).zip(r4).zip(c4) {
                    *o = (a - r - c + *o) * inv2;
                }
            }
        }
    }
}
