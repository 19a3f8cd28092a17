//! Reverse-mode gradient tape over dense tensors.
//!
//! A [`Graph`] records every executed operation; [`Graph::backward`] walks the
//! tape in reverse creation order and accumulates gradients additively into
//! each node. Parameters registered through [`Graph::param`] are deduplicated
//! per graph so their gradients can be collected back into a
//! [`ParamStore`](crate::optim::ParamStore) after backward.
//!
//! Broadcasting is deliberately limited to scalar-with-tensor; every other
//! shape must match exactly and a mismatch is a fatal error naming the op.

use std::collections::HashMap;

use crate::optim::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Stabilizer for cosine and row-normalization denominators.
pub fn cosine_eps<F: Scalar>() -> F {
    F::from_f64_lit(1e-12)
}

/// Handle to a node on the tape. Cheap to copy; only valid for the graph that
/// created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<F: Scalar> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Matmul(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    StackScalars(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize, usize),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    L2Norm(Var),
    Cosine(Var, Var),
    NormalizeRows(Var),
    ScaleRows(Var, Var),
    AddRow(Var, Var),
    SoftmaxXent(Var, Vec<usize>),
    Mse(Var, Var),
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, v: F) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Differentiable input that is not a stored parameter (tests, probes).
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Registers a parameter from the store, snapshotting its current value.
    /// Repeated registration of the same id returns the same node so all
    /// gradient paths accumulate together.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), true, Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient; populated by [`Graph::backward`] for leaves and
    /// parameters only.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Re-enters a node's current value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ---- elementwise binary ----

    fn binary(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let value = if av.shape() == bv.shape() {
            av.zip(bv, &f)
        } else if av.numel() == 1 {
            let s = av.data()[0];
            bv.map(|x| f(s, x))
        } else if bv.numel() == 1 {
            let s = bv.data()[0];
            av.map(|x| f(x, s))
        } else {
            panic!("{name}: shape mismatch {:?} vs {:?}", av.shape(), bv.shape());
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let rg = self.rg(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul_nn(&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, rg, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.transpose2();
        let rg = self.rg(a);
        self.push(value, rg, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "concat_rows: empty input");
        let cols = self.nodes[vars[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in vars {
            let t = &self.nodes[v.0].value;
            assert_eq!(
                t.cols(),
                cols,
                "concat_rows: column mismatch {:?} vs {} cols",
                t.shape(),
                cols
            );
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = vars.iter().any(|&v| self.rg(v));
        self.push(Tensor::matrix(rows, cols, data), rg, Op::ConcatRows(vars.to_vec()))
    }

    /// Stacks scalar nodes into a length-k vector.
    pub fn stack_scalars(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty(), "stack_scalars: empty input");
        let mut data = Vec::with_capacity(vars.len());
        for &v in vars {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.numel(), 1, "stack_scalars: non-scalar input of shape {:?}", t.shape());
            data.push(t.data()[0]);
        }
        let rg = vars.iter().any(|&v| self.rg(v));
        self.push(Tensor::new(vec![vars.len()], data), rg, Op::StackScalars(vars.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            assert!(i < r, "gather_rows: index {i} out of range for {r} rows");
            data.extend_from_slice(t.row_slice(i));
        }
        let rg = self.rg(a);
        self.push(
            Tensor::matrix(indices.len(), c, data),
            rg,
            Op::GatherRows(a, indices.to_vec()),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        assert!(
            start + len <= r,
            "slice_rows: range {start}..{} out of bounds for {r} rows",
            start + len
        );
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        self.push(Tensor::matrix(len, c, data), rg, Op::SliceRows(a, start, len))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = &self.nodes[a.0].value;
        assert_eq!(
            t.numel(),
            shape.iter().product::<usize>(),
            "reshape: {:?} incompatible with {:?}",
            t.shape(),
            shape
        );
        let value = Tensor::new(shape, t.data().to_vec());
        let rg = self.rg(a);
        self.push(value, rg, Op::Reshape(a))
    }

    // ---- pointwise nonlinearities ----

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| F::one() / (F::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, rg, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(value, rg, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.exp());
        let rg = self.rg(a);
        self.push(value, rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| x.ln());
        let rg = self.rg(a);
        self.push(value, rg, Op::Log(a))
    }

    // ---- reductions ----

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let n = F::from_f64_lit(t.numel() as f64);
        let s: F = t.data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s / n), rg, Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].value.data().iter().map(|&x| x * x).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s.sqrt()), rg, Op::L2Norm(a))
    }

    // ---- similarity ----

    /// cos(a, b) = dot / (‖a‖‖b‖ + εc) over flattened elements. Always within
    /// [−1, 1]. The gradient is defined as zero at an exactly zero vector;
    /// callers substitute constants there.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            av.numel(),
            bv.numel(),
            "cosine: length mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let dot: F = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).sum();
        let na = av.data().iter().map(|&x| x * x).sum::<F>().sqrt();
        let nb = bv.data().iter().map(|&x| x * x).sum::<F>().sqrt();
        let value = dot / (na * nb + cosine_eps::<F>());
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(value), rg, Op::Cosine(a, b))
    }

    /// Divides each row by (‖row‖ + εc).
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let n = row.iter().map(|&x| x * x).sum::<F>().sqrt() + cosine_eps::<F>();
            data.extend(row.iter().map(|&x| x / n));
        }
        let rg = self.rg(a);
        self.push(Tensor::matrix(r, c, data), rg, Op::NormalizeRows(a))
    }

    /// Multiplies row i of `mat` by element i of the length-r vector `col`.
    pub fn scale_rows(&mut self, mat: Var, col: Var) -> Var {
        let (m, cv) = (&self.nodes[mat.0].value, &self.nodes[col.0].value);
        let (r, c) = (m.rows(), m.cols());
        assert_eq!(
            cv.numel(),
            r,
            "scale_rows: {} scales for {:?}",
            cv.numel(),
            m.shape()
        );
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let s = cv.data()[i];
            data.extend(m.row_slice(i).iter().map(|&x| x * s));
        }
        let rg = self.rg(mat) || self.rg(col);
        self.push(Tensor::matrix(r, c, data), rg, Op::ScaleRows(mat, col))
    }

    /// Adds the length-c vector `row` to every row of `mat` (bias broadcast).
    pub fn add_row(&mut self, mat: Var, row: Var) -> Var {
        let (m, rv) = (&self.nodes[mat.0].value, &self.nodes[row.0].value);
        let (r, c) = (m.rows(), m.cols());
        assert_eq!(rv.numel(), c, "add_row: {} bias terms for {:?}", rv.numel(), m.shape());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(m.row_slice(i).iter().zip(rv.data()).map(|(&x, &b)| x + b));
        }
        let rg = self.rg(mat) || self.rg(row);
        self.push(Tensor::matrix(r, c, data), rg, Op::AddRow(mat, row))
    }

    // ---- losses ----

    /// Per-row softmax cross-entropy of `logits` [B, n] against `targets`
    /// (one class index per row), returned as a length-B vector.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Var {
        let t = &self.nodes[logits.0].value;
        let (b, n) = (t.rows(), t.cols());
        assert_eq!(
            targets.len(),
            b,
            "softmax_xent: {} targets for {:?}",
            targets.len(),
            t.shape()
        );
        let mut losses = Vec::with_capacity(b);
        for (i, &tgt) in targets.iter().enumerate() {
            assert!(tgt < n, "softmax_xent: target {tgt} out of range for {n} classes");
            let row = t.row_slice(i);
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<F>().ln();
            losses.push(lse - row[tgt]);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::new(vec![b], losses),
            rg,
            Op::SoftmaxXent(logits, targets.to_vec()),
        )
    }

    /// Mean squared error over all elements (mean convention).
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            av.shape(),
            bv.shape(),
            "mse: shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let n = F::from_f64_lit(av.numel() as f64);
        let s: F = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(s / n), rg, Op::Mse(a, b))
    }

    // ---- backward ----

    /// Accumulates d loss / d node into every requires-grad leaf and parameter
    /// reachable from `loss`. Repeated calls accumulate additively. Gradients
    /// of interior nodes are transient to the traversal and not retained.
    pub fn backward(&mut self, loss: Var) {
        let l = loss.0;
        assert_eq!(
            self.nodes[l].value.numel(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.nodes[l].value.shape()
        );
        if !self.nodes[l].requires_grad {
            return;
        }
        let mut tg: Vec<Option<Tensor<F>>> = (0..=l).map(|_| None).collect();
        tg[l] = Some(Tensor::new(self.nodes[l].value.shape().to_vec(), vec![F::one()]));
        for i in (0..=l).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = tg[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf | Op::Param(_)) {
                self.accum_grad(Var(i), g);
                continue;
            }
            for (v, t) in self.local_grads(&op, i, &g) {
                if !self.rg(v) {
                    continue;
                }
                match &mut tg[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(t),
                }
            }
        }
    }

    fn accum_grad(&mut self, v: Var, contrib: Tensor<F>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.value.shape(), contrib.shape());
        match &mut node.grad {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Shapes a scalar contribution like the (numel-1) input at `v`.
    fn shaped_scalar(&self, v: Var, s: F) -> Tensor<F> {
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), vec![s])
    }

    fn local_grads(&self, op: &Op<F>, node: usize, g: &Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let out = &self.nodes[node].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res: Vec<(Var, Tensor<F>)> = Vec::new();

        match *op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for (x, sign) in [(a, F::one()), (b, F::one())] {
                    if !self.rg(x) {
                        continue;
                    }
                    let _ = sign;
                    if val(x).shape() == g.shape() {
                        res.push((x, g.clone()));
                    } else {
                        let s: F = g.data().iter().copied().sum();
                        res.push((x, self.shaped_scalar(x, s)));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    if val(a).shape() == g.shape() {
                        res.push((a, g.clone()));
                    } else {
                        let s: F = g.data().iter().copied().sum();
                        res.push((a, self.shaped_scalar(a, s)));
                    }
                }
                if self.rg(b) {
                    if val(b).shape() == g.shape() {
                        res.push((b, g.map(|x| -x)));
                    } else {
                        let s: F = g.data().iter().copied().sum();
                        res.push((b, self.shaped_scalar(b, -s)));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                if av.shape() == bv.shape() {
                    if self.rg(a) {
                        res.push((a, g.zip(bv, |gx, y| gx * y)));
                    }
                    if self.rg(b) {
                        res.push((b, g.zip(av, |gx, x| gx * x)));
                    }
                } else if av.numel() == 1 {
                    let s = av.data()[0];
                    if self.rg(a) {
                        let acc: F =
                            g.data().iter().zip(bv.data()).map(|(&gx, &y)| gx * y).sum();
                        res.push((a, self.shaped_scalar(a, acc)));
                    }
                    if self.rg(b) {
                        res.push((b, g.map(|gx| gx * s)));
                    }
                } else {
                    let s = bv.data()[0];
                    if self.rg(b) {
                        let acc: F =
                            g.data().iter().zip(av.data()).map(|(&gx, &x)| gx * x).sum();
                        res.push((b, self.shaped_scalar(b, acc)));
                    }
                    if self.rg(a) {
                        res.push((a, g.map(|gx| gx * s)));
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.rg(a) {
                    res.push((a, g.map(|gx| gx * c)));
                }
            }
            Op::Matmul(a, b) => {
                if self.rg(a) {
                    res.push((a, matmul_nt(g, val(b))));
                }
                if self.rg(b) {
                    res.push((b, matmul_tn(val(a), g)));
                }
            }
            Op::Transpose(a) => {
                if self.rg(a) {
                    res.push((a, g.transpose2()));
                }
            }
            Op::ConcatRows(ref vars) => {
                let c = out.cols();
                let mut start = 0;
                for &v in vars {
                    let r = val(v).rows();
                    if self.rg(v) {
                        let data = g.data()[start * c..(start + r) * c].to_vec();
                        res.push((v, Tensor::matrix(r, c, data)));
                    }
                    start += r;
                }
            }
            Op::StackScalars(ref vars) => {
                for (i, &v) in vars.iter().enumerate() {
                    if self.rg(v) {
                        res.push((v, self.shaped_scalar(v, g.data()[i])));
                    }
                }
            }
            Op::GatherRows(a, ref indices) => {
                if self.rg(a) {
                    let av = val(a);
                    let c = av.cols();
                    let mut ga = Tensor::zeros(av.shape().to_vec());
                    for (i, &src) in indices.iter().enumerate() {
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let dst = &mut ga.data_mut()[src * c..(src + 1) * c];
                        for (d, &x) in dst.iter_mut().zip(grow) {
                            *d += x;
                        }
                    }
                    res.push((a, ga));
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.rg(a) {
                    let av = val(a);
                    let c = av.cols();
                    let mut ga = Tensor::zeros(av.shape().to_vec());
                    ga.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                    res.push((a, ga));
                }
            }
            Op::Reshape(a) => {
                if self.rg(a) {
                    res.push((a, Tensor::new(val(a).shape().to_vec(), g.data().to_vec())));
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(a) {
                    res.push((a, g.zip(out, |gx, y| gx * y * (F::one() - y))));
                }
            }
            Op::Tanh(a) => {
                if self.rg(a) {
                    res.push((a, g.zip(out, |gx, y| gx * (F::one() - y * y))));
                }
            }
            Op::Exp(a) => {
                if self.rg(a) {
                    res.push((a, g.zip(out, |gx, y| gx * y)));
                }
            }
            Op::Log(a) => {
                if self.rg(a) {
                    res.push((a, g.zip(val(a), |gx, x| gx / x)));
                }
            }
            Op::Mean(a) => {
                if self.rg(a) {
                    let n = F::from_f64_lit(val(a).numel() as f64);
                    res.push((a, Tensor::full(val(a).shape().to_vec(), g.data()[0] / n)));
                }
            }
            Op::Sum(a) => {
                if self.rg(a) {
                    res.push((a, Tensor::full(val(a).shape().to_vec(), g.data()[0])));
                }
            }
            Op::L2Norm(a) => {
                if self.rg(a) {
                    let y = out.data()[0].max(cosine_eps::<F>());
                    let g0 = g.data()[0];
                    res.push((a, val(a).map(|x| g0 * x / y)));
                }
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(a), val(b));
                let na = av.data().iter().map(|&x| x * x).sum::<F>().sqrt();
                let nb = bv.data().iter().map(|&x| x * x).sum::<F>().sqrt();
                if na > F::zero() && nb > F::zero() {
                    let d = na * nb + cosine_eps::<F>();
                    let c = out.data()[0];
                    let g0 = g.data()[0];
                    if self.rg(a) {
                        let k = c * nb / (na * d);
                        let data = av
                            .data()
                            .iter()
                            .zip(bv.data())
                            .map(|(&x, &y)| g0 * (y / d - k * x))
                            .collect();
                        res.push((a, Tensor::new(av.shape().to_vec(), data)));
                    }
                    if self.rg(b) {
                        let k = c * na / (nb * d);
                        let data = bv
                            .data()
                            .iter()
                            .zip(av.data())
                            .map(|(&y, &x)| g0 * (x / d - k * y))
                            .collect();
                        res.push((b, Tensor::new(bv.shape().to_vec(), data)));
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if self.rg(a) {
                    let av = val(a);
                    let (r, c) = (av.rows(), av.cols());
                    let mut ga = Tensor::zeros(av.shape().to_vec());
                    for i in 0..r {
                        let row = av.row_slice(i);
                        let grow = &g.data()[i * c..(i + 1) * c];
                        let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt();
                        let n = norm + cosine_eps::<F>();
                        let dot: F = grow.iter().zip(row).map(|(&gx, &x)| gx * x).sum();
                        let dst = &mut ga.data_mut()[i * c..(i + 1) * c];
                        for ((d, &gx), &x) in dst.iter_mut().zip(grow).zip(row) {
                            *d = gx / n
                                - if norm > F::zero() {
                                    x * dot / (norm * n * n)
                                } else {
                                    F::zero()
                                };
                        }
                    }
                    res.push((a, ga));
                }
            }
            Op::ScaleRows(mat, col) => {
                let (mv, cv) = (val(mat), val(col));
                let (r, c) = (mv.rows(), mv.cols());
                if self.rg(mat) {
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let s = cv.data()[i];
                        data.extend(g.data()[i * c..(i + 1) * c].iter().map(|&gx| gx * s));
                    }
                    res.push((mat, Tensor::matrix(r, c, data)));
                }
                if self.rg(col) {
                    let mut data = Vec::with_capacity(r);
                    for i in 0..r {
                        let s: F = g.data()[i * c..(i + 1) * c]
                            .iter()
                            .zip(mv.row_slice(i))
                            .map(|(&gx, &x)| gx * x)
                            .sum();
                        data.push(s);
                    }
                    res.push((col, Tensor::new(cv.shape().to_vec(), data)));
                }
            }
            Op::AddRow(mat, row) => {
                let (r, c) = (out.rows(), out.cols());
                if self.rg(mat) {
                    res.push((mat, g.clone()));
                }
                if self.rg(row) {
                    let mut data = vec![F::zero(); c];
                    for i in 0..r {
                        for (d, &gx) in data.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *d += gx;
                        }
                    }
                    res.push((row, Tensor::new(val(row).shape().to_vec(), data)));
                }
            }
            Op::SoftmaxXent(logits, ref targets) => {
                if self.rg(logits) {
                    let lv = val(logits);
                    let (b, n) = (lv.rows(), lv.cols());
                    let mut ga = Tensor::zeros(lv.shape().to_vec());
                    for (i, &tgt) in targets.iter().enumerate() {
                        let row = lv.row_slice(i);
                        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                        let z: F = row.iter().map(|&x| (x - m).exp()).sum();
                        let gi = g.data()[i];
                        let dst = &mut ga.data_mut()[i * n..(i + 1) * n];
                        for (j, (d, &x)) in dst.iter_mut().zip(row).enumerate() {
                            let p = (x - m).exp() / z;
                            *d = gi * (p - if j == tgt { F::one() } else { F::zero() });
                        }
                    }
                    let _ = b;
                    res.push((logits, ga));
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(a), val(b));
                let k = F::from_f64_lit(2.0 / av.numel() as f64) * g.data()[0];
                if self.rg(a) {
                    res.push((a, av.zip(bv, |x, y| k * (x - y))));
                }
                if self.rg(b) {
                    res.push((b, av.zip(bv, |x, y| -k * (x - y))));
                }
            }
        }
        res
    }

    /// Adds every registered parameter's accumulated gradient into the store,
    /// in tape order.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, &node.grad) {
                store.accumulate_grad(*id, g);
            }
        }
    }
}
