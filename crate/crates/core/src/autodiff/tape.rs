use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Gradients, ParamId, ParamStore, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Affine(Var, f64),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    Slice(Var, usize),
    Embedding(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    LogSigmoid(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Dropout(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation over dense tensors for reverse-mode differentiation.
///
/// Parameters are read from the borrowed store; each parameter is loaded at
/// most once per tape. A tape built with [`Tape::training`] applies dropout,
/// otherwise dropout is the identity.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
}

fn shape_err(op: &'static str, shapes: &[&Tensor]) -> AutodiffError {
    AutodiffError::Shape { op, shapes: shapes.iter().map(|t| t.shape().to_vec()).collect() }
}

/// Views a tensor of rank ≤ 2 as a `(rows, cols)` matrix; vectors are treated
/// as a row (`as_row`) or a column.
fn as_matrix(t: &Tensor, as_row: bool) -> Option<(usize, usize)> {
    match t.shape() {
        [n] if as_row => Some((1, *n)),
        [n] => Some((*n, 1)),
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// `(lane count, lane length, stride, start of lane k)` for reductions along `axis`.
fn lanes(shape: &[usize], axis: usize) -> Option<(usize, usize, usize, Box<dyn Fn(usize) -> usize>)> {
    match (shape, axis) {
        ([n], 0) => Some((1, *n, 1, Box::new(|_| 0))),
        ([r, c], 1) => {
            let c = *c;
            Some((*r, c, 1, Box::new(move |k| k * c)))
        }
        ([r, c], 0) => Some((*c, *r, *c, Box::new(|k| k))),
        _ => None,
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'s> Tape<'s> {
    /// Evaluation tape: dropout disabled.
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], rng: None }
    }

    /// Training tape: dropout masks drawn from `rng`.
    pub fn training(store: &'s ParamStore, rng: ChaCha8Rng) -> Self {
        Self { rng: Some(rng), ..Self::new(store) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
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

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `v`'s value with no path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.t(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(self.store.tensor(id).clone(), Op::Param);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.t(a), self.t(b));
        let dims = as_matrix(ta, true).zip(as_matrix(tb, false));
        let Some(((m, k), (k2, n))) = dims.filter(|((_, k), (k2, _))| k == k2) else {
            return Err(shape_err("matmul", &[ta, tb]));
        };
        debug_assert_eq!(k, k2);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (i, o) in out.iter_mut().enumerate() {
                *o = dot(&ad[i * k..(i + 1) * k], bd);
            }
        } else {
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    axpy(row, ad[i * k + p], &bd[p * n..(p + 1) * n]);
                }
            }
        }
        let shape: Vec<usize> = match (ta.shape().len(), tb.shape().len()) {
            (1, 1) => vec![],
            (1, _) => vec![n],
            (_, 1) => vec![m],
            _ => vec![m, n],
        };
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b)))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.t(a), self.t(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, &[ta, tb]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, mk(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `a * s` for a one-element `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        let (ta, ts) = (self.t(a), self.t(s));
        if ts.len() != 1 {
            return Err(shape_err("mul_scalar", &[ta, ts]));
        }
        let k = ts.item();
        let value = Tensor::new(ta.shape(), ta.data().iter().map(|x| x * k).collect())?;
        Ok(self.push(value, Op::MulScalar(a, s)))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let ta = self.t(a);
        let value = Tensor::new(ta.shape(), ta.data().iter().map(|x| scale * x + shift).collect()).expect("same shape");
        self.push(value, Op::Affine(a, scale))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    /// Concatenates vectors (or scalars) end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let mut data = Vec::new();
        for &p in parts {
            let t = self.t(p);
            if t.shape().len() > 1 {
                let ts: Vec<&Tensor> = parts.iter().map(|&v| self.t(v)).collect();
                return Err(shape_err("concat", &ts));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var, AutodiffError> {
        let Some(&first) = rows.first() else {
            return Err(AutodiffError::Shape { op: "stack", shapes: vec![] });
        };
        let d = self.t(first).len();
        let mut data = Vec::with_capacity(d * rows.len());
        for &r in rows {
            let t = self.t(r);
            if t.shape().len() != 1 || t.len() != d {
                let ts: Vec<&Tensor> = rows.iter().map(|&v| self.t(v)).collect();
                return Err(shape_err("stack", &ts));
            }
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows.len(), d], data)?;
        Ok(self.push(value, Op::Stack(rows.to_vec())))
    }

    /// `a[start..start + len]` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let ta = self.t(a);
        if ta.shape().len() != 1 || start + len > ta.len() {
            return Err(AutodiffError::Index { op: "slice", index: start + len, len: ta.len() });
        }
        let value = Tensor::vector(ta.data()[start..start + len].to_vec());
        Ok(self.push(value, Op::Slice(a, start)))
    }

    /// Row `index` of a matrix.
    pub fn embedding(&mut self, table: Var, index: usize) -> Result<Var, AutodiffError> {
        let tt = self.t(table);
        if tt.shape().len() != 2 {
            return Err(shape_err("embedding", &[tt]));
        }
        if index >= tt.rows() {
            return Err(AutodiffError::Index { op: "embedding", index, len: tt.rows() });
        }
        let value = Tensor::vector(tt.row(index).to_vec());
        Ok(self.push(value, Op::Embedding(table, index)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.t(a);
        let value = Tensor::new(ta.shape(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape");
        self.push(value, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, f64::exp, Op::Exp(a))
    }

    /// `ln(sigmoid(a))`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.map(a, log_sigmoid, Op::LogSigmoid(a))
    }

    fn lanewise(&mut self, op_name: &'static str, a: Var, axis: usize, log: bool) -> Result<Var, AutodiffError> {
        let ta = self.t(a);
        let Some((count, len, stride, start)) = lanes(ta.shape(), axis) else {
            return Err(AutodiffError::Axis { op: op_name, axis, shape: ta.shape().to_vec() });
        };
        let x = ta.data();
        let mut out = vec![0.0; x.len()];
        for k in 0..count {
            let s = start(k);
            let idx = |i: usize| s + i * stride;
            let max = (0..len).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|i| (x[idx(i)] - max).exp()).sum();
            let lz = z.ln();
            for i in 0..len {
                let shifted = x[idx(i)] - max;
                out[idx(i)] = if log { shifted - lz } else { shifted.exp() / z };
            }
        }
        let value = Tensor::new(ta.shape(), out)?;
        let op = if log { Op::LogSoftmax(a, axis) } else { Op::Softmax(a, axis) };
        Ok(self.push(value, op))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.lanewise("softmax", a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.lanewise("log_softmax", a, axis, true)
    }

    /// Inverted dropout; the identity on an evaluation tape or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Var {
        let Some(rng) = self.rng.as_mut().filter(|_| rate > 0.0) else {
            return a;
        };
        let n = self.nodes[a.0].value.len();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let ta = self.t(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(value, Op::Dropout(a, mask))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.t(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.t(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Element `index` of a vector, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, AutodiffError> {
        let t = self.t(a);
        if index >= t.len() {
            return Err(AutodiffError::Index { op: "pick", index, len: t.len() });
        }
        let v = t.data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index)))
    }

    /// Sum of scalars (or same-shape tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var, AutodiffError> {
        let mut it = terms.iter().copied();
        let first = it.next().ok_or(AutodiffError::Shape { op: "add_all", shapes: vec![] })?;
        it.try_fold(first, |acc, v| self.add(acc, v))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward, AutodiffError> {
        let lt = self.t(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            // parents always precede their node, so `g` can be held while
            // writing into lower slots
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Backward { grads, param_nodes: self.param_nodes.clone() })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.t(*a), self.t(*b));
                let (m, k) = as_matrix(ta, true).expect("checked in forward");
                let (_, n) = as_matrix(tb, false).expect("checked in forward");
                let (ad, bd) = (ta.data(), tb.data());
                let ga = self.slot(grads, *a);
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    let row = &mut ga[i * k..(i + 1) * k];
                    if n == 1 {
                        axpy(row, gi[0], bd);
                    } else {
                        for (p, r) in row.iter_mut().enumerate() {
                            *r += dot(gi, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                let gb = self.slot(grads, *b);
                for i in 0..m {
                    let gi = &g[i * n..(i + 1) * n];
                    if n == 1 {
                        axpy(gb, gi[0], &ad[i * k..(i + 1) * k]);
                    } else {
                        for p in 0..k {
                            axpy(&mut gb[p * n..(p + 1) * n], ad[i * k + p], gi);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                axpy(self.slot(grads, *a), 1.0, g);
                axpy(self.slot(grads, *b), 1.0, g);
            }
            Op::Sub(a, b) => {
                axpy(self.slot(grads, *a), 1.0, g);
                axpy(self.slot(grads, *b), -1.0, g);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.t(*a).data(), self.t(*b).data());
                zip3(self.slot(grads, *a), g, bd, |gi, bi| gi * bi);
                zip3(self.slot(grads, *b), g, ad, |gi, ai| gi * ai);
            }
            Op::MulScalar(a, s) => {
                let k = self.t(*s).item();
                let ad = self.t(*a).data();
                axpy(self.slot(grads, *a), k, g);
                self.slot(grads, *s)[0] += dot(g, ad);
            }
            Op::Affine(a, scale) => axpy(self.slot(grads, *a), *scale, g),
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.t(*p).len();
                    axpy(self.slot(grads, *p), 1.0, &g[off..off + n]);
                    off += n;
                }
            }
            Op::Stack(rows) => {
                let d = node.value.cols();
                for (r, v) in rows.iter().enumerate() {
                    axpy(self.slot(grads, *v), 1.0, &g[r * d..(r + 1) * d]);
                }
            }
            Op::Slice(a, start) => {
                let ga = self.slot(grads, *a);
                axpy(&mut ga[*start..*start + g.len()], 1.0, g);
            }
            Op::Embedding(t, index) => {
                let d = g.len();
                let gt = self.slot(grads, *t);
                axpy(&mut gt[index * d..(index + 1) * d], 1.0, g);
            }
            Op::Sigmoid(a) => zip3(self.slot(grads, *a), g, y, |gi, yi| gi * yi * (1.0 - yi)),
            Op::Tanh(a) => zip3(self.slot(grads, *a), g, y, |gi, yi| gi * (1.0 - yi * yi)),
            Op::Relu(a) => {
                let ad = self.t(*a).data();
                zip3(self.slot(grads, *a), g, ad, |gi, ai| if ai > 0.0 { gi } else { 0.0 });
            }
            Op::Log(a) => {
                let ad = self.t(*a).data();
                zip3(self.slot(grads, *a), g, ad, |gi, ai| gi / ai);
            }
            Op::Exp(a) => zip3(self.slot(grads, *a), g, y, |gi, yi| gi * yi),
            Op::LogSigmoid(a) => {
                let ad = self.t(*a).data();
                zip3(self.slot(grads, *a), g, ad, |gi, ai| gi * sigmoid(-ai));
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (count, len, stride, start) = lanes(node.value.shape(), *axis).expect("checked in forward");
                let ga = self.slot(grads, *a);
                for k in 0..count {
                    let s = start(k);
                    let idx = |i: usize| s + i * stride;
                    if log {
                        let gsum: f64 = (0..len).map(|i| g[idx(i)]).sum();
                        for i in 0..len {
                            ga[idx(i)] += g[idx(i)] - y[idx(i)].exp() * gsum;
                        }
                    } else {
                        let gy: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                        for i in 0..len {
                            ga[idx(i)] += y[idx(i)] * (g[idx(i)] - gy);
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => zip3(self.slot(grads, *a), g, mask, |gi, mi| gi * mi),
            Op::Sum(a) => self.slot(grads, *a).iter_mut().for_each(|x| *x += g[0]),
            Op::Mean(a) => {
                let n = self.t(*a).len() as f64;
                self.slot(grads, *a).iter_mut().for_each(|x| *x += g[0] / n);
            }
            Op::Pick(a, index) => self.slot(grads, *a)[*index] += g[0],
        }
    }
}

/// `out[i] += f(g[i], other[i])`
fn zip3(out: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((o, gi), x) in out.iter_mut().zip(g).zip(other) {
        *o += f(*gi, *x);
    }
}

/// Gradients of one reverse pass.
#[derive(Debug, Clone)]
pub struct Backward {
    grads: Vec<Option<Vec<f64>>>,
    param_nodes: Vec<Option<Var>>,
}

impl Backward {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of trainable parameters into `into`.
    pub fn accumulate(&self, store: &ParamStore, into: &mut Gradients) {
        for (i, node) in self.param_nodes.iter().enumerate() {
            let id = ParamId(i);
            let Some(g) = node.and_then(|v| self.wrt(v)) else { continue };
            if store.get(id).trainable {
                axpy(into.get_mut(id), 1.0, g);
            }
        }
    }

    /// Parameter gradients; unreached and frozen parameters are zero.
    pub fn param_grads(&self, store: &ParamStore) -> Gradients {
        let mut g = Gradients::zeros_like(store);
        self.accumulate(store, &mut g);
        g
    }
}
