//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes once in reverse order
//! and returns [`Gradients`] for leaves and parameters. Nodes are appended
//! only after their inputs exist, so the node order is a topological order.
//!
//! Shape manipulation (permute, slice, pad, roll, window partitioning) is
//! expressed through one block-gather primitive whose backward rule is a
//! scatter-add.

use alloc::boxed::Box;
use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_permutation, numel, permute_index, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Marks a gathered block that reads as zeros.
pub const ZERO_BLOCK: u32 = u32::MAX;

/// Backward rule of a user-supplied operation: given the input values, the
/// output value and the output gradient, return one gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T: Scalar> {
    Leaf,
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Softmax(Var),
    Reshape(Var),
    Gather { x: Var, index: Arc<[u32]>, block: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum(Var),
    L1 { pred: Var, target: Var },
    Custom { inputs: Vec<Var>, backward: BackwardFn<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    store: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter; `None` when the parameter never entered the
    /// graph.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// One gradient per stored parameter. Parameters that are not reachable
    /// from the loss get zeros.
    pub fn into_param_grads(self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut params = self.params;
        params.resize_with(store.len(), || None);
        params
            .into_iter()
            .zip(store.ids())
            .map(|(g, id)| g.unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
            .collect()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::dimension(op, format!("incompatible shapes {a:?} and {b:?}"))
}

impl<'p, T: Scalar> Default for Tape<'p, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    /// A tape without parameters.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), store: None, param_vars: Vec::new() }
    }

    /// A tape that resolves [`Tape::param`] against `store`.
    pub fn with_params(store: &'p ParamStore<T>) -> Self {
        Self { nodes: Vec::new(), store: Some(store), param_vars: vec![None; store.len()] }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// The node for a stored parameter. Repeated calls with the same id return
    /// the same node, so gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store.expect("tape has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Batched matrix product `a[..., m, k] · b[..., k, n]`. `b` either has the
    /// same leading dims as `a` or is a plain matrix shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        if k != k2 || !(lead_b.is_empty() || lead_b == lead_a) {
            return Err(shape_err("matmul", sa, sb));
        }
        let batch = numel(lead_a);
        let shared = lead_b.is_empty();
        let mut out_shape = lead_a.to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        if shared {
            kernels::gemm_acc(da, db, &mut out, batch * m, k, n);
        } else {
            for bi in 0..batch {
                kernels::gemm_acc(
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&out_shape, out)?, Op::MatMul(a, b), needs))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s; `b` repeats
    /// over the leading dims (bias rows, shared attention biases).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_suffix", sa, sb));
        }
        let tb = self.value(b).data();
        let inner = tb.len();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_exact_mut(inner) {
            for (x, &y) in chunk.iter_mut().zip(tb) {
                *x += y;
            }
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::AddSuffix(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a).map(|x| x * k);
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, k), needs)
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let c = *sx.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", sx, self.shape(gamma)));
        }
        let shape = sx.to_vec();
        let (xv, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / c;
        let cn = T::of(c as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        let needs = self.needs(x);
        self.push(t, Op::Gelu(x), needs)
    }

    /// Softmax over the last axis with max subtraction. Entries at `-inf`
    /// receive zero weight.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = *tx.shape().last().unwrap();
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let t = Tensor::from_vec(tx.shape(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(t, Op::Softmax(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Gathers `block`-sized chunks of `x` at `index` (in block units) into a
    /// tensor of `out_shape`. [`ZERO_BLOCK`] entries produce zeros.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, block: usize, out_shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if index.len() * block != numel(out_shape) || src.len() % block != 0 {
            return Err(Error::dimension(
                "gather",
                format!("{} blocks of {block} cannot fill {out_shape:?}", index.len()),
            ));
        }
        let nblocks = src.len() / block;
        let mut out = vec![T::zero(); index.len() * block];
        for (o, &i) in out.chunks_exact_mut(block).zip(index.iter()) {
            if i != ZERO_BLOCK {
                let i = i as usize;
                if i >= nblocks {
                    return Err(Error::dimension("gather", format!("block {i} out of {nblocks}")));
                }
                o.copy_from_slice(&src[i * block..(i + 1) * block]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_vec(out_shape, out)?, Op::Gather { x, index, block }, needs))
    }

    pub fn permute(&mut self, x: Var, order: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_permutation(order, shape.len())?;
        let (out_shape, index, block) = permute_index(&shape, order);
        self.gather(x, index.into(), block, &out_shape)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dimension(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer = numel(&shape[..axis]);
        let block = numel(&shape[axis + 1..]);
        let mut index = Vec::with_capacity(outer * len);
        for o in 0..outer {
            for i in start..start + len {
                index.push((o * shape[axis] + i) as u32);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, index.into(), block, &out_shape)
    }

    /// Zero padding after the end of each axis (`after[i]` extra entries).
    pub fn pad(&mut self, x: Var, after: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if after.len() != shape.len() {
            return Err(Error::dimension("pad", format!("{after:?} does not match {shape:?}")));
        }
        let out_shape: Vec<usize> = shape.iter().zip(after).map(|(s, a)| s + a).collect();
        let in_strides = crate::tensor::strides(&shape);
        let mut index = Vec::with_capacity(numel(&out_shape));
        let mut counter = vec![0usize; shape.len()];
        for _ in 0..numel(&out_shape) {
            let inside = counter.iter().zip(&shape).all(|(c, s)| c < s);
            if inside {
                let off: usize = counter.iter().zip(&in_strides).map(|(c, s)| c * s).sum();
                index.push(off as u32);
            } else {
                index.push(ZERO_BLOCK);
            }
            for ax in (0..shape.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(x, index.into(), 1, &out_shape)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::dimension("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dimension("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let span = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Concat { inputs: inputs.to_vec(), axis }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Mean absolute difference. The subgradient at a tie is zero.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(shape_err("l1_loss", tp.shape(), tt.shape()));
        }
        let n = T::of(tp.len() as f64);
        let s: T = tp.data().iter().zip(tt.data()).map(|(&p, &t)| (p - t).abs()).sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(s / n), Op::L1 { pred, target }, needs))
    }

    /// Pointwise affine map over the last axis: `x[..., in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let fan_in = *shape.last().unwrap();
        let rows = numel(&shape[..shape.len() - 1]);
        let flat = self.reshape(x, &[rows, fan_in])?;
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_suffix(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.shape(y)[1];
        self.reshape(y, &out_shape)
    }

    /// Records an operation whose value was computed outside the tape.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, needs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut params: Vec<Option<Tensor<T>>> = (0..self.param_vars.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    params[id.0] = grads[i].take();
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { by_node: grads, params })
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut send = |v: Var, t: Tensor<T>| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let batch = ta.len() / (m * k);
                let shared = sb.len() == 2;
                if self.needs(*a) {
                    let mut da = vec![T::zero(); ta.len()];
                    if shared {
                        kernels::gemm_nt_acc(g.data(), tb.data(), &mut da, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm_nt_acc(
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                &tb.data()[bi * k * n..(bi + 1) * k * n],
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    send(*a, Tensor::from_vec(sa, da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); tb.len()];
                    if shared {
                        kernels::gemm_tn_acc(ta.data(), g.data(), &mut db, batch * m, k, n);
                    } else {
                        for bi in 0..batch {
                            kernels::gemm_tn_acc(
                                &ta.data()[bi * m * k..(bi + 1) * m * k],
                                &g.data()[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    send(*b, Tensor::from_vec(sb, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                send(*a, Tensor::from_vec(ta.shape(), ga).unwrap());
                send(*b, Tensor::from_vec(tb.shape(), gb).unwrap());
            }
            Op::AddSuffix(a, b) => {
                let tb = self.value(*b);
                let mut gb = vec![T::zero(); tb.len()];
                for chunk in g.data().chunks_exact(tb.len()) {
                    for (acc, &x) in gb.iter_mut().zip(chunk) {
                        *acc += x;
                    }
                }
                send(*a, g.clone());
                send(*b, Tensor::from_vec(tb.shape(), gb).unwrap());
            }
            Op::Scale(a, k) => send(*a, g.map(|x| x * *k)),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma).data();
                let c = gv.len();
                let cn = T::of(c as f64);
                let gd = g.data();
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gy = &gd[r * c..(r + 1) * c];
                    let h = &xhat[r * c..(r + 1) * c];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..c {
                        let dh = gy[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                        dgamma[j] += gy[j] * h[j];
                        dbeta[j] += gy[j];
                    }
                    mean_dh /= cn;
                    mean_dh_h /= cn;
                    for j in 0..c {
                        let dh = gy[j] * gv[j];
                        dx[r * c + j] = rs * (dh - mean_dh - h[j] * mean_dh_h);
                    }
                }
                send(*x, Tensor::from_vec(g.shape(), dx).unwrap());
                send(*gamma, Tensor::from_vec(&[c], dgamma).unwrap());
                send(*beta, Tensor::from_vec(&[c], dbeta).unwrap());
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(&gy, &v)| gy * kernels::gelu_grad(v)).collect();
                send(*x, Tensor::from_vec(tx.shape(), d).unwrap());
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = *y.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d.chunks_exact_mut(c).zip(y.data().chunks_exact(c)).zip(g.data().chunks_exact(c)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*x, Tensor::from_vec(y.shape(), d).unwrap());
            }
            Op::Reshape(x) => {
                send(*x, g.clone().reshaped(self.shape(*x)).unwrap());
            }
            Op::Gather { x, index, block } => {
                let tx = self.value(*x);
                let mut d = vec![T::zero(); tx.len()];
                for (gb, &i) in g.data().chunks_exact(*block).zip(index.iter()) {
                    if i != ZERO_BLOCK {
                        let dst = &mut d[i as usize * block..(i as usize + 1) * block];
                        for (a, &b) in dst.iter_mut().zip(gb) {
                            *a += b;
                        }
                    }
                }
                send(*x, Tensor::from_vec(tx.shape(), d).unwrap());
            }
            Op::Concat { inputs, axis } => {
                let shape = g.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let tv = self.value(v);
                    let span = tv.shape()[*axis] * inner;
                    let mut d = Vec::with_capacity(tv.len());
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + span]);
                    }
                    offset += span;
                    send(v, Tensor::from_vec(tv.shape(), d).unwrap());
                }
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                send(*x, Tensor::full(self.shape(*x), gs));
            }
            Op::L1 { pred, target } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let k = g.data()[0] / T::of(tp.len() as f64);
                let sign = |d: T| {
                    if d > T::zero() {
                        k
                    } else if d < T::zero() {
                        -k
                    } else {
                        T::zero()
                    }
                };
                let dp: Vec<T> = tp.data().iter().zip(tt.data()).map(|(&p, &t)| sign(p - t)).collect();
                if self.needs(*target) {
                    send(*target, Tensor::from_vec(tt.shape(), dp.iter().map(|&v| -v).collect()).unwrap());
                }
                send(*pred, Tensor::from_vec(tp.shape(), dp).unwrap());
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let outs = backward(&ins, &node.value, g);
                for (&v, d) in inputs.iter().zip(outs) {
                    send(v, d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);

        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let m = t(&[3, 3], &[0.5, -1.0, 2.0, 3.0, 0.25, 7.0, -4.0, 9.0, 1.5]);
        let mv = tape.constant(m.clone());
        let p = tape.matmul(eye, mv).unwrap();
        assert_eq!(tape.value(p), &m);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = tape.constant(Tensor::from_vec(&[2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4);

        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let x = tape.constant(Tensor::full(&[4], 2.5));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f32));
        let s = tape.sum(w);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(w).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn l1_subgradient_convention() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let q = tape.constant(t(&[4], &[0.0, 2.0, 5.0, 4.0]));
        let l = tape.l1_loss(p, q).unwrap();
        assert_eq!(tape.value(l).data(), &[0.75]);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.wrt(p).unwrap().data(), &[0.25, 0.0, -0.25, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut store = ParamStore::<f32>::new();
        let used = store.add("used", Tensor::ones(&[2]));
        let unused = store.add("unused", Tensor::ones(&[3]));
        let mut tape = Tape::with_params(&store);
        let u = tape.param(used);
        let s = tape.sum(u);
        let grads = tape.backward(s).unwrap();
        assert!(grads.param(unused).is_none());
        let all = grads.into_param_grads(&store);
        assert_eq!(all[unused.index()], Tensor::zeros(&[3]));
        assert_eq!(all[used.index()], Tensor::ones(&[2]));
    }

    #[test]
    fn repeated_param_use_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full(&[3], 2.0));
        let mut tape = Tape::with_params(&store);
        let a = tape.param(w);
        let b = tape.param(w);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn permute_round_trip_is_exact() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f32 * 0.731).sin());
        let v = tape.constant(x.clone());
        let order = [2, 0, 3, 1];
        let p = tape.permute(v, &order).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 5, 3]);
        let inv = crate::tensor::inverse_permutation(&order);
        let back = tape.permute(p, &inv).unwrap();
        assert_eq!(tape.value(back), &x);
        assert!(tape.permute(v, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn reshape_round_trip_and_errors() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::from_fn(&[8 * 4, 6, 6], |i| i as f32);
        let v = tape.constant(x.clone());
        let a = tape.reshape(v, &[8, 4, 6, 6]).unwrap();
        let b = tape.reshape(a, &[32, 6, 6]).unwrap();
        assert_eq!(tape.value(b), &x);
        assert!(tape.reshape(v, &[5, 5]).is_err());
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let mut tape = Tape::<f32>::new();
        let parts: Vec<Tensor<f32>> =
            (0..3).map(|k| Tensor::from_fn(&[2, 1, 3, 3], |i| (k * 100 + i) as f32)).collect();
        let vars: Vec<Var> = parts.iter().map(|p| tape.constant(p.clone())).collect();
        let cat = tape.concat(&vars, 1).unwrap();
        assert_eq!(tape.shape(cat), &[2, 3, 3, 3]);
        for (k, p) in parts.iter().enumerate() {
            let s = tape.slice(cat, 1, k, 1).unwrap();
            assert_eq!(tape.value(s), p);
        }
    }

    #[test]
    fn pad_adds_trailing_zeros() {
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(Tensor::ones(&[2, 2]));
        let p = tape.pad(v, &[1, 0]).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
