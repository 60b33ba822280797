//! Reverse-mode differentiation over a recorded op tape.
//!
//! A `Graph` evaluates eagerly: every op computes its value when recorded,
//! so the tape doubles as the forward pass. `backward` walks the tape in
//! reverse and accumulates analytic gradients; `grads_into` hands parameter
//! gradients back to the owning `ParamStore` by name.
//!
//! The op set is exactly what the models in this crate need; it is not a
//! general autodiff system. Every op checks its output for NaN/Inf and
//! errors instead of propagating non-finite values.

use super::array::{DenseArray, Element};
use super::store::ParamStore;
use crate::error::{CoreError, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[.., n] + [n]`, bias broadcast over leading dims.
    AddBiasLast(NodeId, NodeId),
    /// `[b, m, d] + [b, d]`, addend broadcast over the token axis.
    AddBcastTokens(NodeId, NodeId),
    /// `[b, m, d] + [m, d]`, addend broadcast over the batch axis.
    AddBcastBatch(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    /// `[.., k] x [k, n]`; leading dims of the left operand are flattened.
    MatMul(NodeId, NodeId),
    /// Batched `[l.., m, k] x [l.., k, n]` with identical leading dims.
    Bmm(NodeId, NodeId),
    TransposeLast2(NodeId),
    Exp(NodeId),
    Silu(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxLast(NodeId),
    LogSoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    /// `[b, m, d] -> [b, d]`, mean over the token axis.
    MeanTokens(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    /// Row-wise `x / ||x||` over `[b, d]`.
    L2NormalizeRows(NodeId),
    Reshape(NodeId),
}

struct Node<T: Element> {
    op: Op,
    value: DenseArray<T>,
    needs_grad: bool,
    param: Option<String>,
}

pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &DenseArray<T> {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: DenseArray<T>, needs_grad: bool, label: &str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op: label.into() });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            param: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a constant input. No gradient flows into it.
    pub fn input(&mut self, value: DenseArray<T>) -> Result<NodeId> {
        self.push(Op::Leaf, value, false, "input")
    }

    /// Record a trainable parameter by name; its gradient is collected by
    /// `grads_into`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<NodeId> {
        let value = store.get(name)?.clone();
        let id = self.push(Op::Leaf, value, true, "param")?;
        self.nodes[id.0].param = Some(name.to_string());
        Ok(id)
    }

    fn binary_same_shape(&mut self, op_name: &str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(CoreError::shape(op_name, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b)?;
        let v = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), v, self.needs(a) || self.needs(b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b)?;
        let v = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), v, self.needs(a) || self.needs(b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b)?;
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), v, self.needs(a) || self.needs(b), "mul")
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = last_dim(self.value(a).shape());
        if self.value(bias).shape() != [n] {
            return Err(CoreError::shape(
                "add_bias",
                format!(
                    "input {:?} needs bias [{}], got {:?}",
                    self.value(a).shape(),
                    n,
                    self.value(bias).shape()
                ),
            ));
        }
        let bias_data = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&bias_data) {
                *x = *x + *b;
            }
        }
        self.push(
            Op::AddBiasLast(a, bias),
            v,
            self.needs(a) || self.needs(bias),
            "add_bias",
        )
    }

    pub fn add_bcast_tokens(&mut self, a: NodeId, addend: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(addend).shape().to_vec();
        if sa.len() != 3 || sb.len() != 2 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(CoreError::shape(
                "add_bcast_tokens",
                format!("{:?} vs {:?}", sa, sb),
            ));
        }
        let (batch, tokens, dim) = (sa[0], sa[1], sa[2]);
        let add_data = self.value(addend).data().to_vec();
        let mut v = self.value(a).clone();
        {
            let data = v.data_mut();
            for b in 0..batch {
                for t in 0..tokens {
                    let base = (b * tokens + t) * dim;
                    for d in 0..dim {
                        data[base + d] = data[base + d] + add_data[b * dim + d];
                    }
                }
            }
        }
        self.push(
            Op::AddBcastTokens(a, addend),
            v,
            self.needs(a) || self.needs(addend),
            "add_bcast_tokens",
        )
    }

    pub fn add_bcast_batch(&mut self, a: NodeId, addend: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(addend).shape().to_vec();
        if sa.len() != 3 || sb.len() != 2 || sa[1] != sb[0] || sa[2] != sb[1] {
            return Err(CoreError::shape(
                "add_bcast_batch",
                format!("{:?} vs {:?}", sa, sb),
            ));
        }
        let per_batch = sb[0] * sb[1];
        let add_data = self.value(addend).data().to_vec();
        let mut v = self.value(a).clone();
        for chunk in v.data_mut().chunks_mut(per_batch) {
            for (x, b) in chunk.iter_mut().zip(&add_data) {
                *x = *x + *b;
            }
        }
        self.push(
            Op::AddBcastBatch(a, addend),
            v,
            self.needs(a) || self.needs(addend),
            "add_bcast_batch",
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cv = T::from_f64(c);
        let v = self.value(a).map(|x| x * cv);
        self.push(Op::Scale(a, c), v, self.needs(a), "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let cv = T::from_f64(c);
        let v = self.value(a).map(|x| x + cv);
        self.push(Op::AddScalar(a, c), v, self.needs(a), "add_scalar")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.is_empty() || sb.len() != 2 || last_dim(&sa) != sb[0] {
            return Err(CoreError::shape(
                "matmul",
                format!("{:?} x {:?} (right operand must be [k, n])", sa, sb),
            ));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).len() / k;
        let mut out = vec![T::zero(); rows * n];
        T::gemm(rows, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let v = DenseArray::from_vec(&out_shape, out)?;
        self.push(Op::MatMul(a, b), v, self.needs(a) || self.needs(b), "matmul")
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        let ok = sa.len() >= 2
            && sb.len() == sa.len()
            && sa[..sa.len() - 2] == sb[..sb.len() - 2]
            && sa[sa.len() - 1] == sb[sb.len() - 2];
        if !ok {
            return Err(CoreError::shape("bmm", format!("{:?} x {:?}", sa, sb)));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let batches: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batches * m * n];
        for l in 0..batches {
            T::gemm(
                m,
                k,
                n,
                &self.value(a).data()[l * m * k..(l + 1) * m * k],
                &self.value(b).data()[l * k * n..(l + 1) * k * n],
                &mut out[l * m * n..(l + 1) * m * n],
            );
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let v = DenseArray::from_vec(&out_shape, out)?;
        self.push(Op::Bmm(a, b), v, self.needs(a) || self.needs(b), "bmm")
    }

    pub fn transpose_last2(&mut self, a: NodeId) -> Result<NodeId> {
        let v = transpose_last2_array(self.value(a))?;
        self.push(Op::TransposeLast2(a), v, self.needs(a), "transpose_last2")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), v, self.needs(a), "exp")
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(silu_val);
        self.push(Op::Silu(a), v, self.needs(a), "silu")
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if lo > hi {
            return Err(CoreError::invalid(format!("clamp bounds [{lo}, {hi}]")));
        }
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        let v = self.value(a).map(|x| if x < l { l } else if x > h { h } else { x });
        self.push(Op::Clamp(a, lo, hi), v, self.needs(a), "clamp")
    }

    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let n = last_dim(self.value(a).shape());
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            softmax_row(row);
        }
        self.push(Op::SoftmaxLast(a), v, self.needs(a), "softmax")
    }

    pub fn log_softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let n = last_dim(self.value(a).shape());
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter() {
                sum = sum + (*x - max).exp();
            }
            let log_z = max + sum.ln();
            for x in row.iter_mut() {
                *x = *x - log_z;
            }
        }
        self.push(Op::LogSoftmaxLast(a), v, self.needs(a), "log_softmax")
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let d = last_dim(self.value(x).shape());
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [d] {
                return Err(CoreError::shape(
                    "layer_norm",
                    format!("{name} must be [{d}], got {:?}", self.value(id).shape()),
                ));
            }
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            let (mean, var) = row_mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for (i, val) in row.iter_mut().enumerate() {
                *val = g[i] * ((*val - mean) * inv) + bt[i];
            }
        }
        self.push(
            Op::LayerNorm { x, gamma, beta },
            v,
            self.needs(x) || self.needs(gamma) || self.needs(beta),
            "layer_norm",
        )
    }

    pub fn mean_tokens(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 3 {
            return Err(CoreError::shape("mean_tokens", format!("need [b, m, d], got {:?}", s)));
        }
        let (batch, tokens, dim) = (s[0], s[1], s[2]);
        let inv_m = T::from_f64(1.0 / tokens as f64);
        let mut out = vec![T::zero(); batch * dim];
        let data = self.value(a).data();
        for b in 0..batch {
            for t in 0..tokens {
                let base = (b * tokens + t) * dim;
                for dd in 0..dim {
                    out[b * dim + dd] = out[b * dim + dd] + data[base + dd];
                }
            }
            for dd in 0..dim {
                out[b * dim + dd] = out[b * dim + dd] * inv_m;
            }
        }
        let v = DenseArray::from_vec(&[batch, dim], out)?;
        self.push(Op::MeanTokens(a), v, self.needs(a), "mean_tokens")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let len = self.value(a).len().max(1);
        let mut sum = T::zero();
        for &x in self.value(a).data() {
            sum = sum + x;
        }
        let v = DenseArray::from_vec(&[1], vec![sum / T::from_f64(len as f64)])?;
        self.push(Op::MeanAll(a), v, self.needs(a), "mean_all")
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let mut sum = T::zero();
        for &x in self.value(a).data() {
            sum = sum + x;
        }
        let v = DenseArray::from_vec(&[1], vec![sum])?;
        self.push(Op::SumAll(a), v, self.needs(a), "sum_all")
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 2 {
            return Err(CoreError::shape("l2_normalize_rows", format!("need [b, d], got {:?}", s)));
        }
        let d = s[1];
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(d) {
            let mut sq = T::zero();
            for x in row.iter() {
                sq = sq + *x * *x;
            }
            let norm = sq.sqrt();
            if norm.to_f64() < 1e-30 {
                return Err(CoreError::invalid("zero-norm row in l2_normalize_rows"));
            }
            let inv = norm.recip();
            for x in row.iter_mut() {
                *x = *x * inv;
            }
        }
        self.push(Op::L2NormalizeRows(a), v, self.needs(a), "l2_normalize_rows")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshaped(shape)?;
        self.push(Op::Reshape(a), v, self.needs(a), "reshape")
    }

    /// Reverse pass from a scalar loss node. Returns per-parameter gradients
    /// keyed by parameter name; accumulate them with
    /// [`Graph::backward_into`] in normal training code.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<(String, DenseArray<T>)>> {
        if self.value(loss).len() != 1 {
            return Err(CoreError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Err(CoreError::invalid(
                "loss does not depend on any recorded parameter; \
                 record the forward pass through Graph::param first",
            ));
        }
        let mut grads: Vec<Option<DenseArray<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseArray::filled(&[1], T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads)?;
            // Keep leaf gradients for harvesting.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        let mut out = Vec::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let grad = grads[idx]
                    .take()
                    .unwrap_or_else(|| DenseArray::zeros(node.value.shape()));
                if !grad.all_finite() {
                    return Err(CoreError::NonFinite {
                        op: format!("grad[{name}]"),
                    });
                }
                out.push((name.clone(), grad));
            }
        }
        Ok(out)
    }

    /// Backward pass plus accumulation of every parameter gradient into the
    /// store. Parameters recorded on the tape but unreachable from the loss
    /// receive zero gradients.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        for (name, grad) in self.backward(loss)? {
            store.accumulate_grad(&name, &grad)?;
        }
        Ok(())
    }

    fn accum(
        &self,
        grads: &mut [Option<DenseArray<T>>],
        id: NodeId,
        delta: DenseArray<T>,
    ) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi = *gi + *di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &DenseArray<T>,
        grads: &mut [Option<DenseArray<T>>],
    ) -> Result<()> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, g.zip_with(val(*b), |x, y| x * y)?);
                self.accum(grads, *b, g.zip_with(val(*a), |x, y| x * y)?);
            }
            Op::AddBiasLast(a, bias) => {
                self.accum(grads, *a, g.clone());
                if self.nodes[bias.0].needs_grad {
                    let n = last_dim(val(*a).shape());
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, x) in gb.iter_mut().zip(row) {
                            *acc = *acc + *x;
                        }
                    }
                    self.accum(grads, *bias, DenseArray::from_vec(&[n], gb)?);
                }
            }
            Op::AddBcastTokens(a, addend) => {
                self.accum(grads, *a, g.clone());
                if self.nodes[addend.0].needs_grad {
                    let s = val(*a).shape();
                    let (batch, tokens, dim) = (s[0], s[1], s[2]);
                    let mut gb = vec![T::zero(); batch * dim];
                    for b in 0..batch {
                        for t in 0..tokens {
                            let base = (b * tokens + t) * dim;
                            for dd in 0..dim {
                                gb[b * dim + dd] = gb[b * dim + dd] + g.data()[base + dd];
                            }
                        }
                    }
                    self.accum(grads, *addend, DenseArray::from_vec(&[batch, dim], gb)?);
                }
            }
            Op::AddBcastBatch(a, addend) => {
                self.accum(grads, *a, g.clone());
                if self.nodes[addend.0].needs_grad {
                    let s = val(*addend).shape().to_vec();
                    let per_batch = s[0] * s[1];
                    let mut gb = vec![T::zero(); per_batch];
                    for chunk in g.data().chunks(per_batch) {
                        for (acc, x) in gb.iter_mut().zip(chunk) {
                            *acc = *acc + *x;
                        }
                    }
                    self.accum(grads, *addend, DenseArray::from_vec(&s, gb)?);
                }
            }
            Op::Scale(a, c) => {
                let cv = T::from_f64(*c);
                self.accum(grads, *a, g.map(|x| x * cv));
            }
            Op::AddScalar(a, _) => {
                self.accum(grads, *a, g.clone());
            }
            Op::MatMul(a, b) => {
                let sa = val(*a).shape().to_vec();
                let k = val(*b).shape()[0];
                let n = val(*b).shape()[1];
                let rows = val(*a).len() / k;
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![T::zero(); rows * k];
                    T::gemm_nt(rows, n, k, g.data(), val(*b).data(), &mut ga);
                    self.accum(grads, *a, DenseArray::from_vec(&sa, ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm_tn(rows, k, n, val(*a).data(), g.data(), &mut gb);
                    self.accum(grads, *b, DenseArray::from_vec(&[k, n], gb)?);
                }
            }
            Op::Bmm(a, b) => {
                let sa = val(*a).shape().to_vec();
                let sb = val(*b).shape().to_vec();
                let m = sa[sa.len() - 2];
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let batches: usize = sa[..sa.len() - 2].iter().product();
                if self.nodes[a.0].needs_grad {
                    let mut ga = vec![T::zero(); batches * m * k];
                    for l in 0..batches {
                        T::gemm_nt(
                            m,
                            n,
                            k,
                            &g.data()[l * m * n..(l + 1) * m * n],
                            &val(*b).data()[l * k * n..(l + 1) * k * n],
                            &mut ga[l * m * k..(l + 1) * m * k],
                        );
                    }
                    self.accum(grads, *a, DenseArray::from_vec(&sa, ga)?);
                }
                if self.nodes[b.0].needs_grad {
                    let mut gb = vec![T::zero(); batches * k * n];
                    for l in 0..batches {
                        T::gemm_tn(
                            m,
                            k,
                            n,
                            &val(*a).data()[l * m * k..(l + 1) * m * k],
                            &g.data()[l * m * n..(l + 1) * m * n],
                            &mut gb[l * k * n..(l + 1) * k * n],
                        );
                    }
                    self.accum(grads, *b, DenseArray::from_vec(&sb, gb)?);
                }
            }
            Op::TransposeLast2(a) => {
                self.accum(grads, *a, transpose_last2_array(g)?);
            }
            Op::Exp(a) => {
                // d exp(x) = exp(x), reuse the stored output.
                let out = &self.nodes[idx].value;
                self.accum(grads, *a, g.zip_with(out, |gi, yi| gi * yi)?);
            }
            Op::Silu(a) => {
                self.accum(
                    grads,
                    *a,
                    g.zip_with(val(*a), |gi, x| gi * silu_deriv(x))?,
                );
            }
            Op::Clamp(a, lo, hi) => {
                let (l, h) = (T::from_f64(*lo), T::from_f64(*hi));
                self.accum(
                    grads,
                    *a,
                    g.zip_with(val(*a), |gi, x| {
                        if x < l || x > h {
                            T::zero()
                        } else {
                            gi
                        }
                    })?,
                );
            }
            Op::SoftmaxLast(a) => {
                let out = &self.nodes[idx].value;
                let n = last_dim(out.shape());
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let mut dot = T::zero();
                    for (gi, yi) in grow.iter().zip(yrow) {
                        dot = dot + *gi * *yi;
                    }
                    for (gi, yi) in grow.iter_mut().zip(yrow) {
                        *gi = *yi * (*gi - dot);
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::LogSoftmaxLast(a) => {
                let out = &self.nodes[idx].value;
                let n = last_dim(out.shape());
                let mut ga = g.clone();
                for (grow, orow) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let mut gsum = T::zero();
                    for gi in grow.iter() {
                        gsum = gsum + *gi;
                    }
                    for (gi, oi) in grow.iter_mut().zip(orow) {
                        *gi = *gi - oi.exp() * gsum;
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = last_dim(val(*x).shape());
                let eps = T::from_f64(LAYER_NORM_EPS);
                let gamma_v = val(*gamma).data().to_vec();
                let rows = val(*x).len() / d;
                let mut gx = DenseArray::zeros(val(*x).shape());
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let inv_d = T::from_f64(1.0 / d as f64);
                for r in 0..rows {
                    let xrow = &val(*x).data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    let (mean, var) = row_mean_var(xrow);
                    let inv = (var + eps).sqrt().recip();
                    // x_hat, gradient wrt x_hat, and the two row means the
                    // layer-norm backward needs
                    let mut mean_gxh = T::zero();
                    let mut mean_gxh_xhat = T::zero();
                    let mut xhat = vec![T::zero(); d];
                    let mut gxh = vec![T::zero(); d];
                    for i in 0..d {
                        xhat[i] = (xrow[i] - mean) * inv;
                        gxh[i] = grow[i] * gamma_v[i];
                        mean_gxh = mean_gxh + gxh[i];
                        mean_gxh_xhat = mean_gxh_xhat + gxh[i] * xhat[i];
                        ggamma[i] = ggamma[i] + grow[i] * xhat[i];
                        gbeta[i] = gbeta[i] + grow[i];
                    }
                    mean_gxh = mean_gxh * inv_d;
                    mean_gxh_xhat = mean_gxh_xhat * inv_d;
                    let out_row = &mut gx.data_mut()[r * d..(r + 1) * d];
                    for i in 0..d {
                        out_row[i] = inv * (gxh[i] - mean_gxh - xhat[i] * mean_gxh_xhat);
                    }
                }
                self.accum(grads, *x, gx);
                if self.nodes[gamma.0].needs_grad {
                    self.accum(grads, *gamma, DenseArray::from_vec(&[d], ggamma)?);
                }
                if self.nodes[beta.0].needs_grad {
                    self.accum(grads, *beta, DenseArray::from_vec(&[d], gbeta)?);
                }
            }
            Op::MeanTokens(a) => {
                let s = val(*a).shape();
                let (batch, tokens, dim) = (s[0], s[1], s[2]);
                let inv_m = T::from_f64(1.0 / tokens as f64);
                let mut ga = DenseArray::zeros(s);
                {
                    let data = ga.data_mut();
                    for b in 0..batch {
                        for t in 0..tokens {
                            let base = (b * tokens + t) * dim;
                            for dd in 0..dim {
                                data[base + dd] = g.data()[b * dim + dd] * inv_m;
                            }
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::MeanAll(a) => {
                let scale = g.data()[0] * T::from_f64(1.0 / val(*a).len().max(1) as f64);
                self.accum(grads, *a, DenseArray::filled(val(*a).shape(), scale));
            }
            Op::SumAll(a) => {
                self.accum(grads, *a, DenseArray::filled(val(*a).shape(), g.data()[0]));
            }
            Op::L2NormalizeRows(a) => {
                let out = &self.nodes[idx].value;
                let d = out.shape()[1];
                let mut ga = DenseArray::zeros(val(*a).shape());
                for ((xrow, yrow), (grow, garow)) in val(*a)
                    .data()
                    .chunks(d)
                    .zip(out.data().chunks(d))
                    .zip(g.data().chunks(d).zip(ga.data_mut().chunks_mut(d)))
                {
                    let mut sq = T::zero();
                    for x in xrow {
                        sq = sq + *x * *x;
                    }
                    let inv_norm = sq.sqrt().recip();
                    let mut dot = T::zero();
                    for (gi, yi) in grow.iter().zip(yrow) {
                        dot = dot + *gi * *yi;
                    }
                    for i in 0..d {
                        garow[i] = inv_norm * (grow[i] - yrow[i] * dot);
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, g.reshaped(val(*a).shape())?);
            }
        }
        Ok(())
    }
}

fn transpose_last2_array<T: Element>(a: &DenseArray<T>) -> Result<DenseArray<T>> {
    let s = a.shape().to_vec();
    if s.len() < 2 {
        return Err(CoreError::shape(
            "transpose_last2",
            format!("rank >= 2 required, got {:?}", s),
        ));
    }
    let m = s[s.len() - 2];
    let n = s[s.len() - 1];
    let batches: usize = s[..s.len() - 2].iter().product();
    let mut out = vec![T::zero(); a.len()];
    let data = a.data();
    for l in 0..batches {
        let base = l * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = data[base + i * n + j];
            }
        }
    }
    let mut out_shape = s[..s.len() - 2].to_vec();
    out_shape.push(n);
    out_shape.push(m);
    DenseArray::from_vec(&out_shape, out)
}

fn silu_val<T: Element>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_deriv<T: Element>(x: T) -> T {
    let sig = T::one() / (T::one() + (-x).exp());
    sig * (T::one() + x * (T::one() - sig))
}

fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = sum.recip();
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

fn row_mean_var<T: Element>(row: &[T]) -> (T, T) {
    let inv_d = T::from_f64(1.0 / row.len() as f64);
    let mut mean = T::zero();
    for x in row {
        mean = mean + *x;
    }
    mean = mean * inv_d;
    let mut var = T::zero();
    for x in row {
        let d = *x - mean;
        var = var + d * d;
    }
    (mean, var * inv_d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: Vec<f32>) -> DenseArray<f32> {
        DenseArray::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_matches_hand_product() {
        // 2x3 through a 3x4 map, expected values multiplied out by hand.
        let mut g = Graph::<f32>::new();
        let x = g.input(arr(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let w = g
            .input(arr(
                &[3, 4],
                vec![1.0, 0.0, 2.0, -1.0, 0.5, 1.0, 0.0, 2.0, -1.0, 1.0, 1.0, 0.0],
            ))
            .unwrap();
        let y = g.matmul(x, w).unwrap();
        let expected = [
            1.0 + 1.0 - 3.0,
            0.0 + 2.0 + 3.0,
            2.0 + 0.0 + 3.0,
            -1.0 + 4.0 + 0.0,
            4.0 + 2.5 - 6.0,
            0.0 + 5.0 + 6.0,
            8.0 + 0.0 + 6.0,
            -4.0 + 10.0 + 0.0,
        ];
        for (got, want) in g.value(y).data().iter().zip(expected) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut g = Graph::<f32>::new();
        let mut store = ParamStore::new();
        store
            .insert("x", arr(&[4], vec![1.0, -2.0, 3.0, 0.5]))
            .unwrap();
        let x = g.param(&store, "x").unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn zero_gate_blocks_gradient() {
        let mut g = Graph::<f32>::new();
        let mut store = ParamStore::new();
        store.insert("x", arr(&[3], vec![1.0, 2.0, 3.0])).unwrap();
        let x = g.param(&store, "x").unwrap();
        let gate = g.input(arr(&[3], vec![0.0, 0.0, 0.0])).unwrap();
        let y = g.mul(x, gate).unwrap();
        let loss = g.sum_all(y).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads[0].1.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_without_params_errors() {
        let mut g = Graph::<f32>::new();
        let x = g.input(arr(&[2], vec![1.0, 2.0])).unwrap();
        let loss = g.sum_all(x).unwrap();
        assert!(g.backward(loss).is_err());
    }

    #[test]
    fn shape_mismatch_names_op_and_dims() {
        let mut g = Graph::<f32>::new();
        let a = g.input(arr(&[2, 3], vec![0.0; 6])).unwrap();
        let b = g.input(arr(&[3, 2], vec![0.0; 6])).unwrap();
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.input(arr(&[1], vec![100.0])).unwrap();
        let e = g.exp(a).unwrap(); // exp(100) is finite in f32? ~2.7e43, yes
        assert!(g.value(e).all_finite());
        let big = g.input(arr(&[1], vec![1000.0])).unwrap();
        let err = g.exp(big).unwrap_err();
        assert!(matches!(err, CoreError::NonFinite { .. }));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let a = g
            .input(arr(&[2, 3], vec![0.0, 1.0, 2.0, -5.0, 0.0, 5.0]))
            .unwrap();
        let s = g.softmax_last(a).unwrap();
        for row in g.value(s).data().chunks(3) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn transpose_roundtrips() {
        let mut g = Graph::<f32>::new();
        let a = g
            .input(arr(&[2, 2, 3], (0..12).map(|i| i as f32).collect()))
            .unwrap();
        let t = g.transpose_last2(a).unwrap();
        assert_eq!(g.value(t).shape(), &[2, 3, 2]);
        let back = g.transpose_last2(t).unwrap();
        assert_eq!(g.value(back).data(), g.value(a).data());
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut g = Graph::<f32>::new();
        let x = g
            .input(arr(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]))
            .unwrap();
        let gamma = g.input(DenseArray::filled(&[4], 1.0)).unwrap();
        let beta = g.input(DenseArray::zeros(&[4])).unwrap();
        let y = g.layer_norm(x, gamma, beta).unwrap();
        for row in g.value(y).data().chunks(4) {
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bmm_batches_independently() {
        let mut g = Graph::<f32>::new();
        let a = g
            .input(arr(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let b = g
            .input(arr(&[2, 2, 1], vec![1.0, 1.0, 2.0, 0.5]))
            .unwrap();
        let c = g.bmm(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 8.0]);
    }
}
