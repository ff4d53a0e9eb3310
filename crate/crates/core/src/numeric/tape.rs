//! Dynamically recorded operation graph.
//!
//! Each forward op appends a node holding its value; `backward` walks the
//! nodes in reverse and applies each op's vector-Jacobian product. Nodes that
//! cannot reach a trainable leaf are skipped.

use std::sync::Arc;

use rand::Rng;

use super::kernels::{check_targets, gelu, gelu_grad, mean_cross_entropy, row_norm, softmax_in_place};
use super::{NumericError, ParamId, ParamStore, Result, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse row matrix, used as a constant left operand.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T = f32> {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> Tensor<T> {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out.data_mut()[i * self.cols + j] = v;
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> CsrMatrix<U> {
        CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn matmul_dense(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rows() != self.cols {
            return Err(NumericError::ShapeMismatch {
                op: "spmm",
                left: vec![self.rows, self.cols],
                right: x.shape().to_vec(),
            });
        }
        let c = x.cols();
        let mut out = Tensor::zeros(&[self.rows, c]);
        for i in 0..self.rows {
            let dst = &mut out.data_mut()[i * c..(i + 1) * c];
            for (j, v) in self.row(i) {
                for (o, &s) in dst.iter_mut().zip(x.row(j)) {
                    *o += v * s;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Gelu(Var),
    LeakyRelu(Var, T),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    RowSoftmax(Var),
    L2Normalize(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Attention {
        qkv: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    SpMM {
        matrix: Arc<CsrMatrix<T>>,
        x: Var,
    },
    Dropout(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Forward intermediates reused by the backward pass.
    saved: Vec<Tensor<T>>,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params_frozen: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> NumericError {
    NumericError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn grad_slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    var: Var,
    like: &Tensor<T>,
) -> &'a mut Tensor<T> {
    grads[var.0].get_or_insert_with(|| Tensor::zeros(&[like.rows(), like.cols()]))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params_frozen: false,
        }
    }

    /// A tape on which [`Tape::param`] records constants: gradients never
    /// reach the parameter store.
    pub fn with_frozen_params() -> Self {
        Self {
            nodes: Vec::new(),
            params_frozen: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push_saved(value, op, requires_grad, Vec::new())
    }

    fn push_saved(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, saved: Vec<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        let value = value.as_matrix();
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).as_matrix();
        if self.params_frozen {
            self.push(value, Op::Leaf, false)
        } else {
            self.push(value, Op::Param(id), true)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds the `1 x n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(mismatch("add_row", x, r));
        }
        let mut value = x.clone();
        let c = x.cols();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % c];
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(mismatch("mul_scalar", self.value(a), sv));
        }
        let k = sv.item();
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a, s]);
        Ok(self.push(value, Op::MulScalar(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.exp());
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    /// Row-wise layer normalization with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != c {
                return Err(mismatch("layer_norm", xv, pv));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Tensor::zeros(&[xv.rows(), c]);
        let mut normed = Tensor::zeros(&[xv.rows(), c]);
        let mut inv_std = Tensor::zeros(&[xv.rows(), 1]);
        let n = T::lit(c as f64);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.data_mut()[i] = inv;
            let (nr, or) = (normed.row_mut(i), &mut out.data_mut()[i * c..(i + 1) * c]);
            for j in 0..c {
                nr[j] = (row[j] - mu) * inv;
                or[j] = nr[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push_saved(out, Op::LayerNorm { x, gain, bias }, rg, vec![normed, inv_std]))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = super::kernels::row_softmax(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.as_matrix();
        let mut norms = Tensor::zeros(&[x.rows(), 1]);
        for i in 0..x.rows() {
            let nrm = row_norm(x.row(i));
            norms.data_mut()[i] = nrm;
            for v in out.row_mut(i) {
                *v /= nrm;
            }
        }
        let rg = self.rg(&[a]);
        self.push_saved(out, Op::L2Normalize(a), rg, vec![norms])
    }

    /// Mean row-wise cross entropy; produces a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (m, n) = (x.rows(), x.cols());
        check_targets(m, n, targets)?;
        let value = Tensor::scalar(T::lit(mean_cross_entropy(x, targets)));
        let mut probs = x.as_matrix();
        for i in 0..m {
            softmax_in_place(probs.row_mut(i));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push_saved(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
            vec![probs],
        ))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(NumericError::Invalid("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(NumericError::Invalid(format!(
                "gather_rows: index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let value = t.select_rows(ids);
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NumericError::Invalid("concat_rows: no inputs".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(mismatch("concat_rows", self.value(*first), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if len == 0 || start + len > v.rows() {
            return Err(NumericError::Invalid(format!(
                "slice_rows: rows {start}..{} out of range for {}",
                start + len,
                v.rows()
            )));
        }
        let c = v.cols();
        let value = Tensor::new(vec![len, c], v.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `qkv` is `T x 3w` with query, key and value blocks side by side. Each
    /// `(start, len)` segment is an independent sequence; rows never attend
    /// across segments. The result is `T x w` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, segments: &[(usize, usize)], heads: usize) -> Result<Var> {
        let x = self.value(qkv);
        let (rows, c3) = (x.rows(), x.cols());
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(NumericError::Invalid(format!(
                "attention: width {c3} incompatible with {heads} heads"
            )));
        }
        if segments.iter().any(|&(s, l)| l == 0 || s + l > rows) {
            return Err(NumericError::Invalid("attention: segment out of range".into()));
        }
        let w = c3 / 3;
        let dh = w / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let total_probs: usize = segments.iter().map(|&(_, l)| l * l * heads).sum();
        let mut probs = Vec::with_capacity(total_probs);
        let mut out = Tensor::zeros(&[rows, w]);
        let data = x.data();
        let mut scores = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, w + h * dh, 2 * w + h * dh);
                for i in 0..len {
                    let q = &data[(start + i) * c3 + qo..(start + i) * c3 + qo + dh];
                    scores.clear();
                    for j in 0..len {
                        let k = &data[(start + j) * c3 + ko..(start + j) * c3 + ko + dh];
                        let dot: T = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                        scores.push(dot * scale);
                    }
                    softmax_in_place(&mut scores);
                    let dst = &mut out.data_mut()[(start + i) * w + qo..(start + i) * w + qo + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        let v = &data[(start + j) * c3 + vo..(start + j) * c3 + vo + dh];
                        for (o, &vv) in dst.iter_mut().zip(v) {
                            *o += p * vv;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let saved = vec![Tensor::new(vec![total_probs.max(1)], if probs.is_empty() { vec![T::zero()] } else { probs })?];
        let rg = self.rg(&[qkv]);
        Ok(self.push_saved(
            out,
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                heads,
            },
            rg,
            saved,
        ))
    }

    /// Row `g` of the result is the mean of the rows of `x` listed in `groups[g]`.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let v = self.value(x);
        if groups.is_empty() || groups.iter().any(Vec::is_empty) {
            return Err(NumericError::Invalid("group_mean: empty group".into()));
        }
        if groups.iter().flatten().any(|&r| r >= v.rows()) {
            return Err(NumericError::Invalid("group_mean: row index out of range".into()));
        }
        let c = v.cols();
        let mut out = Tensor::zeros(&[groups.len(), c]);
        for (g, rows) in groups.iter().enumerate() {
            let inv = T::one() / T::lit(rows.len() as f64);
            let dst = out.row_mut(g);
            for &r in rows {
                for (o, &s) in dst.iter_mut().zip(v.row(r)) {
                    *o += s;
                }
            }
            for o in dst.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
            },
            rg,
        ))
    }

    /// Constant sparse matrix times `x`.
    pub fn spmm(&mut self, matrix: Arc<CsrMatrix<T>>, x: Var) -> Result<Var> {
        let value = matrix.matmul_dense(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SpMM { matrix, x }, rg))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let x = self.value(a);
        let mask_data: Vec<T> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let mask = Tensor::new(vec![x.rows(), x.cols()], mask_data).expect("mask shape");
        let data = x.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(vec![x.rows(), x.cols()], data).expect("dropout shape");
        let rg = self.rg(&[a]);
        self.push_saved(value, Op::Dropout(a), rg, vec![mask])
    }

    /// Reverse pass from the scalar `loss`, accumulating parameter gradients
    /// into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(grads)
    }

    /// Reverse pass from the scalar `loss` without touching any store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.apply_vjp(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_vjp(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    let slot = grad_slot(grads, *a, av);
                    T::gemm(m, n, k, g.data(), false, bv.data(), true, slot.data_mut(), true);
                }
                if needs(*b) {
                    let slot = grad_slot(grads, *b, bv);
                    T::gemm(k, m, n, av.data(), true, g.data(), false, slot.data_mut(), true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if needs(*a) {
                    axpy(grad_slot(grads, *a, g), T::one(), g);
                }
                if needs(*b) {
                    axpy(grad_slot(grads, *b, g), sign, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let slot = grad_slot(grads, *a, av);
                    for ((s, &gi), &bi) in slot.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *s += gi * bi;
                    }
                }
                if needs(*b) {
                    let slot = grad_slot(grads, *b, bv);
                    for ((s, &gi), &ai) in slot.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *s += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    axpy(grad_slot(grads, *a, g), T::one(), g);
                }
                if needs(*row) {
                    let rv = self.value(*row);
                    let slot = grad_slot(grads, *row, rv);
                    for i in 0..g.rows() {
                        for (s, &gi) in slot.data_mut().iter_mut().zip(g.row(i)) {
                            *s += gi;
                        }
                    }
                }
            }
            Op::Scale(a, f) => {
                if needs(*a) {
                    axpy(grad_slot(grads, *a, g), *f, g);
                }
            }
            Op::MulScalar(a, s) => {
                let (av, sv) = (self.value(*a), self.value(*s));
                if needs(*a) {
                    axpy(grad_slot(grads, *a, av), sv.item(), g);
                }
                if needs(*s) {
                    let dot: T = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).sum();
                    grad_slot(grads, *s, sv).data_mut()[0] += dot;
                }
            }
            Op::Exp(a) => {
                let slot = grad_slot(grads, *a, g);
                for ((s, &gi), &y) in slot.data_mut().iter_mut().zip(g.data()).zip(node.value.data()) {
                    *s += gi * y;
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let av = self.value(*a);
                let mut k = g.item();
                if matches!(node.op, Op::Mean(_)) {
                    k /= T::lit(av.len() as f64);
                }
                for s in grad_slot(grads, *a, av).data_mut() {
                    *s += k;
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                axpy(grad_slot(grads, *a, &gt), T::one(), &gt);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let slot = grad_slot(grads, *a, av);
                for ((s, &gi), &x) in slot.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *s += gi * gelu_grad(x);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let av = self.value(*a);
                let slot = grad_slot(grads, *a, av);
                for ((s, &gi), &x) in slot.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *s += if x > T::zero() { gi } else { gi * *slope };
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (normed, inv_std) = (&node.saved[0], &node.saved[1]);
                let gv = self.value(*gain);
                let c = normed.cols();
                let n = T::lit(c as f64);
                if needs(*gain) {
                    let slot = grad_slot(grads, *gain, gv);
                    for i in 0..g.rows() {
                        for ((s, &gi), &xh) in slot.data_mut().iter_mut().zip(g.row(i)).zip(normed.row(i)) {
                            *s += gi * xh;
                        }
                    }
                }
                if needs(*bias) {
                    let bv = self.value(*bias);
                    let slot = grad_slot(grads, *bias, bv);
                    for i in 0..g.rows() {
                        for (s, &gi) in slot.data_mut().iter_mut().zip(g.row(i)) {
                            *s += gi;
                        }
                    }
                }
                if needs(*x) {
                    let xv = self.value(*x);
                    let slot = grad_slot(grads, *x, xv);
                    let mut dxhat = vec![T::zero(); c];
                    for i in 0..g.rows() {
                        let (gr, xh) = (g.row(i), normed.row(i));
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv.data()[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / n;
                        let mean_dx = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() / n;
                        let inv = inv_std.data()[i];
                        for (j, s) in slot.row_mut(i).iter_mut().enumerate() {
                            *s += inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let slot = grad_slot(grads, *a, y);
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (j, s) in slot.row_mut(i).iter_mut().enumerate() {
                        *s += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::L2Normalize(a) => {
                let (y, norms) = (&node.value, &node.saved[0]);
                let slot = grad_slot(grads, *a, y);
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    let inv = T::one() / norms.data()[i];
                    for (j, s) in slot.row_mut(i).iter_mut().enumerate() {
                        *s += (gr[j] - yr[j] * dot) * inv;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let probs = &node.saved[0];
                let k = g.item() / T::lit(targets.len() as f64);
                let slot = grad_slot(grads, *logits, probs);
                for (i, &t) in targets.iter().enumerate() {
                    let row = slot.row_mut(i);
                    for (s, &p) in row.iter_mut().zip(probs.row(i)) {
                        *s += k * p;
                    }
                    row[t] -= k;
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let slot = grad_slot(grads, *table, tv);
                for (i, &id) in ids.iter().enumerate() {
                    for (s, &gi) in slot.row_mut(id).iter_mut().zip(g.row(i)) {
                        *s += gi;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    if needs(p) {
                        let slot = grad_slot(grads, p, pv);
                        for (s, &gi) in slot.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *s += gi;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let slot = grad_slot(grads, *x, xv);
                let dst = &mut slot.data_mut()[start * c..start * c + g.len()];
                for (s, &gi) in dst.iter_mut().zip(g.data()) {
                    *s += gi;
                }
            }
            Op::Attention { qkv, segments, heads } => {
                self.attention_vjp(*qkv, segments, *heads, &node.saved[0], g, grads);
            }
            Op::GroupMean { x, groups } => {
                let xv = self.value(*x);
                let slot = grad_slot(grads, *x, xv);
                for (gi, rows) in groups.iter().enumerate() {
                    let inv = T::one() / T::lit(rows.len() as f64);
                    for &r in rows {
                        for (s, &gv) in slot.row_mut(r).iter_mut().zip(g.row(gi)) {
                            *s += gv * inv;
                        }
                    }
                }
            }
            Op::SpMM { matrix, x } => {
                let xv = self.value(*x);
                let slot = grad_slot(grads, *x, xv);
                for i in 0..matrix.rows {
                    for (j, v) in matrix.row(i) {
                        for (s, &gv) in slot.row_mut(j).iter_mut().zip(g.row(i)) {
                            *s += v * gv;
                        }
                    }
                }
            }
            Op::Dropout(a) => {
                let mask = &node.saved[0];
                let slot = grad_slot(grads, *a, mask);
                for ((s, &gi), &m) in slot.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                    *s += gi * m;
                }
            }
        }
    }

    fn attention_vjp(
        &self,
        qkv: Var,
        segments: &[(usize, usize)],
        heads: usize,
        probs: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let x = self.value(qkv);
        let c3 = x.cols();
        let w = c3 / 3;
        let dh = w / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let data = x.data();
        let slot = grad_slot(grads, qkv, x);
        let dx = slot.data_mut();
        let probs = probs.data();
        let mut p_off = 0;
        let mut dp = Vec::new();
        for &(start, len) in segments {
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, w + h * dh, 2 * w + h * dh);
                for i in 0..len {
                    let p = &probs[p_off..p_off + len];
                    p_off += len;
                    let go = &g.data()[(start + i) * w + qo..(start + i) * w + qo + dh];
                    // dV_j += p_ij * dO_i ; dP_ij = dO_i . V_j
                    dp.clear();
                    for j in 0..len {
                        let vrow = (start + j) * c3 + vo;
                        let mut d = T::zero();
                        for t in 0..dh {
                            d += go[t] * data[vrow + t];
                            dx[vrow + t] += p[j] * go[t];
                        }
                        dp.push(d);
                    }
                    let dot: T = dp.iter().zip(p).map(|(&a, &b)| a * b).sum();
                    let qrow = (start + i) * c3 + qo;
                    for j in 0..len {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = (start + j) * c3 + ko;
                        for t in 0..dh {
                            dx[qrow + t] += ds * data[krow + t];
                            dx[krow + t] += ds * data[qrow + t];
                        }
                    }
                }
            }
        }
    }
}

fn axpy<T: Scalar>(dst: &mut Tensor<T>, k: T, src: &Tensor<T>) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += k * s;
    }
}
