//! Append-only operation tape with reverse-mode differentiation.
//!
//! Every primitive the model needs is a tape method: it validates shapes,
//! computes the forward value eagerly, and records enough to replay the
//! chain rule backwards. Nodes are appended in execution order, so the tape
//! is topologically sorted by construction and [`Tape::backward`] is a
//! single reverse sweep that visits each node exactly once.
//!
//! The tape is never mutated by `backward`; replaying it produces identical
//! gradients. Each node carries a [`Scope`] label so structural checks (for
//! example, that the spiking branch records no softmax) can scan recorded
//! ops per branch.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the network recorded a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Shared,
    Ann,
    Snn,
    Interact,
}

#[derive(Debug, Clone)]
enum Op<R: Real> {
    Leaf,
    /// (m,k)·(k,n) -> (m,n)
    Matmul { a: ValueId, b: ValueId },
    /// (m,k)·(n,k)ᵀ -> (m,n)
    MatmulTb { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: R },
    AddScalar { a: ValueId },
    /// Elementwise add of a detached constant vector (no gradient into it).
    AddDetached { a: ValueId },
    /// Elementwise multiply by a detached constant vector.
    MulDetached { a: ValueId, k: Vec<R> },
    /// (rows,c) + bias (c,) broadcast over rows.
    AddBiasRow { a: ValueId, bias: ValueId },
    /// (rows,c) * col (rows,1) broadcast over columns.
    MulBcastCol { a: ValueId, col: ValueId },
    SumAll { a: ValueId },
    Gelu { a: ValueId },
    Sigmoid { a: ValueId },
    Abs { a: ValueId },
    SoftmaxRows { a: ValueId },
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Vec<R>,
        inv: Vec<R>,
    },
    BatchNormTrain {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Vec<R>,
        inv: Vec<R>,
    },
    BatchNormEval {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Vec<R>,
        inv: Vec<R>,
    },
    /// Hard threshold forward, arctan-family surrogate backward.
    Spike { a: ValueId, v_th: R, sur_k: R },
    PermuteRows { a: ValueId, perm: Vec<usize> },
    Reshape { a: ValueId },
    Transpose { a: ValueId },
    SliceRows { a: ValueId, r0: usize },
    SliceCols { a: ValueId, c0: usize, c1: usize },
    GatherRows { a: ValueId, idx: Vec<usize> },
    ConcatCols { parts: Vec<ValueId> },
    ConcatRows { parts: Vec<ValueId> },
    /// (n,c) -> (n(n+1)/2, c), row p=(i,j) i<=j holds x_i - x_j.
    PairDiffUpper { a: ValueId, n: usize },
    /// (n(n+1)/2, 1) -> (n,n) mirrored across the diagonal.
    SymFromUpper { a: ValueId, n: usize },
    Conv2d {
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    },
    MaxPool2d { x: ValueId, argmax: Vec<usize> },
    /// Per-element BCE against a detached target, numerically stable form.
    BceWithLogits { z: ValueId, target: Vec<R> },
}

impl<R: Real> Op<R> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::MatmulTb { .. } => "matmul_tb",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::AddDetached { .. } => "add_detached",
            Op::MulDetached { .. } => "mul_detached",
            Op::AddBiasRow { .. } => "add_bias_row",
            Op::MulBcastCol { .. } => "mul_bcast_col",
            Op::SumAll { .. } => "sum_all",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Abs { .. } => "abs",
            Op::SoftmaxRows { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormEval { .. } => "batch_norm_eval",
            Op::Spike { .. } => "spike",
            Op::PermuteRows { .. } => "permute_rows",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::ConcatRows { .. } => "concat_rows",
            Op::PairDiffUpper { .. } => "pair_diff_upper",
            Op::SymFromUpper { .. } => "sym_from_upper",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node<R: Real> {
    op: Op<R>,
    value: Vec<R>,
    shape: Vec<usize>,
    needs_grad: bool,
    scope: Scope,
}

/// Gradients produced by one backward sweep, indexed by [`ValueId`].
pub struct Gradients<R: Real> {
    grads: Vec<Option<Vec<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, id: ValueId) -> Option<&[R]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a value, densified with zeros when it did not
    /// participate in the loss.
    pub fn dense(&self, id: ValueId, numel: usize) -> Vec<R> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![R::zero(); numel],
        }
    }
}

/// The recording tape. See the module docs.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
    scope: Scope,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scope: Scope::Shared,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn set_scope(&mut self, scope: Scope) {
        self.scope = scope;
    }

    pub fn value(&self, id: ValueId) -> &[R] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn needs_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Copy a value out as a standalone tensor.
    pub fn tensor(&self, id: ValueId) -> Tensor<R> {
        Tensor::new(&self.nodes[id.0].shape, self.nodes[id.0].value.clone())
            .expect("node shape is consistent")
    }

    /// Count recorded ops per kind within one scope.
    pub fn kind_counts(&self, scope: Scope) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for n in &self.nodes {
            if n.scope == scope {
                *out.entry(n.op.kind()).or_insert(0) += 1;
            }
        }
        out
    }

    /// Ids of every node of a given op kind (any scope).
    pub fn nodes_of_kind(&self, kind: &str) -> Vec<ValueId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op.kind() == kind)
            .map(|(i, _)| ValueId(i))
            .collect()
    }

    fn push(&mut self, op: Op<R>, value: Vec<R>, shape: Vec<usize>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            shape,
            needs_grad,
            scope: self.scope,
        });
        id
    }

    fn ng(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn as_matrix(&self, id: ValueId, what: &str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(format!("{what} must be 2-d, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn rows_cols(&self, id: ValueId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        let c = *s.last().unwrap_or(&1);
        (self.nodes[id.0].value.len() / c.max(1), c)
    }

    // ---- leaves ------------------------------------------------------

    /// Record a tensor as a leaf; gradient flows back iff the tensor
    /// requires it.
    pub fn leaf(&mut self, t: &Tensor<R>) -> ValueId {
        self.push(
            Op::Leaf,
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
        )
    }

    /// Record a constant (never differentiated).
    pub fn constant(&mut self, data: Vec<R>, shape: &[usize]) -> ValueId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.push(Op::Leaf, data, shape.to_vec(), false)
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.as_matrix(a, "matmul lhs")?;
        let (k2, n) = self.as_matrix(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims disagree: lhs {:?} vs rhs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == R::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Matmul { a, b }, out, vec![m, n], ng))
    }

    /// `a · bᵀ` with `a: (m,k)`, `b: (n,k)`.
    pub fn matmul_tb(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, k) = self.as_matrix(a, "matmul_tb lhs")?;
        let (n, k2) = self.as_matrix(b, "matmul_tb rhs")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_tb inner dims disagree: lhs {:?} vs rhs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                let mut acc = R::zero();
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                out[i * n + j] = acc;
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::MatmulTb { a, b }, out, vec![m, n], ng))
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, a: ValueId, b: ValueId, what: &str) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{what} operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "add")?;
        let out: Vec<R> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Add { a, b }, out, shape, ng))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "sub")?;
        let out: Vec<R> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Sub { a, b }, out, shape, ng))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<R> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, out, shape, ng))
    }

    pub fn scale(&mut self, a: ValueId, c: R) -> ValueId {
        let out: Vec<R> = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        self.push(Op::Scale { a, c }, out, shape, ng)
    }

    pub fn add_scalar(&mut self, a: ValueId, c: R) -> ValueId {
        let out: Vec<R> = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        self.push(Op::AddScalar { a }, out, shape, ng)
    }

    /// Add a detached vector (mask, reset term, ...); no gradient into `k`.
    pub fn add_detached(&mut self, a: ValueId, k: &[R]) -> Result<ValueId> {
        if k.len() != self.nodes[a.0].value.len() {
            return Err(Error::shape(format!(
                "detached add length {} vs value {}",
                k.len(),
                self.nodes[a.0].value.len()
            )));
        }
        let out: Vec<R> = self.nodes[a.0]
            .value
            .iter()
            .zip(k)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        Ok(self.push(Op::AddDetached { a }, out, shape, ng))
    }

    /// Multiply by a detached vector; the vector is treated as constant.
    pub fn mul_detached(&mut self, a: ValueId, k: &[R]) -> Result<ValueId> {
        if k.len() != self.nodes[a.0].value.len() {
            return Err(Error::shape(format!(
                "detached mul length {} vs value {}",
                k.len(),
                self.nodes[a.0].value.len()
            )));
        }
        let out: Vec<R> = self.nodes[a.0]
            .value
            .iter()
            .zip(k)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        Ok(self.push(
            Op::MulDetached { a, k: k.to_vec() },
            out,
            shape,
            ng,
        ))
    }

    pub fn add_bias_row(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (rows, c) = self.rows_cols(a);
        if self.nodes[bias.0].value.len() != c {
            return Err(Error::shape(format!(
                "bias length {} vs row width {}",
                self.nodes[bias.0].value.len(),
                c
            )));
        }
        let mut out = self.nodes[a.0].value.clone();
        let bv = &self.nodes[bias.0].value;
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] += bv[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a, bias]);
        Ok(self.push(Op::AddBiasRow { a, bias }, out, shape, ng))
    }

    /// `(rows,c) * (rows,1)` broadcast across columns.
    pub fn mul_bcast_col(&mut self, a: ValueId, col: ValueId) -> Result<ValueId> {
        let (rows, c) = self.rows_cols(a);
        if self.nodes[col.0].value.len() != rows {
            return Err(Error::shape(format!(
                "column length {} vs rows {}",
                self.nodes[col.0].value.len(),
                rows
            )));
        }
        let mut out = self.nodes[a.0].value.clone();
        let cv = &self.nodes[col.0].value;
        for r in 0..rows {
            for j in 0..c {
                out[r * c + j] *= cv[r];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a, col]);
        Ok(self.push(Op::MulBcastCol { a, col }, out, shape, ng))
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: R = self.nodes[a.0].value.iter().copied().sum();
        let ng = self.ng(&[a]);
        self.push(Op::SumAll { a }, vec![s], vec![1], ng)
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.scale(s, R::of(1.0 / n as f64))
    }

    pub fn gelu(&mut self, a: ValueId) -> ValueId {
        let out: Vec<R> = self.nodes[a.0].value.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        self.push(Op::Gelu { a }, out, shape, ng)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let out: Vec<R> = self.nodes[a.0].value.iter().map(|&x| sigmoid_fwd(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        self.push(Op::Sigmoid { a }, out, shape, ng)
    }

    pub fn abs(&mut self, a: ValueId) -> ValueId {
        let out: Vec<R> = self.nodes[a.0].value.iter().map(|&x| x.abs()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        self.push(Op::Abs { a }, out, shape, ng)
    }

    // ---- normalizations ------------------------------------------------

    /// Row softmax over the last axis, max-subtracted for stability.
    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        if self.nodes[a.0].value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(
                "softmax_rows received a non-finite input".into(),
            ));
        }
        let (rows, c) = self.rows_cols(a);
        if c == 0 {
            return Err(Error::shape("softmax_rows over empty rows"));
        }
        let mut out = vec![R::zero(); rows * c];
        let av = &self.nodes[a.0].value;
        for r in 0..rows {
            let row = &av[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut denom = R::zero();
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[r * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out[r * c + j] /= denom;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        Ok(self.push(Op::SoftmaxRows { a }, out, shape, ng))
    }

    /// Per-row normalization with affine, epsilon 1e-5 inside the root.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let (rows, c) = self.rows_cols(x);
        if self.nodes[gamma.0].value.len() != c || self.nodes[beta.0].value.len() != c {
            return Err(Error::shape(format!(
                "layer_norm affine width {}x{} vs row width {}",
                self.nodes[gamma.0].value.len(),
                self.nodes[beta.0].value.len(),
                c
            )));
        }
        let eps = R::of(LN_EPS);
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut out = vec![R::zero(); rows * c];
        let mut xhat = vec![R::zero(); rows * c];
        let mut inv = vec![R::zero(); rows];
        let cn = R::of(c as f64);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<R>() / cn;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<R>()
                / cn;
            let iv = (var + eps).sqrt().recip();
            inv[r] = iv;
            for j in 0..c {
                let xh = (row[j] - mean) * iv;
                xhat[r * c + j] = xh;
                out[r * c + j] = gv[j] * xh + bv[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, xhat, inv },
            out,
            shape,
            ng,
        ))
    }

    /// Per-column batch normalization over rows, using batch statistics.
    /// Returns the output id plus the biased batch mean/var per column so
    /// the caller can fold them into running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
    ) -> Result<(ValueId, Vec<R>, Vec<R>)> {
        let (rows, c) = self.rows_cols(x);
        if rows < 2 {
            return Err(Error::config(format!(
                "batch_norm train mode needs >= 2 rows along the statistics axis, got {rows}"
            )));
        }
        self.check_bn_affine(gamma, beta, c)?;
        let eps = R::of(BN_EPS);
        let xv = &self.nodes[x.0].value;
        let rn = R::of(rows as f64);
        let mut mean = vec![R::zero(); c];
        let mut var = vec![R::zero(); c];
        for r in 0..rows {
            for j in 0..c {
                mean[j] += xv[r * c + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= rn;
        }
        for r in 0..rows {
            for j in 0..c {
                let d = xv[r * c + j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= rn;
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut inv = vec![R::zero(); c];
        for j in 0..c {
            inv[j] = (var[j] + eps).sqrt().recip();
        }
        let mut out = vec![R::zero(); rows * c];
        let mut xhat = vec![R::zero(); rows * c];
        for r in 0..rows {
            for j in 0..c {
                let xh = (xv[r * c + j] - mean[j]) * inv[j];
                xhat[r * c + j] = xh;
                out[r * c + j] = gv[j] * xh + bv[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x, gamma, beta]);
        let id = self.push(
            Op::BatchNormTrain { x, gamma, beta, xhat, inv },
            out,
            shape,
            ng,
        );
        Ok((id, mean, var))
    }

    /// Batch normalization against fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[R],
        running_var: &[R],
    ) -> Result<ValueId> {
        let (rows, c) = self.rows_cols(x);
        self.check_bn_affine(gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(format!(
                "running stats width {} vs channels {}",
                running_mean.len(),
                c
            )));
        }
        let eps = R::of(BN_EPS);
        let mut inv = vec![R::zero(); c];
        for j in 0..c {
            inv[j] = (running_var[j] + eps).sqrt().recip();
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut out = vec![R::zero(); rows * c];
        let mut xhat = vec![R::zero(); rows * c];
        for r in 0..rows {
            for j in 0..c {
                let xh = (xv[r * c + j] - running_mean[j]) * inv[j];
                xhat[r * c + j] = xh;
                out[r * c + j] = gv[j] * xh + bv[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNormEval { x, gamma, beta, xhat, inv },
            out,
            shape,
            ng,
        ))
    }

    fn check_bn_affine(&self, gamma: ValueId, beta: ValueId, c: usize) -> Result<()> {
        if self.nodes[gamma.0].value.len() != c || self.nodes[beta.0].value.len() != c {
            return Err(Error::shape(format!(
                "batch_norm affine width {}x{} vs channels {}",
                self.nodes[gamma.0].value.len(),
                self.nodes[beta.0].value.len(),
                c
            )));
        }
        Ok(())
    }

    // ---- spiking ---------------------------------------------------------

    /// Hard threshold: 1 iff `x - v_th >= 0`. Backward substitutes the
    /// surrogate `1 / (1 + (k (x - v_th))^2)`.
    pub fn spike(&mut self, a: ValueId, v_th: R, sur_k: R) -> ValueId {
        let out: Vec<R> = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x - v_th >= R::zero() { R::one() } else { R::zero() })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        self.push(Op::Spike { a, v_th, sur_k }, out, shape, ng)
    }

    // ---- data movement ---------------------------------------------------

    /// `out[i] = in[perm[i]]` over rows of an `(n, c)` value.
    pub fn permute_rows(&mut self, a: ValueId, perm: &[usize]) -> Result<ValueId> {
        let (rows, c) = self.rows_cols(a);
        if perm.len() != rows {
            return Err(Error::shape(format!(
                "permutation length {} vs rows {}",
                perm.len(),
                rows
            )));
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![R::zero(); rows * c];
        for (i, &src) in perm.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&av[src * c..(src + 1) * c]);
        }
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(&[a]);
        Ok(self.push(
            Op::PermuteRows { a, perm: perm.to_vec() },
            out,
            shape,
            ng,
        ))
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.len() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let out = self.nodes[a.0].value.clone();
        let ng = self.ng(&[a]);
        Ok(self.push(Op::Reshape { a }, out, shape.to_vec(), ng))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = self.as_matrix(a, "transpose input")?;
        let av = &self.nodes[a.0].value;
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Op::Transpose { a }, out, vec![n, m], ng))
    }

    pub fn slice_rows(&mut self, a: ValueId, r0: usize, r1: usize) -> Result<ValueId> {
        let (rows, c) = self.rows_cols(a);
        if r0 >= r1 || r1 > rows {
            return Err(Error::shape(format!(
                "row slice {r0}..{r1} out of {rows}"
            )));
        }
        let out = self.nodes[a.0].value[r0 * c..r1 * c].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Op::SliceRows { a, r0 }, out, vec![r1 - r0, c], ng))
    }

    pub fn slice_cols(&mut self, a: ValueId, c0: usize, c1: usize) -> Result<ValueId> {
        let (rows, c) = self.rows_cols(a);
        if c0 >= c1 || c1 > c {
            return Err(Error::shape(format!(
                "column slice {c0}..{c1} out of {c}"
            )));
        }
        let av = &self.nodes[a.0].value;
        let w = c1 - c0;
        let mut out = vec![R::zero(); rows * w];
        for r in 0..rows {
            out[r * w..(r + 1) * w].copy_from_slice(&av[r * c + c0..r * c + c1]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Op::SliceCols { a, c0, c1 }, out, vec![rows, w], ng))
    }

    /// `out[i] = in[idx[i]]` over rows; indices may repeat (backward
    /// scatter-adds).
    pub fn gather_rows(&mut self, a: ValueId, idx: &[usize]) -> Result<ValueId> {
        let (rows, c) = self.rows_cols(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!(
                "gather index {bad} out of {rows} rows"
            )));
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![R::zero(); idx.len() * c];
        for (i, &src) in idx.iter().enumerate() {
            out[i * c..(i + 1) * c].copy_from_slice(&av[src * c..(src + 1) * c]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(
            Op::GatherRows { a, idx: idx.to_vec() },
            out,
            vec![idx.len(), c],
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols of zero parts"));
        }
        let rows = self.rows_cols(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, w) = self.rows_cols(p);
            if r != rows {
                return Err(Error::shape(format!(
                    "concat_cols row counts differ: {} vs {}",
                    rows, r
                )));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![R::zero(); rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                let pv = &self.nodes[p.0].value;
                out[r * total + off..r * total + off + w]
                    .copy_from_slice(&pv[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Op::ConcatCols { parts: parts.to_vec() },
            out,
            vec![rows, total],
            ng,
        ))
    }

    /// Stack equal-width values along the row axis.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows of zero parts"));
        }
        let c = self.rows_cols(parts[0]).1;
        let mut rows = 0;
        for &p in parts {
            let (r, w) = self.rows_cols(p);
            if w != c {
                return Err(Error::shape(format!(
                    "concat_rows widths differ: {} vs {}",
                    c, w
                )));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Op::ConcatRows { parts: parts.to_vec() },
            out,
            vec![rows, c],
            ng,
        ))
    }

    /// Pairwise row differences for the upper triangle (diagonal included):
    /// row p=(i,j), i<=j, holds `x_i - x_j`.
    pub fn pair_diff_upper(&mut self, a: ValueId) -> Result<ValueId> {
        let (n, c) = self.as_matrix(a, "pair_diff_upper input")?;
        let pairs = n * (n + 1) / 2;
        let av = &self.nodes[a.0].value;
        let mut out = vec![R::zero(); pairs * c];
        let mut p = 0;
        for i in 0..n {
            for j in i..n {
                for k in 0..c {
                    out[p * c + k] = av[i * c + k] - av[j * c + k];
                }
                p += 1;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Op::PairDiffUpper { a, n }, out, vec![pairs, c], ng))
    }

    /// Mirror an upper-triangle column vector into a symmetric `(n,n)` map.
    pub fn sym_from_upper(&mut self, a: ValueId, n: usize) -> Result<ValueId> {
        let pairs = n * (n + 1) / 2;
        if self.nodes[a.0].value.len() != pairs {
            return Err(Error::shape(format!(
                "sym_from_upper needs {} entries for n={}, got {}",
                pairs,
                n,
                self.nodes[a.0].value.len()
            )));
        }
        let av = &self.nodes[a.0].value;
        let mut out = vec![R::zero(); n * n];
        let mut p = 0;
        for i in 0..n {
            for j in i..n {
                out[i * n + j] = av[p];
                out[j * n + i] = av[p];
                p += 1;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Op::SymFromUpper { a, n }, out, vec![n, n], ng))
    }

    // ---- spatial ---------------------------------------------------------

    /// 2-d convolution: `x (cin,h,w)`, `w (cout,cin,k,k)`, `b (cout)`.
    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        b: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects x (cin,h,w) and w (cout,cin,k,k), got {xs:?} / {ws:?}"
            )));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin || k != k2 {
            return Err(Error::shape(format!(
                "conv2d kernel {ws:?} incompatible with input {xs:?}"
            )));
        }
        if self.nodes[b.0].value.len() != cout {
            return Err(Error::shape("conv2d bias width mismatch"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv2d kernel {k} larger than padded input {h}x{wd}+{pad}"
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![R::zero(); cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bv[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xv[ci * h * wd + iy as usize * wd + ix as usize]
                                    * wv[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[co * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            Op::Conv2d { x, w, b, stride, pad },
            out,
            vec![cout, ho, wo],
            ng,
        ))
    }

    /// Non-overlapping max pooling with window and stride `k`.
    pub fn max_pool2d(&mut self, x: ValueId, k: usize) -> Result<ValueId> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 {
            return Err(Error::shape(format!("max_pool2d expects (c,h,w), got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h % k != 0 || w % k != 0 {
            return Err(Error::shape(format!(
                "max_pool2d window {k} does not divide {h}x{w}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![R::zero(); c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = R::neg_infinity();
                    let mut best_idx = 0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = ci * h * w + (oy * k + ky) * w + (ox * k + kx);
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[ci * ho * wo + oy * wo + ox] = best;
                    argmax[ci * ho * wo + oy * wo + ox] = best_idx;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Op::MaxPool2d { x, argmax }, out, vec![c, ho, wo], ng))
    }

    // ---- losses ------------------------------------------------------------

    /// Per-element binary cross entropy on logits against a detached target,
    /// in the overflow-safe form `max(z,0) - z y + ln(1 + e^(-|z|))`.
    pub fn bce_with_logits(&mut self, z: ValueId, target: &[R]) -> Result<ValueId> {
        if target.len() != self.nodes[z.0].value.len() {
            return Err(Error::shape(format!(
                "bce target length {} vs logits {}",
                target.len(),
                self.nodes[z.0].value.len()
            )));
        }
        let out: Vec<R> = self.nodes[z.0]
            .value
            .iter()
            .zip(target)
            .map(|(&zv, &y)| {
                zv.max(R::zero()) - zv * y + (R::one() + (-zv.abs()).exp()).ln()
            })
            .collect();
        let shape = self.nodes[z.0].shape.clone();
        let ng = self.ng(&[z]);
        Ok(self.push(
            Op::BceWithLogits { z, target: target.to_vec() },
            out,
            shape,
            ng,
        ))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss. The tape itself is untouched, so
    /// calling this twice yields identical gradients.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<R>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.step_backward(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<R>>], id: ValueId, add: impl FnOnce(&mut [R])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![R::zero(); self.nodes[id.0].value.len()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn step_backward(&self, idx: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accum(grads, *a, |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = R::zero();
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] += acc;
                        }
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == R::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatmulTb { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accum(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == R::zero() {
                                continue;
                            }
                            for p in 0..k {
                                da[i * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == R::zero() {
                                continue;
                            }
                            for p in 0..k {
                                db[j * k + p] += gij * av[i * k + p];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accum(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accum(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * c;
                    }
                });
            }
            Op::AddScalar { a } | Op::AddDetached { a } | Op::Reshape { a } => {
                self.accum(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::MulDetached { a, k } => {
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * k[i];
                    }
                });
            }
            Op::AddBiasRow { a, bias } => {
                let c = self.nodes[bias.0].value.len();
                self.accum(grads, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accum(grads, *bias, |db| {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                });
            }
            Op::MulBcastCol { a, col } => {
                let rows = self.nodes[col.0].value.len();
                let c = g.len() / rows;
                let av = &self.nodes[a.0].value;
                let cv = &self.nodes[col.0].value;
                self.accum(grads, *a, |da| {
                    for r in 0..rows {
                        for j in 0..c {
                            da[r * c + j] += g[r * c + j] * cv[r];
                        }
                    }
                });
                self.accum(grads, *col, |dc| {
                    for r in 0..rows {
                        let mut acc = R::zero();
                        for j in 0..c {
                            acc += g[r * c + j] * av[r * c + j];
                        }
                        dc[r] += acc;
                    }
                });
            }
            Op::SumAll { a } => {
                let gv = g[0];
                self.accum(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                });
            }
            Op::Gelu { a } => {
                let av = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_grad(av[i]);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let yv = &node.value;
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * yv[i] * (R::one() - yv[i]);
                    }
                });
            }
            Op::Abs { a } => {
                let av = &self.nodes[a.0].value;
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        let s = if av[i] > R::zero() {
                            R::one()
                        } else if av[i] < R::zero() {
                            -R::one()
                        } else {
                            R::zero()
                        };
                        da[i] += g[i] * s;
                    }
                });
            }
            Op::SoftmaxRows { a } => {
                let y = &node.value;
                let c = *node.shape.last().unwrap();
                let rows = y.len() / c;
                self.accum(grads, *a, |da| {
                    for r in 0..rows {
                        let mut dot = R::zero();
                        for j in 0..c {
                            dot += g[r * c + j] * y[r * c + j];
                        }
                        for j in 0..c {
                            da[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv } => {
                let c = self.nodes[gamma.0].value.len();
                let rows = xhat.len() / c;
                let gv = &self.nodes[gamma.0].value;
                let cn = R::of(c as f64);
                self.accum(grads, *beta, |db| {
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                });
                self.accum(grads, *gamma, |dg| {
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        let mut mean_dxh = R::zero();
                        let mut mean_dxh_xh = R::zero();
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * c + j];
                        }
                        mean_dxh /= cn;
                        mean_dxh_xh /= cn;
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            dx[r * c + j] +=
                                inv[r] * (dxh - mean_dxh - xhat[r * c + j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv } => {
                let c = self.nodes[gamma.0].value.len();
                let rows = xhat.len() / c;
                let gv = &self.nodes[gamma.0].value;
                let rn = R::of(rows as f64);
                self.accum(grads, *beta, |db| {
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                });
                self.accum(grads, *gamma, |dg| {
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.accum(grads, *x, |dx| {
                    for j in 0..c {
                        let mut mean_dxh = R::zero();
                        let mut mean_dxh_xh = R::zero();
                        for r in 0..rows {
                            let dxh = g[r * c + j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[r * c + j];
                        }
                        mean_dxh /= rn;
                        mean_dxh_xh /= rn;
                        for r in 0..rows {
                            let dxh = g[r * c + j] * gv[j];
                            dx[r * c + j] +=
                                inv[j] * (dxh - mean_dxh - xhat[r * c + j] * mean_dxh_xh);
                        }
                    }
                });
            }
            Op::BatchNormEval { x, gamma, beta, xhat, inv } => {
                let c = self.nodes[gamma.0].value.len();
                let rows = xhat.len() / c;
                let gv = &self.nodes[gamma.0].value;
                self.accum(grads, *beta, |db| {
                    for r in 0..rows {
                        for j in 0..c {
                            db[j] += g[r * c + j];
                        }
                    }
                });
                self.accum(grads, *gamma, |dg| {
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                });
                self.accum(grads, *x, |dx| {
                    for r in 0..rows {
                        for j in 0..c {
                            dx[r * c + j] += g[r * c + j] * gv[j] * inv[j];
                        }
                    }
                });
            }
            Op::Spike { a, v_th, sur_k } => {
                let av = &self.nodes[a.0].value;
                let (v_th, sur_k) = (*v_th, *sur_k);
                self.accum(grads, *a, |da| {
                    for i in 0..g.len() {
                        let v = sur_k * (av[i] - v_th);
                        da[i] += g[i] / (R::one() + v * v);
                    }
                });
            }
            Op::PermuteRows { a, perm } => {
                let c = g.len() / perm.len();
                self.accum(grads, *a, |da| {
                    for (i, &src) in perm.iter().enumerate() {
                        for j in 0..c {
                            da[src * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                // node shape is (n, m); grads flow back transposed
                let (n, m) = (node.shape[0], node.shape[1]);
                self.accum(grads, *a, |da| {
                    for j in 0..n {
                        for i in 0..m {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::SliceRows { a, r0 } => {
                let c = self.rows_cols(*a).1;
                let r0 = *r0;
                self.accum(grads, *a, |da| {
                    for (i, &gv) in g.iter().enumerate() {
                        da[r0 * c + i] += gv;
                    }
                });
            }
            Op::SliceCols { a, c0, c1 } => {
                let c = self.rows_cols(*a).1;
                let w = c1 - c0;
                let rows = g.len() / w;
                let c0 = *c0;
                self.accum(grads, *a, |da| {
                    for r in 0..rows {
                        for j in 0..w {
                            da[r * c + c0 + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let c = self.rows_cols(*a).1;
                self.accum(grads, *a, |da| {
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            da[src * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let widths: Vec<usize> =
                    parts.iter().map(|&p| self.rows_cols(p).1).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let w = widths[pi];
                    self.accum(grads, p, |dp| {
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.accum(grads, p, |dp| {
                        for j in 0..n {
                            dp[j] += g[off + j];
                        }
                    });
                    off += n;
                }
            }
            Op::PairDiffUpper { a, n } => {
                let c = self.rows_cols(*a).1;
                let n = *n;
                self.accum(grads, *a, |da| {
                    let mut p = 0;
                    for i in 0..n {
                        for j in i..n {
                            for k in 0..c {
                                da[i * c + k] += g[p * c + k];
                                da[j * c + k] -= g[p * c + k];
                            }
                            p += 1;
                        }
                    }
                });
            }
            Op::SymFromUpper { a, n } => {
                let n = *n;
                self.accum(grads, *a, |da| {
                    let mut p = 0;
                    for i in 0..n {
                        for j in i..n {
                            let mut acc = g[i * n + j];
                            if i != j {
                                acc += g[j * n + i];
                            }
                            da[p] += acc;
                            p += 1;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = &self.nodes[x.0].shape;
                let ws = &self.nodes[w.0].shape;
                let (cin, h, wd) = (xs[0], xs[1], xs[2]);
                let (cout, k) = (ws[0], ws[2]);
                let (ho, wo) = (node.shape[1], node.shape[2]);
                let (stride, pad) = (*stride, *pad);
                let xv = &self.nodes[x.0].value;
                let wv = &self.nodes[w.0].value;
                self.accum(grads, *b, |db| {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                db[co] += g[co * ho * wo + oy * wo + ox];
                            }
                        }
                    }
                });
                self.accum(grads, *w, |dw| {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[co * ho * wo + oy * wo + ox];
                                if gv == R::zero() {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            dw[((co * cin + ci) * k + ky) * k + kx] += gv
                                                * xv[ci * h * wd
                                                    + iy as usize * wd
                                                    + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *x, |dx| {
                    for co in 0..cout {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[co * ho * wo + oy * wo + ox];
                                if gv == R::zero() {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            dx[ci * h * wd + iy as usize * wd + ix as usize] +=
                                                gv * wv[((co * cin + ci) * k + ky) * k + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => {
                self.accum(grads, *x, |dx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                });
            }
            Op::BceWithLogits { z, target } => {
                let zv = &self.nodes[z.0].value;
                self.accum(grads, *z, |dz| {
                    for i in 0..g.len() {
                        dz[i] += g[i] * (sigmoid_fwd(zv[i]) - target[i]);
                    }
                });
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

fn sigmoid_fwd<R: Real>(x: R) -> R {
    if x >= R::zero() {
        (R::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

// tanh form of GELU; the model only needs a smooth transformer FFN activation.
fn gelu_fwd<R: Real>(x: R) -> R {
    let c = R::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = R::of(0.044715);
    let u = c * (x + a * x * x * x);
    R::of(0.5) * x * (R::one() + u.tanh())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::of(0.797_884_560_802_865_4);
    let a = R::of(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (R::one() + R::of(3.0) * a * x * x);
    R::of(0.5) * (R::one() + t) + R::of(0.5) * x * (R::one() - t * t) * du
}
