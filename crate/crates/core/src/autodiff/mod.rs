//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a static, topologically ordered list of primitive
//! operations. Named parameters live inside the graph and are the targets of
//! [`Graph::gradient`]; named inputs are bound at evaluation time. Evaluation
//! is pure: identical bindings produce bitwise-identical outputs.
//!
//! Any NaN or infinity produced during the forward or backward pass aborts
//! with a diagnostic naming the offending node.

mod backward;
mod check;
mod op;

use std::collections::BTreeMap;

use thiserror::Error;

pub use check::{check_gradient, GradCheckReport};
pub use op::{sigmoid, softplus, Op};

use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node in its graph.
pub type NodeId = usize;

/// Gradient of a scalar output with respect to every trainable parameter,
/// keyed by parameter name; each entry has the shape of its parameter.
pub type GradientMap<S> = BTreeMap<String, Tensor<S>>;

/// Additive bias applied to masked attention scores. Finite so the
/// no-NaN/Inf graph invariant holds even on fully masked score rows.
pub(crate) const MASK_BIAS: f64 = -1e30;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch at {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("not positive definite at {node}: pivot {pivot} at index {index}")]
    NotPositiveDefinite {
        node: String,
        index: usize,
        pivot: f64,
    },
    #[error("non-finite value produced at {node} during {phase} pass")]
    NonFinite { node: String, phase: &'static str },
    #[error("input `{name}` is not bound")]
    UnboundInput { name: String },
    #[error("binding for `{name}` has shape {actual:?}, expected {expected:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("no output named `{name}`")]
    UnknownOutput { name: String },
    #[error("no parameter named `{name}`")]
    UnknownParam { name: String },
    #[error("gradient target must be a scalar, node {node} has shape {shape:?}")]
    NonScalarOutput { node: NodeId, shape: Vec<usize> },
    #[error("duplicate name `{name}` in graph registry")]
    DuplicateName { name: String },
    #[error("node {0} does not exist")]
    NoSuchNode(NodeId),
}

/// Static computation graph over tensors of scalar type `S`.
#[derive(Clone)]
pub struct Graph<S: Scalar> {
    ops: Vec<Op<S>>,
    shapes: Vec<Vec<usize>>,
    labels: Vec<Option<String>>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
}

/// Forward values for every node of a graph, plus per-node caches needed by
/// the backward pass.
#[derive(Debug)]
pub struct Evaluation<S: Scalar> {
    pub(crate) values: Vec<Tensor<S>>,
    pub(crate) attn_cache: Vec<Option<Vec<Tensor<S>>>>,
}

impl<S: Scalar> Evaluation<S> {
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.values[id]
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            shapes: Vec::new(),
            labels: Vec::new(),
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }

    /// Human-readable node description for diagnostics.
    pub fn describe(&self, id: NodeId) -> String {
        let kind = self.ops[id].kind();
        match &self.labels[id] {
            Some(label) => format!("node {id} ({kind}, `{label}`)"),
            None => format!("node {id} ({kind})"),
        }
    }

    /// Attach a diagnostic label to a node.
    pub fn label(&mut self, id: NodeId, label: impl Into<String>) {
        self.labels[id] = Some(label.into());
    }

    /// Register a node as a named output.
    pub fn output(&mut self, name: impl Into<String>, id: NodeId) -> Result<(), AdError> {
        let name = name.into();
        if self.outputs.contains_key(&name) {
            return Err(AdError::DuplicateName { name });
        }
        self.outputs.insert(name, id);
        Ok(())
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId, AdError> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| AdError::UnknownOutput {
                name: name.to_string(),
            })
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn param_value(&self, name: &str) -> Result<&Tensor<S>, AdError> {
        let id = *self.params.get(name).ok_or_else(|| AdError::UnknownParam {
            name: name.to_string(),
        })?;
        match &self.ops[id] {
            Op::Param { value, .. } => Ok(value),
            _ => unreachable!("param registry points at a non-param node"),
        }
    }

    /// Replace a parameter's value; the shape must be unchanged.
    pub fn set_param(&mut self, name: &str, value: Tensor<S>) -> Result<(), AdError> {
        let id = *self.params.get(name).ok_or_else(|| AdError::UnknownParam {
            name: name.to_string(),
        })?;
        if value.shape() != self.shapes[id].as_slice() {
            return Err(AdError::Shape {
                node: self.describe(id),
                detail: format!(
                    "parameter update shape {:?} != declared {:?}",
                    value.shape(),
                    self.shapes[id]
                ),
            });
        }
        match &mut self.ops[id] {
            Op::Param { value: v, .. } => *v = value,
            _ => unreachable!(),
        }
        Ok(())
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>) -> NodeId {
        let id = self.ops.len();
        self.ops.push(op);
        self.shapes.push(shape);
        self.labels.push(None);
        id
    }

    fn shape_err(&self, op: &str, detail: String) -> AdError {
        AdError::Shape {
            node: format!("new `{op}` node (index {})", self.ops.len()),
            detail,
        }
    }

    fn check_id(&self, op: &str, id: NodeId) -> Result<(), AdError> {
        if id >= self.ops.len() {
            return Err(self.shape_err(op, format!("operand {id} does not exist")));
        }
        Ok(())
    }

    fn dims2(&self, op: &str, id: NodeId) -> Result<(usize, usize), AdError> {
        self.check_id(op, id)?;
        match self.shapes[id].as_slice() {
            [n, m] => Ok((*n, *m)),
            other => Err(self.shape_err(
                op,
                format!("operand {} must be rank-2, has shape {:?}", id, other),
            )),
        }
    }

    fn dims1(&self, op: &str, id: NodeId) -> Result<usize, AdError> {
        self.check_id(op, id)?;
        match self.shapes[id].as_slice() {
            [n] => Ok(*n),
            other => Err(self.shape_err(
                op,
                format!("operand {} must be rank-1, has shape {:?}", id, other),
            )),
        }
    }

    fn require_scalar(&self, op: &str, id: NodeId) -> Result<(), AdError> {
        self.check_id(op, id)?;
        if !self.shapes[id].is_empty() {
            return Err(self.shape_err(
                op,
                format!(
                    "operand {} must be a scalar, has shape {:?}",
                    id, self.shapes[id]
                ),
            ));
        }
        Ok(())
    }

    // ---- graph construction -------------------------------------------------

    /// Declare an external input with a fixed shape.
    pub fn input(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<NodeId, AdError> {
        let name = name.into();
        if self.inputs.contains_key(&name) || self.params.contains_key(&name) {
            return Err(AdError::DuplicateName { name });
        }
        let id = self.push(Op::Input { name: name.clone() }, shape);
        self.inputs.insert(name, id);
        Ok(id)
    }

    /// Declare a trainable parameter with its current value.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<NodeId, AdError> {
        let name = name.into();
        if self.params.contains_key(&name) || self.inputs.contains_key(&name) {
            return Err(AdError::DuplicateName { name });
        }
        let shape = value.shape().to_vec();
        let id = self.push(
            Op::Param {
                name: name.clone(),
                value,
            },
            shape,
        );
        self.params.insert(name, id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", format!("inner dims {k} != {k2}")));
        }
        Ok(self.push(Op::MatMul(a, b), vec![n, m]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let (n, m) = self.dims2("transpose", a)?;
        Ok(self.push(Op::Transpose(a), vec![m, n]))
    }

    fn elementwise_pair(
        &mut self,
        op_name: &str,
        a: NodeId,
        b: NodeId,
        make: impl Fn(NodeId, NodeId) -> Op<S>,
    ) -> Result<NodeId, AdError> {
        self.check_id(op_name, a)?;
        self.check_id(op_name, b)?;
        if self.shapes[a] != self.shapes[b] {
            return Err(self.shape_err(
                op_name,
                format!("shapes {:?} and {:?} differ", self.shapes[a], self.shapes[b]),
            ));
        }
        let shape = self.shapes[a].clone();
        Ok(self.push(make(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.elementwise_pair("add", a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.elementwise_pair("sub", a, b, Op::Sub)
    }

    /// Hadamard product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.elementwise_pair("mul", a, b, Op::Mul)
    }

    fn row_vec_pair(
        &mut self,
        op_name: &str,
        a: NodeId,
        v: NodeId,
        make: impl Fn(NodeId, NodeId) -> Op<S>,
    ) -> Result<NodeId, AdError> {
        let (n, m) = self.dims2(op_name, a)?;
        let len = self.dims1(op_name, v)?;
        if len != m {
            return Err(self.shape_err(op_name, format!("vector length {len} != columns {m}")));
        }
        Ok(self.push(make(a, v), vec![n, m]))
    }

    /// Add a vector to every row of a matrix.
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, AdError> {
        self.row_vec_pair("add_row_vec", a, v, Op::AddRowVec)
    }

    /// Hadamard-scale every row of a matrix by a vector.
    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, AdError> {
        self.row_vec_pair("mul_row_vec", a, v, Op::MulRowVec)
    }

    /// Scale row `i` of a matrix by `v[i]`.
    pub fn mul_col_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, AdError> {
        let (n, m) = self.dims2("mul_col_vec", a)?;
        let len = self.dims1("mul_col_vec", v)?;
        if len != n {
            return Err(self.shape_err("mul_col_vec", format!("vector length {len} != rows {n}")));
        }
        Ok(self.push(Op::MulColVec(a, v), vec![n, m]))
    }

    /// Multiply a tensor by a scalar-shaped node.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, AdError> {
        self.check_id("mul_scalar", a)?;
        self.require_scalar("mul_scalar", s)?;
        let shape = self.shapes[a].clone();
        Ok(self.push(Op::MulScalar(a, s), shape))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId, AdError> {
        self.check_id("scale", a)?;
        let shape = self.shapes[a].clone();
        Ok(self.push(Op::ScaleConst(a, c), shape))
    }

    pub fn add_const(&mut self, a: NodeId, c: S) -> Result<NodeId, AdError> {
        self.check_id("add_const", a)?;
        let shape = self.shapes[a].clone();
        Ok(self.push(Op::AddConst(a, c), shape))
    }

    pub fn clamp_min(&mut self, a: NodeId, c: S) -> Result<NodeId, AdError> {
        self.check_id("clamp_min", a)?;
        let shape = self.shapes[a].clone();
        Ok(self.push(Op::ClampMin(a, c), shape))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_cols", "no operands".into()));
        }
        let (n, mut total) = self.dims2("concat_cols", parts[0])?;
        for &p in &parts[1..] {
            let (n2, m2) = self.dims2("concat_cols", p)?;
            if n2 != n {
                return Err(self.shape_err("concat_cols", format!("row counts {n} != {n2}")));
            }
            total += m2;
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![n, total]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        if parts.is_empty() {
            return Err(self.shape_err("concat_rows", "no operands".into()));
        }
        let (mut total, m) = self.dims2("concat_rows", parts[0])?;
        for &p in &parts[1..] {
            let (n2, m2) = self.dims2("concat_rows", p)?;
            if m2 != m {
                return Err(self.shape_err("concat_rows", format!("column counts {m} != {m2}")));
            }
            total += n2;
        }
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![total, m]))
    }

    fn unary(
        &mut self,
        op_name: &str,
        a: NodeId,
        make: impl Fn(NodeId) -> Op<S>,
    ) -> Result<NodeId, AdError> {
        self.check_id(op_name, a)?;
        let shape = self.shapes[a].clone();
        Ok(self.push(make(a), shape))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary("exp", a, Op::Exp)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary("ln", a, Op::Ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary("sqrt", a, Op::Sqrt)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary("sigmoid", a, Op::Sigmoid)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.unary("relu", a, Op::Relu)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.dims2("softmax_rows", a)?;
        let shape = self.shapes[a].clone();
        Ok(self.push(Op::SoftmaxRows(a), shape))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.dims2("layer_norm_rows", a)?;
        let shape = self.shapes[a].clone();
        Ok(self.push(Op::LayerNormRows(a), shape))
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `[seq, model_dim]` tensors. Keys at positions `>= content_len` are
    /// masked out of every query's weights.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        content_len: usize,
    ) -> Result<NodeId, AdError> {
        let (t, d) = self.dims2("attention", q)?;
        for &o in &[k, v] {
            let (t2, d2) = self.dims2("attention", o)?;
            if (t2, d2) != (t, d) {
                return Err(self.shape_err(
                    "attention",
                    format!("q/k/v shapes differ: [{t},{d}] vs [{t2},{d2}]"),
                ));
            }
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(self.shape_err(
                "attention",
                format!("model dim {d} not divisible by {n_heads} heads"),
            ));
        }
        if content_len == 0 || content_len > t {
            return Err(self.shape_err(
                "attention",
                format!("content_len {content_len} outside 1..={t}"),
            ));
        }
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                content_len,
            },
            vec![t, d],
        ))
    }

    /// Select rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&mut self, src: NodeId, indices: Vec<usize>) -> Result<NodeId, AdError> {
        let (n, d) = self.dims2("gather_rows", src)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(self.shape_err("gather_rows", format!("index {bad} >= {n} rows")));
        }
        let out_rows = indices.len();
        Ok(self.push(Op::GatherRows { src, indices }, vec![out_rows, d]))
    }

    /// Lower Cholesky factor of an SPD matrix.
    pub fn cholesky(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let (n, m) = self.dims2("cholesky", a)?;
        if n != m {
            return Err(self.shape_err("cholesky", format!("matrix is {n}x{m}, not square")));
        }
        Ok(self.push(Op::Cholesky(a), vec![n, n]))
    }

    fn solve_common(&mut self, op_name: &str, l: NodeId, b: NodeId) -> Result<Vec<usize>, AdError> {
        let (n, m) = self.dims2(op_name, l)?;
        if n != m {
            return Err(self.shape_err(op_name, format!("factor is {n}x{m}, not square")));
        }
        let (rows, cols) = self.dims2(op_name, b)?;
        if rows != n {
            return Err(self.shape_err(op_name, format!("rhs rows {rows} != {n}")));
        }
        Ok(vec![rows, cols])
    }

    /// Solve `L x = b` with `L` lower-triangular.
    pub fn solve_lower(&mut self, l: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let shape = self.solve_common("solve_lower", l, b)?;
        Ok(self.push(Op::SolveLower { l, b }, shape))
    }

    /// Solve `L^T x = b` with `L` lower-triangular.
    pub fn solve_lower_t(&mut self, l: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let shape = self.solve_common("solve_lower_t", l, b)?;
        Ok(self.push(Op::SolveLowerT { l, b }, shape))
    }

    pub fn diag_part(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let (n, m) = self.dims2("diag_part", a)?;
        if n != m {
            return Err(self.shape_err("diag_part", format!("matrix is {n}x{m}, not square")));
        }
        Ok(self.push(Op::DiagPart(a), vec![n]))
    }

    /// `out[i][j] = ||a_i - b_j||^2` over matching feature dimensions.
    pub fn pairwise_sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (n, d) = self.dims2("pairwise_sq_dist", a)?;
        let (m, d2) = self.dims2("pairwise_sq_dist", b)?;
        if d != d2 {
            return Err(self.shape_err(
                "pairwise_sq_dist",
                format!("feature dims {d} != {d2}"),
            ));
        }
        Ok(self.push(Op::PairwiseSqDist(a, b), vec![n, m]))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_id("sum_all", a)?;
        Ok(self.push(Op::SumAll(a), vec![]))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        self.check_id("mean_all", a)?;
        Ok(self.push(Op::MeanAll(a), vec![]))
    }

    /// Sum along axis 1: `[n, m] -> [n]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, AdError> {
        let (n, _) = self.dims2("sum_rows", a)?;
        Ok(self.push(Op::SumRows(a), vec![n]))
    }

    /// Stable Bernoulli log-likelihood `y log σ(f) + (1-y) log(1-σ(f))`,
    /// evaluated elementwise on `[n, b]` logits with one label per row.
    pub fn bernoulli_log_lik(&mut self, f: NodeId, labels: Vec<u8>) -> Result<NodeId, AdError> {
        let (n, m) = self.dims2("bernoulli_log_lik", f)?;
        if labels.len() != n {
            return Err(self.shape_err(
                "bernoulli_log_lik",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(self.shape_err("bernoulli_log_lik", "labels must be 0 or 1".into()));
        }
        Ok(self.push(Op::BernoulliLogLik { f, labels }, vec![n, m]))
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against class indices.
    pub fn cross_entropy_mean(
        &mut self,
        logits: NodeId,
        labels: Vec<usize>,
    ) -> Result<NodeId, AdError> {
        let (n, c) = self.dims2("cross_entropy_mean", logits)?;
        if labels.len() != n {
            return Err(self.shape_err(
                "cross_entropy_mean",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(self.shape_err(
                "cross_entropy_mean",
                format!("label {bad} >= {c} classes"),
            ));
        }
        Ok(self.push(Op::CrossEntropyMean { logits, labels }, vec![]))
    }

    // ---- execution -----------------------------------------------------------

    /// Forward pass: compute every node value under the given input bindings.
    pub fn evaluate(
        &self,
        bindings: &BTreeMap<String, Tensor<S>>,
    ) -> Result<Evaluation<S>, AdError> {
        for (name, id) in &self.inputs {
            match bindings.get(name) {
                None => {
                    return Err(AdError::UnboundInput { name: name.clone() });
                }
                Some(t) if t.shape() != self.shapes[*id].as_slice() => {
                    return Err(AdError::BindingShape {
                        name: name.clone(),
                        expected: self.shapes[*id].clone(),
                        actual: t.shape().to_vec(),
                    });
                }
                Some(_) => {}
            }
        }
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.ops.len());
        let mut attn_cache: Vec<Option<Vec<Tensor<S>>>> = vec![None; self.ops.len()];
        for (id, op) in self.ops.iter().enumerate() {
            let (value, cache) = op::forward(self, id, op, &values, bindings)?;
            if let Some(index) = value.first_non_finite() {
                let _ = index;
                return Err(AdError::NonFinite {
                    node: self.describe(id),
                    phase: "forward",
                });
            }
            values.push(value);
            attn_cache[id] = cache;
        }
        Ok(Evaluation { values, attn_cache })
    }

    /// Forward pass returning the registered named outputs.
    pub fn evaluate_outputs(
        &self,
        bindings: &BTreeMap<String, Tensor<S>>,
    ) -> Result<BTreeMap<String, Tensor<S>>, AdError> {
        let eval = self.evaluate(bindings)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, &id)| (name.clone(), eval.values[id].clone()))
            .collect())
    }

    /// Reverse-mode gradient of a scalar node with respect to every
    /// trainable parameter.
    pub fn gradient(
        &self,
        bindings: &BTreeMap<String, Tensor<S>>,
        target: NodeId,
    ) -> Result<GradientMap<S>, AdError> {
        let eval = self.evaluate(bindings)?;
        self.gradient_from_eval(&eval, target)
    }

    /// Backward pass reusing an existing forward evaluation.
    pub fn gradient_from_eval(
        &self,
        eval: &Evaluation<S>,
        target: NodeId,
    ) -> Result<GradientMap<S>, AdError> {
        if target >= self.ops.len() {
            return Err(AdError::NoSuchNode(target));
        }
        if !self.shapes[target].is_empty() {
            return Err(AdError::NonScalarOutput {
                node: target,
                shape: self.shapes[target].clone(),
            });
        }
        let adjoints = backward::run(self, eval, target)?;
        let mut map = GradientMap::new();
        for (name, &id) in &self.params {
            let grad = match &adjoints[id] {
                Some(t) => t.clone(),
                None => Tensor::zeros(&self.shapes[id]),
            };
            map.insert(name.clone(), grad);
        }
        Ok(map)
    }

    pub(crate) fn ops(&self) -> &[Op<S>] {
        &self.ops
    }
}

/// Solve `K X = B` for SPD `K`, with the residual guarantee used by the
/// conditional-distribution algebra. Plain numeric entry point; the graph
/// variant is `cholesky` + the triangular solves.
pub fn cholesky_solve<S: Scalar>(
    k: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<Tensor<S>, linalg::LinalgError> {
    linalg::cholesky_solve(k, b)
}

#[cfg(test)]
mod tests;
