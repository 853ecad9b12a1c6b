//! Tape-based reverse-mode automatic differentiation with an explicit
//! ledger of every buffer the backward pass retains.
//!
//! Operations are recorded in topological order during the forward pass.
//! `finalize` decides which nodes participate in the backward sweep (live
//! ancestors of the loss with a trainable leaf beneath them) and builds the
//! cache ledger from the buffers those nodes' backward rules read. Parameter
//! leaves never enter the ledger; they are accounted as model or fine-tuning
//! memory, not as activation cache. Reads that pass through a dropout node
//! resolve to the pre-dropout buffer plus the mask, so a dropped activation
//! is never double counted.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand_chacha::ChaCha8Rng;

use crate::rng::uniform;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor, TensorError};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    Shape(TensorError),
    /// Backward was requested from a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// An operation referenced a node recorded after itself.
    CycleDetected { node: usize },
    /// `finalize` must run before backward or ledger queries.
    NotFinalized,
    /// Recording after `finalize`.
    Finalized,
    LabelOutOfRange { label: usize, classes: usize },
    IndexOutOfRange { index: usize, bound: usize },
    DuplicateIndex { index: usize },
}

impl From<TensorError> for TapeError {
    fn from(e: TensorError) -> Self {
        TapeError::Shape(e)
    }
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::Shape(e) => write!(f, "{e}"),
            TapeError::NonScalarLoss { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            TapeError::CycleDetected { node } => {
                write!(f, "internal error: node {node} references a later node")
            }
            TapeError::NotFinalized => write!(f, "tape must be finalized first"),
            TapeError::Finalized => write!(f, "tape is finalized; no more recording"),
            TapeError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            TapeError::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range for size {bound}")
            }
            TapeError::DuplicateIndex { index } => write!(f, "duplicate index {index}"),
        }
    }
}

/// Operation record; inputs are earlier node ids.
#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { trainable: bool },
    MatMulNN { a: NodeId, b: NodeId },
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, v: NodeId },
    MulRow { a: NodeId, v: NodeId },
    Scale { a: NodeId, factor: f64 },
    Relu { a: NodeId },
    Gelu { a: NodeId },
    /// Value is the normalized input; `inv_std` is saved per row.
    LayerNormRows { a: NodeId, inv_std: Vec<f64> },
    /// Value is the row-wise probability matrix.
    SoftmaxRows { a: NodeId },
    /// Scalar mean cross-entropy; probabilities are saved for backward.
    MeanCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Tensor },
    /// Columns of `a` placed at `indices` in a wider zero matrix.
    ScatterCols { a: NodeId, indices: Vec<usize>, width: usize },
    /// Columns of `a` gathered at `indices`.
    GatherCols { a: NodeId, indices: Vec<usize> },
    /// Vector scatter into a wider zero vector.
    ScatterVec { a: NodeId, indices: Vec<usize>, width: usize },
    /// Inverted dropout; `mask` holds 0/1 keep decisions.
    Dropout { a: NodeId, keep: f64, mask: Vec<f64> },
    Sum { a: NodeId },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param { .. } => "param",
            Op::MatMulNN { .. } => "matmul",
            Op::MatMulNT { .. } => "matmul_nt",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::SoftmaxRows { .. } => "softmax",
            Op::MeanCrossEntropy { .. } => "cross_entropy",
            Op::ScatterCols { .. } => "scatter_cols",
            Op::GatherCols { .. } => "gather_cols",
            Op::ScatterVec { .. } => "scatter_vec",
            Op::Dropout { .. } => "dropout",
            Op::Sum { .. } => "sum",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param { .. } => vec![],
            Op::MatMulNN { a, b } | Op::MatMulNT { a, b } | Op::Add { a, b } => vec![*a, *b],
            Op::AddRow { a, v } | Op::MulRow { a, v } => vec![*a, *v],
            Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::LayerNormRows { a, .. }
            | Op::SoftmaxRows { a }
            | Op::ScatterCols { a, .. }
            | Op::GatherCols { a, .. }
            | Op::ScatterVec { a, .. }
            | Op::Dropout { a, .. }
            | Op::Sum { a } => vec![*a],
            Op::MeanCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    name: Option<String>,
    scope: usize,
}

/// Why a buffer is retained, and how big it is.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheLedgerEntry {
    /// Producing operation (or leaf name).
    pub label: String,
    /// Product of the cached buffer's shape.
    pub element_count: usize,
    /// Which gradient(s) the buffer serves, comma separated.
    pub reason: String,
    /// Scope active when the producing node was recorded.
    pub scope: String,
    /// True for dropout masks, which are tallied separately in memory reports.
    pub is_dropout_mask: bool,
}

/// Identity of a retained buffer: a node's output, a node's auxiliary
/// buffer (saved inv-std or probabilities), or a dropout mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum BufKey {
    Value(usize),
    Aux(usize),
    Mask(usize),
}

struct Analysis {
    loss: NodeId,
    needs_grad: Vec<bool>,
    live: Vec<bool>,
    ledger: Vec<CacheLedgerEntry>,
}

/// Recording tape. Single writer; build the graph, `finalize`, then query
/// gradients and the cache ledger.
pub struct Tape {
    nodes: Vec<Node>,
    scopes: Vec<String>,
    current_scope: usize,
    training: bool,
    analysis: Option<Analysis>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scopes: vec![String::from("(global)")],
            current_scope: 0,
            training: true,
            analysis: None,
        }
    }

    /// Evaluation-mode tape: dropout becomes the identity.
    pub fn new_eval() -> Self {
        let mut t = Tape::new();
        t.training = false;
        t
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Sets the scope label attached to subsequently recorded nodes.
    pub fn set_scope(&mut self, name: &str) {
        if let Some(i) = self.scopes.iter().position(|s| s == name) {
            self.current_scope = i;
        } else {
            self.scopes.push(name.to_string());
            self.current_scope = self.scopes.len() - 1;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, name: Option<String>) -> Result<NodeId, TapeError> {
        if self.analysis.is_some() {
            return Err(TapeError::Finalized);
        }
        let id = self.nodes.len();
        for input in op.inputs() {
            if input.0 >= id {
                return Err(TapeError::CycleDetected { node: id });
            }
        }
        self.nodes.push(Node { op, value, name, scope: self.current_scope });
        Ok(NodeId(id))
    }

    pub fn input(&mut self, value: Tensor, name: &str) -> Result<NodeId, TapeError> {
        self.push(Op::Input, value, Some(name.to_string()))
    }

    pub fn param(
        &mut self,
        value: Tensor,
        trainable: bool,
        name: &str,
    ) -> Result<NodeId, TapeError> {
        self.push(Op::Param { trainable }, value, Some(name.to_string()))
    }

    pub fn matmul_nn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let value = matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMulNN { a, b }, value, None)
    }

    /// `a · bᵀ`; the shape used by every `x · Wᵀ` linear forward.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        self.push(Op::MatMulNT { a, b }, value, None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TapeError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
                op: "add",
            }
            .into());
        }
        let values = ta.values().iter().zip(tb.values()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), values)?;
        self.push(Op::Add { a, b }, value, None)
    }

    /// Adds a length-`c` vector to every row of an `[r×c]` matrix.
    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TapeError> {
        let (ta, tv) = (self.value(a), self.value(v));
        if ta.shape().len() != 2 || tv.shape().len() != 1 || ta.cols() != tv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                left: ta.shape().to_vec(),
                right: tv.shape().to_vec(),
                op: "add_row",
            }
            .into());
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut values = ta.values().to_vec();
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] += tv.values()[j];
            }
        }
        let value = Tensor::new(vec![r, c], values)?;
        self.push(Op::AddRow { a, v }, value, None)
    }

    /// Multiplies every row of an `[r×c]` matrix elementwise by a vector.
    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TapeError> {
        let (ta, tv) = (self.value(a), self.value(v));
        if ta.shape().len() != 2 || tv.shape().len() != 1 || ta.cols() != tv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                left: ta.shape().to_vec(),
                right: tv.shape().to_vec(),
                op: "mul_row",
            }
            .into());
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut values = ta.values().to_vec();
        for i in 0..r {
            for j in 0..c {
                values[i * c + j] *= tv.values()[j];
            }
        }
        let value = Tensor::new(vec![r, c], values)?;
        self.push(Op::MulRow { a, v }, value, None)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TapeError> {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).values().iter().map(|x| x * factor).collect(),
        )?;
        self.push(Op::Scale { a, factor }, value, None)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).values().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )?;
        self.push(Op::Relu { a }, value, None)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).values().iter().map(|&x| gelu(x)).collect(),
        )?;
        self.push(Op::Gelu { a }, value, None)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: NodeId, epsilon: f64) -> Result<NodeId, TapeError> {
        let ta = self.value(a);
        if ta.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                left: ta.shape().to_vec(),
                right: vec![],
                op: "layer_norm_rows",
            }
            .into());
        }
        let (r, c) = (ta.rows(), ta.cols());
        let mut values = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = ta.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / libm::sqrt(var + epsilon);
            inv_std[i] = is;
            for j in 0..c {
                values[i * c + j] = (row[j] - mean) * is;
            }
        }
        let value = Tensor::new(vec![r, c], values)?;
        self.push(Op::LayerNormRows { a, inv_std }, value, None)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut values = vec![0.0; r * c];
        for i in 0..r {
            let row = ta.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = libm::exp(row[j] - m);
                values[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                values[i * c + j] /= sum;
            }
        }
        let value = Tensor::new(vec![r, c], values)?;
        self.push(Op::SoftmaxRows { a }, value, None)
    }

    /// Mean softmax cross-entropy of `[b×p]` logits against integer labels.
    pub fn mean_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TapeError> {
        let tl = self.value(logits);
        let (b, p) = (tl.rows(), tl.cols());
        if labels.len() != b {
            return Err(TensorError::LengthMismatch { expected: b, got: labels.len() }.into());
        }
        for &y in labels {
            if y >= p {
                return Err(TapeError::LabelOutOfRange { label: y, classes: p });
            }
        }
        let mut probs = vec![0.0; b * p];
        let mut loss = 0.0;
        for i in 0..b {
            let row = tl.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..p {
                let e = libm::exp(row[j] - m);
                probs[i * p + j] = e;
                sum += e;
            }
            for j in 0..p {
                probs[i * p + j] /= sum;
            }
            loss -= row[labels[i]] - m - libm::log(sum);
        }
        loss /= b as f64;
        let probs = Tensor::new(vec![b, p], probs)?;
        self.push(
            Op::MeanCrossEntropy { logits, labels: labels.to_vec(), probs },
            Tensor::scalar(loss),
            None,
        )
    }

    /// Places columns of `a` at `indices` inside a `[rows×width]` zero matrix.
    pub fn scatter_cols(
        &mut self,
        a: NodeId,
        indices: &[usize],
        width: usize,
    ) -> Result<NodeId, TapeError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if c != indices.len() {
            return Err(TensorError::LengthMismatch { expected: c, got: indices.len() }.into());
        }
        check_indices(indices, width)?;
        let mut values = vec![0.0; r * width];
        for i in 0..r {
            for (j, &col) in indices.iter().enumerate() {
                values[i * width + col] = ta.values()[i * c + j];
            }
        }
        let value = Tensor::new(vec![r, width], values)?;
        self.push(Op::ScatterCols { a, indices: indices.to_vec(), width }, value, None)
    }

    /// Gathers the listed columns of `a`.
    pub fn gather_cols(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TapeError> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        check_indices(indices, c)?;
        let mut values = vec![0.0; r * indices.len()];
        for i in 0..r {
            for (j, &col) in indices.iter().enumerate() {
                values[i * indices.len() + j] = ta.values()[i * c + col];
            }
        }
        let value = Tensor::new(vec![r, indices.len()], values)?;
        self.push(Op::GatherCols { a, indices: indices.to_vec() }, value, None)
    }

    /// Places a short vector's entries at `indices` inside a zero vector.
    pub fn scatter_vec(
        &mut self,
        a: NodeId,
        indices: &[usize],
        width: usize,
    ) -> Result<NodeId, TapeError> {
        let ta = self.value(a);
        if ta.shape().len() != 1 || ta.len() != indices.len() {
            return Err(
                TensorError::LengthMismatch { expected: indices.len(), got: ta.len() }.into()
            );
        }
        check_indices(indices, width)?;
        let mut values = vec![0.0; width];
        for (j, &i) in indices.iter().enumerate() {
            values[i] = ta.values()[j];
        }
        let value = Tensor::new(vec![width], values)?;
        self.push(Op::ScatterVec { a, indices: indices.to_vec(), width }, value, None)
    }

    /// Inverted dropout; identity on an eval-mode tape or at rate zero.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId, TapeError> {
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let ta = self.value(a);
        let mask: Vec<f64> =
            (0..ta.len()).map(|_| if uniform(rng) < keep { 1.0 } else { 0.0 }).collect();
        let values: Vec<f64> =
            ta.values().iter().zip(&mask).map(|(x, m)| x * m / keep).collect();
        let value = Tensor::new(ta.shape().to_vec(), values)?;
        self.push(Op::Dropout { a, keep, mask }, value, None)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TapeError> {
        let total = self.value(a).values().iter().sum();
        self.push(Op::Sum { a }, Tensor::scalar(total), None)
    }

    fn label(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match &node.name {
            Some(n) => n.clone(),
            None => format!("{}#{}", node.op.kind(), id.0),
        }
    }

    /// Runs the needs-grad analysis and builds the cache ledger. The loss
    /// node must be scalar.
    pub fn finalize(&mut self, loss: NodeId) -> Result<(), TapeError> {
        if self.value(loss).len() != 1 {
            return Err(TapeError::NonScalarLoss { shape: self.value(loss).shape().to_vec() });
        }
        for (i, node) in self.nodes.iter().enumerate() {
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(TapeError::CycleDetected { node: i });
                }
            }
        }

        let n = self.nodes.len();
        let mut needs_grad = vec![false; n];
        for i in 0..n {
            needs_grad[i] = match &self.nodes[i].op {
                Op::Param { trainable } => *trainable,
                Op::Input => false,
                op => op.inputs().iter().any(|id| needs_grad[id.0]),
            };
        }

        let mut live = vec![false; n];
        live[loss.0] = true;
        for i in (0..n).rev() {
            if live[i] {
                for input in self.nodes[i].op.inputs() {
                    live[input.0] = true;
                }
            }
        }

        let ledger = self.build_ledger(&needs_grad, &live);
        self.analysis = Some(Analysis { loss, needs_grad, live, ledger });
        Ok(())
    }

    /// Resolves a read of `id`'s buffer into retained buffers: dropout
    /// outputs stand for their pre-dropout input plus the mask.
    fn resolve_read(&self, id: NodeId, out: &mut Vec<BufKey>) {
        match &self.nodes[id.0].op {
            Op::Dropout { a, .. } => {
                out.push(BufKey::Mask(id.0));
                self.resolve_read(*a, out);
            }
            Op::Param { .. } => {}
            _ => out.push(BufKey::Value(id.0)),
        }
    }

    fn build_ledger(&self, needs_grad: &[bool], live: &[bool]) -> Vec<CacheLedgerEntry> {
        let mut order: Vec<BufKey> = Vec::new();
        let mut entries: BTreeMap<BufKey, CacheLedgerEntry> = BTreeMap::new();
        let mut record = |key: BufKey, label: String, count: usize, reason: String,
                          scope: usize, mask: bool| {
            let entry = entries.entry(key).or_insert_with(|| {
                order.push(key);
                CacheLedgerEntry {
                    label,
                    element_count: count,
                    reason: String::new(),
                    scope: self.scopes[scope].clone(),
                    is_dropout_mask: mask,
                }
            });
            if !reason.is_empty() && !entry.reason.split(", ").any(|r| r == reason) {
                if !entry.reason.is_empty() {
                    entry.reason.push_str(", ");
                }
                entry.reason.push_str(&reason);
            }
        };

        // Dropout masks exist for every mask generated on a training tape,
        // whether or not backward reads them.
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Dropout { mask, .. } = &node.op {
                record(
                    BufKey::Mask(i),
                    format!("dropout#{i}"),
                    mask.len(),
                    String::from("dropout mask"),
                    node.scope,
                    true,
                );
            }
        }

        let ng = |id: NodeId| needs_grad[id.0];
        for (i, node) in self.nodes.iter().enumerate() {
            if !(live[i] && needs_grad[i]) {
                continue;
            }
            // (read target, gradient served) pairs for this node's backward rule.
            let mut reads: Vec<(NodeId, NodeId)> = Vec::new();
            let mut aux: Option<(usize, &'static str)> = None;
            match &node.op {
                Op::MatMulNN { a, b } | Op::MatMulNT { a, b } => {
                    if ng(*a) {
                        reads.push((*b, *a));
                    }
                    if ng(*b) {
                        reads.push((*a, *b));
                    }
                }
                Op::MulRow { a, v } => {
                    if ng(*a) {
                        reads.push((*v, *a));
                    }
                    if ng(*v) {
                        reads.push((*a, *v));
                    }
                }
                Op::Relu { a } | Op::Gelu { a } => {
                    if ng(*a) {
                        reads.push((*a, *a));
                    }
                }
                Op::LayerNormRows { a, inv_std } => {
                    if ng(*a) {
                        reads.push((NodeId(i), *a));
                        aux = Some((inv_std.len(), "inv_std"));
                    }
                }
                Op::SoftmaxRows { a } => {
                    if ng(*a) {
                        reads.push((NodeId(i), *a));
                    }
                }
                Op::MeanCrossEntropy { logits, probs, .. } => {
                    if ng(*logits) {
                        record(
                            BufKey::Aux(i),
                            format!("{}#{i}", node.op.kind()),
                            probs.len(),
                            format!("d/d {}", self.label(*logits)),
                            node.scope,
                            false,
                        );
                    }
                }
                // Dropout's own backward reads only its mask, recorded above.
                // Index moves, adds, scales, and sums read nothing.
                _ => {}
            }
            if let Some((count, what)) = aux {
                record(
                    BufKey::Aux(i),
                    format!("{}#{i} {what}", node.op.kind()),
                    count,
                    format!("d/d {}", self.label(node.op.inputs()[0])),
                    node.scope,
                    false,
                );
            }
            for (target, serves) in reads {
                let mut keys = Vec::new();
                self.resolve_read(target, &mut keys);
                for key in keys {
                    match key {
                        BufKey::Value(t) => record(
                            key,
                            self.label(NodeId(t)),
                            self.nodes[t].value.len(),
                            format!("d/d {}", self.label(serves)),
                            self.nodes[t].scope,
                            false,
                        ),
                        BufKey::Mask(_) => {
                            // Already present; the mask serves this gradient too.
                            record(
                                key,
                                String::new(),
                                0,
                                format!("d/d {}", self.label(serves)),
                                0,
                                true,
                            );
                        }
                        BufKey::Aux(_) => unreachable!("aux buffers are not read targets"),
                    }
                }
            }
        }

        order.into_iter().map(|k| entries.remove(&k).expect("recorded")).collect()
    }

    /// Cache ledger; available after `finalize`.
    pub fn ledger(&self) -> Result<&[CacheLedgerEntry], TapeError> {
        self.analysis.as_ref().map(|a| a.ledger.as_slice()).ok_or(TapeError::NotFinalized)
    }

    /// Total retained elements across all ledger entries.
    pub fn cache_total(&self) -> Result<usize, TapeError> {
        Ok(self.ledger()?.iter().map(|e| e.element_count).sum())
    }

    /// Reverse sweep from the finalized loss; returns gradients for every
    /// trainable parameter leaf. Non-trainable leaves get no entry.
    pub fn backward(&self) -> Result<BTreeMap<NodeId, Tensor>, TapeError> {
        let analysis = self.analysis.as_ref().ok_or(TapeError::NotFinalized)?;
        let loss = analysis.loss;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let add_grad = |grads: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor| {
            match &mut grads[id.0] {
                Some(acc) => {
                    for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..n).rev() {
            if !(analysis.live[i] && analysis.needs_grad[i]) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let push_targets = self.backward_node(i, &g, &analysis.needs_grad)?;
            for (target, grad) in push_targets {
                add_grad(&mut grads, target, grad);
            }
            if matches!(self.nodes[i].op, Op::Param { trainable: true }) {
                grads[i] = Some(g);
            }
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { trainable: true } = node.op {
                if let Some(g) = grads[i].take() {
                    out.insert(NodeId(i), g);
                }
            }
        }
        Ok(out)
    }

    /// Gradient contributions of node `i` to its inputs.
    fn backward_node(
        &self,
        i: usize,
        g: &Tensor,
        needs_grad: &[bool],
    ) -> Result<Vec<(NodeId, Tensor)>, TapeError> {
        let ng = |id: NodeId| needs_grad[id.0];
        let node = &self.nodes[i];
        let mut out: Vec<(NodeId, Tensor)> = Vec::new();
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::MatMulNN { a, b } => {
                if ng(*a) {
                    out.push((*a, matmul_nt(g, self.value(*b))?));
                }
                if ng(*b) {
                    out.push((*b, matmul_tn(self.value(*a), g)?));
                }
            }
            Op::MatMulNT { a, b } => {
                if ng(*a) {
                    out.push((*a, matmul(g, self.value(*b))?));
                }
                if ng(*b) {
                    out.push((*b, matmul_tn(g, self.value(*a))?));
                }
            }
            Op::Add { a, b } => {
                if ng(*a) {
                    out.push((*a, g.clone()));
                }
                if ng(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::AddRow { a, v } => {
                if ng(*a) {
                    out.push((*a, g.clone()));
                }
                if ng(*v) {
                    let (r, c) = (g.rows(), g.cols());
                    let mut gv = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += g.values()[i * c + j];
                        }
                    }
                    out.push((*v, Tensor::new(vec![c], gv)?));
                }
            }
            Op::MulRow { a, v } => {
                let (ta, tv) = (self.value(*a), self.value(*v));
                let (r, c) = (ta.rows(), ta.cols());
                if ng(*a) {
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g.values()[i * c + j] * tv.values()[j];
                        }
                    }
                    out.push((*a, Tensor::new(vec![r, c], ga)?));
                }
                if ng(*v) {
                    let mut gv = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += g.values()[i * c + j] * ta.values()[i * c + j];
                        }
                    }
                    out.push((*v, Tensor::new(vec![c], gv)?));
                }
            }
            Op::Scale { a, factor } => {
                if ng(*a) {
                    let values = g.values().iter().map(|x| x * factor).collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), values)?));
                }
            }
            Op::Relu { a } => {
                if ng(*a) {
                    let ta = self.value(*a);
                    let values = g
                        .values()
                        .iter()
                        .zip(ta.values())
                        .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), values)?));
                }
            }
            Op::Gelu { a } => {
                if ng(*a) {
                    let ta = self.value(*a);
                    let values = g
                        .values()
                        .iter()
                        .zip(ta.values())
                        .map(|(gi, &x)| gi * gelu_derivative(x))
                        .collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), values)?));
                }
            }
            Op::LayerNormRows { a, inv_std } => {
                if ng(*a) {
                    let xhat = &node.value;
                    let (r, c) = (xhat.rows(), xhat.cols());
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let grow = &g.values()[i * c..(i + 1) * c];
                        let xrow = xhat.row(i);
                        let mean_g = grow.iter().sum::<f64>() / c as f64;
                        let mean_gx =
                            grow.iter().zip(xrow).map(|(gi, xi)| gi * xi).sum::<f64>() / c as f64;
                        for j in 0..c {
                            ga[i * c + j] = inv_std[i] * (grow[j] - mean_g - xrow[j] * mean_gx);
                        }
                    }
                    out.push((*a, Tensor::new(vec![r, c], ga)?));
                }
            }
            Op::SoftmaxRows { a } => {
                if ng(*a) {
                    let p = &node.value;
                    let (r, c) = (p.rows(), p.cols());
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        let grow = &g.values()[i * c..(i + 1) * c];
                        let prow = p.row(i);
                        let dot = grow.iter().zip(prow).map(|(gi, pi)| gi * pi).sum::<f64>();
                        for j in 0..c {
                            ga[i * c + j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    out.push((*a, Tensor::new(vec![r, c], ga)?));
                }
            }
            Op::MeanCrossEntropy { logits, labels, probs } => {
                if ng(*logits) {
                    let (b, p) = (probs.rows(), probs.cols());
                    let gs = g.item() / b as f64;
                    let mut gl = probs.values().to_vec();
                    for (i, &y) in labels.iter().enumerate() {
                        gl[i * p + y] -= 1.0;
                    }
                    for v in gl.iter_mut() {
                        *v *= gs;
                    }
                    out.push((*logits, Tensor::new(vec![b, p], gl)?));
                }
            }
            Op::ScatterCols { a, indices, width } => {
                if ng(*a) {
                    let r = g.rows();
                    let c = indices.len();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for (j, &col) in indices.iter().enumerate() {
                            ga[i * c + j] = g.values()[i * width + col];
                        }
                    }
                    out.push((*a, Tensor::new(vec![r, c], ga)?));
                }
            }
            Op::GatherCols { a, indices } => {
                if ng(*a) {
                    let ta = self.value(*a);
                    let (r, c) = (ta.rows(), ta.cols());
                    let k = indices.len();
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for (j, &col) in indices.iter().enumerate() {
                            ga[i * c + col] += g.values()[i * k + j];
                        }
                    }
                    out.push((*a, Tensor::new(vec![r, c], ga)?));
                }
            }
            Op::ScatterVec { a, indices, width: _ } => {
                if ng(*a) {
                    let ga: Vec<f64> = indices.iter().map(|&i| g.values()[i]).collect();
                    out.push((*a, Tensor::new(vec![indices.len()], ga)?));
                }
            }
            Op::Dropout { a, keep, mask } => {
                if ng(*a) {
                    let values = g
                        .values()
                        .iter()
                        .zip(mask)
                        .map(|(gi, m)| gi * m / keep)
                        .collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), values)?));
                }
            }
            Op::Sum { a } => {
                if ng(*a) {
                    let ta = self.value(*a);
                    let gs = g.item();
                    out.push((*a, Tensor::new(ta.shape().to_vec(), vec![gs; ta.len()])?));
                }
            }
        }
        Ok(out)
    }
}

fn check_indices(indices: &[usize], bound: usize) -> Result<(), TapeError> {
    for (pos, &i) in indices.iter().enumerate() {
        if i >= bound {
            return Err(TapeError::IndexOutOfRange { index: i, bound });
        }
        if indices[..pos].contains(&i) {
            return Err(TapeError::DuplicateIndex { index: i });
        }
    }
    Ok(())
}

/// Exact GELU, `x · Φ(x)` with the Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / core::f64::consts::SQRT_2))
}

fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_tensor, substream};

    #[test]
    fn backward_of_sum_of_linear_map() {
        // L = sum(W·x) with W trainable: dL/dW = 1·xᵀ.
        let mut tape = Tape::new();
        let w = tape
            .param(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]), true, "w")
            .unwrap();
        let x = tape.input(Tensor::from_rows(&[&[5.0], &[6.0]]), "x").unwrap();
        let y = tape.matmul_nn(w, x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.finalize(loss).unwrap();
        let grads = tape.backward().unwrap();
        let gw = grads.get(&w).unwrap();
        assert_eq!(gw.values(), &[5.0, 6.0, 5.0, 6.0]);
    }

    #[test]
    fn all_frozen_leaves_give_empty_gradient_map() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::identity(3), false, "w").unwrap();
        let x = tape.input(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]), "x").unwrap();
        let y = tape.matmul_nt(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.finalize(loss).unwrap();
        assert!(tape.backward().unwrap().is_empty());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_rows(&[&[1.0, 2.0]]), "x").unwrap();
        let err = tape.finalize(x).unwrap_err();
        assert!(matches!(err, TapeError::NonScalarLoss { .. }));
    }

    #[test]
    fn empty_tape_caches_nothing() {
        let mut tape = Tape::new();
        let c = tape.input(Tensor::scalar(1.0), "c").unwrap();
        tape.finalize(c).unwrap();
        assert_eq!(tape.cache_total().unwrap(), 0);
    }

    #[test]
    fn frozen_branch_contributes_no_cache() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::identity(4), false, "w").unwrap();
        let x = tape.input(Tensor::zeros(vec![2, 4]), "x").unwrap();
        let y = tape.matmul_nt(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.finalize(loss).unwrap();
        assert_eq!(tape.cache_total().unwrap(), 0);
    }

    #[test]
    fn lora_chain_ledger_entries() {
        // u = x·Aᵀ, y = u·Bᵀ with A, B trainable: the ledger holds x
        // (serving dA) and u (serving dB), and nothing else.
        let (b, d_in, r, d_out) = (3, 5, 2, 4);
        let mut rng = substream(11, &[1]);
        let mut tape = Tape::new();
        let x = tape.input(gaussian_tensor(&mut rng, vec![b, d_in], 1.0), "x").unwrap();
        let a = tape.param(gaussian_tensor(&mut rng, vec![r, d_in], 1.0), true, "A").unwrap();
        let bb = tape.param(gaussian_tensor(&mut rng, vec![d_out, r], 1.0), true, "B").unwrap();
        let u = tape.matmul_nt(x, a).unwrap();
        let y = tape.matmul_nt(u, bb).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.finalize(loss).unwrap();
        let ledger = tape.ledger().unwrap();
        let mut counts: Vec<usize> = ledger.iter().map(|e| e.element_count).collect();
        counts.sort_unstable();
        assert_eq!(counts, alloc::vec![b * r, b * d_in]);
        assert_eq!(tape.cache_total().unwrap(), b * d_in + b * r);
        let x_entry = ledger.iter().find(|e| e.label == "x").unwrap();
        assert!(x_entry.reason.contains("d/d A"));
        let u_entry = ledger.iter().find(|e| e.element_count == b * r).unwrap();
        assert!(u_entry.reason.contains("d/d B"));
    }

    #[test]
    fn identical_tapes_are_bit_identical() {
        let build = || {
            let mut rng = substream(3, &[2]);
            let mut tape = Tape::new();
            let w = tape.param(gaussian_tensor(&mut rng, vec![4, 4], 1.0), true, "w").unwrap();
            let x = tape.input(gaussian_tensor(&mut rng, vec![2, 4], 1.0), "x").unwrap();
            let h = tape.matmul_nt(x, w).unwrap();
            let h = tape.gelu(h).unwrap();
            let loss = tape.mean_cross_entropy(h, &[1, 3]).unwrap();
            tape.finalize(loss).unwrap();
            let grads = tape.backward().unwrap();
            (tape.value(loss).item(), grads)
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.values().zip(g2.values()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(vec![2, 3]), "x").unwrap();
        let err = tape.mean_cross_entropy(x, &[0, 3]).unwrap_err();
        assert_eq!(err, TapeError::LabelOutOfRange { label: 3, classes: 3 });
    }

    #[test]
    fn uniform_logits_loss_is_ln_p() {
        for p in [2usize, 5, 11] {
            let mut tape = Tape::new();
            let x = tape.input(Tensor::zeros(vec![4, p]), "x").unwrap();
            let loss = tape.mean_cross_entropy(x, &[0, 1 % p, 0, 1 % p]).unwrap();
            tape.finalize(loss).unwrap();
            assert!((tape.value(loss).item() - libm::log(p as f64)).abs() < 1e-12);
        }
    }

    /// Central finite differences over every leaf of a composite graph that
    /// touches all differentiable op kinds, checked against the tape
    /// gradients for 100 seeds.
    #[test]
    fn gradients_match_finite_differences_across_all_ops() {
        for seed in 0..100u64 {
            let mut rng = substream(seed, &[77]);
            let w1 = gaussian_tensor(&mut rng, vec![4, 6], 0.8);
            let b1 = gaussian_tensor(&mut rng, vec![4], 0.5);
            let gain = gaussian_tensor(&mut rng, vec![4], 0.5);
            let w2 = gaussian_tensor(&mut rng, vec![3, 4], 0.8);
            let x = gaussian_tensor(&mut rng, vec![2, 6], 1.0);
            let delta = gaussian_tensor(&mut rng, vec![2], 0.5);

            let eval = |w1: &Tensor, b1: &Tensor, gain: &Tensor, w2: &Tensor, delta: &Tensor| {
                let mut tape = Tape::new();
                let mut drop_rng = substream(seed, &[78]);
                let w1 = tape.param(w1.clone(), true, "w1").unwrap();
                let b1 = tape.param(b1.clone(), true, "b1").unwrap();
                let gain = tape.param(gain.clone(), true, "gain").unwrap();
                let w2 = tape.param(w2.clone(), true, "w2").unwrap();
                let delta = tape.param(delta.clone(), true, "delta").unwrap();
                let x = tape.input(x.clone(), "x").unwrap();

                let h = tape.matmul_nt(x, w1).unwrap();
                let h = tape.add_row(h, b1).unwrap();
                let h = tape.gelu(h).unwrap();
                let h = tape.layer_norm_rows(h, 1e-5).unwrap();
                let dv = tape.scatter_vec(delta, &[1, 3], 4).unwrap();
                let gained = tape.mul_row(h, gain).unwrap();
                let extra = tape.mul_row(h, dv).unwrap();
                let h = tape.add(gained, extra).unwrap();
                let h = tape.dropout(h, 0.25, &mut drop_rng).unwrap();
                let picked = tape.gather_cols(h, &[0, 2, 3]).unwrap();
                let spread = tape.scatter_cols(picked, &[1, 2, 0], 4).unwrap();
                let h = tape.add(h, spread).unwrap();
                let h = tape.relu(h).unwrap();
                let logits = tape.matmul_nt(h, w2).unwrap();
                let sm = tape.softmax_rows(logits).unwrap();
                let sm = tape.scale(sm, 2.0).unwrap();
                let ce = tape.mean_cross_entropy(logits, &[0, 2]).unwrap();
                let extra_loss = tape.sum(sm).unwrap();
                let loss = tape.add(ce, extra_loss).unwrap();
                tape.finalize(loss).unwrap();
                (tape.value(loss).item(), tape)
            };

            let (_, tape) = eval(&w1, &b1, &gain, &w2, &delta);
            let grads = tape.backward().unwrap();
            let leaves: Vec<(&str, &Tensor)> = alloc::vec![
                ("w1", &w1),
                ("b1", &b1),
                ("gain", &gain),
                ("w2", &w2),
                ("delta", &delta),
            ];
            let ids: Vec<NodeId> = grads.keys().copied().collect();
            assert_eq!(ids.len(), 5);

            let step = 1e-5;
            for (k, (_, base)) in leaves.iter().enumerate() {
                let analytic = &grads[&ids[k]];
                for j in 0..base.len() {
                    let mut plus = (w1.clone(), b1.clone(), gain.clone(), w2.clone(), delta.clone());
                    let mut minus = plus.clone();
                    let bump = |t: &mut (Tensor, Tensor, Tensor, Tensor, Tensor), d: f64| {
                        let slot = match k {
                            0 => &mut t.0,
                            1 => &mut t.1,
                            2 => &mut t.2,
                            3 => &mut t.3,
                            _ => &mut t.4,
                        };
                        slot.values_mut()[j] += d;
                    };
                    bump(&mut plus, step);
                    bump(&mut minus, -step);
                    let (lp, _) = eval(&plus.0, &plus.1, &plus.2, &plus.3, &plus.4);
                    let (lm, _) = eval(&minus.0, &minus.1, &minus.2, &minus.3, &minus.4);
                    let numeric = (lp - lm) / (2.0 * step);
                    let got = analytic.values()[j];
                    let denom = numeric.abs().max(got.abs()).max(1e-4);
                    assert!(
                        (numeric - got).abs() / denom < 1e-6,
                        "seed {seed} leaf {k} coord {j}: numeric {numeric} vs analytic {got}"
                    );
                }
            }
        }
    }
}
