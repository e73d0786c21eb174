//! Dense f64 tensors (rank 1–3) with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only arena: every operation records its inputs and
//! whatever forward values its backward rule needs, and [`Tape::backward`]
//! replays the records in reverse index order (which is a reverse topological
//! order, since an op can only reference earlier nodes). One tape serves one
//! forward/backward pass and is confined to a single thread; gradients are
//! read back out and applied to the persistent parameter tensors between
//! steps.

use thiserror::Error;

pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("invalid shape {shape:?}: extents must be positive and rank <= {MAX_RANK}")]
    InvalidShape { shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("index {index} out of bounds in {op} for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ── Tensor value type ────────────────────────────────────────────────

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// A dense row-major f64 tensor. Leaves inserted into a tape with
/// `requires_grad` set receive gradient contributions during backward.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    tape_id: Option<TensorId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK || shape.iter().any(|&e| e == 0) {
            return Err(TensorError::InvalidShape { shape });
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            tape_id: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: valid shape")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data).expect("vector: nonempty")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Marks this tensor as a learnable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn tape_id(&self) -> Option<TensorId> {
        self.tape_id
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Element access for rank-2 tensors.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }
}

// ── Broadcast classification ─────────────────────────────────────────

/// Supported operand pairings for elementwise binary ops. Broadcasting is
/// deliberately limited to scalars and per-row vectors; anything else is a
/// shape error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pairing {
    Same,
    /// rhs is a single scalar applied to every element of lhs.
    ScalarRhs,
    /// lhs is a single scalar applied against every element of rhs.
    ScalarLhs,
    /// lhs is m×n, rhs is a length-m vector applied along each row.
    RowVecRhs,
    /// rhs is m×n, lhs is a length-m vector applied along each row.
    RowVecLhs,
}

fn classify(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<(Pairing, Vec<usize>)> {
    if lhs == rhs {
        return Ok((Pairing::Same, lhs.to_vec()));
    }
    let ln: usize = lhs.iter().product();
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Ok((Pairing::ScalarRhs, lhs.to_vec()));
    }
    if ln == 1 {
        return Ok((Pairing::ScalarLhs, rhs.to_vec()));
    }
    if lhs.len() == 2 && rhs.len() == 1 && rhs[0] == lhs[0] {
        return Ok((Pairing::RowVecRhs, lhs.to_vec()));
    }
    if rhs.len() == 2 && lhs.len() == 1 && lhs[0] == rhs[0] {
        return Ok((Pairing::RowVecLhs, rhs.to_vec()));
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinKind::Add => a + b,
            BinKind::Sub => a - b,
            BinKind::Mul => a * b,
            BinKind::Div => a / b,
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Binary {
        kind: BinKind,
        pairing: Pairing,
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        c: f64,
    },
    Relu {
        a: TensorId,
    },
    SoftmaxRows {
        a: TensorId,
    },
    Permute10 {
        a: TensorId,
    },
    RowMean {
        a: TensorId,
    },
    RowStd {
        a: TensorId,
        /// Per-row means saved from the forward pass.
        means: Vec<f64>,
    },
    Sum {
        a: TensorId,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    Col {
        a: TensorId,
        j: usize,
    },
    Gather {
        a: TensorId,
        idx: Vec<usize>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    /// True only for leaves inserted with `requires_grad`.
    is_param: bool,
    /// True if any parameter is reachable from this node.
    needs_grad: bool,
    /// Accumulated dLoss/dSelf for parameter leaves; survives across
    /// backward calls so repeated passes accumulate.
    grad: Option<Vec<f64>>,
}

/// Recording arena for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf, copying its current values.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(
            Op::Leaf,
            t.shape.clone(),
            t.data.clone(),
            t.requires_grad,
            t.requires_grad,
        )
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), false, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Accumulated gradient of a parameter leaf, if backward has run.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Snapshot of a node as a standalone [`Tensor`].
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: n.is_param,
            grad: n.grad.clone(),
            tape_id: Some(id),
        }
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        is_param: bool,
        needs_grad: bool,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            is_param,
            needs_grad,
            grad: None,
        });
        id
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// `c[i][j] = Σ_k a[i][k]·b[k][j]` for rank-2 operands.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "matmul",
                expected: 2,
                shape: sa.to_vec(),
            });
        }
        if sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], data, false, ng))
    }

    fn binary(&mut self, kind: BinKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (pairing, out_shape) = classify(kind.name(), self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data: Vec<f64> = match pairing {
            Pairing::Same => av.iter().zip(bv).map(|(&x, &y)| kind.apply(x, y)).collect(),
            Pairing::ScalarRhs => {
                let s = bv[0];
                av.iter().map(|&x| kind.apply(x, s)).collect()
            }
            Pairing::ScalarLhs => {
                let s = av[0];
                bv.iter().map(|&y| kind.apply(s, y)).collect()
            }
            Pairing::RowVecRhs => {
                let cols = out_shape[1];
                av.chunks_exact(cols)
                    .zip(bv)
                    .flat_map(|(row, &s)| row.iter().map(move |&x| kind.apply(x, s)))
                    .collect()
            }
            Pairing::RowVecLhs => {
                let cols = out_shape[1];
                bv.chunks_exact(cols)
                    .zip(av)
                    .flat_map(|(row, &s)| row.iter().map(move |&y| kind.apply(s, y)))
                    .collect()
            }
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Binary { kind, pairing, a, b }, out_shape, data, false, ng))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinKind::Div, a, b)
    }

    /// Multiplication by a compile-time constant (not a tape value).
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.value(a).iter().map(|&x| c * x).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::Scale { a, c }, shape, data, false, ng)
    }

    /// max(x, 0), with subgradient 0 at x = 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Op::Relu { a }, shape, data, false, ng)
    }

    /// Row-wise softmax with per-row max subtraction; rows of the output are
    /// nonnegative and sum to 1.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "softmax_rows",
                expected: 2,
                shape: sa.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let mut data = Vec::with_capacity(m * n);
        for row in self.value(a).chunks_exact(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let total: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|&e| e / total));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::SoftmaxRows { a }, vec![m, n], data, false, ng))
    }

    /// Transpose of a rank-2 tensor: `out[j][i] = x[i][j]`.
    pub fn permute10(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "permute10",
                expected: 2,
                shape: sa.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let data = transpose_raw(self.value(a), m, n);
        let ng = self.needs(a);
        Ok(self.push(Op::Permute10 { a }, vec![n, m], data, false, ng))
    }

    /// Per-row arithmetic mean of an m×n tensor, as a length-m vector.
    pub fn row_mean(&mut self, a: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "row_mean",
                expected: 2,
                shape: sa.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let data: Vec<f64> = self
            .value(a)
            .chunks_exact(n)
            .map(|row| row.iter().sum::<f64>() / n as f64)
            .collect();
        let ng = self.needs(a);
        Ok(self.push(Op::RowMean { a }, vec![m], data, false, ng))
    }

    /// Per-row standard deviation `sqrt(population variance + eps)`; strictly
    /// positive for eps > 0, which guards constant rows.
    pub fn row_std(&mut self, a: TensorId, eps: f64) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "row_std",
                expected: 2,
                shape: sa.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let mut means = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m);
        for row in self.value(a).chunks_exact(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            means.push(mu);
            data.push((var + eps).sqrt());
        }
        let ng = self.needs(a);
        Ok(self.push(Op::RowStd { a, means }, vec![m], data, false, ng))
    }

    /// Convenience for the two row statistics in one call.
    pub fn rowwise_mean_std(&mut self, a: TensorId, eps: f64) -> Result<(TensorId, TensorId)> {
        Ok((self.row_mean(a)?, self.row_std(a, eps)?))
    }

    /// Sum of all elements, as a shape-[1] scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.value(a).iter().sum();
        let ng = self.needs(a);
        self.push(Op::Sum { a }, vec![1], vec![s], false, ng)
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let m = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: sp.to_vec(),
                });
            }
            widths.push(sp[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            vec![m, total],
            data,
            false,
            ng,
        ))
    }

    /// Column j of an m×n tensor, as a length-m vector.
    pub fn col(&mut self, a: TensorId, j: usize) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(TensorError::RankMismatch {
                op: "col",
                expected: 2,
                shape: sa.to_vec(),
            });
        }
        let (m, n) = (sa[0], sa[1]);
        if j >= n {
            return Err(TensorError::IndexOutOfBounds {
                op: "col",
                index: j,
                shape: sa.to_vec(),
            });
        }
        let data: Vec<f64> = (0..m).map(|i| self.nodes[a.0].data[i * n + j]).collect();
        let ng = self.needs(a);
        Ok(self.push(Op::Col { a, j }, vec![m], data, false, ng))
    }

    /// Gathers `out[i] = a[idx[i]]` from a rank-1 tensor.
    pub fn gather(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa.len() != 1 {
            return Err(TensorError::RankMismatch {
                op: "gather",
                expected: 1,
                shape: sa.to_vec(),
            });
        }
        let n = sa[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::IndexOutOfBounds {
                op: "gather",
                index: bad,
                shape: sa.to_vec(),
            });
        }
        let data: Vec<f64> = idx.iter().map(|&i| self.nodes[a.0].data[i]).collect();
        let ng = self.needs(a);
        Ok(self.push(
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
            vec![idx.len()],
            data,
            false,
            ng,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Clears accumulated parameter gradients.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar loss. Every parameter leaf reachable
    /// from `loss` accumulates dLoss/dLeaf into its grad buffer; repeated
    /// calls without `zero_grad` keep accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }

        // Restrict the sweep to ancestors of the loss that lead to a parameter.
        let mut live = vec![false; self.nodes.len()];
        live[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !live[i] || !self.nodes[i].needs_grad {
                continue;
            }
            for input in op_inputs(&self.nodes[i].op) {
                live[input.0] = true;
            }
        }

        let mut adjoint: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adjoint[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !live[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let g = match adjoint[i].take() {
                Some(g) => g,
                None => continue, // live but never actually contributed to loss
            };
            if self.nodes[i].is_param {
                match &mut self.nodes[i].grad {
                    Some(buf) => accumulate(buf, &g),
                    slot => *slot = Some(g.clone()),
                }
            }
            self.propagate(i, &g, &mut adjoint);
        }
        Ok(())
    }

    /// Pushes the adjoint `g` of node `i` onto the adjoints of its inputs.
    fn propagate(&self, i: usize, g: &[f64], adjoint: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let send = |id: TensorId, contribution: Vec<f64>, adjoint: &mut [Option<Vec<f64>>]| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut adjoint[id.0] {
                Some(buf) => accumulate(buf, &contribution),
                slot => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = G·Bᵀ
                    let bt = transpose_raw(self.value(*b), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k), adjoint);
                }
                if self.needs(*b) {
                    // dB = Aᵀ·G
                    let at = transpose_raw(self.value(*a), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n), adjoint);
                }
            }
            Op::Binary { kind, pairing, a, b } => {
                let (da, db) = binary_backward(
                    *kind,
                    *pairing,
                    g,
                    self.value(*a),
                    self.value(*b),
                    self.shape(*a),
                    self.shape(*b),
                    &node.shape,
                    self.needs(*a),
                    self.needs(*b),
                );
                if let Some(da) = da {
                    send(*a, da, adjoint);
                }
                if let Some(db) = db {
                    send(*b, db, adjoint);
                }
            }
            Op::Scale { a, c } => {
                send(*a, g.iter().map(|&x| c * x).collect(), adjoint);
            }
            Op::Relu { a } => {
                let da = self
                    .value(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gi)| if x > 0.0 { gi } else { 0.0 })
                    .collect();
                send(*a, da, adjoint);
            }
            Op::SoftmaxRows { a } => {
                let n = node.shape[1];
                let mut da = Vec::with_capacity(node.data.len());
                for (srow, grow) in node.data.chunks_exact(n).zip(g.chunks_exact(n)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(&s, &gi)| s * gi).sum();
                    da.extend(srow.iter().zip(grow).map(|(&s, &gi)| s * (gi - dot)));
                }
                send(*a, da, adjoint);
            }
            Op::Permute10 { a } => {
                let (n, m) = (node.shape[0], node.shape[1]);
                send(*a, transpose_raw(g, n, m), adjoint);
            }
            Op::RowMean { a } => {
                let n = self.shape(*a)[1];
                let inv = 1.0 / n as f64;
                let mut da = Vec::with_capacity(self.value(*a).len());
                for &gi in g {
                    da.extend(std::iter::repeat(gi * inv).take(n));
                }
                send(*a, da, adjoint);
            }
            Op::RowStd { a, means } => {
                // d std_i / d x_ij = (x_ij − μ_i) / (n·σ_i)
                let n = self.shape(*a)[1];
                let mut da = Vec::with_capacity(self.value(*a).len());
                for ((row, (&mu, &sigma)), &gi) in self
                    .value(*a)
                    .chunks_exact(n)
                    .zip(means.iter().zip(node.data.iter()))
                    .zip(g)
                {
                    let c = gi / (n as f64 * sigma);
                    da.extend(row.iter().map(|&x| c * (x - mu)));
                }
                send(*a, da, adjoint);
            }
            Op::Sum { a } => {
                send(*a, vec![g[0]; self.value(*a).len()], adjoint);
            }
            Op::ConcatCols { parts } => {
                let total = node.shape[1];
                let m = node.shape[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        send(p, dp, adjoint);
                    }
                    offset += w;
                }
            }
            Op::Col { a, j } => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + j] = g[i];
                }
                send(*a, da, adjoint);
            }
            Op::Gather { a, idx } => {
                let mut da = vec![0.0; self.value(*a).len()];
                for (&i, &gi) in idx.iter().zip(g) {
                    da[i] += gi;
                }
                send(*a, da, adjoint);
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<TensorId> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b } | Op::Binary { a, b, .. } => vec![*a, *b],
        Op::Scale { a, .. }
        | Op::Relu { a }
        | Op::SoftmaxRows { a }
        | Op::Permute10 { a }
        | Op::RowMean { a }
        | Op::RowStd { a, .. }
        | Op::Sum { a }
        | Op::Col { a, .. }
        | Op::Gather { a, .. } => vec![*a],
        Op::ConcatCols { parts } => parts.clone(),
    }
}

fn accumulate(buf: &mut [f64], src: &[f64]) {
    debug_assert_eq!(buf.len(), src.len());
    for (b, &s) in buf.iter_mut().zip(src) {
        *b += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn binary_backward(
    kind: BinKind,
    pairing: Pairing,
    g: &[f64],
    av: &[f64],
    bv: &[f64],
    sa: &[usize],
    sb: &[usize],
    out_shape: &[usize],
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    // Local derivatives per element: d out/d a and d out/d b.
    let dfda = |a: f64, b: f64| -> f64 {
        match kind {
            BinKind::Add | BinKind::Sub => 1.0,
            BinKind::Mul => b,
            BinKind::Div => {
                let _ = a;
                1.0 / b
            }
        }
    };
    let dfdb = |a: f64, b: f64| -> f64 {
        match kind {
            BinKind::Add => 1.0,
            BinKind::Sub => -1.0,
            BinKind::Mul => a,
            BinKind::Div => -a / (b * b),
        }
    };

    // Expanded per-output-element operand values.
    let fetch_a = |flat: usize| -> f64 {
        match pairing {
            Pairing::Same | Pairing::RowVecRhs | Pairing::ScalarRhs => av[flat],
            Pairing::ScalarLhs => av[0],
            Pairing::RowVecLhs => av[flat / out_shape[1]],
        }
    };
    let fetch_b = |flat: usize| -> f64 {
        match pairing {
            Pairing::Same | Pairing::RowVecLhs | Pairing::ScalarLhs => bv[flat],
            Pairing::ScalarRhs => bv[0],
            Pairing::RowVecRhs => bv[flat / out_shape[1]],
        }
    };

    let reduce = |full: Vec<f64>, target_numel: usize, to_rowvec: bool| -> Vec<f64> {
        if full.len() == target_numel {
            return full;
        }
        if target_numel == 1 {
            return vec![full.iter().sum()];
        }
        debug_assert!(to_rowvec);
        let cols = out_shape[1];
        full.chunks_exact(cols).map(|r| r.iter().sum()).collect()
    };

    let da = if need_a {
        let full: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi * dfda(fetch_a(i), fetch_b(i)))
            .collect();
        let numel: usize = sa.iter().product();
        Some(reduce(full, numel, matches!(pairing, Pairing::RowVecLhs)))
    } else {
        None
    };
    let db = if need_b {
        let full: Vec<f64> = g
            .iter()
            .enumerate()
            .map(|(i, &gi)| gi * dfdb(fetch_a(i), fetch_b(i)))
            .collect();
        let numel: usize = sb.iter().product();
        Some(reduce(full, numel, matches!(pairing, Pairing::RowVecRhs)))
    } else {
        None
    };
    (da, db)
}

// ── Raw kernels ──────────────────────────────────────────────────────

/// Row-major matmul, written so the inner loop runs over contiguous slices.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), m * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}
