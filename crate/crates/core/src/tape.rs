//! Define-by-run tape: records tensor-level primitives during the forward
//! pass, replays them in reverse for gradients.
//!
//! The tape is rebuilt per forward pass. Nodes are stored in execution
//! order, so reverse iteration is a valid topological order for the chain
//! rule. Gradients accumulate additively across multiple uses of a node.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{dot, mm_acc, mm_bt, mm_ta_acc, norm, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Elementwise nonlinearity selector.
#[derive(Clone, Copy, Debug)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    /// Trainable scalar slope.
    PRelu(Var),
    Sigmoid,
    Tanh,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    AddRow(Var, Var),
    RepeatRow(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    PRelu(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxMasked(Var, Arc<Vec<bool>>),
    SoftmaxRows(Var, Arc<Vec<bool>>),
    Sum(Var),
    RowSum(Var),
    Diag(Var),
    RowNormalize(Var),
    RowL2Dist(Var, Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ScatterRows(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, from: usize },
    Reshape(Var),
    CosSim(Var, Var),
    L2Dist(Var, Var),
    BceWithLogits(Var, Arc<Vec<f64>>),
    Dropout(Var, Arc<Vec<f64>>),
    LayerNorm { x: Var, gamma: Var, beta: Var },
}

/// Gradient slots aligned with tape nodes after a backward pass.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

pub struct Tape {
    vals: Vec<Arc<Tensor>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), requires: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.vals[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    fn push(&mut self, t: Tensor, op: Op, requires: bool) -> Var {
        debug_assert!(t.is_finite(), "non-finite forward value");
        self.vals.push(Arc::new(t));
        self.ops.push(op);
        self.requires.push(requires);
        Var(self.vals.len() - 1)
    }

    fn req(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.requires[v.0])
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Register an existing tensor without copying its storage.
    pub fn leaf_shared(&mut self, t: Arc<Tensor>, requires_grad: bool) -> Var {
        debug_assert!(t.is_finite(), "non-finite leaf");
        self.vals.push(t);
        self.ops.push(Op::Leaf);
        self.requires.push(requires_grad);
        Var(self.vals.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    // ── elementwise and scalar ───────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), self.req(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), self.req(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), self.req(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("scale");
        let r = self.requires[a.0];
        self.push(t, Op::Scale(a, c), r)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).expect("add_const");
        let r = self.requires[a.0];
        self.push(t, Op::AddConst(a), r)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::LeakyRelu(a) => self.leaky_relu(x, a),
            Activation::PRelu(slope) => self.prelu(x, slope),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("relu");
        let r = self.requires[x.0];
        self.push(t, Op::Relu(x), r)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("leaky_relu");
        let r = self.requires[x.0];
        self.push(t, Op::LeakyRelu(x, slope), r)
    }

    /// PReLU with a trainable scalar slope tensor.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        assert!(self.value(slope).is_scalar(), "prelu slope must be scalar");
        let a = self.value(slope).item();
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { a * v })
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("prelu");
        let r = self.req(&[x, slope]);
        self.push(t, Op::PRelu(x, slope), r)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("sigmoid");
        let r = self.requires[x.0];
        self.push(t, Op::Sigmoid(x), r)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("tanh");
        let r = self.requires[x.0];
        self.push(t, Op::Tanh(x), r)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).expect("exp");
        let r = self.requires[x.0];
        self.push(t, Op::Exp(x), r)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("ln of non-positive value".into()));
        }
        let data = self.value(x).data().iter().map(|v| v.ln()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::Ln(x), r))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data = crate::tensor::mm(self.value(a).data(), self.value(b).data(), m, ka, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::Matmul(a, b), self.req(&[a, b])))
    }

    /// a · bᵀ with b stored row-major (n×k).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2("matmul_bt")?;
        let (n, kb) = self.value(b).dims2("matmul_bt")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_bt",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data = mm_bt(self.value(a).data(), self.value(b).data(), m, ka, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MatmulBt(a, b), self.req(&[a, b])))
    }

    /// Matrix plus a row vector broadcast to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("add_row")?;
        if self.value(row).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.value(a).shape().to_vec(),
                right: self.value(row).shape().to_vec(),
            });
        }
        let rdat = self.value(row).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(self.value(a).data()[i * n + j] + rdat[j]);
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), self.req(&[a, row])))
    }

    /// Broadcast a vector (or 1×d row) into n identical rows.
    pub fn repeat_row(&mut self, v: Var, n: usize) -> Result<Var> {
        let (r, d) = self.value(v).dims2("repeat_row")?;
        if r != 1 {
            return Err(Error::BadShape {
                op: "repeat_row",
                detail: format!("expected a single row, got shape {:?}", self.value(v).shape()),
            });
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(self.value(v).data());
        }
        let t = Tensor::new(vec![n, d], data)?;
        let r = self.requires[v.0];
        Ok(self.push(t, Op::RepeatRow(v), r))
    }

    // ── softmax and reductions ───────────────────────────────────────

    /// Numerically-stabilized softmax over the unmasked entries of a
    /// vector. Masked entries are exactly zero in the output.
    pub fn softmax_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(x).numel();
        if mask.len() != n {
            return Err(Error::BadShape {
                op: "softmax_masked",
                detail: format!("mask length {} vs {} scores", mask.len(), n),
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptySupport("softmax_masked"));
        }
        let data = softmax_row(self.value(x).data(), mask);
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::SoftmaxMasked(x, Arc::new(mask.to_vec())), r))
    }

    /// Row-wise masked softmax over a matrix. Rows whose support is empty
    /// come out as all-zero rows (used for padded queries, whose outputs
    /// are never read).
    pub fn softmax_rows(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let (m, n) = self.value(x).dims2("softmax_rows")?;
        if mask.len() != m * n {
            return Err(Error::BadShape {
                op: "softmax_rows",
                detail: format!("mask length {} vs {} scores", mask.len(), m * n),
            });
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let mrow = &mask[i * n..(i + 1) * n];
            if mrow.iter().any(|&b| b) {
                let out = softmax_row(&self.value(x).data()[i * n..(i + 1) * n], mrow);
                data[i * n..(i + 1) * n].copy_from_slice(&out);
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::SoftmaxRows(x, mask), r))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let r = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), r)
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("row_sum")?;
        let mut data = vec![0.0; m];
        for i in 0..m {
            data[i] = self.value(x).data()[i * n..(i + 1) * n].iter().sum();
        }
        let t = Tensor::new(vec![m], data)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::RowSum(x), r))
    }

    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("diag")?;
        if m != n {
            return Err(Error::BadShape {
                op: "diag",
                detail: format!("expected square matrix, got {:?}", self.value(x).shape()),
            });
        }
        let data: Vec<f64> = (0..m).map(|i| self.value(x).data()[i * n + i]).collect();
        let t = Tensor::new(vec![m], data)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::Diag(x), r))
    }

    /// Scale every row to unit L2 norm. Errors on a zero row: projected
    /// representations come from trained parameters and should never be
    /// exactly zero, so this surfaces initialization bugs.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("row_normalize")?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.value(x).data()[i * n..(i + 1) * n];
            let nr = norm(row);
            if nr == 0.0 {
                return Err(Error::DegenerateVector("row_normalize"));
            }
            data.extend(row.iter().map(|v| v / nr));
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::RowNormalize(x), r))
    }

    /// Per-row euclidean distance between two equally-shaped matrices.
    pub fn row_l2_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_l2_dist", a, b)?;
        let (m, n) = self.value(a).dims2("row_l2_dist")?;
        let mut data = vec![0.0; m];
        for i in 0..m {
            let ra = &self.value(a).data()[i * n..(i + 1) * n];
            let rb = &self.value(b).data()[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (x, y) in ra.iter().zip(rb) {
                s += (x - y) * (x - y);
            }
            data[i] = s.sqrt();
        }
        let t = Tensor::new(vec![m], data)?;
        Ok(self.push(t, Op::RowL2Dist(a, b), self.req(&[a, b])))
    }

    // ── gather / scatter / layout ────────────────────────────────────

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.value(src).dims2("gather_rows")?;
        for &i in idx {
            if i >= m {
                return Err(Error::Contract(format!(
                    "gather_rows: row {i} out of range for {m} rows"
                )));
            }
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&self.value(src).data()[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], data)?;
        let r = self.requires[src.0];
        Ok(self.push(t, Op::GatherRows(src, Arc::new(idx.to_vec())), r))
    }

    /// Place the rows of `src` at `idx` inside a zero matrix of `rows` rows.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (k, n) = self.value(src).dims2("scatter_rows")?;
        if k != idx.len() {
            return Err(Error::BadShape {
                op: "scatter_rows",
                detail: format!("{} rows vs {} indices", k, idx.len()),
            });
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows || seen[i] {
                return Err(Error::Contract(format!("scatter_rows: bad index {i}")));
            }
            seen[i] = true;
        }
        let mut data = vec![0.0; rows * n];
        for (j, &i) in idx.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&self.value(src).data()[j * n..(j + 1) * n]);
        }
        let t = Tensor::new(vec![rows, n], data)?;
        let r = self.requires[src.0];
        Ok(self.push(t, Op::ScatterRows(src, Arc::new(idx.to_vec())), r))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (m, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.value(p).dims2("concat_cols")?;
            if mp != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        let r = self.req(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), r))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (_, n) = self.value(parts[0]).dims2("concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (mp, np) = self.value(p).dims2("concat_rows")?;
            if np != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            total += mp;
        }
        let mut data = Vec::with_capacity(total * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![total, n], data)?;
        let r = self.req(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), r))
    }

    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2("slice_cols")?;
        if from >= to || to > n {
            return Err(Error::BadShape {
                op: "slice_cols",
                detail: format!("columns {from}..{to} of {n}"),
            });
        }
        let w = to - from;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&self.value(x).data()[i * n + from..i * n + to]);
        }
        let t = Tensor::new(vec![m, w], data)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::SliceCols { x, from }, r))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::BadShape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.value(x).shape(), shape),
            });
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::Reshape(x), r))
    }

    // ── similarities and losses ──────────────────────────────────────

    /// Cosine similarity of two vectors; value in [-1, 1].
    pub fn cos_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cos_sim", a, b)?;
        let (na, nb) = (norm(self.value(a).data()), norm(self.value(b).data()));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::DegenerateVector("cos_sim"));
        }
        let y = dot(self.value(a).data(), self.value(b).data()) / (na * nb);
        Ok(self.push(Tensor::scalar(y), Op::CosSim(a, b), self.req(&[a, b])))
    }

    /// Euclidean distance of two vectors.
    pub fn l2_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l2_dist", a, b)?;
        let mut s = 0.0;
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            s += (x - y) * (x - y);
        }
        Ok(self.push(Tensor::scalar(s.sqrt()), Op::L2Dist(a, b), self.req(&[a, b])))
    }

    /// Binary cross-entropy over logits: probabilities are sigmoids
    /// clamped to [1e-7, 1-1e-7] before the logs. The gradient w.r.t. a
    /// logit is sigmoid(logit) - label.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        if self.value(logits).numel() != labels.len() {
            return Err(Error::BadShape {
                op: "bce_with_logits",
                detail: format!(
                    "{} logits vs {} labels",
                    self.value(logits).numel(),
                    labels.len()
                ),
            });
        }
        const EPS: f64 = 1e-7;
        let mut loss = 0.0;
        for (&x, &y) in self.value(logits).data().iter().zip(labels) {
            let p = sigmoid(x).clamp(EPS, 1.0 - EPS);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let r = self.requires[logits.0];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits(logits, Arc::new(labels.to_vec())),
            r,
        ))
    }

    /// Multiply by a precomputed dropout keep-mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, x: Var, keep: Arc<Vec<f64>>) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::BadShape {
                op: "dropout",
                detail: format!("mask length {} vs {}", keep.len(), self.value(x).numel()),
            });
        }
        let data = self.value(x).data().iter().zip(keep.iter()).map(|(v, k)| v * k).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let r = self.requires[x.0];
        Ok(self.push(t, Op::Dropout(x, keep), r))
    }

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-8;
        let (m, n) = self.value(x).dims2("layer_norm")?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::BadShape {
                op: "layer_norm",
                detail: format!("gain/bias width vs {n} columns"),
            });
        }
        let gdat = self.value(gamma).data();
        let bdat = self.value(beta).data();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.value(x).data()[i * n..(i + 1) * n];
            let mean: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for j in 0..n {
                data.push(gdat[j] * (row[j] - mean) * inv + bdat[j]);
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        let r = self.req(&[x, gamma, beta]);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta }, r))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Every node the loss depends on
    /// that was registered with `requires_grad` receives a gradient of
    /// its own shape; repeated uses accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        slots[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]).unwrap());
        for i in (0..=loss.0).rev() {
            if !self.requires[i] {
                continue;
            }
            let g = match slots[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.step_back(i, &g, &mut slots);
            slots[i] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn acc<'a>(&self, slots: &'a mut [Option<Tensor>], p: Var) -> &'a mut [f64] {
        if slots[p.0].is_none() {
            slots[p.0] = Some(Tensor::zeros(self.value(p).shape().to_vec()));
        }
        slots[p.0].as_mut().unwrap().data_mut()
    }

    fn step_back(&self, i: usize, g: &Tensor, slots: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires[a.0] {
                    for (ga, &gi) in self.acc(slots, *a).iter_mut().zip(gd) {
                        *ga += gi;
                    }
                }
                if self.requires[b.0] {
                    for (gb, &gi) in self.acc(slots, *b).iter_mut().zip(gd) {
                        *gb += gi;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires[a.0] {
                    for (ga, &gi) in self.acc(slots, *a).iter_mut().zip(gd) {
                        *ga += gi;
                    }
                }
                if self.requires[b.0] {
                    for (gb, &gi) in self.acc(slots, *b).iter_mut().zip(gd) {
                        *gb -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires[a.0] {
                    let bd = self.value(*b).data().to_vec();
                    for ((ga, &gi), &bv) in self.acc(slots, *a).iter_mut().zip(gd).zip(&bd) {
                        *ga += gi * bv;
                    }
                }
                if self.requires[b.0] {
                    let ad = self.value(*a).data().to_vec();
                    for ((gb, &gi), &av) in self.acc(slots, *b).iter_mut().zip(gd).zip(&ad) {
                        *gb += gi * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.requires[a.0] {
                    for (ga, &gi) in self.acc(slots, *a).iter_mut().zip(gd) {
                        *ga += c * gi;
                    }
                }
            }
            Op::AddConst(a) => {
                if self.requires[a.0] {
                    for (ga, &gi) in self.acc(slots, *a).iter_mut().zip(gd) {
                        *ga += gi;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").unwrap();
                let (_, n) = self.value(*b).dims2("matmul").unwrap();
                if self.requires[a.0] {
                    let bd = self.value(*b).data();
                    let ga = mm_bt(gd, bd, m, n, k);
                    for (dst, src) in self.acc(slots, *a).iter_mut().zip(&ga) {
                        *dst += src;
                    }
                }
                if self.requires[b.0] {
                    let ad = self.value(*a).data().to_vec();
                    mm_ta_acc(self.acc(slots, *b), &ad, gd, m, k, n);
                }
            }
            Op::MatmulBt(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul_bt").unwrap();
                let (n, _) = self.value(*b).dims2("matmul_bt").unwrap();
                if self.requires[a.0] {
                    let bd = self.value(*b).data().to_vec();
                    mm_acc(self.acc(slots, *a), gd, &bd, m, n, k);
                }
                if self.requires[b.0] {
                    let ad = self.value(*a).data().to_vec();
                    mm_ta_acc(self.acc(slots, *b), gd, &ad, m, n, k);
                }
            }
            Op::AddRow(a, row) => {
                let (m, n) = self.value(*a).dims2("add_row").unwrap();
                if self.requires[a.0] {
                    for (ga, &gi) in self.acc(slots, *a).iter_mut().zip(gd) {
                        *ga += gi;
                    }
                }
                if self.requires[row.0] {
                    let gr = self.acc(slots, *row);
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += gd[i * n + j];
                        }
                    }
                }
            }
            Op::RepeatRow(v) => {
                if self.requires[v.0] {
                    let d = self.value(*v).numel();
                    let n = gd.len() / d;
                    let gv = self.acc(slots, *v);
                    for i in 0..n {
                        for j in 0..d {
                            gv[j] += gd[i * d + j];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.requires[x.0] {
                    let xd = self.value(*x).data().to_vec();
                    for ((gx, &gi), &xv) in self.acc(slots, *x).iter_mut().zip(gd).zip(&xd) {
                        if xv > 0.0 {
                            *gx += gi;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, a) => {
                if self.requires[x.0] {
                    let xd = self.value(*x).data().to_vec();
                    for ((gx, &gi), &xv) in self.acc(slots, *x).iter_mut().zip(gd).zip(&xd) {
                        *gx += if xv > 0.0 { gi } else { a * gi };
                    }
                }
            }
            Op::PRelu(x, slope) => {
                let a = self.value(*slope).item();
                let xd = self.value(*x).data().to_vec();
                if self.requires[x.0] {
                    for ((gx, &gi), &xv) in self.acc(slots, *x).iter_mut().zip(gd).zip(&xd) {
                        *gx += if xv > 0.0 { gi } else { a * gi };
                    }
                }
                if self.requires[slope.0] {
                    let mut gs = 0.0;
                    for (&gi, &xv) in gd.iter().zip(&xd) {
                        if xv < 0.0 {
                            gs += gi * xv;
                        }
                    }
                    self.acc(slots, *slope)[0] += gs;
                }
            }
            Op::Sigmoid(x) => {
                if self.requires[x.0] {
                    let yd = self.value(Var(i)).data().to_vec();
                    for ((gx, &gi), &y) in self.acc(slots, *x).iter_mut().zip(gd).zip(&yd) {
                        *gx += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.requires[x.0] {
                    let yd = self.value(Var(i)).data().to_vec();
                    for ((gx, &gi), &y) in self.acc(slots, *x).iter_mut().zip(gd).zip(&yd) {
                        *gx += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                if self.requires[x.0] {
                    let yd = self.value(Var(i)).data().to_vec();
                    for ((gx, &gi), &y) in self.acc(slots, *x).iter_mut().zip(gd).zip(&yd) {
                        *gx += gi * y;
                    }
                }
            }
            Op::Ln(x) => {
                if self.requires[x.0] {
                    let xd = self.value(*x).data().to_vec();
                    for ((gx, &gi), &xv) in self.acc(slots, *x).iter_mut().zip(gd).zip(&xd) {
                        *gx += gi / xv;
                    }
                }
            }
            Op::SoftmaxMasked(x, mask) => {
                if self.requires[x.0] {
                    let yd = self.value(Var(i)).data().to_vec();
                    softmax_backward(self.acc(slots, *x), gd, &yd, mask);
                }
            }
            Op::SoftmaxRows(x, mask) => {
                if self.requires[x.0] {
                    let yd = self.value(Var(i)).data().to_vec();
                    let (m, n) = self.value(Var(i)).dims2("softmax_rows").unwrap();
                    let gx = self.acc(slots, *x);
                    for r in 0..m {
                        let lo = r * n;
                        let hi = lo + n;
                        softmax_backward(&mut gx[lo..hi], &gd[lo..hi], &yd[lo..hi], &mask[lo..hi]);
                    }
                }
            }
            Op::Sum(x) => {
                if self.requires[x.0] {
                    let gi = gd[0];
                    for gx in self.acc(slots, *x).iter_mut() {
                        *gx += gi;
                    }
                }
            }
            Op::RowSum(x) => {
                if self.requires[x.0] {
                    let (m, n) = self.value(*x).dims2("row_sum").unwrap();
                    let gx = self.acc(slots, *x);
                    for r in 0..m {
                        for c in 0..n {
                            gx[r * n + c] += gd[r];
                        }
                    }
                }
            }
            Op::Diag(x) => {
                if self.requires[x.0] {
                    let n = gd.len();
                    let gx = self.acc(slots, *x);
                    for r in 0..n {
                        gx[r * n + r] += gd[r];
                    }
                }
            }
            Op::RowNormalize(x) => {
                if self.requires[x.0] {
                    let (m, n) = self.value(*x).dims2("row_normalize").unwrap();
                    let xd = self.value(*x).data().to_vec();
                    let yd = self.value(Var(i)).data().to_vec();
                    let gx = self.acc(slots, *x);
                    for r in 0..m {
                        let lo = r * n;
                        let xr = &xd[lo..lo + n];
                        let ur = &yd[lo..lo + n];
                        let nr = norm(xr);
                        let gu = dot(&gd[lo..lo + n], ur);
                        for c in 0..n {
                            gx[lo + c] += (gd[lo + c] - gu * ur[c]) / nr;
                        }
                    }
                }
            }
            Op::RowL2Dist(a, b) => {
                let (m, n) = self.value(*a).dims2("row_l2_dist").unwrap();
                let ad = self.value(*a).data().to_vec();
                let bd = self.value(*b).data().to_vec();
                let yd = self.value(Var(i)).data().to_vec();
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if !self.requires[v.0] {
                        continue;
                    }
                    let gv = self.acc(slots, v);
                    for r in 0..m {
                        // Subgradient 0 at coincident rows.
                        if yd[r] == 0.0 {
                            continue;
                        }
                        for c in 0..n {
                            let diff = ad[r * n + c] - bd[r * n + c];
                            gv[r * n + c] += sign * gd[r] * diff / yd[r];
                        }
                    }
                }
            }
            Op::GatherRows(src, idx) => {
                if self.requires[src.0] {
                    let (_, n) = self.value(*src).dims2("gather_rows").unwrap();
                    let gs = self.acc(slots, *src);
                    for (j, &row) in idx.iter().enumerate() {
                        for c in 0..n {
                            gs[row * n + c] += gd[j * n + c];
                        }
                    }
                }
            }
            Op::ScatterRows(src, idx) => {
                if self.requires[src.0] {
                    let (_, n) = self.value(*src).dims2("scatter_rows").unwrap();
                    let gs = self.acc(slots, *src);
                    for (j, &row) in idx.iter().enumerate() {
                        for c in 0..n {
                            gs[j * n + c] += gd[row * n + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.value(p).dims2("concat_cols").unwrap().1)
                    .collect();
                let total: usize = widths.iter().sum();
                let m = gd.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.requires[p.0] {
                        let gp = self.acc(slots, p);
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += gd[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires[p.0] {
                        for (gp, &gi) in self.acc(slots, p).iter_mut().zip(&gd[off..off + len]) {
                            *gp += gi;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, from } => {
                if self.requires[x.0] {
                    let (m, n) = self.value(*x).dims2("slice_cols").unwrap();
                    let w = gd.len() / m;
                    let gx = self.acc(slots, *x);
                    for r in 0..m {
                        for c in 0..w {
                            gx[r * n + from + c] += gd[r * w + c];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.requires[x.0] {
                    for (gx, &gi) in self.acc(slots, *x).iter_mut().zip(gd) {
                        *gx += gi;
                    }
                }
            }
            Op::CosSim(a, b) => {
                let gi = gd[0];
                let y = self.value(Var(i)).item();
                let ad = self.value(*a).data().to_vec();
                let bd = self.value(*b).data().to_vec();
                let (na, nb) = (norm(&ad), norm(&bd));
                if self.requires[a.0] {
                    let ga = self.acc(slots, *a);
                    for c in 0..ad.len() {
                        ga[c] += gi * (bd[c] / (na * nb) - y * ad[c] / (na * na));
                    }
                }
                if self.requires[b.0] {
                    let gb = self.acc(slots, *b);
                    for c in 0..bd.len() {
                        gb[c] += gi * (ad[c] / (na * nb) - y * bd[c] / (nb * nb));
                    }
                }
            }
            Op::L2Dist(a, b) => {
                let gi = gd[0];
                let y = self.value(Var(i)).item();
                if y == 0.0 {
                    return;
                }
                let ad = self.value(*a).data().to_vec();
                let bd = self.value(*b).data().to_vec();
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if !self.requires[v.0] {
                        continue;
                    }
                    let gv = self.acc(slots, v);
                    for c in 0..ad.len() {
                        gv[c] += sign * gi * (ad[c] - bd[c]) / y;
                    }
                }
            }
            Op::BceWithLogits(logits, labels) => {
                if self.requires[logits.0] {
                    let gi = gd[0];
                    let xd = self.value(*logits).data().to_vec();
                    let gl = self.acc(slots, *logits);
                    for (c, (&x, &y)) in xd.iter().zip(labels.iter()).enumerate() {
                        gl[c] += gi * (sigmoid(x) - y);
                    }
                }
            }
            Op::Dropout(x, keep) => {
                if self.requires[x.0] {
                    for ((gx, &gi), &k) in self.acc(slots, *x).iter_mut().zip(gd).zip(keep.iter())
                    {
                        *gx += gi * k;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                const EPS: f64 = 1e-8;
                let (m, n) = self.value(*x).dims2("layer_norm").unwrap();
                let xd = self.value(*x).data().to_vec();
                let gam = self.value(*gamma).data().to_vec();
                for r in 0..m {
                    let row = &xd[r * n..(r + 1) * n];
                    let grow = &gd[r * n..(r + 1) * n];
                    let mean: f64 = row.iter().sum::<f64>() / n as f64;
                    let var: f64 =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    if self.requires[gamma.0] {
                        let gg = self.acc(slots, *gamma);
                        for c in 0..n {
                            gg[c] += grow[c] * xhat[c];
                        }
                    }
                    if self.requires[beta.0] {
                        let gb = self.acc(slots, *beta);
                        for c in 0..n {
                            gb[c] += grow[c];
                        }
                    }
                    if self.requires[x.0] {
                        let gh: Vec<f64> = (0..n).map(|c| grow[c] * gam[c]).collect();
                        let mg: f64 = gh.iter().sum::<f64>() / n as f64;
                        let mgx: f64 =
                            gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let gx = self.acc(slots, *x);
                        for c in 0..n {
                            gx[r * n + c] += (gh[c] - mg - xhat[c] * mgx) * inv;
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over the unmasked entries of one row.
fn softmax_row(scores: &[f64], mask: &[bool]) -> Vec<f64> {
    let mut mx = f64::NEG_INFINITY;
    for (&s, &m) in scores.iter().zip(mask) {
        if m && s > mx {
            mx = s;
        }
    }
    let mut out = vec![0.0; scores.len()];
    let mut sum = 0.0;
    for (i, (&s, &m)) in scores.iter().zip(mask).enumerate() {
        if m {
            let e = (s - mx).exp();
            out[i] = e;
            sum += e;
        }
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    out
}

fn softmax_backward(gx: &mut [f64], g: &[f64], y: &[f64], mask: &[bool]) {
    let mut s = 0.0;
    for i in 0..g.len() {
        if mask[i] {
            s += g[i] * y[i];
        }
    }
    for i in 0..g.len() {
        if mask[i] {
            gx[i] += y[i] * (g[i] - s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(xs: &[f64]) -> Tensor {
        Tensor::vector(xs)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), false);
        let i = tape.leaf(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(), false);
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap(), false);
        let b = tape.leaf(Tensor::matrix(&[vec![3.0], vec![4.0]]).unwrap(), false);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_inner_mismatch_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap(), false);
        let b = tape.leaf(Tensor::matrix(&[vec![3.0, 4.0]]).unwrap(), false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_masked_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0, 3.0_f64.ln()]), false);
        let y = tape.softmax_masked(x, &[true, true]).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

        let x = tape.leaf(t1(&[5.0, 5.0, 5.0]), false);
        let y = tape.softmax_masked(x, &[true, true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.0]);

        // Stabilized: huge scores must not overflow.
        let x = tape.leaf(t1(&[1000.0, 999.0]), false);
        let y = tape.softmax_masked(x, &[true, true]).unwrap();
        let e = std::f64::consts::E;
        let d = tape.value(y).data();
        assert!((d[0] - e / (1.0 + e)).abs() < 1e-9);
        assert!((d[1] - 1.0 / (1.0 + e)).abs() < 1e-9);

        let x = tape.leaf(t1(&[1.0]), false);
        assert!(matches!(tape.softmax_masked(x, &[false]), Err(Error::EmptySupport(_))));
    }

    #[test]
    fn activations_trivial_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[-2.0, 3.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);

        let y = tape.leaky_relu(x, 0.01);
        assert!((tape.value(y).data()[0] + 0.02).abs() < 1e-15);

        let z = tape.leaf(t1(&[0.0]), false);
        let y = tape.sigmoid(z);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn cosine_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[1.0, 0.0]), false);
        let b = tape.leaf(t1(&[0.0, 1.0]), false);
        assert_eq!(tape.cos_sim(a, b).map(|v| tape.value(v).item()).unwrap(), 0.0);

        let a = tape.leaf(t1(&[2.0, 2.0]), false);
        let b = tape.leaf(t1(&[5.0, 5.0]), false);
        assert!((tape.cos_sim(a, b).map(|v| tape.value(v).item()).unwrap() - 1.0).abs() < 1e-12);

        let a = tape.leaf(t1(&[1.0, 0.0]), false);
        let b = tape.leaf(t1(&[1.0, 1.0]), false);
        let y = tape.cos_sim(a, b).map(|v| tape.value(v).item()).unwrap();
        assert!((y - 1.0 / 2.0_f64.sqrt()).abs() < 1e-12);

        let z = tape.leaf(t1(&[0.0, 0.0]), false);
        assert!(matches!(tape.cos_sim(a, z), Err(Error::DegenerateVector(_))));
    }

    #[test]
    fn l2_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(t1(&[0.0, 0.0]), false);
        let b = tape.leaf(t1(&[3.0, 4.0]), false);
        assert_eq!(tape.l2_dist(a, b).map(|v| tape.value(v).item()).unwrap(), 5.0);
        assert_eq!(tape.l2_dist(a, a).map(|v| tape.value(v).item()).unwrap(), 0.0);

        let a = tape.leaf(t1(&[1.0, 1.0, 1.0]), false);
        let b = tape.leaf(t1(&[2.0, 2.0, 2.0]), false);
        let y = tape.l2_dist(a, b).map(|v| tape.value(v).item()).unwrap();
        assert!((y - 3.0_f64.sqrt()).abs() < 1e-12);

        let c = tape.leaf(t1(&[1.0, 2.0]), false);
        assert!(tape.l2_dist(a, c).is_err());
    }

    #[test]
    fn backward_square() {
        // f(x) = x·x at x = 3 → grad 6.
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[3.0]), true);
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_sigmoid_chain() {
        // f(x) = sigmoid(2x) at x = 0 → grad 2·0.25 = 0.5.
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0]), true);
        let two_x = tape.scale(x, 2.0);
        let y = tape.sigmoid(two_x);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_accumulates_reuse() {
        // y used twice: f = y + y at y = 1 → grad 2.
        let mut tape = Tape::new();
        let y = tape.leaf(t1(&[1.0]), true);
        let s = tape.add(y, y).unwrap();
        let loss = tape.sum(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn gather_scatter_roundtrip() {
        let mut tape = Tape::new();
        let m = tape.leaf(
            Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
            true,
        );
        let g = tape.gather_rows(m, &[2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[5.0, 6.0, 1.0, 2.0]);
        let s = tape.scatter_rows(g, &[2, 0], 3).unwrap();
        assert_eq!(tape.value(s).row(0), &[1.0, 2.0]);
        assert_eq!(tape.value(s).row(1), &[0.0, 0.0]);
        assert_eq!(tape.value(s).row(2), &[5.0, 6.0]);
    }

    #[test]
    fn bce_hand_case() {
        // logit 0 for one positive and one negative → 2·ln 2.
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[0.0, 0.0]), true);
        let loss = tape.bce_with_logits(x, &[1.0, 0.0]).unwrap();
        assert!((tape.value(loss).item() - 2.0 * 2.0_f64.ln()).abs() < 1e-12);
        // extreme logits: clamped, loss finite and near zero
        let mut tape = Tape::new();
        let x = tape.leaf(t1(&[60.0, -60.0]), true);
        let loss = tape.bce_with_logits(x, &[1.0, 0.0]).unwrap();
        assert!(tape.value(loss).item().is_finite());
        assert!(tape.value(loss).item() < 1e-6);
    }
}
