//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The engine differentiates scalar objectives with respect to a flat
//! parameter vector. It is deliberately minimal: the primitive set is closed
//! and enumerated (no expression compiler), every node holds a vector value,
//! and all arithmetic is `f64`. That is sufficient for the denoiser network
//! and every training loss in this crate, and it keeps gradients
//! bit-reproducible: the same tape evaluated on the same parameters always
//! produces the same bits.
//!
//! A [`Tape`] is built once by appending nodes (inputs of a node must already
//! be on the tape, so topological order holds by construction), evaluated
//! with [`Tape::forward`], and differentiated with [`Tape::backward`]. Tapes
//! are single-threaded, but many tapes may run in parallel on shared,
//! immutable parameters.

use thiserror::Error;

/// Errors produced while building or running a [`Tape`].
#[derive(Debug, Error)]
pub enum AutogradError {
    /// A node operand refers to a tape position that does not exist yet.
    #[error("operand {operand} is not on the tape (tape has {nodes} nodes)")]
    UnknownOperand { operand: usize, nodes: usize },
    /// A parameter or input slice lies outside the declared vector.
    #[error("{kind} slice {offset}..{end} out of range (len {len})")]
    SliceOutOfRange {
        kind: &'static str,
        offset: usize,
        end: usize,
        len: usize,
    },
    /// Two operands that must have equal lengths do not.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    /// A node was declared with an empty value.
    #[error("nodes must have at least one element")]
    EmptyNode,
    /// Matrix-vector dimensions do not match the operand lengths.
    #[error("matvec expects weight len {rows}x{cols}={expected} and vector len {cols}, got {w_len} and {x_len}")]
    MatVecShape {
        rows: usize,
        cols: usize,
        expected: usize,
        w_len: usize,
        x_len: usize,
    },
    /// A constant (node payload or scale factor) is not finite.
    #[error("non-finite constant in tape construction")]
    NonFiniteConstant,
    /// `forward` produced a non-finite value at the given node.
    #[error("non-finite value at node {node} during forward pass")]
    NonFinite { node: usize },
    /// `sqrt` was applied to a negative input.
    #[error("sqrt of negative value at node {node}")]
    NegativeSqrt { node: usize },
    /// `ln` was applied to a non-positive input.
    #[error("ln of non-positive value at node {node}")]
    NonPositiveLn { node: usize },
    /// The tape's final node is not a scalar, so it cannot be an objective.
    #[error("tape output must be a scalar, last node has length {len}")]
    OutputNotScalar { len: usize },
    /// `forward` was called with vectors of the wrong length.
    #[error("{kind} vector has length {got}, tape declared {expected}")]
    WrongVectorLength {
        kind: &'static str,
        got: usize,
        expected: usize,
    },
    /// `backward` was called before `forward`.
    #[error("backward called before forward")]
    BackwardBeforeForward,
    /// `backward` was called twice without re-running `forward`.
    #[error("backward called twice without re-running forward")]
    BackwardTwice,
    /// `forward` was called on an empty tape.
    #[error("tape has no nodes")]
    EmptyTape,
    /// The finite-difference oracle hit a non-finite objective value.
    #[error("objective not finite at a perturbed point (coordinate {coord})")]
    NonFiniteObjective { coord: usize },
}

/// Convenience alias for autograd results.
pub type AutogradResult<T> = Result<T, AutogradError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// The closed primitive set. Every node produces a vector of `f64`.
#[derive(Debug, Clone)]
enum Op {
    /// A slice `params[offset .. offset+len]` of the flat parameter vector.
    Param { offset: usize },
    /// A slice `inputs[offset .. offset+len]` of the per-call input vector.
    Input { offset: usize },
    /// A fixed vector baked into the tape.
    Const { values: Vec<f64> },
    /// Elementwise sum of two equal-length nodes.
    Add { a: usize, b: usize },
    /// Elementwise difference `a - b` of two equal-length nodes.
    Sub { a: usize, b: usize },
    /// Elementwise (Hadamard) product of two equal-length nodes.
    Mul { a: usize, b: usize },
    /// Multiplication by a fixed scalar.
    Scale { a: usize, k: f64 },
    /// Row-major matrix (`rows` x `cols`, stored in `w`) times vector `x`.
    MatVec {
        w: usize,
        x: usize,
        rows: usize,
        cols: usize,
    },
    /// Elementwise hyperbolic tangent.
    Tanh { a: usize },
    /// Sum of all elements; always produces a length-1 node.
    Sum { a: usize },
    /// Elementwise square.
    Square { a: usize },
    /// Elementwise square root of non-negative inputs.
    Sqrt { a: usize },
    /// Elementwise natural logarithm of positive inputs.
    Ln { a: usize },
    /// Concatenation of one or more nodes, in argument order.
    Concat { parts: Vec<usize> },
}

struct Node {
    op: Op,
    len: usize,
}

/// Lifecycle of a tape: values are only valid after `forward`, and each
/// `forward` licenses exactly one `backward`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TapeState {
    Built,
    Evaluated,
    Differentiated,
}

/// A Wengert tape: an append-only list of primitive operations in topological
/// order, plus cached values and adjoints.
pub struct Tape {
    n_params: usize,
    n_inputs: usize,
    nodes: Vec<Node>,
    values: Vec<Vec<f64>>,
    state: TapeState,
}

impl Tape {
    /// Creates an empty tape over a parameter vector of length `n_params`
    /// and a per-call input vector of length `n_inputs`.
    pub fn new(n_params: usize, n_inputs: usize) -> Self {
        Tape {
            n_params,
            n_inputs,
            nodes: Vec::new(),
            values: Vec::new(),
            state: TapeState::Built,
        }
    }

    /// Number of nodes currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True if the tape has no nodes.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Vector length of an existing node.
    pub fn node_len(&self, id: NodeId) -> usize {
        self.nodes[id.0].len
    }

    /// Cached value of a node, available between `forward` and the next
    /// structural change. Returns `None` before the first `forward`.
    pub fn value_of(&self, id: NodeId) -> Option<&[f64]> {
        if self.state == TapeState::Built || id.0 >= self.values.len() {
            return None;
        }
        Some(&self.values[id.0])
    }

    fn check_operand(&self, id: NodeId) -> AutogradResult<usize> {
        if id.0 >= self.nodes.len() {
            return Err(AutogradError::UnknownOperand {
                operand: id.0,
                nodes: self.nodes.len(),
            });
        }
        Ok(self.nodes[id.0].len)
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        // Any structural change invalidates cached values.
        self.state = TapeState::Built;
        self.nodes.push(Node { op, len });
        NodeId(self.nodes.len() - 1)
    }

    /// References `params[offset .. offset+len]`.
    pub fn param(&mut self, offset: usize, len: usize) -> AutogradResult<NodeId> {
        if len == 0 {
            return Err(AutogradError::EmptyNode);
        }
        if offset + len > self.n_params {
            return Err(AutogradError::SliceOutOfRange {
                kind: "param",
                offset,
                end: offset + len,
                len: self.n_params,
            });
        }
        Ok(self.push(Op::Param { offset }, len))
    }

    /// References `inputs[offset .. offset+len]`.
    pub fn input(&mut self, offset: usize, len: usize) -> AutogradResult<NodeId> {
        if len == 0 {
            return Err(AutogradError::EmptyNode);
        }
        if offset + len > self.n_inputs {
            return Err(AutogradError::SliceOutOfRange {
                kind: "input",
                offset,
                end: offset + len,
                len: self.n_inputs,
            });
        }
        Ok(self.push(Op::Input { offset }, len))
    }

    /// Embeds a fixed, finite vector into the tape.
    pub fn constant(&mut self, values: Vec<f64>) -> AutogradResult<NodeId> {
        if values.is_empty() {
            return Err(AutogradError::EmptyNode);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AutogradError::NonFiniteConstant);
        }
        let len = values.len();
        Ok(self.push(Op::Const { values }, len))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: impl Fn(usize, usize) -> Op,
    ) -> AutogradResult<NodeId> {
        let la = self.check_operand(a)?;
        let lb = self.check_operand(b)?;
        if la != lb {
            return Err(AutogradError::LengthMismatch { left: la, right: lb });
        }
        Ok(self.push(make(a.0, b.0), la))
    }

    /// Elementwise `a + b`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> AutogradResult<NodeId> {
        self.binary(a, b, |a, b| Op::Add { a, b })
    }

    /// Elementwise `a - b`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AutogradResult<NodeId> {
        self.binary(a, b, |a, b| Op::Sub { a, b })
    }

    /// Elementwise `a * b`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AutogradResult<NodeId> {
        self.binary(a, b, |a, b| Op::Mul { a, b })
    }

    /// `k * a` for a fixed finite scalar `k`.
    pub fn scale(&mut self, a: NodeId, k: f64) -> AutogradResult<NodeId> {
        let la = self.check_operand(a)?;
        if !k.is_finite() {
            return Err(AutogradError::NonFiniteConstant);
        }
        Ok(self.push(Op::Scale { a: a.0, k }, la))
    }

    /// Matrix-vector product. `w` holds a `rows x cols` matrix in row-major
    /// order; `x` has length `cols`; the result has length `rows`.
    pub fn matvec(
        &mut self,
        w: NodeId,
        x: NodeId,
        rows: usize,
        cols: usize,
    ) -> AutogradResult<NodeId> {
        let lw = self.check_operand(w)?;
        let lx = self.check_operand(x)?;
        if rows == 0 || cols == 0 || lw != rows * cols || lx != cols {
            return Err(AutogradError::MatVecShape {
                rows,
                cols,
                expected: rows.saturating_mul(cols),
                w_len: lw,
                x_len: lx,
            });
        }
        Ok(self.push(
            Op::MatVec {
                w: w.0,
                x: x.0,
                rows,
                cols,
            },
            rows,
        ))
    }

    /// Elementwise `tanh(a)`.
    pub fn tanh(&mut self, a: NodeId) -> AutogradResult<NodeId> {
        let la = self.check_operand(a)?;
        Ok(self.push(Op::Tanh { a: a.0 }, la))
    }

    /// Sum of all elements of `a` (scalar result).
    pub fn sum(&mut self, a: NodeId) -> AutogradResult<NodeId> {
        self.check_operand(a)?;
        Ok(self.push(Op::Sum { a: a.0 }, 1))
    }

    /// Elementwise `a^2`.
    pub fn square(&mut self, a: NodeId) -> AutogradResult<NodeId> {
        let la = self.check_operand(a)?;
        Ok(self.push(Op::Square { a: a.0 }, la))
    }

    /// Elementwise `sqrt(a)` for non-negative `a`.
    ///
    /// The derivative at exactly zero is defined as zero (subgradient
    /// convention), so norms of zero residuals have zero gradient rather
    /// than an infinite one.
    pub fn sqrt(&mut self, a: NodeId) -> AutogradResult<NodeId> {
        let la = self.check_operand(a)?;
        Ok(self.push(Op::Sqrt { a: a.0 }, la))
    }

    /// Elementwise `ln(a)` for positive `a`.
    pub fn ln(&mut self, a: NodeId) -> AutogradResult<NodeId> {
        let la = self.check_operand(a)?;
        Ok(self.push(Op::Ln { a: a.0 }, la))
    }

    /// Concatenation of `parts` in order.
    pub fn concat(&mut self, parts: &[NodeId]) -> AutogradResult<NodeId> {
        if parts.is_empty() {
            return Err(AutogradError::EmptyNode);
        }
        let mut total = 0;
        for &p in parts {
            total += self.check_operand(p)?;
        }
        Ok(self.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            total,
        ))
    }

    /// Evaluates the tape on `params` and `inputs`, caching every
    /// intermediate value, and returns the scalar value of the final node.
    ///
    /// Every node's value is checked for finiteness; the error names the
    /// offending node so numerical blowups are attributable.
    pub fn forward(&mut self, params: &[f64], inputs: &[f64]) -> AutogradResult<f64> {
        if self.nodes.is_empty() {
            return Err(AutogradError::EmptyTape);
        }
        if params.len() != self.n_params {
            return Err(AutogradError::WrongVectorLength {
                kind: "params",
                got: params.len(),
                expected: self.n_params,
            });
        }
        if inputs.len() != self.n_inputs {
            return Err(AutogradError::WrongVectorLength {
                kind: "inputs",
                got: inputs.len(),
                expected: self.n_inputs,
            });
        }
        let last = &self.nodes[self.nodes.len() - 1];
        if last.len != 1 {
            return Err(AutogradError::OutputNotScalar { len: last.len });
        }

        self.state = TapeState::Built;
        self.values.clear();
        self.values.reserve(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Param { offset } => params[*offset..*offset + node.len].to_vec(),
                Op::Input { offset } => inputs[*offset..*offset + node.len].to_vec(),
                Op::Const { values } => values.clone(),
                Op::Add { a, b } => {
                    let (xa, xb) = (&self.values[*a], &self.values[*b]);
                    xa.iter().zip(xb).map(|(p, q)| p + q).collect()
                }
                Op::Sub { a, b } => {
                    let (xa, xb) = (&self.values[*a], &self.values[*b]);
                    xa.iter().zip(xb).map(|(p, q)| p - q).collect()
                }
                Op::Mul { a, b } => {
                    let (xa, xb) = (&self.values[*a], &self.values[*b]);
                    xa.iter().zip(xb).map(|(p, q)| p * q).collect()
                }
                Op::Scale { a, k } => self.values[*a].iter().map(|p| k * p).collect(),
                Op::MatVec { w, x, rows, cols } => {
                    let mut out = vec![0.0; *rows];
                    matvec(&self.values[*w], &self.values[*x], *rows, *cols, &mut out);
                    out
                }
                Op::Tanh { a } => self.values[*a].iter().map(|p| p.tanh()).collect(),
                Op::Sum { a } => {
                    let mut acc = 0.0;
                    for p in &self.values[*a] {
                        acc += p;
                    }
                    vec![acc]
                }
                Op::Square { a } => self.values[*a].iter().map(|p| p * p).collect(),
                Op::Sqrt { a } => {
                    let xa = &self.values[*a];
                    if xa.iter().any(|p| *p < 0.0) {
                        return Err(AutogradError::NegativeSqrt { node: i });
                    }
                    xa.iter().map(|p| p.sqrt()).collect()
                }
                Op::Ln { a } => {
                    let xa = &self.values[*a];
                    if xa.iter().any(|p| *p <= 0.0) {
                        return Err(AutogradError::NonPositiveLn { node: i });
                    }
                    xa.iter().map(|p| p.ln()).collect()
                }
                Op::Concat { parts } => {
                    let mut out = Vec::with_capacity(node.len);
                    for p in parts {
                        out.extend_from_slice(&self.values[*p]);
                    }
                    out
                }
            };
            if v.iter().any(|p| !p.is_finite()) {
                return Err(AutogradError::NonFinite { node: i });
            }
            self.values.push(v);
        }
        self.state = TapeState::Evaluated;
        Ok(self.values[self.values.len() - 1][0])
    }

    /// Propagates adjoints from the output back to the parameters and
    /// returns d(output)/d(params) as a dense vector of length `n_params`.
    ///
    /// Requires a preceding [`Tape::forward`]; calling it twice without
    /// re-running `forward` is a state error.
    pub fn backward(&mut self) -> AutogradResult<Vec<f64>> {
        match self.state {
            TapeState::Built => return Err(AutogradError::BackwardBeforeForward),
            TapeState::Differentiated => return Err(AutogradError::BackwardTwice),
            TapeState::Evaluated => {}
        }
        self.state = TapeState::Differentiated;

        let mut adjoints: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.len]).collect();
        let mut grad = vec![0.0; self.n_params];
        let last = self.nodes.len() - 1;
        adjoints[last][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            // Each node reads its own adjoint and scatters into its inputs';
            // taking it out keeps the borrow checker satisfied without clones.
            let adj = std::mem::take(&mut adjoints[i]);
            match &self.nodes[i].op {
                Op::Param { offset } => {
                    for (g, a) in grad[*offset..*offset + adj.len()].iter_mut().zip(&adj) {
                        *g += a;
                    }
                }
                Op::Input { .. } | Op::Const { .. } => {}
                Op::Add { a, b } => {
                    for (k, v) in adj.iter().enumerate() {
                        adjoints[*a][k] += v;
                    }
                    for (k, v) in adj.iter().enumerate() {
                        adjoints[*b][k] += v;
                    }
                }
                Op::Sub { a, b } => {
                    for (k, v) in adj.iter().enumerate() {
                        adjoints[*a][k] += v;
                    }
                    for (k, v) in adj.iter().enumerate() {
                        adjoints[*b][k] -= v;
                    }
                }
                Op::Mul { a, b } => {
                    for (k, v) in adj.iter().enumerate() {
                        adjoints[*a][k] += v * self.values[*b][k];
                    }
                    for (k, v) in adj.iter().enumerate() {
                        adjoints[*b][k] += v * self.values[*a][k];
                    }
                }
                Op::Scale { a, k } => {
                    for (j, v) in adj.iter().enumerate() {
                        adjoints[*a][j] += k * v;
                    }
                }
                Op::MatVec { w, x, rows, cols } => {
                    for r in 0..*rows {
                        let v = adj[r];
                        let wrow = &self.values[*w][r * cols..(r + 1) * cols];
                        for c in 0..*cols {
                            adjoints[*w][r * cols + c] += v * self.values[*x][c];
                            adjoints[*x][c] += v * wrow[c];
                        }
                    }
                }
                Op::Tanh { a } => {
                    for (k, v) in adj.iter().enumerate() {
                        let y = self.values[i][k];
                        adjoints[*a][k] += v * (1.0 - y * y);
                    }
                }
                Op::Sum { a } => {
                    let v = adj[0];
                    for slot in adjoints[*a].iter_mut() {
                        *slot += v;
                    }
                }
                Op::Square { a } => {
                    for (k, v) in adj.iter().enumerate() {
                        adjoints[*a][k] += v * 2.0 * self.values[*a][k];
                    }
                }
                Op::Sqrt { a } => {
                    for (k, v) in adj.iter().enumerate() {
                        let y = self.values[i][k];
                        // Subgradient convention: d(sqrt)/dx at 0 is taken
                        // as 0, so zero-valued norms have zero gradient.
                        if y != 0.0 {
                            adjoints[*a][k] += v / (2.0 * y);
                        }
                    }
                }
                Op::Ln { a } => {
                    for (k, v) in adj.iter().enumerate() {
                        adjoints[*a][k] += v / self.values[*a][k];
                    }
                }
                Op::Concat { parts } => {
                    let mut start = 0;
                    for p in parts {
                        let plen = self.nodes[*p].len;
                        for k in 0..plen {
                            adjoints[*p][k] += adj[start + k];
                        }
                        start += plen;
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Row-major matrix-vector kernel shared by the tape and by plain (untaped)
/// forward passes, so both produce bit-identical results.
pub(crate) fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

/// Compares an analytic gradient against central finite differences of
/// `objective` and returns the worst per-coordinate relative error
/// `|analytic - central| / max(1e-12, |analytic| + |central|)`.
///
/// `objective` is evaluated at `params` with one coordinate displaced by
/// `±step` at a time; a non-finite objective value at any probe point is an
/// error naming the coordinate.
pub fn finite_diff_check(
    mut objective: impl FnMut(&[f64]) -> f64,
    analytic: &[f64],
    params: &[f64],
    step: f64,
) -> AutogradResult<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(
        analytic.len(),
        params.len(),
        "gradient and parameter lengths must match"
    );
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = objective(&probe);
        probe[i] = params[i] - step;
        let minus = objective(&probe);
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(AutogradError::NonFiniteObjective { coord: i });
        }
        let central = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - central).abs() / 1e-12f64.max(analytic[i].abs() + central.abs());
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
