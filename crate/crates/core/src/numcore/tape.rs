//! Reverse-mode differentiation over a closed set of dense-matrix operators.
//!
//! Nodes are evaluated eagerly as they are recorded, so building the graph *is*
//! the forward pass. Differentiable leaves are registered with [`Tape::input`];
//! [`Tape::backward`] returns one flat gradient vector laid out in registration
//! order, row-major within each leaf.
//!
//! `Add` and `Mul` broadcast an operand along any dimension of extent 1
//! (row-vector biases, 1×1 scalars). Everything else requires exact shapes.

use std::ops::Range;

use super::{Matrix, Scalar};
use crate::error::{Error, Result};

/// Slope of the negative half of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used to prove the gradient checker catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Negates the local derivative of `tanh`.
    FlipTanhSign,
}

#[derive(Clone, Debug)]
enum Op {
    Input { offset: usize },
    Const,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Softplus(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    Slice {
        src: NodeId,
        rows: Range<usize>,
        cols: Range<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Tanh(_) => "tanh",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Softplus(_) => "softplus",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op,
    value: Matrix<T>,
    needs_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    input_len: usize,
    grads: Vec<Option<Matrix<T>>>,
    fault: Option<BackwardFault>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Applies `f` elementwise over the broadcast of `a` and `b` into `shape`.
fn broadcast_zip<T: Scalar>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    shape: (usize, usize),
    f: impl Fn(T, T) -> T,
) -> Matrix<T> {
    let (rows, cols) = shape;
    if a.shape() == shape && b.shape() == shape {
        let data = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Matrix::from_vec(rows, cols, data).expect("shape");
    }
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ra = if a.rows() == 1 { 0 } else { r };
        let rb = if b.rows() == 1 { 0 } else { r };
        let arow = a.row(ra);
        let brow = b.row(rb);
        for c in 0..cols {
            let x = if a.cols() == 1 { arow[0] } else { arow[c] };
            let y = if b.cols() == 1 { brow[0] } else { brow[c] };
            data.push(f(x, y));
        }
    }
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Sums `g` down to `target` shape, undoing a broadcast.
fn reduce_to<T: Scalar>(g: Matrix<T>, target: (usize, usize)) -> Matrix<T> {
    if g.shape() == target {
        return g;
    }
    let mut out = Matrix::zeros(target.0, target.1);
    for r in 0..g.rows() {
        let tr = if target.0 == 1 { 0 } else { r };
        for c in 0..g.cols() {
            let tc = if target.1 == 1 { 0 } else { c };
            let v = out.get(tr, tc) + g.get(r, c);
            out.set(tr, tc, v);
        }
    }
    out
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            input_len: 0,
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: BackwardFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of scalar entries across all differentiable leaves.
    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    /// The single entry of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        self.nodes[id.0].value.as_slice()[0]
    }

    /// Gradient of the last backward pass with respect to `id`, if reachable.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn push(&mut self, op: Op, value: Matrix<T>, needs_grad: bool) -> Result<NodeId> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node,
                op: op.name(),
            });
        }
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        self.grads.clear();
        Ok(NodeId(node))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Shape {
                node: self.nodes.len(),
                op: "reference",
                detail: format!("node {} does not exist yet", id.0),
            });
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, detail: String) -> Error {
        Error::Shape {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    /// Registers a differentiable leaf.
    pub fn input(&mut self, value: Matrix<T>) -> Result<NodeId> {
        let offset = self.input_len;
        self.input_len += value.len();
        self.push(Op::Input { offset }, value, true)
    }

    /// Registers a constant leaf (no gradient).
    pub fn constant(&mut self, value: Matrix<T>) -> Result<NodeId> {
        self.push(Op::Const, value, false)
    }

    pub fn constant_scalar(&mut self, value: T) -> Result<NodeId> {
        self.constant(Matrix::scalar(value))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.cols() != vb.rows() {
            let detail = format!(
                "{}x{} · {}x{} (operands {} and {})",
                va.rows(),
                va.cols(),
                vb.rows(),
                vb.cols(),
                a.0,
                b.0
            );
            return Err(self.shape_err("matmul", detail));
        }
        let value = va.matmul(vb)?;
        let ng = self.needs(&[a, b]);
        self.push(Op::MatMul(a, b), value, ng)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = match broadcast_shape(va.shape(), vb.shape()) {
            Some(s) => s,
            None => {
                let detail = format!(
                    "cannot broadcast {}x{} with {}x{} (operands {} and {})",
                    va.rows(),
                    va.cols(),
                    vb.rows(),
                    vb.cols(),
                    a.0,
                    b.0
                );
                return Err(self.shape_err(op.name(), detail));
            }
        };
        let value = broadcast_zip(va, vb, shape, f);
        let ng = self.needs(&[a, b]);
        self.push(op, value, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(T) -> T) -> Result<NodeId> {
        self.check(a)?;
        let value = self.nodes[a.0].value.map(f);
        let ng = self.needs(&[a]);
        self.push(op, value, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn leaky_relu(&mut self, a: NodeId) -> Result<NodeId> {
        let slope = T::lit(LEAKY_SLOPE);
        self.unary(a, Op::LeakyRelu(a), move |x| if x > T::zero() { x } else { slope * x })
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let value = Matrix::scalar(self.nodes[a.0].value.sum());
        let ng = self.needs(&[a]);
        self.push(Op::Sum(a), value, ng)
    }

    /// Mean of all entries, as a 1×1 node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(self.shape_err("mean", format!("operand {} is empty", a.0)));
        }
        let value = Matrix::scalar(v.sum() / T::from_usize(v.len()).unwrap());
        let ng = self.needs(&[a]);
        self.push(Op::Mean(a), value, ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        if parts.is_empty() {
            return Err(self.shape_err("concat", "no operands".into()));
        }
        let mats: Vec<&Matrix<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = match Matrix::hcat(&mats) {
            Ok(v) => v,
            Err(e) => return Err(self.shape_err("concat", e.to_string())),
        };
        let ng = self.needs(parts);
        self.push(Op::Concat(parts.to_vec()), value, ng)
    }

    /// Rectangular sub-block `rows × cols`.
    pub fn slice(&mut self, src: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        self.check(src)?;
        let v = &self.nodes[src.0].value;
        if rows.start > rows.end
            || cols.start > cols.end
            || rows.end > v.rows()
            || cols.end > v.cols()
        {
            let detail = format!(
                "rows {:?} cols {:?} out of {}x{} (operand {})",
                rows,
                cols,
                v.rows(),
                v.cols(),
                src.0
            );
            return Err(self.shape_err("slice", detail));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&v.row(r)[cols.clone()]);
        }
        let value = Matrix::from_vec(rows.len(), cols.len(), data)?;
        let ng = self.needs(&[src]);
        self.push(Op::Slice { src, rows, cols }, value, ng)
    }

    /// Column range of every row.
    pub fn slice_cols(&mut self, src: NodeId, cols: Range<usize>) -> Result<NodeId> {
        let rows = self.nodes.get(src.0).map_or(0, |n| n.value.rows());
        self.slice(src, 0..rows, cols)
    }

    // Composites over the primitive set.

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        let c = self.constant_scalar(s)?;
        self.mul(a, c)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -T::one())?;
        self.add(a, nb)
    }

    /// Repeats a 1×c node into n rows.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let ones = self.constant(Matrix::filled(n, 1, T::one()))?;
        self.matmul(ones, a)
    }

    /// Sums each row into an n×1 node.
    pub fn row_sums(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let cols = self.nodes[a.0].value.cols();
        let ones = self.constant(Matrix::filled(cols, 1, T::one()))?;
        self.matmul(a, ones)
    }

    /// Back-propagates from the 1×1 node `loss` and returns the gradient with
    /// respect to every input leaf, flattened in registration order.
    pub fn backward(&mut self, loss: NodeId) -> Result<Vec<T>> {
        if self.nodes.is_empty() {
            return Err(Error::BackwardBeforeForward("tape is empty".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::BackwardBeforeForward(format!(
                "node {} has not been evaluated",
                loss.0
            )));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            let (r, c) = self.nodes[loss.0].value.shape();
            return Err(Error::Shape {
                node: loss.0,
                op: "backward",
                detail: format!("loss must be 1x1, got {r}x{c}"),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut flat = vec![T::zero(); self.input_len];
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Input { offset }, Some(g)) = (&node.op, g) {
                flat[*offset..*offset + g.len()].copy_from_slice(g.as_slice());
            }
        }
        self.grads = grads;
        Ok(flat)
    }

    fn accumulate(&self, grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => {
                for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Input { .. } | Op::Const => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].needs_grad {
                    // dA = dC · Bᵀ
                    let mut ga = Matrix::zeros(m, k);
                    T::gemm_acc(m, n, k, g.as_slice(), false, vb.as_slice(), true, ga.as_mut_slice());
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dC
                    let mut gb = Matrix::zeros(k, n);
                    T::gemm_acc(k, m, n, va.as_slice(), true, g.as_slice(), false, gb.as_mut_slice());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if self.nodes[id.0].needs_grad {
                        let ga = reduce_to(g.clone(), val(id).shape());
                        self.accumulate(grads, id, ga);
                    }
                }
            }
            Op::Mul(a, b) => {
                let shape = g.shape();
                if self.nodes[a.0].needs_grad {
                    let ga = broadcast_zip(g, val(*b), shape, |x, y| x * y);
                    self.accumulate(grads, *a, reduce_to(ga, val(*a).shape()));
                }
                if self.nodes[b.0].needs_grad {
                    let gb = broadcast_zip(g, val(*a), shape, |x, y| x * y);
                    self.accumulate(grads, *b, reduce_to(gb, val(*b).shape()));
                }
            }
            Op::Tanh(a) => {
                let flip = self.fault == Some(BackwardFault::FlipTanhSign);
                let ga = g
                    .zip_map(&node.value, |gy, y| {
                        let d = gy * (T::one() - y * y);
                        if flip {
                            -d
                        } else {
                            d
                        }
                    })
                    .expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a) => {
                let slope = T::lit(LEAKY_SLOPE);
                let ga = g
                    .zip_map(val(*a), |gy, x| if x > T::zero() { gy } else { gy * slope })
                    .expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.zip_map(&node.value, |gy, y| gy * y).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = g.zip_map(val(*a), |gy, x| gy / x).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let ga = g.zip_map(val(*a), |gy, x| two * x * gy).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(val(*a), |gy, x| gy * sigmoid(x)).expect("shape");
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let s = g.as_slice()[0] / T::from_usize(r * c).unwrap();
                self.accumulate(grads, *a, Matrix::filled(r, c, s));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.nodes[p.0].needs_grad {
                        let gp = g.select_cols(&(start..start + w).collect::<Vec<_>>());
                        self.accumulate(grads, p, gp);
                    }
                    start += w;
                }
            }
            Op::Slice { src, rows, cols } => {
                let (r, c) = val(*src).shape();
                let mut gs = Matrix::zeros(r, c);
                for (gi, row) in rows.clone().enumerate() {
                    gs.row_mut(row)[cols.clone()].copy_from_slice(g.row(gi));
                }
                self.accumulate(grads, *src, gs);
            }
        }
    }
}

/// Evaluates `f` on a fresh tape whose leaves are `inputs` and returns the loss
/// and its flat gradient.
pub fn value_and_grad<T, F>(inputs: &[Matrix<T>], f: F) -> Result<(T, Vec<T>)>
where
    T: Scalar,
    F: FnOnce(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|m| tape.input(m.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &ids)?;
    let value = tape.scalar(loss);
    let grad = tape.backward(loss)?;
    Ok((value, grad))
}
