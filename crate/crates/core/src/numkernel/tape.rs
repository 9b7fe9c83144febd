use std::cell::RefCell;
use std::fmt;

use super::{KernelError, Matrix};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Relu(usize),
    HConcat(Vec<usize>),
    Block { src: usize, r0: usize, c0: usize },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    SolveSpd { a: usize, b: usize, factor: Matrix },
    LowerTriangle(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Append-only record of primitive operations.
///
/// Node ids are assigned in creation order, so parents always precede their
/// children and walking the ids backwards is a reverse topological order.
/// A tape is single-threaded; independent tapes can live on separate threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients of a scalar loss with respect to tracked leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the leaf is untracked or the loss
    /// does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf whose gradient will be reported by [`Tape::backward`].
    pub fn param(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf excluded from differentiation.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Matrix, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, KernelError> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(KernelError::EmptyTape);
        }
        let shape = nodes[loss.id].value.shape();
        if shape != (1, 1) {
            return Err(KernelError::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Matrix::filled(1, 1, 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            let mut send = |target: usize, g: Matrix| -> Result<(), KernelError> {
                if !nodes[target].tracked {
                    return Ok(());
                }
                match &mut grads[target] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => {
                        *slot = Some(g);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    if nodes[*a].tracked {
                        send(*a, grad.matmul_t(bv)?)?;
                    }
                    if nodes[*b].tracked {
                        send(*b, av.t_matmul(&grad)?)?;
                    }
                }
                Op::Add(a, b) => {
                    send(*a, grad.clone())?;
                    send(*b, grad)?;
                }
                Op::Sub(a, b) => {
                    send(*b, grad.scale(-1.0))?;
                    send(*a, grad)?;
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    send(*a, grad.hadamard(bv)?)?;
                    send(*b, grad.hadamard(av)?)?;
                }
                Op::Scale(a, s) => send(*a, grad.scale(*s))?,
                Op::Transpose(a) => send(*a, grad.transpose())?,
                Op::Relu(a) => {
                    let input = &nodes[*a].value;
                    let mut g = grad;
                    for (gv, x) in g.as_mut_slice().iter_mut().zip(input.as_slice()) {
                        if *x <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    send(*a, g)?;
                }
                Op::HConcat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let cols = nodes[*p].value.cols();
                        send(*p, grad.block(0, offset, grad.rows(), cols)?)?;
                        offset += cols;
                    }
                }
                Op::Block { src, r0, c0 } => {
                    let (rows, cols) = nodes[*src].value.shape();
                    let mut g = Matrix::zeros(rows, cols);
                    for r in 0..grad.rows() {
                        for c in 0..grad.cols() {
                            g.set(r0 + r, c0 + c, grad.get(r, c));
                        }
                    }
                    send(*src, g)?;
                }
                Op::Reshape(a) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    send(*a, grad.reshape(rows, cols)?)?;
                }
                Op::Sum(a) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    send(*a, Matrix::filled(rows, cols, grad.get(0, 0)))?;
                }
                Op::Mean(a) => {
                    let (rows, cols) = nodes[*a].value.shape();
                    let n = (rows * cols) as f64;
                    send(*a, Matrix::filled(rows, cols, grad.get(0, 0) / n))?;
                }
                Op::Square(a) => {
                    let input = &nodes[*a].value;
                    send(*a, grad.hadamard(input)?.scale(2.0))?;
                }
                Op::SolveSpd { a, b, factor } => {
                    // X = A^{-1} B with A symmetric: dB = A^{-1} dX, dA = -dB X^T.
                    let gb = Matrix::cholesky_solve(factor, &grad)?;
                    if nodes[*a].tracked {
                        send(*a, gb.matmul_t(&node.value)?.scale(-1.0))?;
                    }
                    send(*b, gb)?;
                }
                Op::LowerTriangle(a) => send(*a, grad.lower_triangle())?,
            }
        }

        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) || !nodes[id].tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Matrix {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    /// Value of a `1 x 1` tensor.
    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        debug_assert_eq!(v.shape(), (1, 1));
        v.get(0, 0)
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(
        &self,
        op: Op,
        f: impl FnOnce(&Matrix) -> Result<Matrix, KernelError>,
    ) -> Result<Var<'t>, KernelError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value)?
        };
        let tracked = self.is_tracked();
        Ok(self.tape.push(value, op, tracked))
    }

    fn binary(
        &self,
        rhs: &Var<'t>,
        op: Op,
        f: impl FnOnce(&Matrix, &Matrix) -> Result<Matrix, KernelError>,
    ) -> Result<Var<'t>, KernelError> {
        self.same_tape(rhs);
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[rhs.id].value)?
        };
        let tracked = self.is_tracked() || rhs.is_tracked();
        Ok(self.tape.push(value, op, tracked))
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>, KernelError> {
        self.binary(rhs, Op::MatMul(self.id, rhs.id), |a, b| a.matmul(b))
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>, KernelError> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a.add(b))
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>, KernelError> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a.sub(b))
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>, KernelError> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a.hadamard(b))
    }

    pub fn scale(&self, s: f64) -> Result<Var<'t>, KernelError> {
        self.unary(Op::Scale(self.id, s), |a| Ok(a.scale(s)))
    }

    pub fn transpose(&self) -> Result<Var<'t>, KernelError> {
        self.unary(Op::Transpose(self.id), |a| Ok(a.transpose()))
    }

    pub fn relu(&self) -> Result<Var<'t>, KernelError> {
        self.unary(Op::Relu(self.id), |a| Ok(a.map(|v| v.max(0.0))))
    }

    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var<'t>, KernelError> {
        self.unary(Op::Block { src: self.id, r0, c0 }, |a| a.block(r0, c0, rows, cols))
    }

    pub fn rows_slice(&self, r0: usize, rows: usize) -> Result<Var<'t>, KernelError> {
        let cols = self.shape().1;
        self.block(r0, 0, rows, cols)
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>, KernelError> {
        self.unary(Op::Reshape(self.id), |a| a.reshape(rows, cols))
    }

    pub fn sum(&self) -> Result<Var<'t>, KernelError> {
        self.unary(Op::Sum(self.id), |a| Ok(Matrix::filled(1, 1, a.sum())))
    }

    pub fn mean(&self) -> Result<Var<'t>, KernelError> {
        self.unary(Op::Mean(self.id), |a| {
            if a.is_empty() {
                return Err(KernelError::Shape { op: "mean", lhs: a.shape(), rhs: (1, 1) });
            }
            Ok(Matrix::filled(1, 1, a.sum() / a.len() as f64))
        })
    }

    pub fn square(&self) -> Result<Var<'t>, KernelError> {
        self.unary(Op::Square(self.id), |a| Ok(a.map(|v| v * v)))
    }

    pub fn lower_triangle(&self) -> Result<Var<'t>, KernelError> {
        self.unary(Op::LowerTriangle(self.id), |a| Ok(a.lower_triangle()))
    }

    /// `self^{-1} rhs` for a symmetric positive-definite `self`.
    pub fn solve_spd(&self, rhs: &Var<'t>) -> Result<Var<'t>, KernelError> {
        self.same_tape(rhs);
        let (factor, value) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[rhs.id].value;
            if a.rows() != a.cols() || a.rows() != b.rows() {
                return Err(KernelError::Shape { op: "solve_spd", lhs: a.shape(), rhs: b.shape() });
            }
            let factor = a.cholesky().map_err(|e| match e {
                KernelError::NotPositiveDefinite { pivot, value, .. } => {
                    KernelError::NotPositiveDefinite { op: "solve_spd", pivot, value }
                }
                other => other,
            })?;
            let value = Matrix::cholesky_solve(&factor, b)?;
            (factor, value)
        };
        let tracked = self.is_tracked() || rhs.is_tracked();
        Ok(self.tape.push(value, Op::SolveSpd { a: self.id, b: rhs.id, factor }, tracked))
    }

    pub fn inverse_spd(&self) -> Result<Var<'t>, KernelError> {
        let n = self.shape().0;
        let eye = self.tape.constant(Matrix::identity(n));
        self.solve_spd(&eye)
    }

    /// `tril(self) * tril(self)^T`, symmetric positive semi-definite for any input.
    pub fn psd_from_factor(&self) -> Result<Var<'t>, KernelError> {
        let l = self.lower_triangle()?;
        l.matmul(&l.transpose()?)
    }

    /// `(self + self^T) / 2`.
    pub fn symmetrize(&self) -> Result<Var<'t>, KernelError> {
        self.add(&self.transpose()?)?.scale(0.5)
    }
}

/// Horizontal concatenation of tensors with equal row counts.
pub fn hconcat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>, KernelError> {
    let first = parts.first().ok_or(KernelError::Shape { op: "concat", lhs: (0, 0), rhs: (0, 0) })?;
    let tape = first.tape;
    let (value, tracked) = {
        let nodes = tape.nodes.borrow();
        let mats: Vec<&Matrix> = parts
            .iter()
            .map(|p| {
                first.same_tape(p);
                &nodes[p.id].value
            })
            .collect();
        (Matrix::hconcat(&mats)?, parts.iter().any(|p| nodes[p.id].tracked))
    };
    Ok(tape.push(value, Op::HConcat(parts.iter().map(|p| p.id).collect()), tracked))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let tape = Tape::new();
        let x = tape.param(Matrix::column(&[-1.0, 0.0, 2.0]));
        let y = x.relu().unwrap();
        assert_eq!(y.value().as_slice(), &[0.0, 0.0, 2.0]);
        let g = tape.backward(y.sum().unwrap()).unwrap();
        // subgradient at the kink is 0
        assert_eq!(g.wrt(x).unwrap().as_slice(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(Matrix::column(&[1.0, 2.0, 3.0]));
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().as_slice(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn untracked_leaves_have_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Matrix::column(&[1.0, 2.0]));
        let c = tape.constant(Matrix::column(&[3.0, 4.0]));
        let loss = x.mul(&c).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Matrix::column(&[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(KernelError::NonScalarLoss { shape: (2, 1) })));
    }

    #[test]
    fn empty_tape_is_rejected() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = other.param(Matrix::filled(1, 1, 1.0));
        assert!(matches!(tape.backward(x), Err(KernelError::EmptyTape)));
    }

    #[test]
    fn solve_on_non_spd_is_singular() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let b = tape.constant(Matrix::identity(2));
        assert!(matches!(a.solve_spd(&b), Err(KernelError::NotPositiveDefinite { op: "solve_spd", .. })));
    }

    #[test]
    fn inverse_of_diagonal() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]));
        let inv = a.inverse_spd().unwrap().value();
        assert!(inv.as_slice().iter().zip([0.5, 0.0, 0.0, 0.25]).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x, dy/dx = 2x + 1
        let tape = Tape::new();
        let x = tape.param(Matrix::filled(1, 1, 3.0));
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().get(0, 0), 7.0);
    }
}
