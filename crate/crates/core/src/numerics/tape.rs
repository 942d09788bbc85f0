//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and only visits those that depend on a leaf
//! registered with `requires_grad`.

use super::{log_sum_exp, neg_log_softmax, norm, softmax_complement, Matrix, MIN_NORM};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    SumRows(Var),
    AddRow(Var, Var),
    Tanh(Var),
    NormalizeRows(Var),
    Sum(Var),
    SumSquares(Var),
    AddScalars(Var, Var),
    CrossEntropy(Var, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

/// A learnable value with its accumulated gradient.
///
/// Accumulation is additive; call [`Dual::zero_grad`] between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Dual {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn accumulate(&mut self, g: &Matrix) -> Result<()> {
        self.grad.add_assign(g)
    }

    /// Registers the value on `tape` as a gradient-carrying leaf.
    pub fn track(&self, tape: &mut Tape) -> Var {
        tape.param(self.value.clone())
    }

    /// Pulls this leaf's gradient out of `grads` and adds it in.
    pub fn collect(&mut self, var: Var, grads: &Gradients) -> Result<()> {
        match grads.get(var) {
            Some(g) => self.accumulate(g),
            None => Ok(()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let g = self.needs(a);
        self.push(v, Op::Scale(a, s), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMul(a, b), g))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::MatMulT(a, b), g))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let g = self.needs(a);
        self.push(v, Op::Transpose(a), g)
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_rows();
        let g = self.needs(a);
        self.push(v, Op::SumRows(a), g)
    }

    /// Broadcast-adds the `1 x cols` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(r))?;
        let g = self.needs(a) || self.needs(r);
        Ok(self.push(v, Op::AddRow(a, r), g))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let g = self.needs(a);
        self.push(v, Op::Tanh(a), g)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = super::l2_normalize_rows(self.value(a))?;
        let g = self.needs(a);
        Ok(self.push(v, Op::NormalizeRows(a), g))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        let g = self.needs(a);
        self.push(v, Op::Sum(a), g)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        let g = self.needs(a);
        self.push(Matrix::filled(1, 1, s), Op::SumSquares(a), g)
    }

    pub fn add_scalars(&mut self, a: Var, b: Var) -> Result<Var> {
        for v in [a, b] {
            if self.value(v).shape() != (1, 1) {
                return Err(Error::shape(
                    "add_scalars",
                    "(1, 1)",
                    format!("{:?}", self.value(v).shape()),
                ));
            }
        }
        let s = self.scalar(a) + self.scalar(b);
        let g = self.needs(a) || self.needs(b);
        Ok(self.push(Matrix::filled(1, 1, s), Op::AddScalars(a, b), g))
    }

    /// Mean over rows of `-log softmax(row)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let m = self.value(logits);
        if labels.len() != m.rows() {
            return Err(Error::shape("cross_entropy", m.rows(), labels.len()));
        }
        if m.rows() == 0 {
            return Err(Error::shape("cross_entropy", "at least one row", 0));
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            if y >= m.cols() {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    n: m.cols(),
                });
            }
            total += neg_log_softmax(m.row(r), y);
        }
        let loss = total / labels.len() as f64;
        let g = self.needs(logits);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy(logits, labels.to_vec()),
            g,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::TapeEmpty);
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                "(1, 1) loss",
                format!("{:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.send(&mut grads, *a, || Ok(g.clone()))?;
                    self.send(&mut grads, *b, || Ok(g.clone()))?;
                }
                Op::Sub(a, b) => {
                    self.send(&mut grads, *a, || Ok(g.clone()))?;
                    self.send(&mut grads, *b, || Ok(g.scale(-1.0)))?;
                }
                Op::Scale(a, s) => self.send(&mut grads, *a, || Ok(g.scale(*s)))?,
                Op::MatMul(a, b) => {
                    // C = A B: dA = G B^T, dB = A^T G
                    self.send(&mut grads, *a, || g.matmul_t(self.value(*b)))?;
                    self.send(&mut grads, *b, || self.value(*a).transpose().matmul(&g))?;
                }
                Op::MatMulT(a, b) => {
                    // C = A B^T: dA = G B, dB = G^T A
                    self.send(&mut grads, *a, || g.matmul(self.value(*b)))?;
                    self.send(&mut grads, *b, || g.transpose().matmul(self.value(*a)))?;
                }
                Op::Transpose(a) => self.send(&mut grads, *a, || Ok(g.transpose()))?,
                Op::SumRows(a) => {
                    let rows = self.value(*a).rows();
                    self.send(&mut grads, *a, || Matrix::zeros(rows, g.cols()).add_row(&g))?;
                }
                Op::AddRow(a, r) => {
                    self.send(&mut grads, *a, || Ok(g.clone()))?;
                    self.send(&mut grads, *r, || Ok(g.sum_rows()))?;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    self.send(&mut grads, *a, || {
                        g.zip_with(y, |gi, yi| gi * (1.0 - yi * yi))
                    })?;
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    self.send(&mut grads, *a, || {
                        let mut dx = g.clone();
                        for r in 0..x.rows() {
                            let n = norm(x.row(r)).max(MIN_NORM);
                            let proj: f64 = super::dot(y.row(r), g.row(r));
                            for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                                *d = (g.get(r, c) - y.get(r, c) * proj) / n;
                            }
                        }
                        Ok(dx)
                    })?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    let s = g.data()[0];
                    self.send(&mut grads, *a, || Ok(Matrix::filled(r, c, s)))?;
                }
                Op::SumSquares(a) => {
                    let s = g.data()[0];
                    self.send(&mut grads, *a, || Ok(self.value(*a).scale(2.0 * s)))?;
                }
                Op::AddScalars(a, b) => {
                    self.send(&mut grads, *a, || Ok(g.clone()))?;
                    self.send(&mut grads, *b, || Ok(g.clone()))?;
                }
                Op::CrossEntropy(logits, labels) => {
                    let s = g.data()[0] / labels.len() as f64;
                    let m = self.value(*logits);
                    self.send(&mut grads, *logits, || {
                        let mut d = Matrix::zeros(m.rows(), m.cols());
                        for (r, &y) in labels.iter().enumerate() {
                            let row = m.row(r);
                            let lse = log_sum_exp(row);
                            for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                                *dv = if c == y {
                                    -s * softmax_complement(row, y)
                                } else {
                                    s * (row[c] - lse).exp()
                                };
                            }
                        }
                        Ok(d)
                    })?;
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn send(
        &self,
        grads: &mut [Option<Matrix>],
        to: Var,
        g: impl FnOnce() -> Result<Matrix>,
    ) -> Result<()> {
        if !self.needs(to) {
            return Ok(());
        }
        let g = g()?;
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_rel_err};
    use crate::rng::SeededRng;

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        rng.gaussian_matrix(r, c, 1.0)
    }

    /// Checks the tape gradient of `build` at `p` against central differences.
    fn check<F>(p: &Matrix, build: F) -> f64
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let v = tape.param(p.clone());
        let loss = build(&mut tape, v);
        let g = tape.backward(loss).unwrap().get_or_zeros(v, p.shape());
        let numeric = finite_diff_grad(
            |q| {
                let mut t = Tape::new();
                let v = t.constant(q.clone());
                let l = build(&mut t, v);
                t.scalar(l)
            },
            p,
            1e-6,
        );
        max_rel_err(&g, &numeric)
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let l = tape.sum(p);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn half_squared_norm_gives_identity() {
        let value = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        let mut tape = Tape::new();
        let p = tape.param(value.clone());
        let sq = tape.sum_squares(p);
        let l = tape.scale(sq, 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap(), &value);
    }

    #[test]
    fn empty_tape_is_an_error() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::TapeEmpty)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Matrix::zeros(2, 2));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::filled(2, 2, 1.0));
        let p = tape.param(Matrix::filled(2, 2, 2.0));
        let prod = tape.matmul(c, p).unwrap();
        let l = tape.sum(prod);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(p).is_some());
    }

    #[test]
    fn dual_accumulates_until_zeroed() {
        let mut d = Dual::new(Matrix::filled(1, 2, 1.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let v = d.track(&mut tape);
            let l = tape.sum(v);
            let g = tape.backward(l).unwrap();
            d.collect(v, &g).unwrap();
        }
        assert_eq!(d.grad.data(), &[2.0, 2.0]);
        d.zero_grad();
        assert_eq!(d.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn each_op_matches_finite_differences() {
        for seed in 0..100 {
            let mut rng = SeededRng::new(seed);
            let p = random(&mut rng, 3, 4);
            let w = random(&mut rng, 5, 4);
            let row = random(&mut rng, 1, 4);
            let sq = random(&mut rng, 4, 3);
            let labels = vec![(seed % 5) as usize, 2, 4];

            let errs = [
                check(&p, |t, v| {
                    let c = t.constant(w.clone());
                    let y = t.matmul_t(v, c).unwrap();
                    let y = t.tanh(y);
                    t.sum_squares(y)
                }),
                check(&p, |t, v| {
                    let c = t.constant(sq.clone());
                    let y = t.matmul(v, c).unwrap();
                    let y = t.transpose(y);
                    let y = t.normalize_rows(y).unwrap();
                    let k = t.constant(random(&mut SeededRng::new(7), 3, 3));
                    let y = t.matmul(y, k).unwrap();
                    t.sum(y)
                }),
                check(&p, |t, v| {
                    let s = t.sum_rows(v);
                    let r = t.constant(row.clone());
                    let s = t.add(s, r).unwrap();
                    let y = t.add_row(v, s).unwrap();
                    let y = t.scale(y, 0.3);
                    let y = t.sub(y, v).unwrap();
                    t.sum_squares(y)
                }),
                check(&p, |t, v| {
                    let c = t.constant(w.clone());
                    let logits = t.matmul_t(v, c).unwrap();
                    let logits = t.scale(logits, 3.0);
                    let a = t.cross_entropy(logits, &labels).unwrap();
                    let tr = t.transpose(logits);
                    let b = t.cross_entropy(tr, &[0, 1, 2, 0, 1]).unwrap();
                    t.add_scalars(a, b).unwrap()
                }),
            ];
            for (i, e) in errs.iter().enumerate() {
                assert!(*e < 1e-4, "seed {seed} op group {i}: rel err {e}");
            }
        }
    }
}
