//! Tape-based reverse-mode differentiation over a small, fixed vocabulary of
//! matrix operations.
//!
//! Every value on the tape is a rank-2 [`Tensor`]. Operations are recorded in
//! execution order; [`GradTape::backward`] walks the record in reverse and
//! applies a hand-written adjoint for each primitive. Only nodes that depend
//! on a registered parameter carry gradients, so constant subgraphs (data,
//! Monte-Carlo draws) cost nothing on the way back.
//!
//! Binary elementwise operations broadcast: each operand dimension must
//! either match the output or be 1.
//!
//! ```
//! use apcde::numeric::{GradTape, Tensor};
//!
//! let mut tape = GradTape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.mul(x, x);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads[0].item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::numeric::linalg::Lu;
use crate::numeric::special::logsumexp_unchecked;
use crate::numeric::tensor::{gemm_nn, gemm_nt, gemm_tn};
use crate::numeric::Tensor;

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a · b`
    MatMul(Var, Var),
    /// `x · wᵀ (+ b)`
    Affine { x: Var, w: Var, b: Option<Var> },
    Transpose(Var),
    /// `scale · a`
    Linear(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogAbs(Var),
    Square(Var),
    Sum(Var),
    /// Row sums, `n × c → n × 1`.
    SumCols(Var),
    /// Column sums, `n × c → 1 × c`.
    SumRows(Var),
    /// Row-wise logsumexp, `n × c → n × 1`.
    LogSumExpRows(Var),
    /// Row-wise `log(mean(exp(·)))`, `n × c → n × 1`.
    LogMeanExpRows(Var),
    SliceCols(Var, usize, usize),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    /// `1 × n` row to `n × n` diagonal matrix.
    Diag(Var),
    /// `log|det a|`; caches `a⁻ᵀ` for the adjoint.
    LogDet(Var, Option<Tensor>),
    Inverse(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations and replays them backwards.
///
/// A tape is single-threaded and meant to be rebuilt for every evaluation.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters registered so far, in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a tensor as a differentiable parameter.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    /// Records a constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    // ---- elementwise binary ops with broadcasting ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `x · wᵀ + b` with `x: n × in`, `w: out × in`, `b: 1 × out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut value = self.value(x).matmul_t(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.dims(), (1, value.cols()), "affine bias shape");
            for r in 0..value.rows() {
                for (o, bv) in value.row_slice_mut(r).iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Affine { x, w, b }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// `log|det a|` as a `1 × 1` value.
    pub fn logdet(&mut self, a: Var) -> Result<Var> {
        let lu = Lu::factor(self.value(a))?;
        let (value, _) = lu.logdet();
        let rg = self.rg(a);
        let cache = rg.then(|| lu.inverse().transpose());
        Ok(self.push(Tensor::scalar(value), Op::LogDet(a, cache), rg))
    }

    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let value = Lu::factor(self.value(a))?.inverse();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Inverse(a), rg))
    }

    pub fn diag(&mut self, a: Var) -> Var {
        let v = self.value(a);
        assert_eq!(v.rows(), 1, "diag expects a row vector");
        let n = v.cols();
        let mut out = Tensor::zeros(n, n);
        for (i, &x) in v.data().iter().enumerate() {
            out.set(i, i, x);
        }
        let rg = self.rg(a);
        self.push(out, Op::Diag(a), rg)
    }

    // ---- elementwise unary ops ----

    /// `scale · a`.
    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        let value = self.value(a).map(|x| scale * x);
        let rg = self.rg(a);
        self.push(value, Op::Linear(a, scale), rg)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log(a), rg)
    }

    /// `log|a|`.
    pub fn log_abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.abs().ln());
        let rg = self.rg(a);
        self.push(value, Op::LogAbs(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(value, Op::Square(a), rg)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| v.row_slice(r).iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::column(data), Op::SumCols(a), rg)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut data = vec![0.0; v.cols()];
        for r in 0..v.rows() {
            for (o, x) in data.iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::row(data), Op::SumRows(a), rg)
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows())
            .map(|r| logsumexp_unchecked(v.row_slice(r)))
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::column(data), Op::LogSumExpRows(a), rg)
    }

    /// `log(mean(exp(row)))`, exact when every entry of a row is equal.
    pub fn logmeanexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols() as f64;
        let data = (0..v.rows())
            .map(|r| {
                let row = v.row_slice(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return f64::NEG_INFINITY;
                }
                let s: f64 = row.iter().map(|x| (x - max).exp()).sum();
                max + (s / c).ln()
            })
            .collect();
        let rg = self.rg(a);
        self.push(Tensor::column(data), Op::LogMeanExpRows(a), rg)
    }

    // ---- structural ----

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let cols: Vec<usize> = (start..end).collect();
        let value = self.value(a).select_cols(&cols);
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let value = self.value(a).select_cols(cols);
        let rg = self.rg(a);
        self.push(value, Op::GatherCols(a, cols.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            let c = v.cols();
            for r in 0..rows {
                out.row_slice_mut(r)[offset..offset + c].copy_from_slice(v.row_slice(r));
            }
            offset += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Gradients of a scalar `loss` with respect to every registered
    /// parameter, in registration order. Parameters that did not take part in
    /// the computation receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Argument(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        Ok(self
            .params
            .iter()
            .map(|&p| {
                grads
                    .get(p.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Tensor::zeros_like(self.value(p)))
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        if !self.rg(v) {
            return;
        }
        let target_dims = self.value(v).dims();
        let contribution = reduce_to(contribution, target_dims);
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *e += c;
                }
            }
            slot @ None => {
                // keep the parameter's own shape (e.g. rank-1 storage)
                let shaped = if contribution.shape() == self.value(v).shape() {
                    contribution
                } else {
                    Tensor::new(self.value(v).shape().to_vec(), contribution.into_data())
                        .expect("gradient shape")
                };
                *slot = Some(shaped);
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    self.accumulate(grads, *a, broadcast_zip(g, bv, |x, y| x * y));
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    self.accumulate(grads, *b, broadcast_zip(g, av, |x, y| x * y));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims();
                let n = bv.cols();
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(m, n, k, g.data(), bv.data(), &mut ga);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(k, m, n, av.data(), g.data(), &mut gb);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, gb));
                }
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, input) = xv.dims();
                let output = wv.rows();
                if self.rg(*x) {
                    let mut gx = vec![0.0; n * input];
                    gemm_nn(n, output, input, g.data(), wv.data(), &mut gx);
                    self.accumulate(grads, *x, Tensor::matrix(n, input, gx));
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; output * input];
                    gemm_tn(output, n, input, g.data(), xv.data(), &mut gw);
                    self.accumulate(grads, *w, Tensor::matrix(output, input, gw));
                }
                if let Some(b) = b {
                    // row broadcast is reduced in `accumulate`
                    self.accumulate(grads, *b, g.clone());
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Linear(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => {
                let d = zip_map(g, out, |gi, t| gi * (1.0 - t * t));
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip_map(g, out, |gi, e| gi * e)),
            Op::Log(a) | Op::LogAbs(a) => {
                let d = zip_map(g, self.value(*a), |gi, x| gi / x);
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = zip_map(g, self.value(*a), |gi, x| 2.0 * gi * x);
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).dims();
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::SumCols(a) => {
                let (r, c) = self.value(*a).dims();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    d.row_slice_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                self.accumulate(grads, *a, d);
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).dims();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_slice_mut(i).copy_from_slice(g.data());
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSumExpRows(a) => {
                let av = self.value(*a);
                let (r, c) = av.dims();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let (lse, gi) = (out.data()[i], g.data()[i]);
                    for (o, x) in d.row_slice_mut(i).iter_mut().zip(av.row_slice(i)) {
                        *o = gi * (x - lse).exp();
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogMeanExpRows(a) => {
                let av = self.value(*a);
                let (r, c) = av.dims();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let (lme, gi) = (out.data()[i], g.data()[i]);
                    for (o, x) in d.row_slice_mut(i).iter_mut().zip(av.row_slice(i)) {
                        *o = gi * (x - lme).exp() / c as f64;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = self.value(*a).dims();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    d.row_slice_mut(i)[*start..*end].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *a, d);
            }
            Op::GatherCols(a, cols) => {
                let (r, c) = self.value(*a).dims();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    let gi = g.row_slice(i);
                    let di = d.row_slice_mut(i);
                    for (&col, &gv) in cols.iter().zip(gi) {
                        di[col] += gv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let cols: Vec<usize> = (offset..offset + c).collect();
                        self.accumulate(grads, p, g.select_cols(&cols));
                    }
                    offset += c;
                }
            }
            Op::Diag(a) => {
                let n = self.value(*a).cols();
                let data = (0..n).map(|i| g.get(i, i)).collect();
                self.accumulate(grads, *a, Tensor::row(data));
            }
            Op::LogDet(a, cache) => {
                let inv_t = cache.as_ref().expect("logdet adjoint cache");
                self.accumulate(grads, *a, inv_t.scale(g.item()));
            }
            Op::Inverse(a) => {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹  ⇒  Ā = -A⁻ᵀ Ḡ A⁻ᵀ
                let inv_t = out.transpose();
                let d = inv_t.matmul(g).matmul(&inv_t).scale(-1.0);
                self.accumulate(grads, *a, d);
            }
        }
    }
}

/// `∂loss/∂param` for every registered parameter.
pub fn gradient_of(tape: &GradTape, loss: Var) -> Result<Vec<Tensor>> {
    tape.backward(loss)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.len(), b.len());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), data)
}

fn broadcast_dim(a: usize, b: usize) -> usize {
    match (a, b) {
        (x, y) if x == y => x,
        (1, y) => y,
        (x, 1) => x,
        (x, y) => panic!("cannot broadcast extents {x} and {y}"),
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ar, ac) = a.dims();
    let (br, bc) = b.dims();
    if (ar, ac) == (br, bc) {
        return zip_map(a, b, f);
    }
    let (r, c) = (broadcast_dim(ar, br), broadcast_dim(ac, bc));
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let (ia, ib) = (if ar == 1 { 0 } else { i }, if br == 1 { 0 } else { i });
        for j in 0..c {
            let (ja, jb) = (if ac == 1 { 0 } else { j }, if bc == 1 { 0 } else { j });
            out.push(f(a.data()[ia * ac + ja], b.data()[ib * bc + jb]));
        }
    }
    Tensor::matrix(r, c, out)
}

/// Sums a broadcast gradient back down to the operand's extents.
fn reduce_to(g: Tensor, (r, c): (usize, usize)) -> Tensor {
    let (gr, gc) = g.dims();
    if (gr, gc) == (r, c) {
        return g;
    }
    let mut out = Tensor::zeros(r, c);
    for i in 0..gr {
        for j in 0..gc {
            let (oi, oj) = (if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j });
            let v = out.get(oi, oj) + g.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::finite_diff_gradient;
    use crate::numeric::special::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_derivative() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        assert_eq!(tape.value(y).item(), 9.0);
        assert_eq!(gradient_of(&tape, y).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let v = vec![0.5, -1.0, 2.0, 0.0];
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::row(v.clone()));
        let l = tape.logsumexp_rows(x);
        let g = tape.backward(l).unwrap();
        for (a, b) in g[0].data().iter().zip(softmax(&v)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn logmeanexp_of_equal_entries_is_exact() {
        for (v, n) in [(-3f64.ln(), 7), (0.1, 1000), (-1e3, 3)] {
            let mut tape = GradTape::new();
            let x = tape.param(Tensor::row(vec![v; n]));
            let l = tape.logmeanexp_rows(x);
            assert_eq!(tape.value(l).item(), v);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));
    }

    #[test]
    fn unused_parameters_get_zero_gradient() {
        let mut tape = GradTape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let _unused = tape.param(Tensor::row(vec![1.0, 1.0]));
        let y = tape.square(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = GradTape::new();
        let a = tape.param(Tensor::randn(3, 4, &mut rng));
        let w = tape.param(Tensor::randn(2, 4, &mut rng));
        let h = tape.affine(a, w, None);
        let t = tape.tanh(h);
        let l = tape.sum(t);
        assert_eq!(tape.backward(l).unwrap(), tape.backward(l).unwrap());
    }

    /// One random instance of each primitive, reduced to a scalar through a
    /// fixed random projection so every output coordinate matters.
    fn primitive_loss(op: usize, inputs: &[Tensor], proj_seed: u64) -> (GradTape, Var) {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = match op {
            0 => tape.add(vars[0], vars[1]),
            1 => tape.sub(vars[0], vars[2]),
            2 => tape.mul(vars[0], vars[1]),
            3 => tape.mul(vars[0], vars[2]),
            4 => tape.matmul(vars[0], vars[3]),
            5 => tape.affine(vars[0], vars[4], Some(vars[5])),
            6 => tape.tanh(vars[0]),
            7 => tape.exp(vars[0]),
            8 => {
                let s = tape.square(vars[0]);
                let s = tape.add_const(s, 0.5);
                tape.log(s)
            }
            9 => tape.log_abs(vars[0]),
            10 => tape.sum_cols(vars[0]),
            11 => tape.sum_rows(vars[0]),
            12 => tape.logsumexp_rows(vars[0]),
            13 => tape.slice_cols(vars[0], 1, 3),
            14 => tape.gather_cols(vars[0], &[2, 0, 2]),
            15 => tape.concat_cols(&[vars[0], vars[1]]),
            16 => tape.transpose(vars[0]),
            17 => tape.logdet(vars[6]).unwrap(),
            18 => tape.inverse(vars[6]).unwrap(),
            19 => tape.diag(vars[5]),
            20 => tape.scale(vars[0], -1.7),
            21 => tape.sum(vars[0]),
            22 => tape.logmeanexp_rows(vars[0]),
            _ => unreachable!(),
        };
        let (r, c) = tape.value(out).dims();
        let mut prng = ChaCha8Rng::seed_from_u64(proj_seed);
        let proj = tape.constant(Tensor::randn(r, c, &mut prng));
        let weighted = tape.mul(out, proj);
        let loss = tape.sum(weighted);
        (tape, loss)
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for instance in 0..100 {
            let inputs = vec![
                Tensor::randn(3, 4, &mut rng),
                Tensor::randn(3, 4, &mut rng),
                Tensor::randn(1, 4, &mut rng),
                Tensor::randn(4, 2, &mut rng),
                Tensor::randn(5, 4, &mut rng),
                Tensor::randn(1, 5, &mut rng),
                Tensor::randn(3, 3, &mut rng).add(&Tensor::identity(3).scale(3.0)),
            ];
            let proj_seed: u64 = rng.random();
            for op in 0..23 {
                let (tape, loss) = primitive_loss(op, &inputs, proj_seed);
                let analytic = tape.backward(loss).unwrap();
                let numeric = finite_diff_gradient(
                    |p| {
                        let (t, l) = primitive_loss(op, p, proj_seed);
                        Ok(t.value(l).item())
                    },
                    &inputs,
                    1e-5,
                )
                .unwrap();
                for (a, n) in analytic.iter().zip(&numeric) {
                    for (x, y) in a.data().iter().zip(n.data()) {
                        let tol = (1e-4 * x.abs().max(y.abs())).max(1e-8);
                        assert!(
                            (x - y).abs() <= tol,
                            "op {op} instance {instance}: analytic {x} vs numeric {y}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let mut tape = GradTape::new();
        let a = tape.param(Tensor::matrix(2, 3, vec![1.0; 6]));
        let row = tape.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        let col = tape.param(Tensor::column(vec![1.0, 2.0]));
        let s = tape.param(Tensor::scalar(0.5));
        let x = tape.mul(a, row);
        let x = tape.add(x, col);
        let x = tape.mul(x, s);
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g[1].data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g[2].data(), &[1.5, 1.5]);
        // sum of (a*row + col) = 2*6 + 3*3 = 21... with a=1: 2*(1+2+3) + 3*(1+2) = 21
        assert_eq!(g[3].item(), 21.0);
    }
}
