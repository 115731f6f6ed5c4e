use super::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows, giving a `1 x cols` row.
    Rows,
    /// Reduce over columns, giving a `rows x 1` column.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Elu(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LogSumExp(Var, Axis),
    ConcatCols(Var, Var),
    GatherRows(Var, Vec<usize>),
    PairwiseDist(Var, Var),
    Wasserstein1d(Var, Var),
    Softmin {
        cost: Var,
        pot: Var,
        eps: Var,
        axis: Axis,
        /// Softmax weights `P_ok`, laid out like the cost matrix.
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Eager reverse-mode tape. Every op evaluates immediately and records how
/// to push gradients back to its inputs; nodes are appended in evaluation
/// order, so the tape is topologically sorted by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    inference: bool,
}

fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, _) => Some(y),
        (_, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sum a `rows x cols` gradient down to an operand that was broadcast from
/// `target` dims.
fn reduce_to(grad: &[f64], rows: usize, cols: usize, target: (usize, usize)) -> Vec<f64> {
    if target == (rows, cols) {
        return grad.to_vec();
    }
    let (tr, tc) = target;
    let mut out = vec![0.0; tr * tc];
    for i in 0..rows {
        let oi = if tr == 1 { 0 } else { i };
        for j in 0..cols {
            let oj = if tc == 1 { 0 } else { j };
            out[oi * tc + oj] += grad[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape for forward evaluation only: ops skip the auxiliary state
    /// kept for the backward pass, and `backward` is refused.
    pub fn inference() -> Self {
        Tape {
            inference: true,
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Tensor> {
        self.nodes.get(v.0).map(|n| &n.value).ok_or(Error::UnknownNode(v.0))
    }

    fn mismatch(&self, op: &'static str, a: &Tensor, b: &Tensor) -> Error {
        Error::ShapeMismatch {
            op_id: self.nodes.len(),
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.node(v)
    }

    /// Records a constant or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.node(a)?, self.node(b)?);
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let (da, db) = (ta.dims2(), tb.dims2());
            let (r, c) = broadcast_dims(da, db).ok_or_else(|| self.mismatch(name, ta, tb))?;
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                let ia = if da.0 == 1 { 0 } else { i };
                let ib = if db.0 == 1 { 0 } else { i };
                for j in 0..c {
                    let ja = if da.1 == 1 { 0 } else { j };
                    let jb = if db.1 == 1 { 0 } else { j };
                    data.push(f(ta.data()[ia * da.1 + ja], tb.data()[ib * db.1 + jb]));
                }
            }
            let shape = if da == (r, c) {
                ta.shape().to_vec()
            } else if db == (r, c) {
                tb.shape().to_vec()
            } else {
                vec![r, c]
            };
            Tensor::new(shape, data)?
        };
        Ok(self.push(value, op))
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let ta = self.node(a)?;
        let value = Tensor {
            shape: ta.shape().to_vec(),
            data: ta.data().iter().map(|&x| f(x)).collect(),
        };
        Ok(self.push(value, op))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var> {
        self.unary(a, |x| x + shift, Op::Offset(a))
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.node(a)?;
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.node(a)?, self.node(b)?);
        let (n, k) = match ta.shape() {
            [n, k] => (*n, *k),
            _ => return Err(self.mismatch("matmul", ta, tb)),
        };
        let m = match tb.shape() {
            [k2, m] if *k2 == k => *m,
            _ => return Err(self.mismatch("matmul", ta, tb)),
        };
        let data = matmul_raw(ta.data(), tb.data(), n, k, m);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::MatMul(a, b),
        ))
    }

    /// Numerically stable log-sum-exp along one axis of a matrix.
    pub fn logsumexp(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let ta = self.node(a)?;
        let (r, c) = ta.dims2();
        let x = ta.data();
        let (shape, data) = match axis {
            Axis::Cols => {
                let out = (0..r).map(|i| lse(x[i * c..(i + 1) * c].iter().copied())).collect();
                (vec![r, 1], out)
            }
            Axis::Rows => {
                let out = (0..c).map(|j| lse((0..r).map(|i| x[i * c + j]))).collect();
                (vec![1, c], out)
            }
        };
        Ok(self.push(Tensor { shape, data }, Op::LogSumExp(a, axis)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.node(a)?, self.node(b)?);
        let ((ra, ca), (rb, cb)) = (ta.dims2(), tb.dims2());
        if ra != rb || ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(self.mismatch("concat_cols", ta, tb));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&ta.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&tb.data()[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![ra, ca + cb],
                data,
            },
            Op::ConcatCols(a, b),
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.node(a)?;
        let (r, c) = ta.dims2();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::IndexOutOfRange { index: i, rows: r });
            }
            data.extend_from_slice(&ta.data()[i * c..(i + 1) * c]);
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows.len(), c],
                data,
            },
            Op::GatherRows(a, rows.to_vec()),
        ))
    }

    /// Euclidean distances between the rows of `p` (`a x k`) and `q`
    /// (`b x k`), giving an `a x b` matrix.
    pub fn pairwise_dist(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.node(p)?, self.node(q)?);
        let ((a, k), (b, k2)) = (tp.dims2(), tq.dims2());
        if k != k2 {
            return Err(self.mismatch("pairwise_dist", tp, tq));
        }
        let mut data = Vec::with_capacity(a * b);
        for i in 0..a {
            let pi = &tp.data()[i * k..(i + 1) * k];
            for j in 0..b {
                let qj = &tq.data()[j * k..(j + 1) * k];
                let d2: f64 = pi.iter().zip(qj).map(|(x, y)| (x - y) * (x - y)).sum();
                data.push(d2.sqrt());
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![a, b],
                data,
            },
            Op::PairwiseDist(p, q),
        ))
    }

    /// Exact one-dimensional Wasserstein-1 distance between two sample sets
    /// (column vectors or flat vectors) under uniform weights.
    pub fn wasserstein_1d(&mut self, p: Var, q: Var) -> Result<Var> {
        let (tp, tq) = (self.node(p)?, self.node(q)?);
        if tp.is_empty() || tq.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let d = w1_pieces(tp.data(), tq.data())
            .iter()
            .map(|&(_, _, len, diff)| len * diff.abs())
            .sum();
        Ok(self.push(Tensor::scalar(d), Op::Wasserstein1d(p, q)))
    }

    /// One entropic soft-min half step of Sinkhorn on an `a x b` cost `C`.
    ///
    /// With `Axis::Cols`, `pot` is `1 x b` and the `a x 1` result is
    /// `-eps * LSE_j((pot_j - C_ij) / eps + log_w)`. With `Axis::Rows`,
    /// `pot` is `a x 1` and the `1 x b` result is
    /// `-eps * LSE_i((pot_i - C_ij) / eps + log_w)`. `eps` is a scalar node.
    pub fn softmin(&mut self, cost: Var, pot: Var, eps: Var, axis: Axis, log_w: f64) -> Result<Var> {
        let (tc, tp, te) = (self.node(cost)?, self.node(pot)?, self.node(eps)?);
        let (a, b) = tc.dims2();
        let want = match axis {
            Axis::Cols => (1, b),
            Axis::Rows => (a, 1),
        };
        if tp.dims2() != want {
            return Err(self.mismatch("softmin", tc, tp));
        }
        if te.len() != 1 {
            return Err(self.mismatch("softmin", tc, te));
        }
        let e = te.data()[0];
        let (outer, inner) = match axis {
            Axis::Cols => (a, b),
            Axis::Rows => (b, a),
        };
        let c = tc.data();
        let pv = tp.data();
        let index = |o: usize, k: usize| match axis {
            Axis::Cols => o * b + k,
            Axis::Rows => k * b + o,
        };
        let keep = !self.inference;
        let mut weights = vec![0.0; if keep { a * b } else { 0 }];
        let mut u = vec![0.0; inner];
        let mut data = Vec::with_capacity(outer);
        for o in 0..outer {
            let mut max = f64::NEG_INFINITY;
            for (k, uk) in u.iter_mut().enumerate() {
                *uk = (pv[k] - c[index(o, k)]) / e;
                max = max.max(*uk);
            }
            let mut total = 0.0;
            for uk in u.iter_mut() {
                *uk = (*uk - max).exp();
                total += *uk;
            }
            if keep {
                for (k, uk) in u.iter().enumerate() {
                    weights[index(o, k)] = uk / total;
                }
            }
            data.push(-e * (max + total.ln() + log_w));
        }
        let shape = match axis {
            Axis::Cols => vec![a, 1],
            Axis::Rows => vec![1, b],
        };
        Ok(self.push(
            Tensor { shape, data },
            Op::Softmin {
                cost,
                pot,
                eps,
                axis,
                weights,
            },
        ))
    }

    /// Back-propagates from a scalar `loss`, replacing any earlier gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.inference {
            return Err(Error::Config("backward on an inference tape".into()));
        }
        let t = self.node(loss)?;
        if t.len() != 1 {
            return Err(Error::NonScalarLoss(t.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(t.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Result<&Tensor> {
        self.node(v)?;
        self.grads
            .get(v.0)
            .and_then(Option::as_ref)
            .ok_or(Error::NoGradient(v.0))
    }

    /// Gradient of `v`, or zeros when the loss does not depend on it.
    pub fn grad_or_zeros(&self, v: Var) -> Result<Tensor> {
        let shape = self.node(v)?.shape().to_vec();
        if self.grads.is_empty() {
            return Err(Error::NoGradient(v.0));
        }
        Ok(self
            .grads
            .get(v.0)
            .and_then(Option::as_ref)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&shape)))
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let (r, c) = out.dims2();
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = reduce_to(gd, r, c, self.nodes[a.0].value.dims2());
                accumulate(grads, &self.nodes[a.0].value, *a, ga);
                let mut gb = reduce_to(gd, r, c, self.nodes[b.0].value.dims2());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(grads, &self.nodes[b.0].value, *b, gb);
            }
            Op::Mul(a, b) => {
                let (r, c) = out.dims2();
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (da, db) = (ta.dims2(), tb.dims2());
                let mut full_a = vec![0.0; r * c];
                let mut full_b = vec![0.0; r * c];
                for i in 0..r {
                    let ia = if da.0 == 1 { 0 } else { i };
                    let ib = if db.0 == 1 { 0 } else { i };
                    for j in 0..c {
                        let ja = if da.1 == 1 { 0 } else { j };
                        let jb = if db.1 == 1 { 0 } else { j };
                        let k = i * c + j;
                        full_a[k] = gd[k] * tb.data()[ib * db.1 + jb];
                        full_b[k] = gd[k] * ta.data()[ia * da.1 + ja];
                    }
                }
                accumulate(grads, ta, *a, reduce_to(&full_a, r, c, da));
                accumulate(grads, tb, *b, reduce_to(&full_b, r, c, db));
            }
            Op::Scale(a, f) => {
                let ga = gd.iter().map(|v| v * f).collect();
                accumulate(grads, &self.nodes[a.0].value, *a, ga);
            }
            Op::Offset(a) => accumulate(grads, &self.nodes[a.0].value, *a, gd.to_vec()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (n, k) = ta.dims2();
                let m = tb.dims2().1;
                accumulate(grads, ta, *a, matmul_nt(gd, tb.data(), n, m, k));
                accumulate(grads, tb, *b, matmul_tn(ta.data(), gd, n, k, m));
            }
            Op::Elu(a) => {
                let x = self.nodes[a.0].value.data();
                let ga = gd
                    .iter()
                    .zip(x.iter().zip(out.data()))
                    .map(|(g, (&xi, &yi))| if xi > 0.0 { *g } else { g * (yi + 1.0) })
                    .collect();
                accumulate(grads, &self.nodes[a.0].value, *a, ga);
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data();
                let ga = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &xi)| if xi > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, &self.nodes[a.0].value, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = gd.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, &self.nodes[a.0].value, *a, ga);
            }
            Op::Exp(a) => {
                let ga = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                accumulate(grads, &self.nodes[a.0].value, *a, ga);
            }
            Op::Log(a) => {
                let x = self.nodes[a.0].value.data();
                let ga = gd.iter().zip(x).map(|(g, xi)| g / xi).collect();
                accumulate(grads, &self.nodes[a.0].value, *a, ga);
            }
            Op::Square(a) => {
                let x = self.nodes[a.0].value.data();
                let ga = gd.iter().zip(x).map(|(g, xi)| 2.0 * g * xi).collect();
                accumulate(grads, &self.nodes[a.0].value, *a, ga);
            }
            Op::Sum(a) => {
                let ta = &self.nodes[a.0].value;
                accumulate(grads, ta, *a, vec![gd[0]; ta.len()]);
            }
            Op::Mean(a) => {
                let ta = &self.nodes[a.0].value;
                accumulate(grads, ta, *a, vec![gd[0] / ta.len() as f64; ta.len()]);
            }
            Op::LogSumExp(a, axis) => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = ta.dims2();
                let x = ta.data();
                let y = out.data();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let o = match axis {
                            Axis::Cols => i,
                            Axis::Rows => j,
                        };
                        ga[i * c + j] = gd[o] * (x[i * c + j] - y[o]).exp();
                    }
                }
                accumulate(grads, ta, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ((r, ca), (_, cb)) = (ta.dims2(), tb.dims2());
                let mut ga = Vec::with_capacity(r * ca);
                let mut gb = Vec::with_capacity(r * cb);
                for i in 0..r {
                    let row = &gd[i * (ca + cb)..(i + 1) * (ca + cb)];
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, ta, *a, ga);
                accumulate(grads, tb, *b, gb);
            }
            Op::GatherRows(a, rows) => {
                let ta = &self.nodes[a.0].value;
                let (r, c) = ta.dims2();
                let mut ga = vec![0.0; r * c];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += gd[k * c + j];
                    }
                }
                accumulate(grads, ta, *a, ga);
            }
            Op::PairwiseDist(p, q) => {
                let (tp, tq) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
                let ((a, k), (b, _)) = (tp.dims2(), tq.dims2());
                let mut gp = vec![0.0; a * k];
                let mut gq = vec![0.0; b * k];
                let dist = out.data();
                for i in 0..a {
                    for j in 0..b {
                        let d = dist[i * b + j];
                        // subgradient 0 where the two points coincide
                        if d == 0.0 {
                            continue;
                        }
                        let w = gd[i * b + j] / d;
                        for l in 0..k {
                            let diff = tp.data()[i * k + l] - tq.data()[j * k + l];
                            gp[i * k + l] += w * diff;
                            gq[j * k + l] -= w * diff;
                        }
                    }
                }
                accumulate(grads, tp, *p, gp);
                accumulate(grads, tq, *q, gq);
            }
            Op::Softmin {
                cost,
                pot,
                eps,
                axis,
                weights,
            } => {
                let (tc, tp, te) = (
                    &self.nodes[cost.0].value,
                    &self.nodes[pot.0].value,
                    &self.nodes[eps.0].value,
                );
                let (a, b) = tc.dims2();
                let e = te.data()[0];
                let (c, pv, y) = (tc.data(), tp.data(), out.data());
                let (outer, inner) = match axis {
                    Axis::Cols => (a, b),
                    Axis::Rows => (b, a),
                };
                let mut gc = vec![0.0; a * b];
                let mut gp = vec![0.0; pv.len()];
                let mut ge = 0.0;
                for o in 0..outer {
                    let go = gd[o];
                    if go == 0.0 {
                        continue;
                    }
                    let mut weighted = 0.0;
                    for k in 0..inner {
                        let ci = match axis {
                            Axis::Cols => o * b + k,
                            Axis::Rows => k * b + o,
                        };
                        let w = weights[ci];
                        gc[ci] += go * w;
                        gp[k] -= go * w;
                        weighted += w * (pv[k] - c[ci]);
                    }
                    ge += go * (y[o] + weighted) / e;
                }
                accumulate(grads, tc, *cost, gc);
                accumulate(grads, tp, *pot, gp);
                accumulate(grads, te, *eps, vec![ge]);
            }
            Op::Wasserstein1d(p, q) => {
                let (tp, tq) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
                let mut gp = vec![0.0; tp.len()];
                let mut gq = vec![0.0; tq.len()];
                for (ip, iq, len, diff) in w1_pieces(tp.data(), tq.data()) {
                    let s = len * diff.signum() * gd[0];
                    if diff != 0.0 {
                        gp[ip] += s;
                        gq[iq] -= s;
                    }
                }
                accumulate(grads, tp, *p, gp);
                accumulate(grads, tq, *q, gq);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], like: &Tensor, v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.data.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => {
            *slot = Some(Tensor {
                shape: like.shape().to_vec(),
                data: delta,
            })
        }
    }
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Pieces of the quantile-function integral `int_0^1 |F^-1(u) - G^-1(u)| du`
/// as `(index into p, index into q, interval length, p - q)`, with the
/// indices referring to the caller's original (unsorted) order.
pub(crate) fn w1_pieces(p: &[f64], q: &[f64]) -> Vec<(usize, usize, f64, f64)> {
    let order = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    let (op, oq) = (order(p), order(q));
    let (a, b) = (p.len(), q.len());
    let mut pieces = Vec::with_capacity(a + b);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    while i < a && j < b {
        // Compare the breakpoints (i+1)/a and (j+1)/b exactly via integers.
        let (ni, nj) = ((i + 1) * b, (j + 1) * a);
        let next = if ni <= nj {
            (i + 1) as f64 / a as f64
        } else {
            (j + 1) as f64 / b as f64
        };
        let len = next - u;
        if len > 0.0 {
            pieces.push((op[i], oq[j], len, p[op[i]] - q[oq[j]]));
        }
        u = next;
        if ni <= nj {
            i += 1;
        }
        if nj <= ni {
            j += 1;
        }
    }
    pieces
}
