//! Wasserstein-1 distance between representation clouds.
//!
//! The training path runs entropic Sinkhorn in the log domain with a fixed
//! number of iterations recorded on the tape, so its gradient with respect
//! to the samples is exact for the unrolled computation. The ground metric
//! is Euclidean and sample weights are uniform.
//!
//! Potentials are updated alternately with over-relaxation,
//! `f <- (1 - w) f + w T(g)` then `g <- (1 - w) g + w T'(f)`. The two clouds
//! are put in a canonical order first, so swapping the arguments runs the
//! identical computation. `epsilon` is annealed geometrically from the
//! largest pairwise cost to its target over the first half of the
//! iterations; the schedule is recorded on the tape along with everything
//! else. The reported distance is the transport cost of the final plan,
//! `sum(P * C)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleCloud {
    points: Tensor,
}

impl SampleCloud {
    /// Rows of `points` are samples. A rank-1 tensor is read as a column.
    pub fn new(points: Tensor) -> Result<Self> {
        let points = match points.shape().len() {
            1 => Tensor::column(points.into_data()),
            2 => points,
            _ => {
                return Err(Error::BadShape {
                    shape: points.shape().to_vec(),
                    expected: 2,
                    actual: points.shape().len(),
                })
            }
        };
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if !points.all_finite() {
            return Err(Error::Config("sample cloud contains non-finite values".into()));
        }
        Ok(SampleCloud { points })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::column(values))
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpmMethod {
    Sinkhorn,
    Exact1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Epsilon {
    /// Multiple of the median pairwise cost of the two clouds.
    Relative(f64),
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IpmConfig {
    pub method: IpmMethod,
    pub epsilon: Epsilon,
    pub iterations: usize,
    /// Over-relaxation factor of the potential updates, in `(0, 2)`.
    pub relaxation: f64,
}

impl Default for IpmConfig {
    fn default() -> Self {
        Self::training()
    }
}

impl IpmConfig {
    pub fn training() -> Self {
        IpmConfig {
            method: IpmMethod::Sinkhorn,
            epsilon: Epsilon::Relative(0.1),
            iterations: 50,
            relaxation: 1.6,
        }
    }

    pub fn evaluation() -> Self {
        IpmConfig {
            method: IpmMethod::Sinkhorn,
            epsilon: Epsilon::Relative(0.01),
            iterations: 200,
            relaxation: 1.6,
        }
    }

    pub fn exact_1d() -> Self {
        IpmConfig {
            method: IpmMethod::Exact1d,
            ..Self::evaluation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eps = match self.epsilon {
            Epsilon::Relative(e) | Epsilon::Absolute(e) => e,
        };
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("epsilon must be > 0, got {eps}")));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::Config(format!(
                "relaxation must lie in (0, 2), got {}",
                self.relaxation
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("Sinkhorn iterations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpmEstimate {
    pub distance: f64,
    pub grad_p: Tensor,
    pub grad_q: Tensor,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Target `epsilon` for a cost matrix, treated as a constant.
pub fn resolve_epsilon(epsilon: Epsilon, costs: &[f64]) -> f64 {
    match epsilon {
        Epsilon::Absolute(e) => e,
        Epsilon::Relative(r) => {
            let mut scale = median(costs);
            if scale <= 0.0 {
                scale = costs.iter().sum::<f64>() / costs.len() as f64;
            }
            if scale <= 0.0 {
                scale = 1.0;
            }
            r * scale
        }
    }
}

/// Records the distance between clouds `p` (`a x k`) and `q` (`b x k`) on
/// the tape and returns the scalar node.
pub fn ipm_on_tape(tape: &mut Tape, p: Var, q: Var, cfg: &IpmConfig) -> Result<Var> {
    cfg.validate()?;
    let (tp, tq) = (tape.value(p)?, tape.value(q)?);
    if tp.is_empty() || tq.is_empty() {
        return Err(Error::EmptyCloud);
    }
    match cfg.method {
        IpmMethod::Exact1d => {
            if tp.dims2().1 != 1 || tq.dims2().1 != 1 {
                return Err(Error::Config(format!(
                    "exact_1d needs one-dimensional clouds, got {:?} and {:?}",
                    tp.shape(),
                    tq.shape()
                )));
            }
            tape.wasserstein_1d(p, q)
        }
        IpmMethod::Sinkhorn => sinkhorn(tape, p, q, cfg),
    }
}

/// Orders two clouds so that `(p, q)` and `(q, p)` run the identical
/// computation.
fn canonical_first(p: &Tensor, q: &Tensor) -> bool {
    p.shape()[0]
        .cmp(&q.shape()[0])
        .then_with(|| {
            p.data()
                .iter()
                .zip(q.data())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .is_le()
}

/// Scalar node `sum(C * mask)` selecting entries of the cost matrix.
fn select(tape: &mut Tape, c: Var, rows: usize, cols: usize, picks: &[(usize, f64)]) -> Result<Var> {
    let mut mask = Tensor::zeros(&[rows, cols]);
    for &(k, w) in picks {
        mask.data_mut()[k] += w;
    }
    let m = tape.leaf(mask);
    let sel = tape.mul(c, m)?;
    tape.sum(sel)
}

/// `epsilon` target as a node: a multiple of the median cost (or the mean
/// cost, or 1, when the median vanishes).
fn epsilon_node(tape: &mut Tape, c: Var, epsilon: Epsilon) -> Result<Var> {
    let r = match epsilon {
        Epsilon::Absolute(e) => return Ok(tape.scalar(e)),
        Epsilon::Relative(r) => r,
    };
    let tc = tape.value(c)?;
    let (rows, cols) = tc.dims2();
    let n = tc.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| tc.data()[x].total_cmp(&tc.data()[y]));
    let picks = if n % 2 == 1 {
        vec![(order[n / 2], r)]
    } else {
        vec![(order[n / 2 - 1], 0.5 * r), (order[n / 2], 0.5 * r)]
    };
    let median: f64 = picks.iter().map(|&(k, w)| tc.data()[k] * w).sum();
    let mean_positive = tc.data().iter().any(|&v| v > 0.0);
    if median > 0.0 {
        select(tape, c, rows, cols, &picks)
    } else if mean_positive {
        let all: Vec<(usize, f64)> = (0..n).map(|k| (k, r / n as f64)).collect();
        select(tape, c, rows, cols, &all)
    } else {
        Ok(tape.scalar(r))
    }
}

fn sinkhorn(tape: &mut Tape, p: Var, q: Var, cfg: &IpmConfig) -> Result<Var> {
    let (p, q) = if canonical_first(tape.value(p)?, tape.value(q)?) {
        (p, q)
    } else {
        (q, p)
    };
    let c = tape.pairwise_dist(p, q)?;
    let (a, b) = tape.value(c)?.dims2();
    let log_a = -(a as f64).ln();
    let log_b = -(b as f64).ln();

    let target = epsilon_node(tape, c, cfg.epsilon)?;
    let log_target = tape.log(target)?;
    // Annealing starts at the largest cost, or at the target if that is larger.
    let tv = tape.value(target)?.item();
    let tc = tape.value(c)?;
    let (k_max, c_max) =
        tc.data().iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc },
        );
    let log_start = if c_max > tv {
        let s = select(tape, c, a, b, &[(k_max, 1.0)])?;
        tape.log(s)?
    } else {
        log_target
    };
    let half = (cfg.iterations / 2).max(1);
    let omega = cfg.relaxation;

    let inv_target = {
        let neg = tape.scale(log_target, -1.0)?;
        tape.exp(neg)?
    };

    let mut f = tape.leaf(Tensor::zeros(&[a, 1]));
    let mut g = tape.leaf(Tensor::zeros(&[1, b]));
    for k in 0..cfg.iterations {
        let eps = if k >= half {
            target
        } else {
            let s = k as f64 / half as f64;
            let from = tape.scale(log_start, 1.0 - s)?;
            let to = tape.scale(log_target, s)?;
            let log_eps = tape.add(from, to)?;
            tape.exp(log_eps)?
        };
        let z = tape.softmin(c, g, eps, Axis::Cols, log_b)?;
        f = relax(tape, f, z, omega)?;
        let z = tape.softmin(c, f, eps, Axis::Rows, log_a)?;
        g = relax(tape, g, z, omega)?;
    }
    let fg = tape.add(f, g)?;
    let z = tape.sub(fg, c)?;
    let z = tape.mul(z, inv_target)?;
    let z = tape.offset(z, log_a + log_b)?;
    let plan = tape.exp(z)?;
    let cost = tape.mul(plan, c)?;
    tape.sum(cost)
}

/// `(1 - omega) old + omega new`.
fn relax(tape: &mut Tape, old: Var, new: Var, omega: f64) -> Result<Var> {
    let kept = tape.scale(old, 1.0 - omega)?;
    let step = tape.scale(new, omega)?;
    tape.add(kept, step)
}

/// Distance between two clouds together with its gradient with respect to
/// every sample coordinate.
pub fn ipm_distance(p: &SampleCloud, q: &SampleCloud, cfg: &IpmConfig) -> Result<IpmEstimate> {
    if p.dim() != q.dim() {
        return Err(Error::ShapeMismatch {
            op_id: 0,
            op: "ipm_distance",
            lhs: p.points.shape().to_vec(),
            rhs: q.points.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let vp = tape.leaf(p.points.clone());
    let vq = tape.leaf(q.points.clone());
    let d = ipm_on_tape(&mut tape, vp, vq, cfg)?;
    tape.backward(d)?;
    Ok(IpmEstimate {
        distance: tape.value(d)?.item(),
        grad_p: tape.grad_or_zeros(vp)?,
        grad_q: tape.grad_or_zeros(vq)?,
    })
}

/// Exact Wasserstein-1 distance between two one-dimensional empirical
/// distributions with uniform weights, via the quantile-function integral.
pub fn exact_wasserstein_1d(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if p.len() == q.len() {
        let mut sp = p.to_vec();
        let mut sq = q.to_vec();
        sp.sort_by(f64::total_cmp);
        sq.sort_by(f64::total_cmp);
        let total: f64 = sp.iter().zip(&sq).map(|(x, y)| (x - y).abs()).sum();
        return Ok(total / p.len() as f64);
    }
    Ok(crate::tensor::w1_pieces(p, q)
        .iter()
        .map(|&(_, _, len, diff)| len * diff.abs())
        .sum())
}
