//! Linear epsilon-insensitive support vector regression for rank pooling.
//!
//! Minimizes `P(u, b) = 1/2 |u|^2 + C * sum_t max(0, |c_t - u.v_t - b| - eps)`.
//! The weight vector always lies in the span of the `L` feature vectors, so
//! the solver works on the `L x L` Gram matrix of the (mean-centered)
//! features: the dual is a box-constrained QP with one equality constraint,
//! solved by sequential minimal optimization with second-order working set
//! selection. Each step decreases the dual objective; `u` is rebuilt from the
//! dual coefficients and `b` is chosen to minimize the primal exactly for
//! that `u`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trackio::Frame;

/// Frame-level feature vectors and their centered time targets
/// `c_t = (t + 1) - (L + 1) / 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    vectors: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

pub fn centered_targets(len: usize) -> Vec<f64> {
    let mid = (len as f64 + 1.0) / 2.0;
    (0..len).map(|t| (t + 1) as f64 - mid).collect()
}

impl FeatureSequence {
    pub fn new(vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::Empty(format!(
                "feature sequence needs at least 2 vectors, got {}",
                vectors.len()
            )));
        }
        let d = vectors[0].len();
        if d == 0 || vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("feature vectors must share a nonzero dimension".into()));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rank pooling features".into()));
        }
        let targets = centered_targets(vectors.len());
        Ok(FeatureSequence { vectors, targets })
    }

    /// Raw vectorized frames (planar channel order).
    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        check_frames(frames)?;
        Self::new(
            frames
                .iter()
                .map(|f| f.data().iter().map(|&x| f64::from(x)).collect())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Same features in reverse temporal order.
    pub fn reversed(&self) -> Self {
        let mut vectors = self.vectors.clone();
        vectors.reverse();
        FeatureSequence {
            vectors,
            targets: self.targets.clone(),
        }
    }

    /// Every feature multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        FeatureSequence {
            vectors: self
                .vectors
                .iter()
                .map(|v| v.iter().map(|x| x * s).collect())
                .collect(),
            targets: self.targets.clone(),
        }
    }
}

fn check_frames(frames: &[Frame]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::Empty("no frames to pool".into()));
    }
    let dims = frames[0].dims();
    if frames.iter().any(|f| f.dims() != dims) {
        return Err(Error::Shape("frames to pool must share dimensions".into()));
    }
    Ok(())
}

/// Replaces frame `t` by the mean of frames `1..=t`.
pub fn time_varying_mean(frames: &[Frame]) -> Result<FeatureSequence> {
    check_frames(frames)?;
    let d = frames[0].data().len();
    let mut sum = vec![0.0f64; d];
    let mut out = Vec::with_capacity(frames.len());
    for (t, f) in frames.iter().enumerate() {
        for (s, &x) in sum.iter_mut().zip(f.data()) {
            *s += f64::from(x);
        }
        let n = (t + 1) as f64;
        out.push(sum.iter().map(|s| s / n).collect());
    }
    FeatureSequence::new(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvrOptions {
    /// Stop when the maximal KKT violation falls below `tol * (1 + max|c_t|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvrOptions {
    fn default() -> Self {
        SvrOptions {
            tol: 1e-10,
            max_iter: 200_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvrSolution {
    pub u: Vec<f64>,
    pub b: f64,
    pub c: f64,
    pub epsilon: f64,
    /// Primal objective at `(u, b)`.
    pub objective: f64,
    /// Dual objective after each SMO step; nonincreasing.
    pub dual_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl SvrSolution {
    /// `-dual`: a lower bound on the optimal primal objective.
    pub fn dual_bound(&self) -> f64 {
        -self.dual_trace.last().copied().unwrap_or(0.0)
    }
}

/// Primal objective `1/2 |u|^2 + C * sum eps-insensitive losses`.
pub fn primal_objective(fs: &FeatureSequence, u: &[f64], b: f64, c: f64, epsilon: f64) -> f64 {
    let reg = 0.5 * u.iter().map(|x| x * x).sum::<f64>();
    let loss: f64 = fs
        .vectors
        .iter()
        .zip(&fs.targets)
        .map(|(v, &ct)| {
            let pred = dot(u, v) + b;
            ((ct - pred).abs() - epsilon).max(0.0)
        })
        .sum();
    reg + c * loss
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizer of `sum_t max(0, |r_t - b| - eps)` over `b`: the midpoint of
/// the optimal interval, found among the breakpoints `r_t +- eps`.
fn best_bias(residuals: &[f64], epsilon: f64) -> f64 {
    let loss = |b: f64| -> f64 {
        residuals
            .iter()
            .map(|r| ((r - b).abs() - epsilon).max(0.0))
            .sum()
    };
    let mut cands: Vec<f64> = residuals
        .iter()
        .flat_map(|r| [r - epsilon, r + epsilon])
        .collect();
    cands.sort_by(f64::total_cmp);
    let values: Vec<f64> = cands.iter().map(|&b| loss(b)).collect();
    let best = values.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = 1e-12 * (1.0 + best.abs());
    let lo = cands
        .iter()
        .zip(&values)
        .find(|(_, v)| **v <= best + slack)
        .map(|(b, _)| *b)
        .unwrap_or(0.0);
    let hi = cands
        .iter()
        .zip(&values)
        .rev()
        .find(|(_, v)| **v <= best + slack)
        .map(|(b, _)| *b)
        .unwrap_or(0.0);
    0.5 * (lo + hi)
}

/// Gram-matrix form of one feature sequence, reusable across `C` values.
#[derive(Clone, Debug)]
pub struct SvrProblem<'a> {
    fs: &'a FeatureSequence,
    mean: Vec<f64>,
    /// Gram matrix of the centered features, row-major `L x L`.
    gram: Vec<f64>,
}

impl<'a> SvrProblem<'a> {
    pub fn new(fs: &'a FeatureSequence) -> Self {
        let (l, d) = (fs.len(), fs.dim());
        let mut mean = vec![0.0; d];
        for v in &fs.vectors {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= l as f64;
        }
        let centered: Vec<Vec<f64>> = fs
            .vectors
            .iter()
            .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
            .collect();
        let mut gram = vec![0.0; l * l];
        for i in 0..l {
            for j in i..l {
                let k = dot(&centered[i], &centered[j]);
                gram[i * l + j] = k;
                gram[j * l + i] = k;
            }
        }
        SvrProblem { fs, mean, gram }
    }

    pub fn solve(&self, c: f64, epsilon: f64, opts: &SvrOptions) -> Result<SvrSolution> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!("C must be positive, got {c}")));
        }
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be nonnegative, got {epsilon}"
            )));
        }
        let l = self.fs.len();
        let targets = &self.fs.targets;
        let kk = |i: usize, j: usize| self.gram[(i % l) * l + (j % l)];
        // variables 0..l are alpha (y = +1), l..2l are alpha* (y = -1)
        let n = 2 * l;
        let y = |k: usize| if k < l { 1.0 } else { -1.0 };
        let p: Vec<f64> = (0..n)
            .map(|k| {
                if k < l {
                    epsilon - targets[k]
                } else {
                    epsilon + targets[k - l]
                }
            })
            .collect();
        let mut x = vec![0.0f64; n];
        let mut grad = p.clone();
        let tol = opts.tol * (1.0 + targets.iter().fold(0.0f64, |m, t| m.max(t.abs())));
        const TAU: f64 = 1e-12;
        let objective = |x: &[f64], grad: &[f64]| -> f64 {
            0.5 * x.iter().zip(grad).zip(&p).map(|((a, g), q)| a * (g + q)).sum::<f64>()
        };
        let mut trace = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        while iterations < opts.max_iter {
            // i: maximal violator in I_up
            let mut gmax = f64::NEG_INFINITY;
            let mut gi = usize::MAX;
            for k in 0..n {
                let up = if y(k) > 0.0 { x[k] < c } else { x[k] > 0.0 };
                if up && -y(k) * grad[k] >= gmax {
                    gmax = -y(k) * grad[k];
                    gi = k;
                }
            }
            let mut gmax2 = f64::NEG_INFINITY;
            let mut gj = usize::MAX;
            let mut best = f64::INFINITY;
            if gi != usize::MAX {
                for k in 0..n {
                    let low = if y(k) > 0.0 { x[k] > 0.0 } else { x[k] < c };
                    if !low {
                        continue;
                    }
                    let yg = y(k) * grad[k];
                    gmax2 = gmax2.max(yg);
                    let diff = gmax + yg;
                    if diff > 0.0 {
                        let mut quad = kk(gi, gi) + kk(k, k) - 2.0 * y(gi) * y(k) * kk(gi, k);
                        if quad <= 0.0 {
                            quad = TAU;
                        }
                        let obj = -diff * diff / quad;
                        if obj <= best {
                            best = obj;
                            gj = k;
                        }
                    }
                }
            }
            if gi == usize::MAX || gj == usize::MAX || gmax + gmax2 < tol {
                converged = true;
                break;
            }
            let (i, j) = (gi, gj);
            let (old_i, old_j) = (x[i], x[j]);
            let qij = y(i) * y(j) * kk(i, j);
            if y(i) != y(j) {
                let mut quad = kk(i, i) + kk(j, j) + 2.0 * qij;
                if quad <= 0.0 {
                    quad = TAU;
                }
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = x[i] - x[j];
                x[i] += delta;
                x[j] += delta;
                if diff > 0.0 {
                    if x[j] < 0.0 {
                        x[j] = 0.0;
                        x[i] = diff;
                    }
                } else if x[i] < 0.0 {
                    x[i] = 0.0;
                    x[j] = -diff;
                }
                if diff > 0.0 {
                    if x[i] > c {
                        x[i] = c;
                        x[j] = c - diff;
                    }
                } else if x[j] > c {
                    x[j] = c;
                    x[i] = c + diff;
                }
            } else {
                let mut quad = kk(i, i) + kk(j, j) - 2.0 * qij;
                if quad <= 0.0 {
                    quad = TAU;
                }
                let delta = (grad[i] - grad[j]) / quad;
                let sum = x[i] + x[j];
                x[i] -= delta;
                x[j] += delta;
                if sum > c {
                    if x[i] > c {
                        x[i] = c;
                        x[j] = sum - c;
                    }
                } else if x[j] < 0.0 {
                    x[j] = 0.0;
                    x[i] = sum;
                }
                if sum > c {
                    if x[j] > c {
                        x[j] = c;
                        x[i] = sum - c;
                    }
                } else if x[i] < 0.0 {
                    x[i] = 0.0;
                    x[j] = sum;
                }
            }
            let (di, dj) = (x[i] - old_i, x[j] - old_j);
            for k in 0..n {
                let yk = y(k);
                grad[k] += yk * (y(i) * kk(i, k) * di + y(j) * kk(j, k) * dj);
            }
            iterations += 1;
            trace.push(objective(&x, &grad));
        }
        if trace.is_empty() {
            trace.push(objective(&x, &grad));
        }

        let beta: Vec<f64> = (0..l).map(|t| x[t] - x[t + l]).collect();
        let d = self.fs.dim();
        let mut u = vec![0.0; d];
        for (t, v) in self.fs.vectors.iter().enumerate() {
            if beta[t] == 0.0 {
                continue;
            }
            for ((ui, xi), mi) in u.iter_mut().zip(v).zip(&self.mean) {
                *ui += beta[t] * (xi - mi);
            }
        }
        // residuals against centered features, then undo the centering in b
        let residuals: Vec<f64> = (0..l)
            .map(|t| {
                let pred: f64 = (0..l).map(|s| self.gram[t * l + s] * beta[s]).sum();
                targets[t] - pred
            })
            .collect();
        let b = best_bias(&residuals, epsilon) - dot(&u, &self.mean);
        let objective = primal_objective(self.fs, &u, b, c, epsilon);
        if !objective.is_finite() || u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("svr solution".into()));
        }
        Ok(SvrSolution {
            u,
            b,
            c,
            epsilon,
            objective,
            dual_trace: trace,
            iterations,
            converged,
        })
    }
}

/// Solves the rank-pooling regression for one feature sequence.
pub fn solve_linear_svr(fs: &FeatureSequence, c: f64, epsilon: f64) -> Result<SvrSolution> {
    SvrProblem::new(fs).solve(c, epsilon, &SvrOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    #[test]
    fn targets_are_centered() {
        let t = centered_targets(16);
        assert_eq!(t[0], -7.5);
        assert_eq!(t[15], 7.5);
        assert_eq!(t.iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn tvm_of_identical_frames_is_the_frame() {
        let f = Frame::new(2, 2, 3, (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        let fs = time_varying_mean(&vec![f.clone(); 16]).unwrap();
        for v in fs.vectors() {
            let expect: Vec<f64> = f.data().iter().map(|&x| f64::from(x)).collect();
            assert_eq!(v, &expect);
        }
    }

    #[test]
    fn tvm_arithmetic() {
        let a = Frame::new(1, 1, 1, vec![0.0]).unwrap();
        let b = Frame::new(1, 1, 1, vec![1.0]).unwrap();
        let fs = time_varying_mean(&[a, b]).unwrap();
        assert_eq!(fs.vectors(), &[vec![0.0], vec![0.5]]);
    }

    #[test]
    fn tvm_last_is_global_mean() {
        let mut s = 3u64;
        let frames: Vec<Frame> = (0..16)
            .map(|_| Frame::new(3, 3, 3, (0..27).map(|_| lcg(&mut s) as f32 * 0.5 + 0.5).collect()).unwrap())
            .collect();
        let fs = time_varying_mean(&frames).unwrap();
        for k in 0..27 {
            let mean: f64 = frames.iter().map(|f| f64::from(f.data()[k])).sum::<f64>() / 16.0;
            assert!((fs.vectors()[15][k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_features_force_zero_weights() {
        let fs = FeatureSequence::new(vec![vec![0.3, -1.2, 4.0]; 16]).unwrap();
        for c in [1.0, 1000.0] {
            let sol = solve_linear_svr(&fs, c, 0.1).unwrap();
            assert!(sol.u.iter().all(|&x| x == 0.0));
            assert!(sol.converged);
        }
    }

    #[test]
    fn exact_linear_fit_within_epsilon() {
        let l = 16;
        let fs = FeatureSequence::new((0..l).map(|t| vec![t as f64, 0.0, 0.0]).collect()).unwrap();
        let sol = solve_linear_svr(&fs, 1000.0, 0.1).unwrap();
        for (v, ct) in fs.vectors().iter().zip(fs.targets()) {
            let r = (ct - dot(&sol.u, v) - sol.b).abs();
            assert!(r <= 0.1 + 1e-6, "residual {r}");
        }
        // the exact fit u = e1 is feasible, so the solver must do at least as well
        let exact = primal_objective(&fs, &[1.0, 0.0, 0.0], -7.5, 1000.0, 0.1);
        assert!(sol.objective <= exact + 1e-9);
    }

    #[test]
    fn dual_trace_never_increases() {
        let mut s = 11u64;
        for _ in 0..20 {
            let fs = FeatureSequence::new(
                (0..6).map(|_| (0..5).map(|_| lcg(&mut s)).collect()).collect(),
            )
            .unwrap();
            for c in [1.0, 1000.0] {
                let sol = solve_linear_svr(&fs, c, 0.1).unwrap();
                assert!(sol.converged);
                for w in sol.dual_trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
                }
                // strong duality at convergence
                let gap = sol.objective - sol.dual_bound();
                assert!(gap >= -1e-6 && gap <= 1e-5 * (1.0 + sol.objective), "gap {gap}");
            }
        }
    }

    #[test]
    fn exact_fit_scaling() {
        let fs = FeatureSequence::new((0..8).map(|t| vec![t as f64, 1.0]).collect()).unwrap();
        let base = solve_linear_svr(&fs, 10.0, 0.0).unwrap();
        let scaled = solve_linear_svr(&fs.scaled(4.0), 10.0, 0.0).unwrap();
        for (a, b) in base.u.iter().zip(&scaled.u) {
            assert!((a / 4.0 - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(FeatureSequence::new(vec![vec![1.0]]).is_err());
        assert!(FeatureSequence::new(vec![vec![1.0], vec![f64::NAN]]).is_err());
        let fs = FeatureSequence::new(vec![vec![1.0], vec![2.0]]).unwrap();
        assert!(solve_linear_svr(&fs, 0.0, 0.1).is_err());
        assert!(solve_linear_svr(&fs, 1.0, -0.1).is_err());
    }
}
