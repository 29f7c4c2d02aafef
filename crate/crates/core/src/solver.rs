//! Weighted L2-regularized logistic regression solved in the dual.
//!
//! Each example carries a positive weight `a` and a negative weight `b`; the
//! minimized objective is
//!
//! ```text
//! ‖w‖² + (C/n) Σ_i [ a_i·log(1 + e^{-wᵀx_i}) + b_i·log(1 + e^{wᵀx_i}) ]
//! ```
//!
//! with `n` the number of examples. Splitting every example into a positive
//! and a negative copy turns this into the instance-weighted logistic dual of
//! liblinear, which is minimized one coordinate at a time with a safeguarded
//! Newton step per coordinate.

use rand::seq::SliceRandom;

use crate::rng::TaskRng;
use crate::sparse::{log_sigmoid, sigmoid, SparseVector};

const MAX_INNER_NEWTON: usize = 100;

#[derive(Clone, Copy, Debug)]
pub struct WeightedExample<'a> {
    pub features: &'a SparseVector,
    /// Importance of the positive copy, `s·z`.
    pub pos: f64,
    /// Importance of the negative copy, `s·(1 − z)`.
    pub neg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverParams {
    pub c: f64,
    /// Stop once the largest coordinate gradient in an epoch drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Weights with magnitude below this are dropped after solving.
    pub prune: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            c: 10.0,
            tol: 0.1,
            max_iter: 100,
            prune: 0.05,
        }
    }
}

/// A sparse linear scorer with single-precision storage.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearRegressor {
    dim: usize,
    indices: Vec<u32>,
    weights: Vec<f32>,
    pub stats: SolveStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: u32,
    /// Duality gap of the unpruned solution, on the scale of the objective above.
    pub duality_gap: f64,
    /// Set when there was nothing to fit and a zero model was returned.
    pub empty: bool,
}

impl LinearRegressor {
    pub fn zero(dim: usize) -> Self {
        LinearRegressor {
            dim,
            indices: Vec::new(),
            weights: Vec::new(),
            stats: SolveStats::default(),
        }
    }

    /// Builds from sorted weights; used when loading models and in tests.
    pub fn from_parts(dim: usize, indices: Vec<u32>, weights: Vec<f32>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(indices.last().is_none_or(|&i| (i as usize) < dim));
        LinearRegressor {
            dim,
            indices,
            weights,
            stats: SolveStats::default(),
        }
    }

    /// Keeps weights with `|w| >= threshold`, rounding to f32 storage.
    pub fn from_dense(w: &[f64], threshold: f64) -> Self {
        let mut indices = Vec::new();
        let mut weights = Vec::new();
        for (i, &v) in w.iter().enumerate() {
            if v != 0.0 && v.abs() >= threshold {
                indices.push(i as u32);
                weights.push(v as f32);
            }
        }
        LinearRegressor {
            dim: w.len(),
            indices,
            weights,
            stats: SolveStats::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.dim];
        for (&i, &v) in self.indices.iter().zip(&self.weights) {
            w[i as usize] = v as f64;
        }
        w
    }

    /// `wᵀx` by merging sorted indices. Coordinates of `x` beyond the model
    /// dimension never match a weight and are ignored.
    #[inline]
    pub fn score(&self, x: &SparseVector) -> f64 {
        let (xi, xv) = (x.indices(), x.values());
        let (wi, wv) = (&self.indices, &self.weights);
        let (mut p, mut q) = (0, 0);
        let mut acc = 0.0;
        while p < xi.len() && q < wi.len() {
            let (a, b) = (xi[p], wi[q]);
            if a < b {
                p += 1;
            } else if a > b {
                q += 1;
            } else {
                acc += xv[p] * wv[q] as f64;
                p += 1;
                q += 1;
            }
        }
        acc
    }

    /// `wᵀx` against a dense copy of `x`.
    #[inline]
    pub fn score_dense(&self, x: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.weights)
            .map(|(&i, &w)| x.get(i as usize).copied().unwrap_or(0.0) * w as f64)
            .sum()
    }

    /// Adds `delta` to the weight at `index`, keeping the index order.
    pub fn nudge(&mut self, index: u32, delta: f32) {
        match self.indices.binary_search(&index) {
            Ok(pos) => self.weights[pos] += delta,
            Err(pos) => {
                self.indices.insert(pos, index);
                self.weights.insert(pos, delta);
            }
        }
    }
}

/// `σ(wᵀx)`, kept strictly inside (0, 1).
pub fn predict_prob(r: &LinearRegressor, x: &SparseVector) -> f64 {
    sigmoid(r.score(x)).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// The weighted objective at `w` (dense, dimension of the features).
pub fn objective(examples: &[WeightedExample], c: f64, w: &[f64]) -> f64 {
    let active: Vec<&WeightedExample> = examples.iter().filter(|e| e.pos + e.neg > 0.0).collect();
    let reg: f64 = w.iter().map(|v| v * v).sum();
    if active.is_empty() {
        return reg;
    }
    let loss: f64 = active
        .iter()
        .map(|e| {
            let m = e.features.dot_dense(w);
            -e.pos * log_sigmoid(m) - e.neg * log_sigmoid(-m)
        })
        .sum();
    reg + c / active.len() as f64 * loss
}

struct Instance<'a> {
    x: &'a SparseVector,
    y: f64,
    upper: f64,
    xsq: f64,
}

/// Minimizes the weighted objective by dual coordinate descent.
///
/// Examples whose weights are both zero are ignored and do not count toward
/// the `n` in `C/n`. With nothing to fit, a zero regressor flagged `empty` is
/// returned.
pub fn solve(
    examples: &[WeightedExample],
    dim: usize,
    params: &SolverParams,
    rng: &mut TaskRng,
) -> LinearRegressor {
    let w = solve_dense(examples, dim, params, rng);
    let mut r = LinearRegressor::from_dense(&w.weights, params.prune);
    r.stats = w.stats;
    r
}

pub(crate) struct DenseSolution {
    pub weights: Vec<f64>,
    pub stats: SolveStats,
}

pub(crate) fn solve_dense(
    examples: &[WeightedExample],
    dim: usize,
    params: &SolverParams,
    rng: &mut TaskRng,
) -> DenseSolution {
    assert!(params.c > 0.0 && params.tol > 0.0);
    let active = examples.iter().filter(|e| e.pos + e.neg > 0.0).count();
    if active == 0 {
        return DenseSolution {
            weights: vec![0.0; dim],
            stats: SolveStats {
                empty: true,
                ..Default::default()
            },
        };
    }

    // Halve the objective so the regularizer reads ½‖w‖² and every copy's
    // loss weight becomes its dual upper bound.
    let scale = params.c / (2.0 * active as f64);
    let mut inst = Vec::with_capacity(2 * active);
    for e in examples {
        debug_assert!(e.pos >= 0.0 && e.neg >= 0.0);
        let xsq = e.features.values().iter().map(|v| v * v).sum::<f64>();
        for (y, weight) in [(1.0, e.pos), (-1.0, e.neg)] {
            if weight > 0.0 {
                inst.push(Instance {
                    x: e.features,
                    y,
                    upper: weight * scale,
                    xsq,
                });
            }
        }
    }

    let l = inst.len();
    // alpha[2j] is the dual variable of copy j, alpha[2j+1] its complement.
    let mut alpha = vec![0.0; 2 * l];
    let mut w = vec![0.0; dim];
    for (j, it) in inst.iter().enumerate() {
        alpha[2 * j] = (0.001 * it.upper).min(1e-8);
        alpha[2 * j + 1] = it.upper - alpha[2 * j];
        for (f, v) in it.x.iter() {
            w[f as usize] += it.y * alpha[2 * j] * v;
        }
    }

    let mut order: Vec<usize> = (0..l).collect();
    let innereps_min = params.tol.min(1e-8);
    let mut innereps = 1e-2;
    let mut iter = 0;
    let mut last_dual = f64::INFINITY;

    while iter < params.max_iter {
        order.shuffle(rng);
        let mut newton_iters = 0;
        let mut gmax: f64 = 0.0;

        for &j in &order {
            let it = &inst[j];
            let c = it.upper;
            let a = it.xsq;
            let b = it.y * it.x.dot_dense(&w);

            let (mut i1, mut i2, mut sign) = (2 * j, 2 * j + 1, 1.0);
            if 0.5 * a * (alpha[i2] - alpha[i1]) + b < 0.0 {
                std::mem::swap(&mut i1, &mut i2);
                sign = -1.0;
            }

            let alpha_old = alpha[i1];
            let mut z = alpha_old;
            if c - z < 0.5 * c {
                z *= 0.1;
            }
            let mut gp = a * (z - alpha_old) + sign * b + (z / (c - z)).ln();
            gmax = gmax.max(gp.abs());

            let mut inner = 0;
            while inner <= MAX_INNER_NEWTON {
                if gp.abs() < innereps {
                    break;
                }
                let gpp = a + c / (c - z) / z;
                let next = z - gp / gpp;
                z = if next <= 0.0 { z * 0.1 } else { next };
                gp = a * (z - alpha_old) + sign * b + (z / (c - z)).ln();
                newton_iters += 1;
                inner += 1;
            }

            // The loose early inner tolerance can stop Newton at a point worse
            // than where it started; only accept steps that lower the dual.
            let sub = |t: f64| xlogx(t) + xlogx(c - t) + 0.5 * a * (t - alpha_old).powi(2) + sign * b * (t - alpha_old);
            if inner > 0 && sub(z) <= sub(alpha_old) {
                alpha[i1] = z;
                alpha[i2] = c - z;
                let step = sign * (z - alpha_old) * it.y;
                for (f, v) in it.x.iter() {
                    w[f as usize] += step * v;
                }
            }
        }

        iter += 1;
        if cfg!(debug_assertions) {
            let dual = dual_value(&inst, &alpha, &w);
            debug_assert!(
                dual <= last_dual + 1e-9 * (1.0 + last_dual.abs()),
                "dual objective rose from {last_dual} to {dual}"
            );
            last_dual = dual;
        }
        if gmax < params.tol {
            break;
        }
        if newton_iters <= l / 10 {
            innereps = (0.1 * innereps).max(innereps_min);
        }
    }

    let primal = 0.5 * w.iter().map(|v| v * v).sum::<f64>()
        + inst
            .iter()
            .map(|it| -it.upper * log_sigmoid(it.y * it.x.dot_dense(&w)))
            .sum::<f64>();
    let gap = (primal + dual_value(&inst, &alpha, &w)).max(0.0);

    DenseSolution {
        weights: w,
        stats: SolveStats {
            iterations: iter as u32,
            duality_gap: 2.0 * gap,
            empty: false,
        },
    }
}

#[inline]
fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

/// Dual objective (to be minimized) on the halved scale; `-dual` lower-bounds the primal.
fn dual_value(inst: &[Instance], alpha: &[f64], w: &[f64]) -> f64 {
    0.5 * w.iter().map(|v| v * v).sum::<f64>()
        + inst
            .iter()
            .enumerate()
            .map(|(j, it)| xlogx(alpha[2 * j]) + xlogx(alpha[2 * j + 1]) - xlogx(it.upper))
            .sum::<f64>()
}
