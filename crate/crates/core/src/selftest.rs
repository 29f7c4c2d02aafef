//! Randomized property suites behind the `selftest` command.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};

use crate::error::Result;
use crate::labelwise::predict_labelwise;
use crate::metrics::{abs_errors, regression_error_at_k, wp_regret_at_k, xrmse_at_k};
use crate::model::{Hyperparams, TreeModel, XRegModel};
use crate::pointwise::{dense_top_k, exact_prepared, predict_prepared};
use crate::rng::TaskRng;
use crate::solver::LinearRegressor;
use crate::sparse::{top_k_entries, unit_normalize, SparseVector};
use crate::tree::{balanced_2means, grow_tree, LabelFeatureMatrix};

/// Signature of an XMAD@k implementation.
pub type XmadFn = fn(&SparseVector, &[(u32, f64)], usize) -> Result<f64>;

/// An intentionally wrong XMAD that drops the largest-but-last error: sums
/// the `k − 1` largest errors and still divides by `k`.
pub fn off_by_one_xmad(y: &SparseVector, yhat: &[(u32, f64)], k: usize) -> Result<f64> {
    let mut errors = abs_errors(y, yhat);
    errors.sort_unstable_by(|a, b| b.total_cmp(a));
    let kept: f64 = errors.iter().take(k.saturating_sub(1)).sum();
    Ok(kept / k.min(y.dim()).max(1) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub trials: usize,
    pub violations: usize,
    pub elapsed: Duration,
    /// First few failing cases, for the report.
    pub examples: Vec<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

struct Tally {
    name: &'static str,
    trials: usize,
    violations: usize,
    examples: Vec<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            trials: 0,
            violations: 0,
            examples: Vec::new(),
            start: Instant::now(),
        }
    }

    fn check(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.violations += 1;
            if self.examples.len() < 3 {
                self.examples.push(describe());
            }
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            trials: self.trials,
            violations: self.violations,
            elapsed: self.start.elapsed(),
            examples: self.examples,
        }
    }
}

fn suite_rng(seed: u64, suite: u64) -> TaskRng {
    TaskRng::seed_from_u64(seed ^ suite.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn sparse_unit_values(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| if rng.gen_bool(0.5) { 0.0 } else { rng.gen::<f64>() })
        .collect()
}

/// `0 ≤ WP-regret@k ≤ 2·XMAD@2k`, `max(regret, regression error)/2 ≤ XMAD@2k`
/// and `XMAD@2k ≤ XRMSE@2k` on random dense instances.
pub fn lemma1_suite(trials: usize, seed: u64, xmad: XmadFn) -> Result<SuiteResult> {
    const TOL: f64 = 1e-12;
    let mut rng = suite_rng(seed, 1);
    let mut t = Tally::new("lemma1-regret-bound");
    for _ in 0..trials {
        let l = rng.gen_range(2..=50);
        let k = rng.gen_range(1..=5);
        let y = SparseVector::from_dense(&sparse_unit_values(&mut rng, l))?;
        let yhat: Vec<(u32, f64)> = sparse_unit_values(&mut rng, l)
            .into_iter()
            .enumerate()
            .map(|(i, v)| (i as u32, v))
            .collect();
        let regret = wp_regret_at_k(&y, &yhat, k)?;
        let x2k = xmad(&y, &yhat, 2 * k)?;
        let reg = regression_error_at_k(&y, &yhat, k)?;
        let r2k = xrmse_at_k(&y, &yhat, 2 * k)?;
        let ok = regret >= -TOL
            && regret <= 2.0 * x2k + TOL
            && regret.max(reg) / 2.0 <= x2k + TOL
            && x2k <= r2k + TOL;
        t.check(ok, || {
            format!("L={l} k={k} regret={regret:.6} xmad2k={x2k:.6} xrmse2k={r2k:.6}")
        });
    }
    Ok(t.finish())
}

fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(p, q) + term(1.0 - p, 1.0 - q)
}

/// A random binary tree over labels given as `children[n]`; leaves are labels.
fn random_binary_tree(rng: &mut impl Rng, max_depth: usize) -> Vec<Option<[usize; 2]>> {
    let mut nodes: Vec<Option<[usize; 2]>> = vec![None];
    let mut stack = vec![(0usize, 0usize)];
    while let Some((id, depth)) = stack.pop() {
        let split = depth < max_depth && (depth == 0 || rng.gen_bool(0.7));
        if split {
            let (a, b) = (nodes.len(), nodes.len() + 1);
            nodes.push(None);
            nodes.push(None);
            nodes[id] = Some([a, b]);
            stack.push((a, depth + 1));
            stack.push((b, depth + 1));
        }
    }
    nodes
}

/// The path KL bound: with `z` built consistently from label marginals
/// (`z_n = m_n / m_parent`, `m_n` the largest marginal in `n`'s subtree) and
/// arbitrary `ẑ ∈ (0, 1)`, `KL(y_l ‖ ŷ_l) ≤ Σ_h s_h·KL(z_h ‖ ẑ_h)`.
pub fn kl_bound_suite(trials: usize, seed: u64) -> SuiteResult {
    const TOL: f64 = 1e-9;
    let mut rng = suite_rng(seed, 2);
    let mut t = Tally::new("path-kl-bound");
    for _ in 0..trials {
        let depth = rng.gen_range(1..=6);
        let children = random_binary_tree(&mut rng, depth);
        let n = children.len();
        let mut parent = vec![None; n];
        for (id, c) in children.iter().enumerate() {
            for &ch in c.iter().flatten() {
                parent[ch] = Some(id);
            }
        }
        // Leaf marginals, sometimes exactly 0 or 1.
        let mut marg = vec![0.0; n];
        for id in 0..n {
            if children[id].is_none() {
                marg[id] = match rng.gen_range(0..10) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.gen::<f64>(),
                };
            }
        }
        for id in (0..n).rev() {
            if let Some([a, b]) = children[id] {
                marg[id] = marg[a].max(marg[b]);
            }
        }
        let zhat: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
        for leaf in (0..n).filter(|&i| children[i].is_none()) {
            let mut path = vec![leaf];
            while let Some(p) = parent[*path.last().unwrap()] {
                path.push(p);
            }
            path.reverse();
            let (mut s, mut bound, mut y, mut yhat) = (1.0, 0.0, 1.0, 1.0);
            let mut prev = 1.0;
            for &node in &path {
                let z = if prev > 0.0 { (marg[node] / prev).min(1.0) } else { 0.0 };
                bound += s * bernoulli_kl(z, zhat[node]);
                s *= z;
                y *= z;
                yhat *= zhat[node];
                prev = marg[node];
            }
            let lhs = bernoulli_kl(y, yhat);
            t.check(lhs <= bound + TOL, || {
                format!("depth={} y={y:.6} yhat={yhat:.3e} kl={lhs:.6} bound={bound:.6}", path.len())
            });
        }
    }
    t.finish()
}

fn random_sparse(rng: &mut impl Rng, dim: usize) -> SparseVector {
    let nnz = rng.gen_range(1..=dim.min(4));
    let mut idx: Vec<u32> = rand::seq::index::sample(rng, dim, nnz)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    idx.sort_unstable();
    let vals = (0..nnz).map(|_| rng.gen_range(-1.0..1.0)).collect();
    SparseVector::new(dim, idx, vals).expect("sorted distinct indices")
}

fn random_regressor(rng: &mut impl Rng, dim: usize) -> LinearRegressor {
    let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    LinearRegressor::from_dense(&w, 0.0)
}

/// A small model with random topology, weights and visit fractions.
pub fn random_model(rng: &mut impl Rng, max_labels: usize) -> Result<XRegModel> {
    let num_labels = rng.gen_range(2..=max_labels.max(2));
    let num_features = rng.gen_range(2..=12);
    let max_leaf = rng.gen_range(1..=8);
    let trees = rng.gen_range(1..=3);
    let dim = num_features + 1;
    let mut tree_models = Vec::with_capacity(trees);
    for _ in 0..trees {
        let vectors = (0..num_labels)
            .map(|_| unit_normalize(&random_sparse(rng, num_features)).ok())
            .collect();
        let f = LabelFeatureMatrix::from_vectors(num_features, vectors)?;
        let topology = grow_tree(&f, max_leaf, rng.gen())?;
        let n = topology.num_nodes();
        let mut frac = vec![1.0; n];
        let mut edges = vec![None; n];
        let mut label_regressors = vec![Vec::new(); n];
        for node in topology.nodes() {
            if let Some(p) = node.parent {
                frac[node.id] = frac[p] * rng.gen_range(0.3..=1.0);
                edges[node.id] = Some(random_regressor(rng, dim));
            }
            label_regressors[node.id] = node.labels.iter().map(|_| random_regressor(rng, dim)).collect();
        }
        tree_models.push(TreeModel {
            topology,
            edges,
            label_regressors,
            frac,
        });
    }
    Ok(XRegModel {
        num_features,
        num_labels,
        y_max: if rng.gen_bool(0.5) { 1.0 } else { rng.gen_range(0.5..5.0) },
        hyper: Hyperparams {
            trees,
            max_leaf,
            ..Hyperparams::default()
        },
        trees: tree_models,
        tail: None,
    })
}

/// Beam search with a beam covering every leaf returns the exact top-5.
pub fn beam_exact_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = suite_rng(seed, 3);
    let mut t = Tally::new("beam-equals-exact");
    for trial in 0..trials {
        let m = random_model(&mut rng, 64)?;
        let beam = m.trees.iter().map(|t| t.topology.num_leaves()).max().unwrap_or(1);
        for _ in 0..4 {
            let (x, _) = m.prepare(&random_sparse(&mut rng, m.num_features));
            let got = predict_prepared(&m, &x, beam, 5);
            let want = dense_top_k(&exact_prepared(&m, &x), 5);
            t.check(got == want, || format!("trial {trial}: beam {got:?} vs exact {want:?}"));
        }
    }
    Ok(t.finish())
}

/// Labelwise routing with a saturating factor returns the exact top-N per label.
pub fn labelwise_exact_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = suite_rng(seed, 4);
    let mut t = Tally::new("labelwise-equals-exact");
    for trial in 0..trials {
        let m = random_model(&mut rng, 64)?;
        let num_test = rng.gen_range(1..=30);
        let per_label = rng.gen_range(1..=8);
        let xs: Vec<SparseVector> = (0..num_test)
            .map(|_| random_sparse(&mut rng, m.num_features))
            .collect();
        let got = predict_labelwise(&m, &xs, 1e9, per_label)?;
        let prepared = m.prepare_all(&xs);
        let dense: Vec<Vec<f64>> = prepared.iter().map(|x| exact_prepared(&m, x)).collect();
        for label in 0..m.num_labels {
            let column: Vec<(u32, f64)> = dense
                .iter()
                .enumerate()
                .map(|(i, row)| (i as u32, row[label]))
                .collect();
            let want = top_k_entries(&column, per_label);
            let row = &got.rows[label];
            t.check(*row == want, || format!("trial {trial} label {label}: {row:?} vs {want:?}"));
        }
    }
    Ok(t.finish())
}

/// Balanced 2-means splits into halves differing by at most one, covering
/// every input exactly once, reproducibly.
pub fn split_suite(trials: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = suite_rng(seed, 5);
    let mut t = Tally::new("balanced-split");
    for trial in 0..trials {
        let n = rng.gen_range(2..=80);
        let dim = rng.gen_range(2..=10);
        let vectors: Vec<SparseVector> = (0..n)
            .filter_map(|_| unit_normalize(&random_sparse(&mut rng, dim)).ok())
            .collect();
        if vectors.len() < 2 {
            continue;
        }
        let split_seed = rng.gen();
        let (left, right) = balanced_2means(&vectors, split_seed)?;
        let mut all: Vec<usize> = left.iter().chain(&right).copied().collect();
        all.sort_unstable();
        let covered = all == (0..vectors.len()).collect::<Vec<_>>();
        let balanced = left.len() >= right.len() && left.len() - right.len() <= 1;
        let again = balanced_2means(&vectors, split_seed)? == (left.clone(), right.clone());
        t.check(covered && balanced && again, || {
            format!("trial {trial}: |left|={} |right|={} n={}", left.len(), right.len(), vectors.len())
        });
    }
    Ok(t.finish())
}

/// Trial counts derived from one iteration budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelftestConfig {
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig {
            iterations: 10_000,
            seed: 0,
        }
    }
}

/// Runs every suite: `iterations` lemma instances, a tenth as many KL trees
/// and a fiftieth as many random models per oracle suite.
pub fn run_all(cfg: &SelftestConfig, xmad: XmadFn) -> Result<Vec<SuiteResult>> {
    let n = cfg.iterations.max(1);
    Ok(vec![
        lemma1_suite(n, cfg.seed, xmad)?,
        kl_bound_suite((n / 10).max(1), cfg.seed),
        beam_exact_suite((n / 50).max(1), cfg.seed)?,
        labelwise_exact_suite((n / 50).max(1), cfg.seed)?,
        split_suite((n / 50).max(1), cfg.seed)?,
    ])
}
