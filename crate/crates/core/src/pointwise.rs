//! Per-point inference: beam search down every tree, averaged over the
//! ensemble.
//!
//! Path probabilities are accumulated as sums of log-sigmoids so that deep
//! trees cannot underflow; they are exponentiated only once a label is
//! reached.

use rayon::prelude::*;

use crate::data::PredictionFile;
use crate::error::{Error, Result};
use crate::model::{TreeModel, XRegModel};
use crate::sparse::{log_sigmoid, rank_order, top_k_entries, SparseVector};

/// Above this many labels the exact oracle refuses to run unless forced.
pub const EXACT_LABEL_LIMIT: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamEntry {
    pub node: usize,
    /// `log Π σ(wᵀx)` along the path to `node`; never positive.
    pub log_prob: f64,
}

#[inline]
pub(crate) fn step(log_prob: f64, r: &crate::solver::LinearRegressor, x: &SparseVector) -> f64 {
    log_prob + log_sigmoid(r.score(x))
}

/// Combines the per-tree probability sum of a label into the final score.
#[inline]
pub(crate) fn ensemble_score(m: &XRegModel, sum: f64) -> f64 {
    sum / m.trees.len() as f64 * m.y_max
}

fn by_log_prob(a: &BeamEntry, b: &BeamEntry) -> std::cmp::Ordering {
    b.log_prob.total_cmp(&a.log_prob).then(a.node.cmp(&b.node))
}

/// The leaves reached by a beam of width `beam` with their path log-probabilities.
///
/// Each round expands every internal node in the beam into its children,
/// keeps leaves already reached, and retains the `beam` most probable nodes.
pub fn beam_leaves(tree: &TreeModel, x: &SparseVector, beam: usize) -> Vec<BeamEntry> {
    let topo = &tree.topology;
    let mut frontier = vec![BeamEntry {
        node: topo.root().id,
        log_prob: 0.0,
    }];
    while frontier.iter().any(|e| !topo.node(e.node).is_leaf()) {
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for e in &frontier {
            match topo.node(e.node).children {
                None => next.push(*e),
                Some(children) => next.extend(children.iter().map(|&c| BeamEntry {
                    node: c,
                    log_prob: step(
                        e.log_prob,
                        tree.edges[c].as_ref().expect("non-root node has an edge"),
                        x,
                    ),
                })),
            }
        }
        if next.len() > beam {
            next.select_nth_unstable_by(beam - 1, by_log_prob);
            next.truncate(beam);
        }
        next.sort_unstable_by(by_log_prob);
        frontier = next;
    }
    frontier
}

/// Per-label probabilities from one tree, for labels in leaves the beam reached.
fn tree_scores(tree: &TreeModel, x: &SparseVector, beam: usize, out: &mut Vec<(u32, f64)>) {
    for e in beam_leaves(tree, x, beam) {
        let leaf = tree.topology.node(e.node);
        for (&label, r) in leaf.labels.iter().zip(&tree.label_regressors[e.node]) {
            out.push((label, step(e.log_prob, r, x).exp()));
        }
    }
}

/// Top-`k` labels for an already prepared (biased, trimmed) point.
pub fn predict_prepared(m: &XRegModel, x: &SparseVector, beam: usize, k: usize) -> Vec<(u32, f64)> {
    let mut per_tree = Vec::new();
    for tree in &m.trees {
        tree_scores(tree, x, beam, &mut per_tree);
    }
    // A stable sort keeps each label's tree contributions in tree order.
    per_tree.sort_by_key(|&(l, _)| l);
    let mut combined: Vec<(u32, f64)> = Vec::new();
    for (label, p) in per_tree {
        match combined.last_mut() {
            Some(last) if last.0 == label => last.1 += p,
            _ => combined.push((label, 0.0 + p)),
        }
    }
    for entry in &mut combined {
        entry.1 = ensemble_score(m, entry.1);
    }
    top_k_entries(&combined, k)
}

fn check_beam_k(beam: usize, k: usize) -> Result<()> {
    if beam == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(())
}

/// Top-`k` `(label, relevance)` pairs for a raw test point.
pub fn predict_point(m: &XRegModel, x: &SparseVector, beam: usize, k: usize) -> Result<Vec<(u32, f64)>> {
    check_beam_k(beam, k)?;
    let (x, _) = m.prepare(x);
    Ok(predict_prepared(m, &x, beam, k))
}

/// Pointwise predictions for a whole test set, one row per point.
pub fn predict_pointwise(
    m: &XRegModel,
    xs: &[SparseVector],
    beam: usize,
    k: usize,
) -> Result<PredictionFile> {
    check_beam_k(beam, k)?;
    let prepared = m.prepare_all(xs);
    let rows = prepared
        .par_iter()
        .map(|x| predict_prepared(m, x, beam, k))
        .collect();
    Ok(PredictionFile::new(m.num_labels, rows))
}

/// Scores every label by walking every root-to-label path; a test oracle.
pub fn predict_all_exact(m: &XRegModel, x: &SparseVector, force: bool) -> Result<Vec<f64>> {
    if m.num_labels > EXACT_LABEL_LIMIT && !force {
        return Err(Error::invalid(format!(
            "exact inference over {} labels refused (limit {EXACT_LABEL_LIMIT}); force it explicitly",
            m.num_labels
        )));
    }
    let (x, _) = m.prepare(x);
    Ok(exact_prepared(m, &x))
}

pub(crate) fn exact_prepared(m: &XRegModel, x: &SparseVector) -> Vec<f64> {
    let mut sums = vec![0.0; m.num_labels];
    for tree in &m.trees {
        let topo = &tree.topology;
        let mut log_prob = vec![0.0; topo.num_nodes()];
        // Parents precede children in node order.
        for node in topo.nodes() {
            if let Some(p) = node.parent {
                let edge = tree.edges[node.id].as_ref().expect("non-root node has an edge");
                log_prob[node.id] = step(log_prob[p], edge, x);
            }
            for (&label, r) in node.labels.iter().zip(&tree.label_regressors[node.id]) {
                sums[label as usize] += step(log_prob[node.id], r, x).exp();
            }
        }
    }
    sums.into_iter().map(|s| ensemble_score(m, s)).collect()
}

/// Top-`k` of a dense score vector under the shared tie rule.
pub fn dense_top_k(scores: &[f64], k: usize) -> Vec<(u32, f64)> {
    let entries: Vec<(u32, f64)> = scores.iter().enumerate().map(|(i, &s)| (i as u32, s)).collect();
    let mut top = top_k_entries(&entries, k);
    top.sort_unstable_by(rank_order);
    top
}
