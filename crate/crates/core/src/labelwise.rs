//! Per-label inference: the whole test set is routed down each tree at once,
//! and every node passes on only as many points as its training visit
//! fraction allows.

use rayon::prelude::*;

use crate::data::PredictionFile;
use crate::error::{Error, Result};
use crate::model::{TreeModel, XRegModel};
use crate::pointwise::{ensemble_score, step};
use crate::sparse::{rank_order, top_k_entries, SparseVector};

/// The `cap` highest-scored entries, descending, ties to the lower index.
pub fn retain_top(scored: &[(u32, f64)], cap: usize) -> Vec<(u32, f64)> {
    top_k_entries(scored, cap)
}

/// How many test points node with visit fraction `frac` may hold.
///
/// `ceil(factor · frac · num_test)`, at least 1 for any node that saw
/// relevant training points and 0 for one that never did.
pub fn capacity(factor: f64, frac: f64, num_test: usize) -> usize {
    if frac <= 0.0 || num_test == 0 {
        return 0;
    }
    let c = (factor * frac * num_test as f64).ceil();
    (c as usize).clamp(1, num_test)
}

/// A node's retained points with their path log-probabilities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeAllotment {
    pub node: usize,
    pub capacity: usize,
    /// `(point, log ẑ)`, descending.
    pub retained: Vec<(u32, f64)>,
}

/// Routes `xs` (already prepared) down one tree, returning every node's
/// allotment in node order.
pub fn route(tree: &TreeModel, xs: &[SparseVector], factor: f64) -> Vec<NodeAllotment> {
    let topo = &tree.topology;
    let m = xs.len();
    let mut allot: Vec<NodeAllotment> = (0..topo.num_nodes())
        .map(|node| NodeAllotment {
            node,
            capacity: capacity(factor, tree.frac[node], m),
            retained: Vec::new(),
        })
        .collect();
    let root = topo.root().id;
    allot[root].capacity = m;
    allot[root].retained = (0..m as u32).map(|i| (i, 0.0)).collect();

    let mut level = vec![root];
    while !level.is_empty() {
        let view = &allot;
        let children: Vec<(usize, Vec<(u32, f64)>)> = level
            .par_iter()
            .flat_map_iter(|&id| {
                let parent = &view[id];
                topo.node(id).children.into_iter().flatten().map(move |c| {
                    let edge = tree.edges[c].as_ref().expect("non-root node has an edge");
                    let cap = view[c].capacity;
                    let scored: Vec<(u32, f64)> = if cap == 0 {
                        Vec::new()
                    } else {
                        parent
                            .retained
                            .iter()
                            .map(|&(i, lp)| (i, step(lp, edge, &xs[i as usize])))
                            .collect()
                    };
                    (c, retain_top(&scored, cap))
                })
            })
            .collect();
        level = children.iter().map(|(c, _)| *c).collect();
        for (c, kept) in children {
            allot[c].retained = kept;
        }
    }
    allot
}

/// A label with its `(point, probability)` list.
type LabelScores = (u32, Vec<(u32, f64)>);

/// Per-label `(point, probability)` lists from one tree: every point retained
/// at a label's leaf, scored by its path probability times the label's own.
fn tree_label_scores(tree: &TreeModel, xs: &[SparseVector], factor: f64, out: &mut [Vec<(u32, f64)>]) {
    let allot = route(tree, xs, factor);
    let per_leaf: Vec<Vec<LabelScores>> = tree
        .topology
        .nodes()
        .par_iter()
        .filter(|n| n.is_leaf())
        .map(|leaf| {
            let kept = &allot[leaf.id].retained;
            leaf.labels
                .iter()
                .zip(&tree.label_regressors[leaf.id])
                .map(|(&label, r)| {
                    let scores = kept
                        .iter()
                        .map(|&(i, lp)| (i, step(lp, r, &xs[i as usize]).exp()))
                        .collect();
                    (label, scores)
                })
                .collect()
        })
        .collect();
    for (label, scores) in per_leaf.into_iter().flatten() {
        out[label as usize].extend(scores);
    }
}

/// Top-`per_label` test points for every label.
///
/// Per-tree probabilities of a (label, point) pair are averaged over the
/// ensemble, a tree that did not route the point to the label contributing
/// zero; only then is each label cut to its best `per_label` points.
pub fn predict_labelwise(
    m: &XRegModel,
    test: &[SparseVector],
    factor: f64,
    per_label: usize,
) -> Result<PredictionFile> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::invalid(format!("routing factor must be positive, got {factor}")));
    }
    if per_label == 0 {
        return Err(Error::invalid("points per label must be at least 1"));
    }
    let xs = m.prepare_all(test);
    let mut per_label_scores: Vec<Vec<(u32, f64)>> = vec![Vec::new(); m.num_labels];
    for tree in &m.trees {
        tree_label_scores(tree, &xs, factor, &mut per_label_scores);
    }
    let rows = per_label_scores
        .into_par_iter()
        .map(|mut scores| {
            // Stable: each point's contributions stay in tree order.
            scores.sort_by_key(|&(i, _)| i);
            let mut combined: Vec<(u32, f64)> = Vec::new();
            for (i, p) in scores {
                match combined.last_mut() {
                    Some(last) if last.0 == i => last.1 += p,
                    _ => combined.push((i, 0.0 + p)),
                }
            }
            for e in &mut combined {
                e.1 = ensemble_score(m, e.1);
            }
            let mut top = retain_top(&combined, per_label);
            top.sort_unstable_by(rank_order);
            top
        })
        .collect();
    Ok(PredictionFile::new(test.len(), rows))
}
