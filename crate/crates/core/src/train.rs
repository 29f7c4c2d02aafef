//! Model training: relevance normalization, per-node importance weights and
//! the per-node regression problems.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::RelevanceDataset;
use crate::error::{Error, Result};
use crate::model::{Hyperparams, TreeModel, XRegModel};
use crate::rng::{derive_seed, task_rng, Stream};
use crate::solver::{solve, LinearRegressor, SolverParams, WeightedExample};
use crate::sparse::SparseVector;
use crate::tail::TailClassifier;
use crate::tree::{build_label_features, grow_tree, TreeTopology};

/// Divides every relevance by the global maximum, returning the scale.
pub fn normalize_relevances(d: &RelevanceDataset) -> Result<(RelevanceDataset, f64)> {
    let y_max = d
        .relevances()
        .iter()
        .filter_map(SparseVector::max_value)
        .fold(0.0, f64::max);
    if y_max <= 0.0 {
        return Err(Error::Training(
            "all relevances are zero; there is nothing to learn".into(),
        ));
    }
    let rows = d
        .relevances()
        .iter()
        .map(|r| {
            let values = r.values().iter().map(|v| v / y_max).collect();
            SparseVector::new(r.dim(), r.indices().to_vec(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((d.with_relevances(rows), y_max))
}

/// A training point's weights at one node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Member {
    pub point: u32,
    /// Probability mass reaching the node's parent path, `Π z` over ancestors.
    pub s: f64,
    /// Largest normalized relevance of any label in the node's subtree.
    pub z: f64,
}

/// The points reaching a node (`s > 0`) with their importance and target.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeTrainingSet {
    pub node: usize,
    pub members: Vec<Member>,
}

impl NodeTrainingSet {
    /// Number of members with non-zero relevance in the subtree.
    pub fn relevant(&self) -> usize {
        self.members.iter().filter(|m| m.z > 0.0).count()
    }
}

/// Per-point map from node to `z`, holding only nodes with `z > 0`.
fn point_z(
    topo: &TreeTopology,
    label_leaf: &[usize],
    relevance: &SparseVector,
) -> HashMap<usize, f64> {
    let mut z: HashMap<usize, f64> = HashMap::new();
    for (l, y) in relevance.iter() {
        if y <= 0.0 {
            continue;
        }
        let mut n = Some(label_leaf[l as usize]);
        while let Some(id) = n {
            let e = z.entry(id).or_insert(0.0);
            if *e >= y {
                break;
            }
            *e = y;
            n = topo.node(id).parent;
        }
    }
    z
}

/// `z` and `s` for every (node, point) pair with `s > 0`, indexed by node.
///
/// The root is reached by every point with `s = 1`; a child inherits
/// `s_parent · z_parent`, so a node's children are reached only by points
/// with relevance somewhere under it.
pub fn compute_node_weights(d: &RelevanceDataset, topo: &TreeTopology) -> Vec<NodeTrainingSet> {
    let label_leaf = topo.label_leaf();
    let per_point: Vec<Vec<(usize, Member)>> = d
        .relevances()
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let z = point_z(topo, &label_leaf, row);
            let mut out = Vec::new();
            let root = topo.root().id;
            let mut stack = vec![(root, 1.0)];
            while let Some((id, s)) = stack.pop() {
                let zn = z.get(&id).copied().unwrap_or(0.0);
                out.push((id, Member { point: i as u32, s, z: zn }));
                if zn > 0.0 {
                    if let Some(children) = topo.node(id).children {
                        stack.extend(children.iter().rev().map(|&c| (c, s * zn)));
                    }
                }
            }
            out
        })
        .collect();

    let mut sets: Vec<NodeTrainingSet> = (0..topo.num_nodes())
        .map(|node| NodeTrainingSet { node, members: Vec::new() })
        .collect();
    for entries in per_point {
        for (id, m) in entries {
            sets[id].members.push(m);
        }
    }
    sets
}

/// Weighted examples for a leaf's per-label regressors.
///
/// The label is treated as one more level below the leaf: a point's
/// importance is `s_leaf · z_leaf` and its target the label's own normalized
/// relevance, so points with no relevance in the leaf carry no weight.
fn leaf_label_examples<'a>(
    leaf: &NodeTrainingSet,
    label: u32,
    features: &'a [SparseVector],
    relevances: &[SparseVector],
) -> Vec<WeightedExample<'a>> {
    leaf.members
        .iter()
        .filter(|m| m.z > 0.0)
        .map(|m| {
            let w = m.s * m.z;
            let y = relevances[m.point as usize].get(label);
            WeightedExample {
                features: &features[m.point as usize],
                pos: w * y,
                neg: w * (1.0 - y),
            }
        })
        .collect()
}

fn edge_examples<'a>(set: &NodeTrainingSet, features: &'a [SparseVector]) -> Vec<WeightedExample<'a>> {
    set.members
        .iter()
        .map(|m| WeightedExample {
            features: &features[m.point as usize],
            pos: m.s * m.z,
            neg: m.s * (1.0 - m.z),
        })
        .collect()
}

enum Task {
    Edge(usize),
    Label { leaf: usize, slot: usize, label: u32 },
}

/// Trains one tree given its topology and the normalized data.
pub fn train_tree(
    d: &RelevanceDataset,
    features: &[SparseVector],
    topology: TreeTopology,
    params: &SolverParams,
    seed: u64,
    tree_index: usize,
) -> TreeModel {
    let dim = d.num_features() + 1;
    let sets = compute_node_weights(d, &topology);
    let n = d.num_points().max(1) as f64;
    let frac: Vec<f64> = sets.iter().map(|s| s.relevant() as f64 / n).collect();

    let mut tasks = Vec::new();
    for node in topology.nodes() {
        if node.parent.is_some() {
            tasks.push(Task::Edge(node.id));
        }
        for (slot, &label) in node.labels.iter().enumerate() {
            tasks.push(Task::Label { leaf: node.id, slot, label });
        }
    }
    let num_nodes = topology.num_nodes();
    let solved: Vec<(usize, Option<usize>, LinearRegressor)> = tasks
        .par_iter()
        .map(|task| match *task {
            Task::Edge(id) => {
                let ex = edge_examples(&sets[id], features);
                let mut rng = task_rng(seed, Stream::Solver, tree_index, id);
                let r = solve(&ex, dim, params, &mut rng);
                log::debug!(
                    "event=solve tree={tree_index} node={id} kind=edge members={} iters={} gap={:.3e} nnz={}",
                    ex.len(),
                    r.stats.iterations,
                    r.stats.duality_gap,
                    r.nnz()
                );
                (id, None, r)
            }
            Task::Label { leaf, slot, label } => {
                let ex = leaf_label_examples(&sets[leaf], label, features, d.relevances());
                let task_id = num_nodes + label as usize;
                let mut rng = task_rng(seed, Stream::Solver, tree_index, task_id);
                let r = solve(&ex, dim, params, &mut rng);
                log::debug!(
                    "event=solve tree={tree_index} node={leaf} kind=label label={label} members={} iters={} gap={:.3e} nnz={}",
                    ex.len(),
                    r.stats.iterations,
                    r.stats.duality_gap,
                    r.nnz()
                );
                (leaf, Some(slot), r)
            }
        })
        .collect();

    let mut edges: Vec<Option<LinearRegressor>> = vec![None; num_nodes];
    let mut label_regressors: Vec<Vec<LinearRegressor>> = topology
        .nodes()
        .iter()
        .map(|node| vec![LinearRegressor::zero(dim); node.labels.len()])
        .collect();
    for (id, slot, r) in solved {
        match slot {
            None => edges[id] = Some(r),
            Some(s) => label_regressors[id][s] = r,
        }
    }
    TreeModel {
        topology,
        edges,
        label_regressors,
        frac,
    }
}

/// Trains the full ensemble.
pub fn train(d: &RelevanceDataset, hp: &Hyperparams) -> Result<XRegModel> {
    hp.validate()?;
    if d.num_labels() == 0 {
        return Err(Error::invalid("dataset has zero labels"));
    }
    let start = Instant::now();
    let (normalized, y_max) = normalize_relevances(d)?;
    let features = normalized.biased_features();
    let label_features = build_label_features(&normalized);
    log::info!(
        "event=prepare points={} features={} labels={} orphans={} y_max={} secs={:.3}",
        d.num_points(),
        d.num_features(),
        d.num_labels(),
        label_features.orphans().len(),
        y_max,
        start.elapsed().as_secs_f64()
    );

    let mut trees = Vec::with_capacity(hp.trees);
    for t in 0..hp.trees {
        let tree_start = Instant::now();
        let split_seed = derive_seed(hp.seed, Stream::Split, t as u64, 0);
        let topology = grow_tree(&label_features, hp.max_leaf, split_seed)?;
        let grown = tree_start.elapsed().as_secs_f64();
        log::info!(
            "event=tree_built tree={t} nodes={} leaves={} depth={} secs={grown:.3}",
            topology.num_nodes(),
            topology.num_leaves(),
            topology.depth()
        );
        let tree = train_tree(&normalized, &features, topology, &hp.solver, hp.seed, t);
        log::info!(
            "event=tree_trained tree={t} secs={:.3}",
            tree_start.elapsed().as_secs_f64() - grown
        );
        trees.push(tree);
    }

    let tail = TailClassifier::new(
        label_features,
        d.label_counts().into_iter().map(|c| c as u64).collect(),
    )?;
    let model = XRegModel {
        num_features: d.num_features(),
        num_labels: d.num_labels(),
        y_max,
        hyper: hp.clone(),
        trees,
        tail: Some(tail),
    };
    log::info!(
        "event=trained trees={} nodes={} secs={:.3}",
        model.trees.len(),
        model.num_nodes(),
        start.elapsed().as_secs_f64()
    );
    Ok(model)
}
