//! Balanced binary label trees grown by recursive spherical 2-means.

use rand::Rng;
use rayon::prelude::*;

use crate::data::RelevanceDataset;
use crate::error::{Error, Result};
use crate::rng::{task_rng, Stream, TaskRng};
use crate::sparse::{unit_normalize, SparseVector};

const MAX_KMEANS_ITERS: usize = 20;
const KMEANS_TOL: f64 = 1e-4;

/// Unit label representations: the normalized relevance-weighted sum of the
/// feature vectors of the points each label is relevant to.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelFeatureMatrix {
    dim: usize,
    vectors: Vec<Option<SparseVector>>,
    orphans: Vec<u32>,
}

impl LabelFeatureMatrix {
    pub fn from_vectors(dim: usize, vectors: Vec<Option<SparseVector>>) -> Result<Self> {
        let mut orphans = Vec::new();
        for (l, v) in vectors.iter().enumerate() {
            match v {
                Some(v) if v.dim() != dim => {
                    return Err(Error::DimensionMismatch {
                        left: v.dim(),
                        right: dim,
                    })
                }
                Some(v) if (v.norm() - 1.0).abs() > 1e-9 => {
                    return Err(Error::invalid(format!("label {l} vector is not unit norm")))
                }
                Some(_) => {}
                None => orphans.push(l as u32),
            }
        }
        Ok(LabelFeatureMatrix {
            dim,
            vectors,
            orphans,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, label: u32) -> Option<&SparseVector> {
        self.vectors[label as usize].as_ref()
    }

    /// Labels with no training mass, ascending.
    pub fn orphans(&self) -> &[u32] {
        &self.orphans
    }

    pub(crate) fn into_vectors(self) -> Vec<Option<SparseVector>> {
        self.vectors
    }
}

/// Computes `v_l = normalize(Σ_i y_il x_i)` for every label over the raw
/// feature space. Labels without positive mass become orphans.
pub fn build_label_features(d: &RelevanceDataset) -> LabelFeatureMatrix {
    let dim = d.num_features();
    let mut by_label: Vec<Vec<(u32, f64)>> = vec![Vec::new(); d.num_labels()];
    for (i, y) in d.relevances().iter().enumerate() {
        for (l, w) in y.iter() {
            by_label[l as usize].push((i as u32, w));
        }
    }

    let vectors = by_label
        .par_iter()
        .map_init(
            || (vec![0.0f64; dim], Vec::<u32>::new()),
            |(acc, touched), members| {
                for &(i, w) in members {
                    for (f, v) in d.features()[i as usize].iter() {
                        if acc[f as usize] == 0.0 {
                            touched.push(f);
                        }
                        acc[f as usize] += w * v;
                    }
                }
                touched.sort_unstable();
                touched.dedup();
                let pairs: Vec<(u32, f64)> = touched
                    .iter()
                    .map(|&f| (f, std::mem::take(&mut acc[f as usize])))
                    .filter(|&(_, v)| v != 0.0)
                    .collect();
                touched.clear();
                let sum = SparseVector::new(
                    dim,
                    pairs.iter().map(|p| p.0).collect(),
                    pairs.iter().map(|p| p.1).collect(),
                )
                .expect("accumulated entries are sorted and finite");
                unit_normalize(&sum).ok()
            },
        )
        .collect();

    LabelFeatureMatrix::from_vectors(dim, vectors).expect("constructed vectors are unit norm")
}

/// Splits `vectors` into two halves of sizes `⌈n/2⌉` and `⌊n/2⌋` by balanced
/// spherical 2-means. Returns positions into `vectors`.
pub fn balanced_2means(vectors: &[SparseVector], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let refs: Vec<&SparseVector> = vectors.iter().collect();
    let mut rng = task_rng(seed, Stream::Split, 0, 0);
    split_refs(&refs, &mut rng)
}

fn split_refs(vectors: &[&SparseVector], rng: &mut TaskRng) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::invalid(format!(
            "2-means needs at least 2 vectors, got {n}"
        )));
    }
    let dim = vectors[0].dim();
    if let Some(v) = vectors.iter().find(|v| v.dim() != dim) {
        return Err(Error::DimensionMismatch {
            left: v.dim(),
            right: dim,
        });
    }

    let first = rng.gen_range(0..n);
    let mut second = first;
    // Two labels with the same direction make both centroids coincide, a
    // fixed point that never separates anything; redraw a few times.
    for _ in 0..8 {
        second = rng.gen_range(0..n - 1);
        if second >= first {
            second += 1;
        }
        if vectors[first].iter().ne(vectors[second].iter()) {
            break;
        }
    }
    let mut centroids = [vectors[first].to_dense(), vectors[second].to_dense()];

    let n_left = n.div_ceil(2);
    let mut order: Vec<usize> = (0..n).collect();
    let mut delta = vec![0.0; n];
    let mut prev_objective = f64::NEG_INFINITY;

    for _ in 0..MAX_KMEANS_ITERS {
        let sims: Vec<(f64, f64)> = vectors
            .iter()
            .map(|v| (v.dot_dense(&centroids[0]), v.dot_dense(&centroids[1])))
            .collect();
        for (d, &(a, b)) in delta.iter_mut().zip(&sims) {
            *d = a - b;
        }
        // Only membership of each half matters, so select rather than sort.
        order.select_nth_unstable_by(n_left - 1, |&a, &b| delta[b].total_cmp(&delta[a]).then(a.cmp(&b)));
        let objective: f64 = order[..n_left].iter().map(|&i| sims[i].0).sum::<f64>()
            + order[n_left..].iter().map(|&i| sims[i].1).sum::<f64>();
        if objective - prev_objective < KMEANS_TOL {
            break;
        }
        prev_objective = objective;

        for (side, members) in [&order[..n_left], &order[n_left..]].into_iter().enumerate() {
            let c = &mut centroids[side];
            c.iter_mut().for_each(|x| *x = 0.0);
            for &i in members {
                for (f, v) in vectors[i].iter() {
                    c[f as usize] += v;
                }
            }
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                c.iter_mut().for_each(|x| *x /= norm);
            } else {
                let pick = members[rng.gen_range(0..members.len())];
                *c = vectors[pick].to_dense();
            }
        }
    }

    let mut left = order[..n_left].to_vec();
    let mut right = order[n_left..].to_vec();
    left.sort_unstable();
    right.sort_unstable();
    Ok((left, right))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub children: Option<[usize; 2]>,
    pub depth: usize,
    /// Ascending label indices; empty for internal nodes.
    pub labels: Vec<u32>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// A binary tree over label indices with nodes numbered in breadth-first order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeTopology {
    nodes: Vec<TreeNode>,
    num_labels: usize,
}

impl TreeTopology {
    /// Assembles a topology from BFS-ordered nodes, checking structure.
    pub fn from_nodes(nodes: Vec<TreeNode>, num_labels: usize) -> Result<Self> {
        let bad = |m: String| Error::Model(format!("invalid tree: {m}"));
        if nodes.is_empty() {
            return Err(bad("no nodes".into()));
        }
        let mut seen = vec![false; num_labels];
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(bad(format!("node {i} has id {}", n.id)));
            }
            match n.children {
                Some([a, b]) => {
                    for c in [a, b] {
                        if c <= i || c >= nodes.len() || nodes[c].parent != Some(i) {
                            return Err(bad(format!("bad child {c} of node {i}")));
                        }
                        if nodes[c].depth != n.depth + 1 {
                            return Err(bad(format!("bad depth at node {c}")));
                        }
                    }
                    if !n.labels.is_empty() {
                        return Err(bad(format!("internal node {i} holds labels")));
                    }
                }
                None => {
                    for &l in &n.labels {
                        let slot = seen
                            .get_mut(l as usize)
                            .ok_or_else(|| bad(format!("label {l} out of range")))?;
                        if *slot {
                            return Err(bad(format!("label {l} in two leaves")));
                        }
                        *slot = true;
                    }
                }
            }
        }
        if nodes[0].parent.is_some() || nodes[0].depth != 0 {
            return Err(bad("root has a parent".into()));
        }
        if let Some(l) = seen.iter().position(|s| !s) {
            return Err(bad(format!("label {l} missing from leaves")));
        }
        Ok(TreeTopology { nodes, num_labels })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves().count()
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// For every label, the id of the leaf holding it.
    pub fn label_leaf(&self) -> Vec<usize> {
        let mut map = vec![usize::MAX; self.num_labels];
        for leaf in self.leaves() {
            for &l in &leaf.labels {
                map[l as usize] = leaf.id;
            }
        }
        map
    }

    /// Labels in the subtree rooted at `id`, ascending.
    pub fn subtree_labels(&self, id: usize) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            match node.children {
                Some(c) => stack.extend(c),
                None => out.extend_from_slice(&node.labels),
            }
        }
        out.sort_unstable();
        out
    }
}

/// Recursively splits the label set until every node holds at most
/// `max_leaf` labels.
///
/// Labels with a feature vector are partitioned by [`balanced_2means`];
/// orphan labels take no part in clustering and are dealt out to whichever
/// side keeps the split balanced, so every label lands in exactly one leaf.
pub fn grow_tree(f: &LabelFeatureMatrix, max_leaf: usize, seed: u64) -> Result<TreeTopology> {
    if max_leaf == 0 {
        return Err(Error::invalid("max leaf labels must be at least 1"));
    }
    let num_labels = f.num_labels();
    if num_labels == 0 {
        return Err(Error::invalid("cannot grow a tree over zero labels"));
    }

    struct Pending {
        id: usize,
        labels: Vec<u32>,
    }

    let mut nodes = vec![TreeNode {
        id: 0,
        parent: None,
        children: None,
        depth: 0,
        labels: Vec::new(),
    }];
    let mut frontier = vec![Pending {
        id: 0,
        labels: (0..num_labels as u32).collect(),
    }];

    while !frontier.is_empty() {
        let splits: Vec<Option<(Vec<u32>, Vec<u32>)>> = frontier
            .par_iter()
            .map(|p| {
                if p.labels.len() <= max_leaf {
                    Ok(None)
                } else {
                    let mut rng = task_rng(seed, Stream::Split, 0, p.id);
                    split_labels(f, &p.labels, &mut rng).map(Some)
                }
            })
            .collect::<Result<_>>()?;

        let mut next = Vec::new();
        for (p, split) in frontier.into_iter().zip(splits) {
            match split {
                None => nodes[p.id].labels = p.labels,
                Some((left, right)) => {
                    let depth = nodes[p.id].depth + 1;
                    let ids = [nodes.len(), nodes.len() + 1];
                    for (&id, labels) in ids.iter().zip([left, right]) {
                        nodes.push(TreeNode {
                            id,
                            parent: Some(p.id),
                            children: None,
                            depth,
                            labels: Vec::new(),
                        });
                        next.push(Pending { id, labels });
                    }
                    nodes[p.id].children = Some(ids);
                }
            }
        }
        frontier = next;
    }

    TreeTopology::from_nodes(nodes, num_labels)
}

fn split_labels(
    f: &LabelFeatureMatrix,
    labels: &[u32],
    rng: &mut TaskRng,
) -> Result<(Vec<u32>, Vec<u32>)> {
    let (clustered, orphans): (Vec<u32>, Vec<u32>) =
        labels.iter().partition(|&&l| f.get(l).is_some());

    let (mut left, mut right) = if clustered.len() >= 2 {
        let vecs: Vec<&SparseVector> = clustered
            .iter()
            .map(|&l| f.get(l).expect("partitioned"))
            .collect();
        let (l, r) = split_refs(&vecs, rng)?;
        (
            l.into_iter().map(|i| clustered[i]).collect::<Vec<_>>(),
            r.into_iter().map(|i| clustered[i]).collect::<Vec<_>>(),
        )
    } else {
        (clustered, Vec::new())
    };

    let target_left = labels.len().div_ceil(2);
    let to_left = target_left - left.len();
    left.extend_from_slice(&orphans[..to_left]);
    right.extend_from_slice(&orphans[to_left..]);
    left.sort_unstable();
    right.sort_unstable();
    Ok((left, right))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_dataset, memory_origin};
    use proptest::prelude::*;

    fn unit(dim: usize, pairs: &[(u32, f64)]) -> SparseVector {
        unit_normalize(&SparseVector::from_pairs(dim, pairs.to_vec()).unwrap()).unwrap()
    }

    /// Summed best-centroid cosine objective of a balanced partition, with each
    /// side's centroid the normalized mean of its members.
    fn partition_objective(vs: &[SparseVector], left: &[usize]) -> f64 {
        let right: Vec<usize> = (0..vs.len()).filter(|i| !left.contains(i)).collect();
        let mut total = 0.0;
        for side in [left.to_vec(), right] {
            let mut c = vec![0.0; vs[0].dim()];
            for &i in &side {
                for (f, v) in vs[i].iter() {
                    c[f as usize] += v;
                }
            }
            let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            for &i in &side {
                total += vs[i].dot_dense(&c) / n;
            }
        }
        total
    }

    #[test]
    fn label_features_examples() {
        let d = parse_dataset("1 2 6\n5 0:3 1:4\n", &memory_origin()).unwrap();
        let f = build_label_features(&d);
        let v = f.get(5).unwrap();
        assert!((v.get(0) - 0.6).abs() < 1e-12 && (v.get(1) - 0.8).abs() < 1e-12);
        assert_eq!(f.orphans(), &[0, 1, 2, 3, 4]);

        let d = parse_dataset("2 2 1\n0:0.5 0:1\n0:0.5 1:1\n", &memory_origin()).unwrap();
        let f = build_label_features(&d);
        let v = f.get(0).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!((v.get(0) - h).abs() < 1e-12 && (v.get(1) - h).abs() < 1e-12);
        assert!(f.orphans().is_empty());
    }

    #[test]
    fn two_vectors_split_one_each() {
        let vs = vec![unit(3, &[(0, 1.0)]), unit(3, &[(0, 1.0), (1, 0.01)])];
        for seed in 0..10 {
            let (l, r) = balanced_2means(&vs, seed).unwrap();
            assert_eq!((l.len(), r.len()), (1, 1));
        }
    }

    #[test]
    fn separable_pairs_stay_together() {
        let vs = vec![
            unit(2, &[(0, 1.0)]),
            unit(2, &[(1, 1.0)]),
            unit(2, &[(0, 1.0)]),
            unit(2, &[(1, 1.0)]),
        ];
        // Oracle: enumerate every balanced 2/2 partition.
        let mut best = (f64::NEG_INFINITY, vec![]);
        for a in 0..4 {
            for b in a + 1..4 {
                let obj = partition_objective(&vs, &[a, b]);
                if obj > best.0 + 1e-12 {
                    best = (obj, vec![a, b]);
                }
            }
        }
        assert_eq!(best.1, vec![0, 2]);
        for seed in 0..20 {
            let (l, r) = balanced_2means(&vs, seed).unwrap();
            let mut groups = [l, r];
            groups.sort();
            assert_eq!(groups, [vec![0, 2], vec![1, 3]], "seed {seed}");
        }
    }

    #[test]
    fn identical_vectors_split_by_index() {
        let vs = vec![unit(2, &[(0, 1.0), (1, 1.0)]); 5];
        let (l, r) = balanced_2means(&vs, 3).unwrap();
        assert_eq!(l, vec![0, 1, 2]);
        assert_eq!(r, vec![3, 4]);
    }

    #[test]
    fn too_few_vectors() {
        assert!(balanced_2means(&[unit(2, &[(0, 1.0)])], 0).unwrap_err().is_usage());
    }

    fn matrix(vs: Vec<Option<SparseVector>>) -> LabelFeatureMatrix {
        let dim = vs.iter().flatten().next().map(|v| v.dim()).unwrap_or(1);
        LabelFeatureMatrix::from_vectors(dim, vs).unwrap()
    }

    #[test]
    fn small_label_set_is_single_leaf() {
        let f = matrix((0..3).map(|i| Some(unit(3, &[(i, 1.0)]))).collect());
        let t = grow_tree(&f, 100, 1).unwrap();
        assert_eq!(t.num_nodes(), 1);
        assert_eq!(t.root().labels, vec![0, 1, 2]);
    }

    #[test]
    fn orthogonal_pairs_depth_two() {
        let f = matrix(vec![
            Some(unit(2, &[(0, 1.0)])),
            Some(unit(2, &[(1, 1.0)])),
            Some(unit(2, &[(0, 1.0)])),
            Some(unit(2, &[(1, 1.0)])),
        ]);
        let t = grow_tree(&f, 1, 9).unwrap();
        assert_eq!(t.num_nodes(), 7);
        assert_eq!(t.depth(), 2);
        let root_children = t.root().children.unwrap();
        let mut groups: Vec<Vec<u32>> = root_children.iter().map(|&c| t.subtree_labels(c)).collect();
        groups.sort();
        assert_eq!(groups, vec![vec![0, 2], vec![1, 3]]);
    }

    #[test]
    fn five_labels_leaf_two() {
        let f = matrix((0..5).map(|i| Some(unit(6, &[(i + 1, 1.0), (0, 0.3)]))).collect());
        let t = grow_tree(&f, 2, 4).unwrap();
        let mut sizes: Vec<usize> = t.leaves().map(|l| l.labels.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![1, 2, 2]);
        check_invariants(&t, 2);
    }

    #[test]
    fn orphans_are_placed() {
        let mut vs: Vec<Option<SparseVector>> = (0..7).map(|i| Some(unit(7, &[(i, 1.0)]))).collect();
        vs.extend((0..5).map(|_| None));
        let f = matrix(vs);
        assert_eq!(f.orphans(), &[7, 8, 9, 10, 11]);
        let t = grow_tree(&f, 3, 0).unwrap();
        check_invariants(&t, 3);

        let f = matrix(vec![None, None, None]);
        let t = grow_tree(&f, 1, 0).unwrap();
        check_invariants(&t, 1);
    }

    fn check_invariants(t: &TreeTopology, max_leaf: usize) {
        let mut all: Vec<u32> = t.leaves().flat_map(|l| l.labels.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..t.num_labels() as u32).collect::<Vec<_>>());
        for leaf in t.leaves() {
            assert!(leaf.labels.len() <= max_leaf && !leaf.labels.is_empty());
        }
        for n in t.nodes() {
            if let Some([a, b]) = n.children {
                let diff = t.subtree_labels(a).len() as i64 - t.subtree_labels(b).len() as i64;
                assert!((-1..=1).contains(&diff));
            }
        }
        let leaves_needed = t.num_labels().div_ceil(max_leaf);
        let bound = (leaves_needed as f64).log2().ceil() as usize + 1;
        assert!(t.depth() <= bound, "depth {} > {bound}", t.depth());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn grown_trees_are_balanced_and_deterministic(
            raw in proptest::collection::vec(
                proptest::option::weighted(0.85, proptest::collection::btree_map(0u32..12, 0.1f64..1.0, 1..4)),
                1..60,
            ),
            max_leaf in 1usize..8,
            seed in any::<u64>(),
        ) {
            let vs: Vec<Option<SparseVector>> = raw
                .into_iter()
                .map(|o| o.map(|m| unit(12, &m.into_iter().collect::<Vec<_>>())))
                .collect();
            let f = LabelFeatureMatrix::from_vectors(12, vs).unwrap();
            let t = grow_tree(&f, max_leaf, seed).unwrap();
            check_invariants(&t, max_leaf);
            prop_assert_eq!(&t, &grow_tree(&f, max_leaf, seed).unwrap());
        }
    }
}
