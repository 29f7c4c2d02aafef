//! Properties of models trained on synthetic topic-clustered corpora.

mod common;

use std::collections::{BTreeSet, HashMap};

use xreg::data::{Orientation, PredictionFile, RelevanceDataset};
use xreg::labelwise::{predict_labelwise, route};
use xreg::metrics::{Evaluation, Metric, PropensityModel};
use xreg::model::{Hyperparams, XRegModel};
use xreg::pointwise::{predict_all_exact, predict_pointwise};
use xreg::tail::rerank_scaled;
use xreg::train::{compute_node_weights, normalize_relevances, train};
use xreg::tree::{build_label_features, grow_tree};

use common::{synthetic, Synth};

fn fixture(seed: u64) -> (RelevanceDataset, RelevanceDataset, XRegModel) {
    let tr = synthetic(Synth::small(seed));
    let te = synthetic(Synth {
        points: 150,
        ..Synth::small(seed + 1000)
    });
    let hp = Hyperparams {
        max_leaf: 4,
        seed,
        ..Hyperparams::default()
    };
    let m = train(&tr, &hp).unwrap();
    (tr, te, m)
}

fn metric(te: &RelevanceDataset, p: &PredictionFile, prop: Option<&PropensityModel>, m: Metric, k: usize) -> f64 {
    Evaluation::new(te.relevances(), te.num_labels(), p, Orientation::Pointwise, prop)
        .unwrap()
        .compute(m, k, &mut Vec::new())
        .unwrap()
}

#[test]
fn path_weights_shrink_with_depth() {
    let d = synthetic(Synth::small(1));
    let (norm, _) = normalize_relevances(&d).unwrap();
    let topo = grow_tree(&build_label_features(&norm), 3, 9).unwrap();
    let sets = compute_node_weights(&norm, &topo);
    let weight: Vec<HashMap<u32, f64>> = sets
        .iter()
        .map(|s| s.members.iter().map(|m| (m.point, m.s)).collect())
        .collect();
    let mut checked = 0;
    for node in topo.nodes() {
        let Some(parent) = node.parent else { continue };
        for (point, s) in &weight[node.id] {
            let above = weight[parent].get(point).copied().unwrap_or(1.0);
            assert!(*s <= above + 1e-12, "node {} point {point}: {s} > {above}", node.id);
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn visit_fraction_shrinks_down_the_tree() {
    let (_, _, m) = fixture(2);
    for tree in &m.trees {
        let root = tree.topology.root().id;
        assert!(tree.frac[root] > 0.9 && tree.frac[root] <= 1.0);
        for node in tree.topology.nodes() {
            if let Some(p) = node.parent {
                assert!(tree.frac[node.id] <= tree.frac[p]);
            }
        }
    }
}

#[test]
fn predictions_stay_on_relevance_scale() {
    let unit = synthetic(Synth::small(3));
    let peak = unit.relevances().iter().filter_map(|r| r.max_value()).fold(0.0, f64::max);
    let scaled: Vec<_> = unit.relevances().iter().map(|r| r.scaled(5.0)).collect();
    let big = RelevanceDataset::new(unit.num_features(), unit.num_labels(), unit.features().to_vec(), scaled).unwrap();
    let hp = Hyperparams { max_leaf: 4, ..Hyperparams::default() };
    let (small_m, big_m) = (train(&unit, &hp).unwrap(), train(&big, &hp).unwrap());
    assert!((big_m.y_max - 5.0 * peak).abs() < 1e-12);
    let mut top: f64 = 0.0;
    for x in big.features() {
        let s = predict_all_exact(&big_m, x, false).unwrap();
        let r = predict_all_exact(&small_m, x, false).unwrap();
        for (a, b) in s.iter().zip(&r) {
            assert!((a - 5.0 * b).abs() <= 1e-9 * a.abs().max(1e-12), "{a} vs 5·{b}");
        }
        top = top.max(s.iter().copied().fold(0.0, f64::max));
    }
    assert!(top <= big_m.y_max * (1.0 + 1e-12));
}

#[test]
fn wider_beams_never_lose_precision() {
    let (_, te, m) = fixture(4);
    let wp: Vec<f64> = [1, 2, 5, 10, 20]
        .iter()
        .map(|&p| metric(&te, &predict_pointwise(&m, te.features(), p, 5).unwrap(), None, Metric::Wp, 5))
        .collect();
    for w in wp.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "WP@5 by beam {wp:?}");
    }
}

#[test]
fn routing_respects_capacity_and_parents() {
    let (_, te, m) = fixture(5);
    let xs = m.prepare_all(te.features());
    for factor in [0.5, 1.0, 4.0] {
        for tree in &m.trees {
            let allot = route(tree, &xs, factor);
            for node in tree.topology.nodes() {
                let a = &allot[node.id];
                assert!(a.retained.len() <= a.capacity);
                let Some(p) = node.parent else { continue };
                let parent: HashMap<u32, f64> = allot[p].retained.iter().copied().collect();
                for (i, lp) in &a.retained {
                    let up = parent.get(i).expect("child point came through parent");
                    assert!(lp <= up);
                }
            }
        }
    }
}

fn pairs(p: &PredictionFile) -> BTreeSet<(usize, u32)> {
    p.rows
        .iter()
        .enumerate()
        .flat_map(|(l, r)| r.iter().map(move |e| (l, e.0)))
        .collect()
}

#[test]
fn labelwise_approaches_exact_as_factor_grows() {
    let (_, te, m) = fixture(6);
    let per_label = 10;
    let exact: Vec<Vec<f64>> = te.features().iter().map(|x| predict_all_exact(&m, x, false).unwrap()).collect();
    let exact_rows: Vec<Vec<(u32, f64)>> = (0..m.num_labels)
        .map(|l| {
            let col: Vec<(u32, f64)> = exact.iter().enumerate().map(|(i, r)| (i as u32, r[l])).collect();
            xreg::sparse::top_k_entries(&col, per_label)
        })
        .collect();
    let want = pairs(&PredictionFile::new(te.num_points(), exact_rows));
    let diffs: Vec<usize> = [0.5, 1.0, 2.0, 4.0, 16.0, 1e9]
        .iter()
        .map(|&f| {
            let got = pairs(&predict_labelwise(&m, te.features(), f, per_label).unwrap());
            got.symmetric_difference(&want).count()
        })
        .collect();
    // Not step-wise monotone: a point newly routed through only some trees
    // can displace a correct one. Wider routing never does worse than the
    // narrowest, and saturating it is exact.
    assert!(diffs.iter().all(|&d| d <= diffs[0]), "{diffs:?}");
    assert!(diffs[0] > 0);
    assert_eq!(diffs[diffs.len() - 1], 0, "{diffs:?}");
    assert_eq!(diffs[diffs.len() - 2], 0, "{diffs:?}");
}

#[test]
fn labelwise_covers_at_least_as_many_labels() {
    let (_, te, m) = fixture(7);
    let point = predict_pointwise(&m, te.features(), 10, 5).unwrap();
    let pointwise: BTreeSet<u32> = point.rows.iter().flatten().map(|e| e.0).collect();
    let label = predict_labelwise(&m, te.features(), 4.0, 10).unwrap();
    let labelwise = label.rows.iter().filter(|r| !r.is_empty()).count();
    assert!(labelwise >= pointwise.len(), "labelwise {labelwise} < pointwise {}", pointwise.len());
}

#[test]
fn tail_blend_trades_regression_error_for_rare_labels() {
    let (tr, te, m) = fixture(8);
    let raw = predict_pointwise(&m, te.features(), 10, 5).unwrap();
    let tail = m.tail.as_ref().unwrap();
    let rows = raw
        .rows
        .iter()
        .zip(te.features())
        .map(|(r, x)| {
            rerank_scaled(r, x, tail, 0.5, m.y_max)
                .unwrap()
                .into_iter()
                .map(|e| (e.label, e.blended))
                .collect()
        })
        .collect();
    let blended = PredictionFile::new(raw.num_cols, rows);
    let prop = PropensityModel::from_dataset(&tr, PropensityModel::DEFAULT_A, PropensityModel::DEFAULT_B).unwrap();
    let xmad = |p| metric(&te, p, None, Metric::Xmad, 5);
    let psp = |p| metric(&te, p, Some(&prop), Metric::Psp, 3);
    assert!(xmad(&blended) >= xmad(&raw), "XMAD {} < {}", xmad(&blended), xmad(&raw));
    assert!(psp(&blended) > psp(&raw), "PSP {} <= {}", psp(&blended), psp(&raw));
}
