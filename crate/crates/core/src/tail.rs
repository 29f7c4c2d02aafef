//! Generative tail scorer used to re-rank model predictions.
//!
//! Each label is represented by the unit centroid of the points it is
//! relevant to; a candidate's tail score is the (clipped) cosine between the
//! unit-normalized test point and that centroid.

use crate::error::{Error, Result};
use crate::sparse::{merge_dot_parts, rank_order, unit_normalize, SparseVector};
use crate::tree::LabelFeatureMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct TailClassifier {
    dim: usize,
    centroids: Vec<Option<SparseVector>>,
    counts: Vec<u64>,
}

/// A re-ranked candidate: the blended ranking score and the untouched model
/// estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reranked {
    pub label: u32,
    pub blended: f64,
    pub raw: f64,
}

impl TailClassifier {
    pub fn new(features: LabelFeatureMatrix, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != features.num_labels() {
            return Err(Error::DimensionMismatch {
                left: counts.len(),
                right: features.num_labels(),
            });
        }
        Ok(TailClassifier {
            dim: features.dim(),
            centroids: features.into_vectors(),
            counts,
        })
    }

    pub(crate) fn from_parts(
        dim: usize,
        centroids: Vec<Option<SparseVector>>,
        counts: Vec<u64>,
    ) -> Self {
        TailClassifier {
            dim,
            centroids,
            counts,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_labels(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroid(&self, label: u32) -> Option<&SparseVector> {
        self.centroids.get(label as usize).and_then(Option::as_ref)
    }

    pub fn count(&self, label: u32) -> u64 {
        self.counts[label as usize]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// `max(0, cos(x, v_l))`; zero for labels without a centroid.
    pub fn score(&self, unit_x: &SparseVector, label: u32) -> f64 {
        match self.centroid(label) {
            Some(c) => merge_dot_parts(unit_x, c).max(0.0),
            None => 0.0,
        }
    }
}

/// Re-scores `scores` as `alpha·ŷ + (1 − alpha)·max(0, cos(x, v_l))` and
/// re-sorts them. Only the given candidates are touched.
pub fn rerank(
    scores: &[(u32, f64)],
    x: &SparseVector,
    tail: &TailClassifier,
    alpha: f64,
) -> Result<Vec<Reranked>> {
    rerank_scaled(scores, x, tail, alpha, 1.0)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")))
    }
}

/// The unit-normalized point restricted to the tail's feature space.
pub fn unit_point(x: &SparseVector, tail: &TailClassifier) -> SparseVector {
    let (x, _) = x.with_dim(tail.dim());
    unit_normalize(&x).unwrap_or(x)
}

/// Like [`rerank`] for scores on a relevance scale whose maximum is `scale`:
/// the tail cosine is stretched to that scale before blending.
pub fn rerank_scaled(
    scores: &[(u32, f64)],
    x: &SparseVector,
    tail: &TailClassifier,
    alpha: f64,
    scale: f64,
) -> Result<Vec<Reranked>> {
    check_alpha(alpha)?;
    let unit = unit_point(x, tail);
    let mut out: Vec<Reranked> = scores
        .iter()
        .map(|&(label, raw)| Reranked {
            label,
            blended: alpha * raw + (1.0 - alpha) * scale * tail.score(&unit, label),
            raw,
        })
        .collect();
    out.sort_by(|a, b| rank_order(&(a.label, a.blended), &(b.label, b.blended)));
    Ok(out)
}

/// Re-ranks one label's list of test points. `unit_points` are the test
/// points passed through [`unit_point`]; `Reranked::label` holds the point index.
pub fn rerank_label(
    scores: &[(u32, f64)],
    label: u32,
    unit_points: &[SparseVector],
    tail: &TailClassifier,
    alpha: f64,
    scale: f64,
) -> Result<Vec<Reranked>> {
    check_alpha(alpha)?;
    let mut out: Vec<Reranked> = scores
        .iter()
        .map(|&(point, raw)| Reranked {
            label: point,
            blended: alpha * raw + (1.0 - alpha) * scale * tail.score(&unit_points[point as usize], label),
            raw,
        })
        .collect();
    out.sort_by(|a, b| rank_order(&(a.label, a.blended), &(b.label, b.blended)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, pairs: &[(u32, f64)]) -> SparseVector {
        unit_normalize(&SparseVector::from_pairs(dim, pairs.to_vec()).unwrap()).unwrap()
    }

    fn tail() -> TailClassifier {
        let vs = vec![
            Some(unit(3, &[(0, 1.0)])),
            Some(unit(3, &[(1, 1.0)])),
            Some(unit(3, &[(0, 1.0), (2, 1.0)])),
            None,
        ];
        TailClassifier::new(LabelFeatureMatrix::from_vectors(3, vs).unwrap(), vec![4, 1, 2, 0]).unwrap()
    }

    const SCORES: [(u32, f64); 4] = [(1, 0.9), (0, 0.5), (3, 0.4), (2, 0.1)];

    #[test]
    fn alpha_one_keeps_order() {
        let x = SparseVector::from_pairs(3, vec![(0, 2.0)]).unwrap();
        let out = rerank(&SCORES, &x, &tail(), 1.0).unwrap();
        let order: Vec<u32> = out.iter().map(|r| r.label).collect();
        assert_eq!(order, vec![1, 0, 3, 2]);
        assert!(out.iter().all(|r| r.blended == r.raw));
    }

    #[test]
    fn alpha_zero_orders_by_cosine() {
        let x = SparseVector::from_pairs(3, vec![(0, 2.0), (2, 0.5)]).unwrap();
        let out = rerank(&SCORES, &x, &tail(), 0.0).unwrap();
        let order: Vec<u32> = out.iter().map(|r| r.label).collect();
        // cos to label 0: 0.970, label 2: 0.857, labels 1 and 3: 0 (tie → index).
        assert_eq!(order, vec![0, 2, 1, 3]);
    }

    #[test]
    fn exact_centroid_match() {
        let x = SparseVector::from_pairs(3, vec![(0, 5.0), (2, 5.0)]).unwrap();
        let out = rerank(&SCORES, &x, &tail(), 0.5).unwrap();
        let r = out.iter().find(|r| r.label == 2).unwrap();
        assert!((r.blended - (0.5 * 0.1 + 0.5)).abs() < 1e-12);
        assert_eq!(r.raw, 0.1);
    }

    #[test]
    fn candidates_preserved_and_alpha_checked() {
        let x = SparseVector::from_pairs(5, vec![(1, 1.0), (4, 3.0)]).unwrap();
        let out = rerank(&SCORES, &x, &tail(), 0.3).unwrap();
        let mut labels: Vec<u32> = out.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3]);
        assert!(rerank(&SCORES, &x, &tail(), 1.5).unwrap_err().is_usage());
        assert!(rerank(&SCORES, &x, &tail(), -0.1).is_err());
    }

    #[test]
    fn scaled_blend_and_label_rows() {
        let x = SparseVector::from_pairs(3, vec![(0, 5.0), (2, 5.0)]).unwrap();
        let t = tail();
        let out = rerank_scaled(&[(2, 0.4)], &x, &t, 0.5, 4.0).unwrap();
        assert!((out[0].blended - (0.2 + 2.0)).abs() < 1e-12);
        let same = rerank_scaled(&SCORES, &x, &t, 1.0, 4.0).unwrap();
        assert!(same.iter().all(|r| r.blended == r.raw));

        let points = [
            unit_point(&SparseVector::from_pairs(3, vec![(1, 1.0)]).unwrap(), &t),
            unit_point(&x, &t),
        ];
        let row = rerank_label(&[(0, 0.5), (1, 0.4)], 2, &points, &t, 0.5, 1.0).unwrap();
        assert_eq!(row[0].label, 1);
        assert!((row[0].blended - 0.7).abs() < 1e-12);
    }

    #[test]
    fn blend_is_affine_in_alpha() {
        let x = SparseVector::from_pairs(3, vec![(0, 1.0), (1, 1.0)]).unwrap();
        let t = tail();
        let at = |a: f64| -> Vec<f64> {
            let mut v = rerank(&SCORES, &x, &t, a).unwrap();
            v.sort_by_key(|r| r.label);
            v.into_iter().map(|r| r.blended).collect()
        };
        let (lo, mid, hi) = (at(0.2), at(0.5), at(0.8));
        for i in 0..4 {
            assert!((mid[i] - 0.5 * (lo[i] + hi[i])).abs() < 1e-12);
        }
    }
}
