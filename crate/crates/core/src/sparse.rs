//! Sorted sparse vectors and the handful of kernels everything else is built on.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// A sparse vector over `dim` coordinates, stored as strictly increasing
/// indices with finite, non-zero values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVector {
    dim: usize,
    indices: Vec<u32>,
    values: Vec<f64>,
}

/// Relevance rows share the sparse-vector representation over the label space.
pub type RelevanceRow = SparseVector;

impl SparseVector {
    /// Builds a vector from already-sorted parallel arrays, validating every invariant.
    pub fn new(dim: usize, indices: Vec<u32>, values: Vec<f64>) -> Result<Self> {
        if indices.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} indices but {} values",
                indices.len(),
                values.len()
            )));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid(format!(
                    "indices not strictly increasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = indices.last() {
            if last as usize >= dim {
                return Err(Error::invalid(format!("index {last} >= dim {dim}")));
            }
        }
        for &v in &values {
            if !v.is_finite() {
                return Err(Error::invalid(format!("non-finite value {v}")));
            }
            if v == 0.0 {
                return Err(Error::invalid("explicit zero entry"));
            }
        }
        Ok(SparseVector {
            dim,
            indices,
            values,
        })
    }

    /// Builds a vector from unordered `(index, value)` pairs. Zero values are
    /// dropped; duplicate indices are rejected.
    pub fn from_pairs(dim: usize, mut pairs: Vec<(u32, f64)>) -> Result<Self> {
        pairs.retain(|&(_, v)| v != 0.0);
        pairs.sort_unstable_by_key(|&(i, _)| i);
        let (indices, values) = pairs.into_iter().unzip();
        Self::new(dim, indices, values)
    }

    pub fn zeros(dim: usize) -> Self {
        SparseVector {
            dim,
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds from a dense slice, keeping the non-zero entries.
    pub fn from_dense(dense: &[f64]) -> Result<Self> {
        let pairs = dense
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i as u32, v))
            .collect();
        Self::from_pairs(dense.len(), pairs)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    /// Value at `index`, zero when absent.
    pub fn get(&self, index: u32) -> f64 {
        match self.indices.binary_search(&index) {
            Ok(pos) => self.values[pos],
            Err(_) => 0.0,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_value(&self) -> Option<f64> {
        self.values.iter().copied().reduce(f64::max)
    }

    /// Returns a copy with every value multiplied by `factor`. Entries that
    /// underflow to zero are dropped.
    pub fn scaled(&self, factor: f64) -> SparseVector {
        let (indices, values) = self
            .iter()
            .map(|(i, v)| (i, v * factor))
            .filter(|&(_, v)| v != 0.0)
            .unzip();
        SparseVector {
            dim: self.dim,
            indices,
            values,
        }
    }

    /// Same entries viewed in a different dimensionality. Entries at or beyond
    /// the new bound are dropped; the number dropped is returned alongside.
    pub fn with_dim(&self, dim: usize) -> (SparseVector, usize) {
        let keep = self.indices.partition_point(|&i| (i as usize) < dim);
        (
            SparseVector {
                dim,
                indices: self.indices[..keep].to_vec(),
                values: self.values[..keep].to_vec(),
            },
            self.indices.len() - keep,
        )
    }

    /// Appends a trailing coordinate (index `dim`) holding `value`, growing the
    /// dimension by one.
    pub fn with_appended(&self, value: f64) -> SparseVector {
        let mut out = self.clone();
        if value != 0.0 {
            out.indices.push(self.dim as u32);
            out.values.push(value);
        }
        out.dim += 1;
        out
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.dim];
        for (i, v) in self.iter() {
            dense[i as usize] = v;
        }
        dense
    }

    /// Inner product with a dense vector. Indices past the end of `dense` are ignored.
    #[inline]
    pub fn dot_dense(&self, dense: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, v) in self.iter() {
            if let Some(d) = dense.get(i as usize) {
                acc += v * d;
            }
        }
        acc
    }
}

/// Exact sparse inner product by merging the two sorted index lists.
pub fn dot(a: &SparseVector, b: &SparseVector) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch {
            left: a.dim,
            right: b.dim,
        });
    }
    Ok(merge_dot(&a.indices, &a.values, &b.indices, &b.values))
}

/// Inner product ignoring the declared dimensions.
#[inline]
pub(crate) fn merge_dot_parts(a: &SparseVector, b: &SparseVector) -> f64 {
    merge_dot(&a.indices, &a.values, &b.indices, &b.values)
}

#[inline]
pub(crate) fn merge_dot(ai: &[u32], av: &[f64], bi: &[u32], bv: &[f64]) -> f64 {
    let (mut p, mut q) = (0, 0);
    let mut acc = 0.0;
    while p < ai.len() && q < bi.len() {
        match ai[p].cmp(&bi[q]) {
            Ordering::Less => p += 1,
            Ordering::Greater => q += 1,
            Ordering::Equal => {
                acc += av[p] * bv[q];
                p += 1;
                q += 1;
            }
        }
    }
    acc
}

/// Scales `v` to unit L2 norm, keeping its support.
pub fn unit_normalize(v: &SparseVector) -> Result<SparseVector> {
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate(format!(
            "cannot normalize vector with norm {norm}"
        )));
    }
    Ok(SparseVector {
        dim: v.dim,
        indices: v.indices.clone(),
        values: v.values.iter().map(|x| x / norm).collect(),
    })
}

/// Descending by score, ties to the lower index.
#[inline]
pub fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `k` highest-scoring entries in rank order (see [`rank_order`]).
pub fn top_k_entries(scores: &[(u32, f64)], k: usize) -> Vec<(u32, f64)> {
    let mut buf = scores.to_vec();
    if k == 0 {
        return Vec::new();
    }
    if buf.len() > k {
        buf.select_nth_unstable_by(k - 1, rank_order);
        buf.truncate(k);
    }
    buf.sort_unstable_by(rank_order);
    buf
}

/// Ordered indices of the `k` highest scores; ties resolve to the lower index.
pub fn top_k(scores: &[(u32, f64)], k: usize) -> Result<Vec<u32>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(top_k_entries(scores, k).into_iter().map(|(i, _)| i).collect())
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(t)`, stable for large |t|.
#[inline]
pub fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}
