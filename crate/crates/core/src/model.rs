//! The trained ensemble and its binary file format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "XREGMDL\0" | version u32 | header | tree blocks | tail section | crc32 u32
//! ```
//!
//! The CRC covers every preceding byte. Weights are stored as f32 with u32
//! indices; everything else that influences predictions is f64.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::rng::RNG_NAME;
use crate::solver::{LinearRegressor, SolverParams};
use crate::sparse::SparseVector;
use crate::tail::TailClassifier;
use crate::tree::{TreeNode, TreeTopology};

const MAGIC: &[u8; 8] = b"XREGMDL\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub trees: usize,
    pub max_leaf: usize,
    pub solver: SolverParams,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            trees: 3,
            max_leaf: 100,
            solver: SolverParams::default(),
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 {
            return Err(Error::invalid("number of trees must be at least 1"));
        }
        if self.max_leaf == 0 {
            return Err(Error::invalid("max leaf labels must be at least 1"));
        }
        let s = &self.solver;
        if !(s.c > 0.0 && s.c.is_finite()) {
            return Err(Error::invalid(format!("C must be positive, got {}", s.c)));
        }
        if s.tol.is_nan() || s.tol <= 0.0 {
            return Err(Error::invalid(format!("tolerance must be positive, got {}", s.tol)));
        }
        if s.max_iter == 0 {
            return Err(Error::invalid("solver iterations must be at least 1"));
        }
        if s.prune.is_nan() || s.prune < 0.0 {
            return Err(Error::invalid("prune threshold must be non-negative"));
        }
        Ok(())
    }
}

/// One label tree with its edge and label regressors.
#[derive(Clone, Debug, PartialEq)]
pub struct TreeModel {
    pub topology: TreeTopology,
    /// `edges[n]` scores descending from `n`'s parent into `n`; the root has none.
    pub edges: Vec<Option<LinearRegressor>>,
    /// Per leaf, one regressor per resident label in `labels` order; empty for
    /// internal nodes.
    pub label_regressors: Vec<Vec<LinearRegressor>>,
    /// Fraction of training points with non-zero relevance in each subtree.
    pub frac: Vec<f64>,
}

impl TreeModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.topology.num_nodes();
        if self.edges.len() != n || self.label_regressors.len() != n || self.frac.len() != n {
            return Err(Error::Model("per-node tables do not match node count".into()));
        }
        for node in self.topology.nodes() {
            if node.parent.is_some() != self.edges[node.id].is_some() {
                return Err(Error::Model(format!("node {} edge regressor mismatch", node.id)));
            }
            if self.label_regressors[node.id].len() != node.labels.len() {
                return Err(Error::Model(format!("leaf {} regressor count mismatch", node.id)));
            }
            let f = self.frac[node.id];
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Model(format!("frac {f} out of range at node {}", node.id)));
            }
            if let Some(p) = node.parent {
                if f > self.frac[p] {
                    return Err(Error::Model(format!("frac rises below node {p}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XRegModel {
    /// Raw feature dimension `D`; regressors live in `D + 1` with a bias at index `D`.
    pub num_features: usize,
    pub num_labels: usize,
    /// Relevances were divided by this before training; predictions are multiplied back.
    pub y_max: f64,
    pub hyper: Hyperparams,
    pub trees: Vec<TreeModel>,
    pub tail: Option<TailClassifier>,
}

impl XRegModel {
    pub fn model_dim(&self) -> usize {
        self.num_features + 1
    }

    /// Maps a raw test vector into the model's feature space: features at or
    /// past `D` are dropped (their count is returned) and the bias appended.
    pub fn prepare(&self, x: &SparseVector) -> (SparseVector, usize) {
        let (x, dropped) = x.with_dim(self.num_features);
        (x.with_appended(1.0), dropped)
    }

    /// Prepares a batch, logging once if any input exceeded the model dimension.
    pub fn prepare_all(&self, xs: &[SparseVector]) -> Vec<SparseVector> {
        let mut dropped = 0;
        let out = xs
            .iter()
            .map(|x| {
                let (p, d) = self.prepare(x);
                dropped += d;
                p
            })
            .collect();
        if dropped > 0 {
            log::warn!(
                "event=dimension_warning dropped_features={dropped} model_D={}",
                self.num_features
            );
        }
        out
    }

    pub fn num_nodes(&self) -> usize {
        self.trees.iter().map(|t| t.topology.num_nodes()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.y_max > 0.0 && self.y_max.is_finite()) {
            return Err(Error::Model(format!("y_max must be positive, got {}", self.y_max)));
        }
        if self.trees.is_empty() {
            return Err(Error::Model("model has no trees".into()));
        }
        for t in &self.trees {
            if t.topology.num_labels() != self.num_labels {
                return Err(Error::Model("tree label count differs from model".into()));
            }
            t.validate()?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        encode(self, &mut out).expect("writing to a Vec cannot fail");
        let crc = crc32fast::hash(&out);
        out.write_u32::<LE>(crc).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::Model("file truncated".into()));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Model("not an xreg model (bad magic)".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Model("checksum mismatch (corrupt or truncated file)".into()));
        }
        let mut cur = Cursor::new(&body[MAGIC.len()..]);
        let model = decode(&mut cur).map_err(|e| match e {
            DecodeError::Io => Error::Model("file truncated".into()),
            DecodeError::Bad(m) => Error::Model(m),
        })?;
        if (cur.position() as usize) != body.len() - MAGIC.len() {
            return Err(Error::Model("trailing bytes after model".into()));
        }
        model.validate()?;
        Ok(model)
    }
}

pub fn save_model(m: &XRegModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<XRegModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    XRegModel::from_bytes(&bytes).map_err(|e| match e {
        Error::Model(m) => Error::Model(format!("{}: {m}", path.display())),
        other => other,
    })
}

type W = Vec<u8>;

fn encode(m: &XRegModel, out: &mut W) -> std::io::Result<()> {
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION)?;

    out.write_u64::<LE>(m.num_features as u64)?;
    out.write_u64::<LE>(m.num_labels as u64)?;
    out.write_u8(1)?; // bias feature appended at index D
    out.write_f64::<LE>(m.y_max)?;
    let h = &m.hyper;
    out.write_u32::<LE>(h.trees as u32)?;
    out.write_u32::<LE>(h.max_leaf as u32)?;
    out.write_f64::<LE>(h.solver.c)?;
    out.write_f64::<LE>(h.solver.tol)?;
    out.write_u32::<LE>(h.solver.max_iter as u32)?;
    out.write_f64::<LE>(h.solver.prune)?;
    out.write_u64::<LE>(h.seed)?;
    write_str(out, RNG_NAME)?;

    out.write_u32::<LE>(m.trees.len() as u32)?;
    for t in &m.trees {
        encode_tree(t, out)?;
    }

    match &m.tail {
        None => out.write_u8(0)?,
        Some(tail) => {
            out.write_u8(1)?;
            out.write_u64::<LE>(tail.dim() as u64)?;
            out.write_u32::<LE>(tail.num_labels() as u32)?;
            for l in 0..tail.num_labels() as u32 {
                out.write_u64::<LE>(tail.count(l))?;
                match tail.centroid(l) {
                    None => out.write_u32::<LE>(u32::MAX)?,
                    Some(c) => {
                        out.write_u32::<LE>(c.nnz() as u32)?;
                        for (i, v) in c.iter() {
                            out.write_u32::<LE>(i)?;
                            out.write_f64::<LE>(v)?;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn encode_tree(t: &TreeModel, out: &mut W) -> std::io::Result<()> {
    let nodes = t.topology.nodes();
    out.write_u32::<LE>(nodes.len() as u32)?;
    out.write_u8(1)?; // visit fractions present
    for n in nodes {
        match n.children {
            Some([a, b]) => {
                out.write_u8(1)?;
                out.write_u32::<LE>(a as u32)?;
                out.write_u32::<LE>(b as u32)?;
            }
            None => {
                out.write_u8(0)?;
                out.write_u32::<LE>(n.labels.len() as u32)?;
                for &l in &n.labels {
                    out.write_u32::<LE>(l)?;
                }
            }
        }
        out.write_f64::<LE>(t.frac[n.id])?;
        if let Some(r) = &t.edges[n.id] {
            write_regressor(r, out)?;
        }
        for r in &t.label_regressors[n.id] {
            write_regressor(r, out)?;
        }
    }
    Ok(())
}

fn write_regressor(r: &LinearRegressor, out: &mut W) -> std::io::Result<()> {
    out.write_u32::<LE>(r.nnz() as u32)?;
    for &i in r.indices() {
        out.write_u32::<LE>(i)?;
    }
    for &w in r.weights() {
        out.write_f32::<LE>(w)?;
    }
    Ok(())
}

fn write_str(out: &mut W, s: &str) -> std::io::Result<()> {
    out.write_u16::<LE>(s.len() as u16)?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

enum DecodeError {
    Io,
    Bad(String),
}

impl From<std::io::Error> for DecodeError {
    fn from(_: std::io::Error) -> Self {
        DecodeError::Io
    }
}

type Cur<'a> = Cursor<&'a [u8]>;

fn bad<T>(msg: impl Into<String>) -> std::result::Result<T, DecodeError> {
    Err(DecodeError::Bad(msg.into()))
}

fn decode(cur: &mut Cur) -> std::result::Result<XRegModel, DecodeError> {
    let version = cur.read_u32::<LE>()?;
    if version != VERSION {
        return bad(format!("unsupported format version {version} (expected {VERSION})"));
    }
    let num_features = cur.read_u64::<LE>()? as usize;
    let num_labels = cur.read_u64::<LE>()? as usize;
    if cur.read_u8()? != 1 {
        return bad("models without a bias feature are not supported");
    }
    let y_max = cur.read_f64::<LE>()?;
    let trees = cur.read_u32::<LE>()? as usize;
    let max_leaf = cur.read_u32::<LE>()? as usize;
    let solver = SolverParams {
        c: cur.read_f64::<LE>()?,
        tol: cur.read_f64::<LE>()?,
        max_iter: cur.read_u32::<LE>()? as usize,
        prune: cur.read_f64::<LE>()?,
    };
    let seed = cur.read_u64::<LE>()?;
    let rng = read_str(cur)?;
    if rng != RNG_NAME {
        return bad(format!("model built with RNG {rng:?}, this build uses {RNG_NAME:?}"));
    }

    let dim = num_features + 1;
    let num_trees = cur.read_u32::<LE>()? as usize;
    if num_trees != trees {
        return bad("tree count disagrees with header");
    }
    let mut tree_models = Vec::with_capacity(num_trees);
    for _ in 0..num_trees {
        tree_models.push(decode_tree(cur, dim, num_labels)?);
    }

    let tail = match cur.read_u8()? {
        0 => None,
        1 => {
            let tail_dim = cur.read_u64::<LE>()? as usize;
            let n = cur.read_u32::<LE>()? as usize;
            if n != num_labels {
                return bad("tail section label count mismatch");
            }
            let mut centroids = Vec::with_capacity(n);
            let mut counts = Vec::with_capacity(n);
            for _ in 0..n {
                counts.push(cur.read_u64::<LE>()?);
                let nnz = cur.read_u32::<LE>()?;
                if nnz == u32::MAX {
                    centroids.push(None);
                    continue;
                }
                let mut idx = Vec::with_capacity(nnz as usize);
                let mut val = Vec::with_capacity(nnz as usize);
                for _ in 0..nnz {
                    idx.push(cur.read_u32::<LE>()?);
                    val.push(cur.read_f64::<LE>()?);
                }
                let v = SparseVector::new(tail_dim, idx, val)
                    .or_else(|e| bad(format!("tail centroid: {e}")))?;
                centroids.push(Some(v));
            }
            Some(TailClassifier::from_parts(tail_dim, centroids, counts))
        }
        t => return bad(format!("unknown tail section tag {t}")),
    };

    Ok(XRegModel {
        num_features,
        num_labels,
        y_max,
        hyper: Hyperparams {
            trees,
            max_leaf,
            solver,
            seed,
        },
        trees: tree_models,
        tail,
    })
}

fn decode_tree(
    cur: &mut Cur,
    dim: usize,
    num_labels: usize,
) -> std::result::Result<TreeModel, DecodeError> {
    let n = cur.read_u32::<LE>()? as usize;
    if n == 0 {
        return bad("tree with no nodes");
    }
    if cur.read_u8()? != 1 {
        return bad("model lacks per-node visit fractions; retrain it with this version");
    }
    let mut nodes: Vec<TreeNode> = (0..n)
        .map(|id| TreeNode {
            id,
            parent: None,
            children: None,
            depth: 0,
            labels: Vec::new(),
        })
        .collect();
    let mut edges = vec![None; n];
    let mut label_regressors = vec![Vec::new(); n];
    let mut frac = vec![0.0; n];

    for id in 0..n {
        match cur.read_u8()? {
            1 => {
                let a = cur.read_u32::<LE>()? as usize;
                let b = cur.read_u32::<LE>()? as usize;
                if a <= id || b <= id || a >= n || b >= n || a == b {
                    return bad(format!("node {id} has invalid children"));
                }
                if nodes[a].parent.is_some() || nodes[b].parent.is_some() {
                    return bad(format!("node {a} or {b} has two parents"));
                }
                let depth = nodes[id].depth + 1;
                for c in [a, b] {
                    nodes[c].parent = Some(id);
                    nodes[c].depth = depth;
                }
                nodes[id].children = Some([a, b]);
            }
            0 => {
                let count = cur.read_u32::<LE>()? as usize;
                if count > num_labels {
                    return bad(format!("leaf {id} claims {count} labels"));
                }
                let mut labels = Vec::with_capacity(count);
                for _ in 0..count {
                    labels.push(cur.read_u32::<LE>()?);
                }
                nodes[id].labels = labels;
            }
            t => return bad(format!("unknown node tag {t}")),
        }
        if id > 0 && nodes[id].parent.is_none() {
            return bad(format!("node {id} is unreachable"));
        }
        frac[id] = cur.read_f64::<LE>()?;
        if id > 0 {
            edges[id] = Some(read_regressor(cur, dim)?);
        }
        label_regressors[id] = (0..nodes[id].labels.len())
            .map(|_| read_regressor(cur, dim))
            .collect::<std::result::Result<_, _>>()?;
    }

    let topology =
        TreeTopology::from_nodes(nodes, num_labels).or_else(|e| bad(e.to_string()))?;
    Ok(TreeModel {
        topology,
        edges,
        label_regressors,
        frac,
    })
}

fn read_regressor(cur: &mut Cur, dim: usize) -> std::result::Result<LinearRegressor, DecodeError> {
    let nnz = cur.read_u32::<LE>()? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if nnz.saturating_mul(8) > remaining {
        return bad("regressor larger than the remaining file");
    }
    let mut idx = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        idx.push(cur.read_u32::<LE>()?);
    }
    if idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&i| i as usize >= dim) {
        return bad("regressor indices unsorted or out of range");
    }
    let mut w = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        w.push(cur.read_f32::<LE>()?);
    }
    Ok(LinearRegressor::from_parts(dim, idx, w))
}

fn read_str(cur: &mut Cur) -> std::result::Result<String, DecodeError> {
    let len = cur.read_u16::<LE>()? as usize;
    let mut buf = vec![0; len];
    cur.read_exact(&mut buf)?;
    String::from_utf8(buf).or_else(|_| bad("non-UTF-8 string in header"))
}
