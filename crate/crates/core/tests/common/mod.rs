#![allow(dead_code)]

use std::env;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xreg::data::{read_dataset, RelevanceDataset};
use xreg::sparse::SparseVector;

/// Shape of a synthetic topic-clustered corpus.
#[derive(Clone, Copy, Debug)]
pub struct Synth {
    pub points: usize,
    pub features: usize,
    pub labels: usize,
    pub topics: usize,
    pub seed: u64,
}

impl Synth {
    pub fn small(seed: u64) -> Self {
        Synth {
            points: 400,
            features: 60,
            labels: 40,
            topics: 6,
            seed,
        }
    }
}

/// Points draw a topic, features from that topic's block plus noise, and
/// labels from that topic with skewed popularity. A label's relevance rises
/// with the weight of its anchor feature, so it is learnable from `x`.
pub fn synthetic(s: Synth) -> RelevanceDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let block = (s.features / s.topics).max(1);
    let mut features = Vec::with_capacity(s.points);
    let mut relevances = Vec::with_capacity(s.points);
    for _ in 0..s.points {
        let topic = rng.gen_range(0..s.topics);
        let mut x: Vec<(u32, f64)> = Vec::new();
        for f in 0..block {
            if rng.gen_bool(0.7) {
                x.push(((topic * block + f) as u32, rng.gen_range(0.1..1.0)));
            }
        }
        for _ in 0..2 {
            x.push((rng.gen_range(0..s.features) as u32, rng.gen_range(0.0..0.3)));
        }
        x.sort_by_key(|e| e.0);
        x.dedup_by_key(|e| e.0);
        let xv = SparseVector::from_pairs(s.features, x).unwrap();

        let topic_labels: Vec<usize> = (0..s.labels).filter(|l| l % s.topics == topic).collect();
        let mut y: Vec<(u32, f64)> = Vec::new();
        for (rank, &l) in topic_labels.iter().enumerate() {
            let p = 0.8 / (1.0 + rank as f64);
            if rng.gen_bool(p.min(1.0)) {
                let anchor = (topic * block + rank % block) as u32;
                let signal = xv.get(anchor);
                let rel = (0.2 + 0.8 * signal + rng.gen_range(0.0..0.1)).min(1.0);
                y.push((l as u32, (rel * 100.0).round() / 100.0));
            }
        }
        relevances.push(SparseVector::from_pairs(s.labels, y).unwrap());
        features.push(xv);
    }
    RelevanceDataset::new(s.features, s.labels, features, relevances).unwrap()
}

/// Train and test splits of a public benchmark under `$XREG_DATA_DIR/<name>/`.
pub fn benchmark(name: &str) -> Result<(RelevanceDataset, RelevanceDataset), String> {
    let root = env::var_os("XREG_DATA_DIR")
        .map(PathBuf::from)
        .ok_or_else(|| format!("{name} unavailable: XREG_DATA_DIR is not set"))?;
    let dir = root.join(name);
    let load = |f: &str| {
        let p = dir.join(f);
        read_dataset(&p).map_err(|e| format!("{name} unavailable: {e}"))
    };
    Ok((load("train.txt")?, load("test.txt")?))
}
