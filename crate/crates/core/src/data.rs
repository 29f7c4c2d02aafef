//! Text formats: relevance datasets, prediction files and score formatting.
//!
//! Dataset files start with a header line `N D L` followed by one line per
//! point: a comma-separated list of `label[:weight]` entries, a space, then
//! space-separated `feature:value` pairs. A point without labels starts its
//! line with a space. Label weights default to 1.0 when omitted.
//!
//! Prediction files start with `R C` and hold one row per line of
//! `index:score` pairs in descending score order.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sparse::{rank_order, RelevanceRow, SparseVector};

/// `N` points with sparse features over `D` dimensions and sparse
/// non-negative relevances over `L` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceDataset {
    num_features: usize,
    num_labels: usize,
    features: Vec<SparseVector>,
    relevances: Vec<RelevanceRow>,
}

impl RelevanceDataset {
    pub fn new(
        num_features: usize,
        num_labels: usize,
        features: Vec<SparseVector>,
        relevances: Vec<RelevanceRow>,
    ) -> Result<Self> {
        if features.len() != relevances.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} relevance rows",
                features.len(),
                relevances.len()
            )));
        }
        for (i, (x, y)) in features.iter().zip(&relevances).enumerate() {
            if x.dim() != num_features {
                return Err(Error::invalid(format!(
                    "row {i}: feature dim {} != D={num_features}",
                    x.dim()
                )));
            }
            if y.dim() != num_labels {
                return Err(Error::invalid(format!(
                    "row {i}: label dim {} != L={num_labels}",
                    y.dim()
                )));
            }
            if y.values().iter().any(|&v| v < 0.0) {
                return Err(Error::invalid(format!("row {i}: negative relevance")));
            }
        }
        Ok(RelevanceDataset {
            num_features,
            num_labels,
            features,
            relevances,
        })
    }

    pub fn num_points(&self) -> usize {
        self.features.len()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn features(&self) -> &[SparseVector] {
        &self.features
    }

    pub fn relevances(&self) -> &[RelevanceRow] {
        &self.relevances
    }

    pub fn row(&self, i: usize) -> (&SparseVector, &RelevanceRow) {
        (&self.features[i], &self.relevances[i])
    }

    /// Number of points with a non-zero relevance for each label.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels];
        for y in &self.relevances {
            for &l in y.indices() {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Feature rows with the constant bias coordinate appended (dimension D+1).
    pub fn biased_features(&self) -> Vec<SparseVector> {
        self.features.iter().map(|x| x.with_appended(1.0)).collect()
    }

    pub(crate) fn with_relevances(&self, relevances: Vec<RelevanceRow>) -> Self {
        RelevanceDataset {
            num_features: self.num_features,
            num_labels: self.num_labels,
            features: self.features.clone(),
            relevances,
        }
    }
}

/// Formats like C's `%g`: six significant digits, trailing zeros removed,
/// exponent form below 1e-4 or from 1e6 up.
pub fn format_score(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp) as usize;
        trim_fraction(&format!("{v:.decimals$}")).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Rounds to the precision [`format_score`] prints.
pub fn round_score(v: f64) -> f64 {
    format_score(v).parse().expect("formatted score parses")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<RelevanceDataset> {
    let path = path.as_ref();
    parse_dataset(&read_text(path)?, path)
}

/// Parses dataset text; `origin` is only used in error messages.
pub fn parse_dataset(text: &str, origin: &Path) -> Result<RelevanceDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(origin, 1, "empty file"))?;
    let dims = parse_header::<3>(header).ok_or_else(|| {
        parse_err(
            origin,
            1,
            format!("malformed header {header:?}, expected \"N D L\""),
        )
    })?;
    let [n, d, l] = dims;

    let mut features = Vec::with_capacity(n);
    let mut relevances = Vec::with_capacity(n);
    for (idx, line) in lines {
        let lineno = idx + 1;
        if features.len() == n {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(
                origin,
                lineno,
                format!("more than N={n} data lines"),
            ));
        }
        let (x, y) = parse_point(line, d, l).map_err(|msg| parse_err(origin, lineno, msg))?;
        features.push(x);
        relevances.push(y);
    }
    if features.len() != n {
        return Err(parse_err(
            origin,
            text.lines().count(),
            format!("expected N={n} data lines, found {}", features.len()),
        ));
    }
    RelevanceDataset::new(d, l, features, relevances)
}

fn parse_header<const K: usize>(line: &str) -> Option<[usize; K]> {
    let mut out = [0usize; K];
    let mut tokens = line.split_ascii_whitespace();
    for slot in out.iter_mut() {
        *slot = tokens.next()?.parse().ok()?;
    }
    tokens.next().is_none().then_some(out)
}

fn parse_point(
    line: &str,
    d: usize,
    l: usize,
) -> std::result::Result<(SparseVector, RelevanceRow), String> {
    let line = line.strip_suffix('\r').unwrap_or(line);
    let (label_part, feature_part) = match line.split_once(' ') {
        Some(parts) => parts,
        None => (line, ""),
    };

    let mut labels = Vec::new();
    for tok in label_part.split(',').filter(|t| !t.is_empty()) {
        let (idx, weight) = match tok.split_once(':') {
            Some((i, w)) => (i, parse_real(w)?),
            None => (tok, 1.0),
        };
        let idx: u32 = idx
            .parse()
            .map_err(|_| format!("non-numeric label index {idx:?}"))?;
        if idx as usize >= l {
            return Err(format!("label index {idx} ≥ L={l}"));
        }
        if weight < 0.0 {
            return Err(format!("negative relevance {weight} for label {idx}"));
        }
        labels.push((idx, weight));
    }

    let mut feats = Vec::new();
    for tok in feature_part.split_ascii_whitespace() {
        let (idx, value) = tok
            .split_once(':')
            .ok_or_else(|| format!("feature token {tok:?} is not index:value"))?;
        let idx: u32 = idx
            .parse()
            .map_err(|_| format!("non-numeric feature index {idx:?}"))?;
        if idx as usize >= d {
            return Err(format!("feature index {idx} ≥ D={d}"));
        }
        feats.push((idx, parse_real(value)?));
    }

    let x = SparseVector::from_pairs(d, feats).map_err(|e| e.to_string())?;
    let y = SparseVector::from_pairs(l, labels).map_err(|e| e.to_string())?;
    Ok((x, y))
}

fn parse_real(tok: &str) -> std::result::Result<f64, String> {
    let v: f64 = tok
        .parse()
        .map_err(|_| format!("non-numeric value {tok:?}"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value {tok:?}"));
    }
    Ok(v)
}

/// Serializes in the format [`read_dataset`] accepts.
pub fn write_dataset(d: &RelevanceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = format!(
        "{} {} {}\n",
        d.num_points(),
        d.num_features(),
        d.num_labels()
    );
    for (x, y) in d.features().iter().zip(d.relevances()) {
        let labels: Vec<String> = y
            .iter()
            .map(|(l, w)| format!("{l}:{}", format_score(w)))
            .collect();
        text.push_str(&labels.join(","));
        for (f, v) in x.iter() {
            let _ = write!(text, " {f}:{}", format_score(v));
        }
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Which axis the rows of a prediction file run over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    /// One row per test point, columns are labels.
    Pointwise,
    /// One row per label, columns are test points.
    Labelwise,
}

impl Orientation {
    pub fn suffix(self) -> &'static str {
        match self {
            Orientation::Pointwise => "p",
            Orientation::Labelwise => "l",
        }
    }

    /// Infers the orientation from the prediction header given the truth
    /// shape. `None` when both or neither fit.
    pub fn infer(pred: &PredictionFile, num_points: usize, num_labels: usize) -> Option<Self> {
        let point = pred.num_rows == num_points && pred.num_cols == num_labels;
        let label = pred.num_rows == num_labels && pred.num_cols == num_points;
        match (point, label) {
            (true, false) => Some(Orientation::Pointwise),
            (false, true) => Some(Orientation::Labelwise),
            _ => None,
        }
    }
}

impl std::fmt::Display for Orientation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Orientation::Pointwise => "pointwise",
            Orientation::Labelwise => "labelwise",
        })
    }
}

/// A sparse score matrix: `num_rows` rows of `(column, score)` pairs sorted by
/// descending score.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionFile {
    pub num_rows: usize,
    pub num_cols: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl PredictionFile {
    /// Sorts every row into rank order.
    pub fn new(num_cols: usize, mut rows: Vec<Vec<(u32, f64)>>) -> Self {
        for row in &mut rows {
            row.sort_unstable_by(rank_order);
        }
        PredictionFile {
            num_rows: rows.len(),
            num_cols,
            rows,
        }
    }

    /// Scores rounded to the printed precision, i.e. what a write/read cycle yields.
    pub fn rounded(&self) -> PredictionFile {
        PredictionFile {
            num_rows: self.num_rows,
            num_cols: self.num_cols,
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&(i, s)| (i, round_score(s))).collect())
                .collect(),
        }
    }

    /// Returns the same scores transposed (rows become columns).
    pub fn transposed(&self) -> PredictionFile {
        let mut rows = vec![Vec::new(); self.num_cols];
        for (r, row) in self.rows.iter().enumerate() {
            for &(c, s) in row {
                rows[c as usize].push((r as u32, s));
            }
        }
        PredictionFile::new(self.num_rows, rows)
    }

    pub fn to_text(&self) -> String {
        let mut text = format!("{} {}\n", self.num_rows, self.num_cols);
        for row in &self.rows {
            let mut first = true;
            for &(i, s) in row {
                if !first {
                    text.push(' ');
                }
                first = false;
                let _ = write!(text, "{i}:{}", format_score(s));
            }
            text.push('\n');
        }
        text
    }
}

pub fn write_predictions(p: &PredictionFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(p.to_text().as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionFile> {
    let path = path.as_ref();
    parse_predictions(&read_text(path)?, path)
}

pub fn parse_predictions(text: &str, origin: &Path) -> Result<PredictionFile> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(origin, 1, "empty file"))?;
    let [num_rows, num_cols] = parse_header::<2>(header).ok_or_else(|| {
        parse_err(
            origin,
            1,
            format!("malformed header {header:?}, expected \"R C\""),
        )
    })?;
    let mut rows = Vec::with_capacity(num_rows);
    for (idx, line) in lines {
        if rows.len() == num_rows {
            if line.trim().is_empty() {
                continue;
            }
            return Err(parse_err(origin, idx + 1, "more rows than declared"));
        }
        let mut row = Vec::new();
        for tok in line.split_ascii_whitespace() {
            let (i, s) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(origin, idx + 1, format!("bad entry {tok:?}")))?;
            let i: u32 = i
                .parse()
                .map_err(|_| parse_err(origin, idx + 1, format!("non-numeric index {i:?}")))?;
            if i as usize >= num_cols {
                return Err(parse_err(
                    origin,
                    idx + 1,
                    format!("column {i} ≥ C={num_cols}"),
                ));
            }
            let s = parse_real(s).map_err(|m| parse_err(origin, idx + 1, m))?;
            row.push((i, s));
        }
        rows.push(row);
    }
    if rows.len() != num_rows {
        return Err(parse_err(
            origin,
            text.lines().count(),
            format!("expected {num_rows} rows, found {}", rows.len()),
        ));
    }
    Ok(PredictionFile {
        num_rows,
        num_cols,
        rows,
    })
}

/// Path helper used in error messages for in-memory parsing.
pub fn memory_origin() -> PathBuf {
    PathBuf::from("<memory>")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<RelevanceDataset> {
        parse_dataset(text, &memory_origin())
    }

    #[test]
    fn parses_weighted_labels() {
        let d = parse("2 3 2\n0:0.5 1:1.0 2:2.0\n1 0:4\n").unwrap();
        assert_eq!(d.num_points(), 2);
        let (x, y) = d.row(0);
        assert_eq!(y.iter().collect::<Vec<_>>(), vec![(0, 0.5)]);
        assert_eq!(x.iter().collect::<Vec<_>>(), vec![(1, 1.0), (2, 2.0)]);
        let (x, y) = d.row(1);
        assert_eq!(y.iter().collect::<Vec<_>>(), vec![(1, 1.0)]);
        assert_eq!(x.iter().collect::<Vec<_>>(), vec![(0, 4.0)]);
    }

    #[test]
    fn parses_label_free_row() {
        let d = parse("1 3 2\n 0:1.0\n").unwrap();
        assert!(d.relevances()[0].is_empty());
        assert_eq!(d.features()[0].iter().collect::<Vec<_>>(), vec![(0, 1.0)]);
    }

    #[test]
    fn rejects_out_of_range_label() {
        let err = parse("1 3 2\n5:0.5 0:1.0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("label index 5 ≥ L=2"), "{msg}");
        assert!(msg.contains(":2:"), "line number missing: {msg}");
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse("1 3\n0 0:1\n").is_err());
        assert!(parse("1 3 2\n0:-1 0:1\n")
            .unwrap_err()
            .to_string()
            .contains("negative relevance"));
        assert!(parse("1 3 2\n0 0:abc\n").is_err());
        assert!(parse("1 3 2\n0 7:1\n").is_err());
        assert!(parse("2 3 2\n0 0:1\n").is_err());
        assert!(parse("1 3 2\n0 0:1\n1 0:1\n").is_err());
    }

    #[test]
    fn sorts_unsorted_features_and_multi_labels() {
        let d = parse("1 5 4\n3,1:0.25 4:1 0:2 2:3\n").unwrap();
        assert_eq!(d.features()[0].indices(), &[0, 2, 4]);
        assert_eq!(
            d.relevances()[0].iter().collect::<Vec<_>>(),
            vec![(1, 0.25), (3, 1.0)]
        );
    }

    #[test]
    fn long_rows_parse() {
        let n = 100_000;
        let mut text = format!("1 {n} 1\n0");
        for f in 0..n {
            let _ = write!(text, " {f}:1.5");
        }
        text.push('\n');
        let d = parse(&text).unwrap();
        assert_eq!(d.features()[0].nnz(), n);
    }

    #[test]
    fn score_formatting() {
        assert_eq!(format_score(0.51), "0.51");
        assert_eq!(format_score(0.20), "0.2");
        assert_eq!(format_score(1e-7), "1e-07");
        assert_eq!(format_score(1.0), "1");
        assert_eq!(format_score(123456.7), "123457");
        assert_eq!(format_score(1234567.0), "1.23457e+06");
        assert_eq!(format_score(0.000123456789), "0.000123457");
        assert_eq!(format_score(-2.5), "-2.5");
        assert_eq!(format_score(0.9999996), "1");
    }

    #[test]
    fn prediction_round_trip() {
        let p = PredictionFile::new(4, vec![vec![(0, 0.20), (3, 0.51)], vec![], vec![(1, 1e-7)]]);
        let text = p.to_text();
        assert_eq!(text, "3 4\n3:0.51 0:0.2\n\n1:1e-07\n");
        let back = parse_predictions(&text, &memory_origin()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn prediction_reader_validates() {
        assert!(parse_predictions("1 2\n5:0.1\n", &memory_origin()).is_err());
        assert!(parse_predictions("2 2\n0:0.1\n", &memory_origin()).is_err());
        assert!(parse_predictions("1 2\n0:x\n", &memory_origin()).is_err());
    }

    #[test]
    fn io_errors_carry_path() {
        let err = read_dataset("/nonexistent/xreg/data.txt").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/xreg/data.txt"));
    }

    fn arb_dataset() -> impl Strategy<Value = RelevanceDataset> {
        let row = (
            proptest::collection::btree_map(0u32..20, 0.001f64..100.0, 0..8),
            proptest::collection::btree_map(0u32..6, 0.001f64..5.0, 0..4),
        );
        proptest::collection::vec(row, 1..10).prop_map(|rows| {
            let (xs, ys) = rows
                .into_iter()
                .map(|(x, y)| {
                    (
                        SparseVector::from_pairs(20, x.into_iter().map(|(i, v)| (i, round_score(v))).collect()).unwrap(),
                        SparseVector::from_pairs(6, y.into_iter().map(|(i, v)| (i, round_score(v))).collect()).unwrap(),
                    )
                })
                .unzip();
            RelevanceDataset::new(20, 6, xs, ys).unwrap()
        })
    }

    proptest! {
        #[test]
        fn dataset_round_trip(d in arb_dataset()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.txt");
            write_dataset(&d, &path).unwrap();
            prop_assert_eq!(read_dataset(&path).unwrap(), d);
        }

        #[test]
        fn predictions_round_trip_at_printed_precision(
            rows in proptest::collection::vec(proptest::collection::btree_map(0u32..50, 1e-9f64..10.0, 0..6), 0..6)
        ) {
            let p = PredictionFile::new(50, rows.into_iter().map(|m| m.into_iter().collect()).collect());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.txt");
            write_predictions(&p, &path).unwrap();
            let back = read_predictions(&path).unwrap();
            let rounded = p.rounded();
            prop_assert_eq!(back.num_rows, rounded.num_rows);
            // Rounding can create new ties, so compare as sets of entries.
            for (a, b) in back.rows.iter().zip(&rounded.rows) {
                let mut a = a.clone();
                let mut b = b.clone();
                a.sort_by_key(|e| e.0);
                b.sort_by_key(|e| e.0);
                prop_assert_eq!(a, b);
            }
        }
    }
}
