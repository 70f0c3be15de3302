//! Dataset ingestion (LIBSVM and CSV), label/feature scaling, splitting and
//! vertical partitioning.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{make_partition, rng_stream, FeaturePartition, PartyRole};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseRow<'a> {
    pub indices: &'a [u32],
    pub values: &'a [f64],
}

impl SparseRow<'_> {
    pub fn dot(&self, w: &[f64]) -> f64 {
        let mut s = 0.0;
        for (&k, &v) in self.indices.iter().zip(self.values) {
            s += v * w[k as usize];
        }
        s
    }

    pub fn to_dense(&self, width: usize) -> Vec<f64> {
        let mut out = vec![0.0; width];
        for (&k, &v) in self.indices.iter().zip(self.values) {
            out[k as usize] = v;
        }
        out
    }
}

/// Row-compressed sparse matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsrMatrix {
    width: usize,
    row_ptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(width: usize) -> Self {
        Self { width, row_ptr: vec![0], indices: Vec::new(), values: Vec::new() }
    }

    /// Appends a row given as (index, value) pairs with strictly increasing indices.
    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (k, v) in entries {
            debug_assert!(k < self.width);
            if v != 0.0 {
                self.indices.push(k as u32);
                self.values.push(v);
            }
        }
        self.row_ptr.push(self.indices.len());
    }

    pub fn push_dense_row(&mut self, row: &[f64]) {
        self.push_row(row.iter().copied().enumerate());
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> SparseRow<'_> {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        SparseRow { indices: &self.indices[a..b], values: &self.values[a..b] }
    }

    fn set_width(&mut self, width: usize) {
        self.width = width;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Regression,
}

/// Unpartitioned dataset as read from disk or generated.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub labels: Vec<f64>,
    pub features: CsrMatrix,
}

impl RawDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.features.width()
    }

    pub fn from_dense(rows: &[Vec<f64>], labels: Vec<f64>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Dimension { expected: labels.len(), got: rows.len() });
        }
        let d = rows.first().map_or(0, Vec::len);
        let mut features = CsrMatrix::new(d);
        for r in rows {
            if r.len() != d {
                return Err(Error::Dimension { expected: d, got: r.len() });
            }
            features.push_dense_row(r);
        }
        Ok(Self { labels, features })
    }

    /// Widens the feature space to `d` (e.g. to align train and test files).
    pub fn with_dim(mut self, d: usize) -> Result<Self> {
        if d < self.d() {
            return Err(Error::Dimension { expected: self.d(), got: d });
        }
        self.features.set_width(d);
        Ok(self)
    }

    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        self.features.row(i).to_dense(self.d())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut features = CsrMatrix::new(self.d());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let r = self.features.row(i);
            features.push_row(r.indices.iter().map(|&k| k as usize).zip(r.values.iter().copied()));
            labels.push(self.labels[i]);
        }
        Self { labels, features }
    }
}

fn parse_err(line: usize, column: Option<usize>, message: impl Into<String>) -> Error {
    Error::Parse { line, column, message: message.into() }
}

/// Parses LIBSVM text (`label idx:val idx:val ...`, 1-based indices).
/// Blank lines and `#` comments are ignored; missing indices are zeros.
pub fn parse_libsvm_reader(reader: impl Read) -> Result<RawDataset> {
    let reader = BufReader::new(reader);
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut d = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| parse_err(lineno, None, e.to_string()))?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| parse_err(lineno, Some(1), format!("bad label '{label_tok}'")))?;
        if !label.is_finite() {
            return Err(parse_err(lineno, Some(1), "label is not finite"));
        }
        let mut row = Vec::new();
        for (pos, tok) in tokens.enumerate() {
            let col = pos + 2;
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(lineno, Some(col), format!("expected idx:val, got '{tok}'")))?;
            let idx: usize = idx
                .parse()
                .map_err(|_| parse_err(lineno, Some(col), format!("bad index '{idx}'")))?;
            if idx == 0 {
                return Err(parse_err(lineno, Some(col), "indices are 1-based"));
            }
            if idx > u32::MAX as usize {
                return Err(parse_err(lineno, Some(col), "index too large"));
            }
            let val: f64 = val
                .parse()
                .map_err(|_| parse_err(lineno, Some(col), format!("bad value '{val}'")))?;
            if !val.is_finite() {
                return Err(parse_err(lineno, Some(col), "value is not finite"));
            }
            row.push((idx - 1, val));
        }
        row.sort_by_key(|e| e.0);
        if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(parse_err(lineno, None, format!("duplicate index {}", w[0].0 + 1)));
        }
        if let Some(&(last, _)) = row.last() {
            d = d.max(last + 1);
        }
        labels.push(label);
        rows.push(row);
    }
    if labels.is_empty() {
        return Err(Error::EmptyData("no samples in LIBSVM input".into()));
    }
    let mut features = CsrMatrix::new(d);
    for row in rows {
        features.push_row(row);
    }
    Ok(RawDataset { labels, features })
}

pub fn parse_libsvm(path: impl AsRef<Path>) -> Result<RawDataset> {
    parse_libsvm_reader(std::fs::File::open(path)?)
}

pub fn parse_libsvm_str(text: &str) -> Result<RawDataset> {
    parse_libsvm_reader(text.as_bytes())
}

/// Writes LIBSVM text; values use the shortest round-trip representation.
pub fn write_libsvm(data: &RawDataset, mut out: impl Write) -> Result<()> {
    for i in 0..data.n() {
        write!(out, "{}", data.labels[i])?;
        let r = data.features.row(i);
        for (&k, &v) in r.indices.iter().zip(r.values) {
            write!(out, " {}:{}", k + 1, v)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parses a numeric CSV with a header row. Column `label_column` holds the
/// target; for classification, labels {0, 1} become {-1, +1}.
pub fn parse_csv_reader(reader: impl Read, label_column: usize, task: Task) -> Result<RawDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let width = rdr
        .headers()
        .map_err(|e| parse_err(1, None, e.to_string()))?
        .len();
    if label_column >= width {
        return Err(Error::Config(format!(
            "label column {label_column} out of range for {width} columns"
        )));
    }
    let mut labels = Vec::new();
    let mut features = CsrMatrix::new(width - 1);
    let mut dense = Vec::with_capacity(width - 1);
    for (r, record) in rdr.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| parse_err(line, None, e.to_string()))?;
        if record.len() != width {
            return Err(parse_err(line, None, format!("expected {width} fields, got {}", record.len())));
        }
        dense.clear();
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, Some(c + 1), format!("non-numeric cell '{cell}'")))?;
            if !v.is_finite() {
                return Err(parse_err(line, Some(c + 1), "cell is not finite"));
            }
            if c == label_column {
                labels.push(v);
            } else {
                dense.push(v);
            }
        }
        features.push_dense_row(&dense);
    }
    if labels.is_empty() {
        return Err(Error::EmptyData("no rows in CSV input".into()));
    }
    if task == Task::Classification {
        map_binary_labels(&mut labels);
    }
    Ok(RawDataset { labels, features })
}

pub fn parse_csv(path: impl AsRef<Path>, label_column: usize, task: Task) -> Result<RawDataset> {
    parse_csv_reader(std::fs::File::open(path)?, label_column, task)
}

fn map_binary_labels(labels: &mut [f64]) {
    if labels.iter().all(|&y| y == 0.0 || y == 1.0) {
        for y in labels.iter_mut() {
            *y = if *y == 1.0 { 1.0 } else { -1.0 };
        }
    }
}

/// Affine map used by min-max label normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelScaling {
    pub min: f64,
    pub max: f64,
}

impl LabelScaling {
    pub fn apply(&self, y: f64) -> f64 {
        let span = self.max - self.min;
        if span > 0.0 {
            (y - self.min) / span
        } else {
            0.0
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        y * (self.max - self.min) + self.min
    }
}

/// Rescales labels to [0, 1]; constant labels map to 0.
pub fn minmax_normalize_labels(mut data: RawDataset) -> (RawDataset, LabelScaling) {
    let min = data.labels.iter().copied().fold(f64::INFINITY, f64::min);
    let max = data.labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaling = LabelScaling { min, max };
    for y in &mut data.labels {
        *y = scaling.apply(*y);
    }
    (data, scaling)
}

/// Per-feature min-max scaling to [0, 1] over stored and implicit zero entries.
pub fn minmax_normalize_features(data: &RawDataset) -> RawDataset {
    let d = data.d();
    let n = data.n();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut nnz = vec![0usize; d];
    for i in 0..n {
        let r = data.features.row(i);
        for (&k, &v) in r.indices.iter().zip(r.values) {
            let k = k as usize;
            lo[k] = lo[k].min(v);
            hi[k] = hi[k].max(v);
            nnz[k] += 1;
        }
    }
    for k in 0..d {
        if nnz[k] < n {
            lo[k] = lo[k].min(0.0);
            hi[k] = hi[k].max(0.0);
        }
    }
    let mut features = CsrMatrix::new(d);
    let mut dense = vec![0.0; d];
    for i in 0..n {
        dense.iter_mut().for_each(|v| *v = 0.0);
        let r = data.features.row(i);
        for (&k, &v) in r.indices.iter().zip(r.values) {
            dense[k as usize] = v;
        }
        for k in 0..d {
            let span = hi[k] - lo[k];
            dense[k] = if span > 0.0 { (dense[k] - lo[k]) / span } else { 0.0 };
        }
        features.push_dense_row(&dense);
    }
    RawDataset { labels: data.labels.clone(), features }
}

/// Seeded disjoint split; the test side gets `round(n * test_fraction)`
/// samples, clamped so both sides are non-empty.
pub fn train_test_split(data: &RawDataset, test_fraction: f64, seed: u64) -> Result<(RawDataset, RawDataset)> {
    let (train, test) = split_indices(data.n(), test_fraction, seed)?;
    Ok((data.subset(&train), data.subset(&test)))
}

pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::EmptyData(format!("cannot split {n} samples")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_stream(seed, 0x5350_4c54));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

/// One party's columns for every sample, with block-local indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlock {
    rows: CsrMatrix,
}

impl FeatureBlock {
    pub fn width(&self) -> usize {
        self.rows.width()
    }

    pub fn n(&self) -> usize {
        self.rows.rows()
    }

    pub fn row(&self, i: usize) -> SparseRow<'_> {
        self.rows.row(i)
    }

    pub fn try_row(&self, i: usize) -> Result<SparseRow<'_>> {
        if i >= self.n() {
            return Err(Error::Index { index: i, len: self.n() });
        }
        Ok(self.rows.row(i))
    }

    /// Local partial inner product `w_block^T x_{i,block}`.
    pub fn dot(&self, i: usize, w_block: &[f64]) -> f64 {
        self.rows.row(i).dot(w_block)
    }
}

/// Labels plus the set of parties allowed to read them.
#[derive(Debug, Clone)]
struct LabelStore {
    values: Arc<Vec<f64>>,
    holders: BTreeSet<usize>,
}

/// Vertically partitioned dataset: one feature block per party, labels
/// readable only by label holders.
#[derive(Debug, Clone)]
pub struct PartitionedDataset {
    n: usize,
    blocks: Arc<Vec<FeatureBlock>>,
    labels: LabelStore,
    partition: Arc<FeaturePartition>,
}

impl PartitionedDataset {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.partition.d()
    }

    pub fn q(&self) -> usize {
        self.partition.q()
    }

    pub fn partition(&self) -> &FeaturePartition {
        &self.partition
    }

    pub fn partition_arc(&self) -> Arc<FeaturePartition> {
        Arc::clone(&self.partition)
    }

    pub fn block(&self, party: usize) -> Result<&FeatureBlock> {
        self.blocks.get(party).ok_or(Error::Index { index: party, len: self.q() })
    }

    pub fn blocks(&self) -> &[FeatureBlock] {
        &self.blocks
    }

    /// Same features, labels readable by exactly the given active roles.
    pub fn with_label_holders(&self, roles: &[PartyRole]) -> Result<Self> {
        let mut holders = BTreeSet::new();
        for r in roles.iter().filter(|r| r.is_active()) {
            if r.party_id >= self.q() {
                return Err(Error::Index { index: r.party_id, len: self.q() });
            }
            holders.insert(r.party_id);
        }
        if holders.is_empty() {
            return Err(Error::Role("at least one active party must hold labels".into()));
        }
        let mut out = self.clone();
        out.labels.holders = holders;
        Ok(out)
    }

    pub fn label_holders(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.holders.iter().copied()
    }

    pub fn can_read_labels(&self, role: &PartyRole) -> bool {
        role.is_active() && self.labels.holders.contains(&role.party_id)
    }

    pub fn label(&self, i: usize, role: &PartyRole) -> Result<f64> {
        if !self.can_read_labels(role) {
            return Err(Error::LabelAccess { party: role.party_id });
        }
        self.labels
            .values
            .get(i)
            .copied()
            .ok_or(Error::Index { index: i, len: self.n })
    }

    /// Labels as seen by the first label holder, used for evaluation.
    pub fn evaluator_labels(&self) -> Result<&[f64]> {
        match self.labels.holders.iter().next() {
            Some(_) => Ok(&self.labels.values),
            None => Err(Error::Role("no party holds labels".into())),
        }
    }

    /// `w^T x_i` with partial products summed in party order.
    pub fn inner(&self, i: usize, w: &[f64]) -> f64 {
        let mut s = 0.0;
        for (l, block) in self.blocks.iter().enumerate() {
            let idx = &self.partition.blocks()[l];
            let r = block.row(i);
            let mut p = 0.0;
            for (&k, &v) in r.indices.iter().zip(r.values) {
                p += v * w[idx[k as usize]];
            }
            s += p;
        }
        s
    }

    /// Reassembles sample `i` in global feature order.
    pub fn dense_row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d()];
        for (l, block) in self.blocks.iter().enumerate() {
            let idx = &self.partition.blocks()[l];
            let r = block.row(i);
            for (&k, &v) in r.indices.iter().zip(r.values) {
                out[idx[k as usize]] = v;
            }
        }
        out
    }
}

/// Routes columns of `data` to `q` parties using a seeded partition.
/// Party 0 holds the labels until [`PartitionedDataset::with_label_holders`]
/// says otherwise.
pub fn vertical_partition_dataset(data: &RawDataset, q: usize, seed: u64) -> Result<PartitionedDataset> {
    let partition = make_partition(data.d(), q, seed)?;
    vertical_partition_with(data, Arc::new(partition))
}

/// Routes columns using an existing partition (e.g. the training partition
/// applied to a test set).
pub fn vertical_partition_with(data: &RawDataset, partition: Arc<FeaturePartition>) -> Result<PartitionedDataset> {
    if data.d() != partition.d() {
        return Err(Error::Dimension { expected: partition.d(), got: data.d() });
    }
    let q = partition.q();
    let mut blocks: Vec<CsrMatrix> = (0..q).map(|l| CsrMatrix::new(partition.block_len(l))).collect();
    let mut staged: Vec<Vec<(usize, f64)>> = vec![Vec::new(); q];
    for i in 0..data.n() {
        staged.iter_mut().for_each(Vec::clear);
        let r = data.features.row(i);
        for (&k, &v) in r.indices.iter().zip(r.values) {
            let (party, pos) = partition.owner(k as usize);
            staged[party].push((pos, v));
        }
        for (l, entries) in staged.iter_mut().enumerate() {
            entries.sort_by_key(|e| e.0);
            blocks[l].push_row(entries.iter().copied());
        }
    }
    Ok(PartitionedDataset {
        n: data.n(),
        blocks: Arc::new(blocks.into_iter().map(|rows| FeatureBlock { rows }).collect()),
        labels: LabelStore { values: Arc::new(data.labels.clone()), holders: BTreeSet::from([0]) },
        partition,
    })
}
