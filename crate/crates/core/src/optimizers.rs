//! Dominated and collaborative update rules for SGD, SVRG and SAGA.
//!
//! A dominated step runs on an active party: it turns the aggregated inner
//! product into `theta`, emits a [`ThetaMessage`] and updates its own block.
//! A collaborative step runs on any party receiving that message and
//! updates the receiver's block from `theta` alone; it never sees a label.

use std::sync::{Arc, Mutex};

use crate::data::{FeatureBlock, PartitionedDataset, SparseRow};
use crate::error::{Error, Result};
use crate::model::{Algorithm, HyperParams, PartyRole};
use crate::objectives::{accumulate_block_gradient, block_full_gradient, theta};
use crate::runtime::ThetaMessage;
use crate::secure_agg::Aggregation;

/// SVRG reference point shared by all parties for one outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrgSnapshot {
    pub epoch: u64,
    pub w_s: Vec<f64>,
    /// Full gradient at `w_s`, global feature order.
    pub full_grad: Vec<f64>,
    pub theta0: Vec<f64>,
    blocks: Vec<SnapshotBlock>,
}

#[derive(Debug, Clone, PartialEq)]
struct SnapshotBlock {
    w_s: Vec<f64>,
    full_grad: Vec<f64>,
}

impl SvrgSnapshot {
    pub fn block_w(&self, party: usize) -> &[f64] {
        &self.blocks[party].w_s
    }

    pub fn block_full_grad(&self, party: usize) -> &[f64] {
        &self.blocks[party].full_grad
    }
}

/// Computes `w^T x_i` for every sample through `agg`, the `theta0` table and
/// each party's full block gradient.
pub fn take_snapshot(
    data: &PartitionedDataset,
    w: &[f64],
    hp: &HyperParams,
    agg: &Aggregation,
    epoch: u64,
) -> Result<SvrgSnapshot> {
    let n = data.n();
    if n == 0 {
        return Err(Error::EmptyData("snapshot of an empty dataset".into()));
    }
    if w.len() != data.d() {
        return Err(Error::Dimension { expected: data.d(), got: w.len() });
    }
    let q = data.q();
    let w_blocks: Vec<Vec<f64>> = data
        .partition()
        .blocks()
        .iter()
        .map(|idx| idx.iter().map(|&j| w[j]).collect())
        .collect();
    let labels = data.evaluator_labels()?;
    let mut partials = vec![0.0; q];
    let mut theta0 = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate().take(n) {
        for (l, p) in partials.iter_mut().enumerate() {
            *p = data.blocks()[l].dot(i, &w_blocks[l]);
        }
        let inner = agg.sum(&partials, snapshot_nonce(epoch, i))?;
        theta0.push(theta(hp.loss, inner, y)?);
    }
    let mut full_grad = vec![0.0; data.d()];
    let mut blocks = Vec::with_capacity(q);
    for (l, w_block) in w_blocks.into_iter().enumerate() {
        let g = block_full_gradient(data, l, &theta0, &w_block, hp.lambda, hp.regularizer)?;
        for (&j, &v) in data.partition().blocks()[l].iter().zip(&g) {
            full_grad[j] = v;
        }
        blocks.push(SnapshotBlock { w_s: w_block, full_grad: g });
    }
    Ok(SvrgSnapshot { epoch, w_s: w.to_vec(), full_grad, theta0, blocks })
}

fn snapshot_nonce(epoch: u64, i: usize) -> u64 {
    (epoch << 40) ^ (i as u64) ^ 0xA5A5_0000_0000_0000
}

/// One party's slice of the SAGA gradient table.
#[derive(Debug, Clone, PartialEq)]
pub struct SagaBlock {
    width: usize,
    n: usize,
    rows: Vec<f64>,
    avg: Vec<f64>,
}

impl SagaBlock {
    fn from_rows(width: usize, n: usize, rows: Vec<f64>) -> Self {
        let mut avg = vec![0.0; width];
        for i in 0..n {
            for (a, v) in avg.iter_mut().zip(&rows[i * width..(i + 1) * width]) {
                *a += v;
            }
        }
        for a in &mut avg {
            *a /= n as f64;
        }
        Self { width, n, rows, avg }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    pub fn avg(&self) -> &[f64] {
        &self.avg
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Replaces row `i`, updating the mean incrementally.
    pub fn replace(&mut self, i: usize, new: &[f64]) {
        let n = self.n as f64;
        let row = &mut self.rows[i * self.width..(i + 1) * self.width];
        for ((old, &v), a) in row.iter_mut().zip(new).zip(self.avg.iter_mut()) {
            *a += (v - *old) / n;
            *old = v;
        }
    }

    /// Mean of the rows recomputed from scratch.
    pub fn recomputed_mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.width];
        for i in 0..self.n {
            for (a, v) in m.iter_mut().zip(self.row(i)) {
                *a += v;
            }
        }
        m.iter().map(|v| v / self.n as f64).collect()
    }
}

/// SAGA table; each party keeps only its own block.
#[derive(Debug, Clone)]
pub struct SagaTable {
    pub blocks: Vec<Arc<Mutex<SagaBlock>>>,
}

/// Fills the table with every sample's block gradient at `w`.
pub fn init_saga_table(
    data: &PartitionedDataset,
    w: &[f64],
    hp: &HyperParams,
    agg: &Aggregation,
) -> Result<SagaTable> {
    let n = data.n();
    if n == 0 {
        return Err(Error::EmptyData("SAGA table of an empty dataset".into()));
    }
    if w.len() != data.d() {
        return Err(Error::Dimension { expected: data.d(), got: w.len() });
    }
    let w_blocks: Vec<Vec<f64>> = data
        .partition()
        .blocks()
        .iter()
        .map(|idx| idx.iter().map(|&j| w[j]).collect())
        .collect();
    let labels = data.evaluator_labels()?;
    let q = data.q();
    let mut tables: Vec<Vec<f64>> = w_blocks.iter().map(|b| vec![0.0; b.len() * n]).collect();
    let mut partials = vec![0.0; q];
    for i in 0..n {
        for (l, p) in partials.iter_mut().enumerate() {
            *p = data.blocks()[l].dot(i, &w_blocks[l]);
        }
        let inner = agg.sum(&partials, 0xC0DE_0000_0000_0000 ^ i as u64)?;
        let t = theta(hp.loss, inner, labels[i])?;
        for l in 0..q {
            let width = w_blocks[l].len();
            let out = &mut tables[l][i * width..(i + 1) * width];
            accumulate_block_gradient(t, data.blocks()[l].row(i), hp.lambda, hp.regularizer, &w_blocks[l], out);
        }
    }
    Ok(SagaTable {
        blocks: tables
            .into_iter()
            .zip(&w_blocks)
            .map(|(rows, wb)| Arc::new(Mutex::new(SagaBlock::from_rows(wb.len(), n, rows))))
            .collect(),
    })
}

/// Algorithm-specific state a party needs to form its direction.
#[derive(Debug, Clone)]
pub enum LocalState {
    Sgd,
    Svrg(Arc<SvrgSnapshot>),
    Saga(Arc<Mutex<SagaBlock>>),
}

impl LocalState {
    pub fn algorithm(&self) -> Algorithm {
        match self {
            Self::Sgd => Algorithm::Sgd,
            Self::Svrg(_) => Algorithm::Svrg,
            Self::Saga(_) => Algorithm::Saga,
        }
    }

    fn snapshot_epoch(&self) -> Option<u64> {
        match self {
            Self::Svrg(s) => Some(s.epoch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Dominated,
    Collaborative,
}

/// Block step `-gamma * v` for one party.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDirection {
    pub party: usize,
    pub delta: Vec<f64>,
    pub source: Source,
    pub logical_time: u64,
}

fn check_state(state: &LocalState, hp: &HyperParams) -> Result<()> {
    if state.algorithm() != hp.algorithm {
        return Err(Error::State(format!(
            "{:?} step requested but party holds {:?} state{}",
            hp.algorithm,
            state.algorithm(),
            if hp.algorithm == Algorithm::Svrg { " (no snapshot taken)" } else { "" }
        )));
    }
    Ok(())
}

/// Writes `-gamma * v` for one block into `delta`.
///
/// `w_block` is the party's current read of its own block; `theta` may come
/// from an older read of the whole model.
#[allow(clippy::too_many_arguments)]
pub(crate) fn block_delta(
    state: &LocalState,
    party: usize,
    theta: f64,
    row: SparseRow<'_>,
    i: usize,
    w_block: &[f64],
    hp: &HyperParams,
    delta: &mut [f64],
) -> Result<()> {
    if w_block.len() != delta.len() {
        return Err(Error::Dimension { expected: delta.len(), got: w_block.len() });
    }
    let mut grad = vec![0.0; w_block.len()];
    accumulate_block_gradient(theta, row, hp.lambda, hp.regularizer, w_block, &mut grad);
    match state {
        LocalState::Sgd => {
            for (d, g) in delta.iter_mut().zip(&grad) {
                *d = -hp.gamma * g;
            }
        }
        LocalState::Svrg(snap) => {
            let theta0 = *snap
                .theta0
                .get(i)
                .ok_or(Error::Index { index: i, len: snap.theta0.len() })?;
            let mut anchor = vec![0.0; w_block.len()];
            accumulate_block_gradient(theta0, row, hp.lambda, hp.regularizer, snap.block_w(party), &mut anchor);
            let full = snap.block_full_grad(party);
            for k in 0..delta.len() {
                delta[k] = -hp.gamma * ((grad[k] - anchor[k]) + full[k]);
            }
        }
        LocalState::Saga(table) => {
            let mut t = table.lock().expect("SAGA table lock poisoned");
            if i >= t.n() {
                return Err(Error::Index { index: i, len: t.n() });
            }
            let (old, avg) = (t.row(i), t.avg());
            for k in 0..delta.len() {
                delta[k] = -hp.gamma * ((grad[k] - old[k]) + avg[k]);
            }
            t.replace(i, &grad);
        }
    }
    if let Some(bad) = delta.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("update entry {bad}")));
    }
    Ok(())
}

/// Active-party step: computes `theta` from the aggregated inner product and
/// the party's label, returns the broadcast message and the party's own
/// block direction.
#[allow(clippy::too_many_arguments)]
pub fn dominated_step(
    state: &LocalState,
    role: &PartyRole,
    data: &PartitionedDataset,
    hp: &HyperParams,
    i: usize,
    inner: f64,
    w_block: &[f64],
    logical_time: u64,
) -> Result<(ThetaMessage, UpdateDirection)> {
    if !role.is_active() {
        return Err(Error::Role(format!("passive party {} cannot dominate", role.party_id)));
    }
    check_state(state, hp)?;
    let party = role.party_id;
    let y = data.label(i, role)?;
    let t = theta(hp.loss, inner, y)?;
    let row = data.block(party)?.try_row(i)?;
    let mut delta = vec![0.0; w_block.len()];
    block_delta(state, party, t, row, i, w_block, hp, &mut delta)?;
    let msg = ThetaMessage {
        theta: t,
        sample: i,
        issuer: party,
        timestamp: logical_time,
        snapshot_epoch: state.snapshot_epoch(),
    };
    let dir = UpdateDirection { party, delta, source: Source::Dominated, logical_time };
    Ok((msg, dir))
}

/// Any-party step driven by a received message; only the party's own
/// feature block is consulted.
pub fn collaborative_step(
    state: &LocalState,
    party: usize,
    features: &FeatureBlock,
    hp: &HyperParams,
    msg: &ThetaMessage,
    w_block: &[f64],
    logical_time: u64,
) -> Result<UpdateDirection> {
    check_state(state, hp)?;
    if let (Some(mine), Some(theirs)) = (state.snapshot_epoch(), msg.snapshot_epoch) {
        if mine != theirs {
            return Err(Error::State(format!(
                "message from snapshot {theirs} delivered under snapshot {mine}"
            )));
        }
    }
    let row = features.try_row(msg.sample)?;
    let mut delta = vec![0.0; w_block.len()];
    block_delta(state, party, msg.theta, row, msg.sample, w_block, hp, &mut delta)?;
    Ok(UpdateDirection { party, delta, source: Source::Collaborative, logical_time })
}
