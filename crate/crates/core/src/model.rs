//! Shared domain types: the vertical feature partition, party roles, the
//! global model vector with per-block views, and hyperparameters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{LossKind, RegularizerKind};

/// Seeded generator for an independent stream `stream` under `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Disjoint cover of the feature indices `0..d` by `q` blocks, one per party.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeaturePartition {
    d: usize,
    blocks: Vec<Vec<usize>>,
    /// feature index -> (party, position inside that party's block)
    owner: Vec<(usize, usize)>,
}

impl FeaturePartition {
    /// Builds a partition from explicit blocks, checking that they are
    /// pairwise disjoint and cover `0..d` exactly.
    pub fn new(blocks: Vec<Vec<usize>>, d: usize) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidPartition("no blocks".into()));
        }
        let mut owner = vec![(usize::MAX, 0); d];
        for (party, block) in blocks.iter().enumerate() {
            for (pos, &j) in block.iter().enumerate() {
                if j >= d {
                    return Err(Error::InvalidPartition(format!(
                        "feature {j} outside 0..{d}"
                    )));
                }
                if owner[j].0 != usize::MAX {
                    return Err(Error::InvalidPartition(format!(
                        "feature {j} assigned to parties {} and {party}",
                        owner[j].0
                    )));
                }
                owner[j] = (party, pos);
            }
        }
        if let Some(j) = owner.iter().position(|o| o.0 == usize::MAX) {
            return Err(Error::InvalidPartition(format!("feature {j} unassigned")));
        }
        Ok(Self { d, blocks, owner })
    }

    /// Single block holding every feature in order.
    pub fn trivial(d: usize) -> Self {
        Self::new(vec![(0..d).collect()], d).expect("trivial partition is valid")
    }

    pub fn q(&self) -> usize {
        self.blocks.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block(&self, party: usize) -> Result<&[usize]> {
        self.blocks
            .get(party)
            .map(Vec::as_slice)
            .ok_or(Error::Index { index: party, len: self.q() })
    }

    pub fn block_len(&self, party: usize) -> usize {
        self.blocks[party].len()
    }

    /// Owning party and local position of global feature `j`.
    pub fn owner(&self, j: usize) -> (usize, usize) {
        self.owner[j]
    }
}

/// Seeded random partition of `d` features into `q` nearly equal blocks.
///
/// Feature indices are shuffled, then sliced; the first `d % q` blocks get
/// one extra feature. Each block is returned sorted.
pub fn make_partition(d: usize, q: usize, seed: u64) -> Result<FeaturePartition> {
    if q == 0 {
        return Err(Error::InvalidPartition("q must be at least 1".into()));
    }
    if d < q {
        return Err(Error::InvalidPartition(format!(
            "cannot split {d} features over {q} parties"
        )));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.shuffle(&mut rng_stream(seed, 0x5041_5254));
    let base = d / q;
    let extra = d % q;
    let mut blocks = Vec::with_capacity(q);
    let mut start = 0;
    for party in 0..q {
        let len = base + usize::from(party < extra);
        let mut block = order[start..start + len].to_vec();
        block.sort_unstable();
        blocks.push(block);
        start += len;
    }
    FeaturePartition::new(blocks, d)
}

/// Copies out the sub-vector of `vec` addressed by block `party`.
pub fn block_view(vec: &[f64], partition: &FeaturePartition, party: usize) -> Result<Vec<f64>> {
    if vec.len() != partition.d() {
        return Err(Error::Dimension { expected: partition.d(), got: vec.len() });
    }
    Ok(partition.block(party)?.iter().map(|&j| vec[j]).collect())
}

/// Mutable window onto one block of a global vector.
pub struct BlockViewMut<'a> {
    vec: &'a mut [f64],
    indices: &'a [usize],
}

impl<'a> BlockViewMut<'a> {
    pub fn new(vec: &'a mut [f64], partition: &'a FeaturePartition, party: usize) -> Result<Self> {
        if vec.len() != partition.d() {
            return Err(Error::Dimension { expected: partition.d(), got: vec.len() });
        }
        Ok(Self { vec, indices: partition.block(party)? })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn get(&self, pos: usize) -> f64 {
        self.vec[self.indices[pos]]
    }

    pub fn set(&mut self, pos: usize, value: f64) {
        self.vec[self.indices[pos]] = value;
    }

    pub fn assign(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.indices.len() {
            return Err(Error::Dimension { expected: self.indices.len(), got: values.len() });
        }
        for (&j, &v) in self.indices.iter().zip(values) {
            self.vec[j] = v;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.indices.len() {
            return Err(Error::Dimension { expected: self.indices.len(), got: delta.len() });
        }
        for (&j, &v) in self.indices.iter().zip(delta) {
            self.vec[j] += v;
        }
        Ok(())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.indices.iter().map(|&j| self.vec[j]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleKind {
    Active,
    Passive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartyRole {
    pub kind: RoleKind,
    pub party_id: usize,
}

impl PartyRole {
    pub fn active(party_id: usize) -> Self {
        Self { kind: RoleKind::Active, party_id }
    }

    pub fn passive(party_id: usize) -> Self {
        Self { kind: RoleKind::Passive, party_id }
    }

    pub fn is_active(&self) -> bool {
        self.kind == RoleKind::Active
    }
}

/// Roles for `q` parties of which the first `m` are active.
pub fn assign_roles(q: usize, m: usize) -> Result<Vec<PartyRole>> {
    if m == 0 || m > q {
        return Err(Error::Config(format!("need 1 <= m <= q, got m={m}, q={q}")));
    }
    Ok((0..q)
        .map(|p| if p < m { PartyRole::active(p) } else { PartyRole::passive(p) })
        .collect())
}

/// Global parameter vector stored contiguously; each party owns one block.
#[derive(Debug, Clone)]
pub struct ModelState {
    w: Vec<f64>,
    partition: std::sync::Arc<FeaturePartition>,
    versions: Vec<u64>,
}

impl ModelState {
    pub fn zeros(partition: std::sync::Arc<FeaturePartition>) -> Self {
        let d = partition.d();
        let q = partition.q();
        Self { w: vec![0.0; d], partition, versions: vec![0; q] }
    }

    pub fn from_vec(w: Vec<f64>, partition: std::sync::Arc<FeaturePartition>) -> Result<Self> {
        if w.len() != partition.d() {
            return Err(Error::Dimension { expected: partition.d(), got: w.len() });
        }
        let q = partition.q();
        Ok(Self { w, partition, versions: vec![0; q] })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.w
    }

    pub fn partition(&self) -> &FeaturePartition {
        &self.partition
    }

    pub fn partition_arc(&self) -> &std::sync::Arc<FeaturePartition> {
        &self.partition
    }

    pub fn block(&self, party: usize) -> Result<Vec<f64>> {
        block_view(&self.w, &self.partition, party)
    }

    pub fn block_mut(&mut self, party: usize) -> Result<BlockViewMut<'_>> {
        BlockViewMut::new(&mut self.w, &self.partition, party)
    }

    /// Adds `delta` to block `party` and bumps its version counter.
    pub fn apply_delta(&mut self, party: usize, delta: &[f64]) -> Result<()> {
        BlockViewMut::new(&mut self.w, &self.partition, party)?.add_assign(delta)?;
        self.versions[party] += 1;
        Ok(())
    }

    pub fn versions(&self) -> &[u64] {
        &self.versions
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Svrg,
    Saga,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "svrg" => Ok(Self::Svrg),
            "saga" => Ok(Self::Saga),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub gamma: f64,
    pub lambda: f64,
    pub algorithm: Algorithm,
    pub loss: LossKind,
    pub regularizer: RegularizerKind,
    pub epochs: usize,
    pub tau1: usize,
    pub tau2: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            lambda: 1e-4,
            algorithm: Algorithm::Sgd,
            loss: LossKind::Logistic,
            regularizer: RegularizerKind::L2,
            epochs: 10,
            tau1: 0,
            tau2: 0,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// The learning-rate grid {5e-1, 1e-1, 5e-2, 1e-2, ...} down to `5 * 10^-decades`.
pub fn gamma_grid(decades: u32) -> Vec<f64> {
    (1..=decades)
        .flat_map(|k| {
            let scale = 10f64.powi(-(k as i32));
            [5.0 * scale, scale]
        })
        .collect()
}
