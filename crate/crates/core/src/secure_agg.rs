//! Masked computation of `w^T x_i` over two aggregation trees.
//!
//! Each party adds a random mask to its partial inner product. The masked
//! values are summed up one tree and the masks alone up a second tree whose
//! proper subtrees never cover the same set of parties, so no single party
//! sees a partial and the matching mask. The aggregator subtracts the two
//! sums.
//!
//! Values travel as fixed-point elements of the ring Z/2^128 with
//! [`FRACTION_BITS`] fractional bits. Masks are uniform over the ring, so
//! cancellation is exact and masked payloads carry no information about the
//! partials.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::rng_stream;

pub const FRACTION_BITS: u32 = 64;
const SCALE: f64 = 18_446_744_073_709_551_616.0;
/// Largest magnitude a partial may have: below 2^57, so sums over up to 64
/// parties stay inside the signed range of the ring.
pub const MAX_PARTIAL: f64 = 1e17;

/// Element of Z/2^128 holding a fixed-point real.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RingValue(pub u128);

impl RingValue {
    pub fn encode(x: f64) -> Result<Self> {
        if !x.is_finite() || x.abs() > MAX_PARTIAL {
            return Err(Error::InvalidInput(format!("partial {x} cannot be encoded")));
        }
        Ok(Self((x * SCALE).round() as i128 as u128))
    }

    pub fn decode(self) -> f64 {
        self.0 as i128 as f64 / SCALE
    }

    pub fn wrapping_add(self, other: Self) -> Self {
        Self(self.0.wrapping_add(other.0))
    }

    pub fn wrapping_sub(self, other: Self) -> Self {
        Self(self.0.wrapping_sub(other.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub parent: Option<usize>,
    /// Leaf: the party itself. Internal node: the party doing the summing.
    pub party: usize,
    pub children: Vec<usize>,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Rooted aggregation tree whose leaves are the parties `0..q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggTree {
    nodes: Vec<TreeNode>,
    root: usize,
    q: usize,
}

impl AggTree {
    /// Builds a tree from a nested group description; each internal node is
    /// summed by the party of its first child.
    pub fn from_groups(group: &Group) -> Result<Self> {
        let mut nodes = Vec::new();
        let root = push_group(group, None, &mut nodes);
        let leaves: Vec<usize> = nodes.iter().filter(|n| n.is_leaf()).map(|n| n.party).collect();
        let q = leaves.len();
        let set: BTreeSet<usize> = leaves.iter().copied().collect();
        if set.len() != q || set.iter().next_back().is_none_or(|&m| m + 1 != q) {
            return Err(Error::InvalidInput("tree leaves must be exactly the parties 0..q".into()));
        }
        Ok(Self { nodes, root, q })
    }

    /// Balanced binary tree over `order`; each internal node is summed by the
    /// first party of its left subtree.
    pub fn balanced(order: &[usize]) -> Result<Self> {
        fn build(order: &[usize]) -> Group {
            if order.len() == 1 {
                Group::Leaf(order[0])
            } else {
                let mid = order.len().div_ceil(2);
                Group::Node(vec![build(&order[..mid]), build(&order[mid..])])
            }
        }
        if order.is_empty() {
            return Err(Error::InvalidPartyCount(0));
        }
        Self::from_groups(&build(order))
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn root_party(&self) -> usize {
        self.nodes[self.root].party
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn leaf_set(&self, node: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = vec![node];
        while let Some(n) = stack.pop() {
            let nd = &self.nodes[n];
            if nd.is_leaf() {
                out.insert(nd.party);
            } else {
                stack.extend(&nd.children);
            }
        }
        out
    }

    /// Leaf sets of all subtrees with more than one and fewer than `q` leaves.
    pub fn proper_leaf_sets(&self) -> HashSet<BTreeSet<usize>> {
        (0..self.nodes.len())
            .map(|n| self.leaf_set(n))
            .filter(|s| s.len() > 1 && s.len() < self.q)
            .collect()
    }

    /// Party that receives the value of `node` (its parent's aggregator).
    fn receiver_of(&self, node: usize) -> Option<usize> {
        self.nodes[node].parent.map(|p| self.nodes[p].party)
    }

    fn leaf_node(&self, party: usize) -> usize {
        self.nodes
            .iter()
            .position(|n| n.is_leaf() && n.party == party)
            .expect("every party is a leaf")
    }
}

/// Nested description of an aggregation tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Group {
    Leaf(usize),
    Node(Vec<Group>),
}

fn push_group(group: &Group, parent: Option<usize>, nodes: &mut Vec<TreeNode>) -> usize {
    let id = nodes.len();
    match group {
        Group::Leaf(p) => {
            nodes.push(TreeNode { parent, party: *p, children: Vec::new() });
        }
        Group::Node(children) => {
            nodes.push(TreeNode { parent, party: usize::MAX, children: Vec::new() });
            let kids: Vec<usize> = children.iter().map(|c| push_group(c, Some(id), nodes)).collect();
            nodes[id].party = nodes[kids[0]].party;
            nodes[id].children = kids;
        }
    }
    id
}

/// True iff no proper subtree (2 or more leaves, fewer than all) of `t1`
/// has the same leaf set as a proper subtree of `t2`.
pub fn significantly_different(t1: &AggTree, t2: &AggTree) -> Result<bool> {
    if t1.q != t2.q {
        return Err(Error::InvalidInput(format!(
            "trees span {} and {} parties",
            t1.q, t2.q
        )));
    }
    let a = t1.proper_leaf_sets();
    Ok(t2.proper_leaf_sets().is_disjoint(&a))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreePair {
    pub t1: AggTree,
    pub t2: AggTree,
    /// Set for q < 4, where no pair with the required separation exists.
    pub degraded: bool,
}

/// A party receiving both a partial's masked value and its mask would
/// unmask it; require different receivers for every leaf that is not its
/// own aggregator.
fn leaf_receivers_differ(t1: &AggTree, t2: &AggTree) -> bool {
    (0..t1.q).all(|p| {
        let r1 = t1.receiver_of(t1.leaf_node(p));
        let r2 = t2.receiver_of(t2.leaf_node(p));
        r1 != r2 || r1 == Some(p)
    })
}

/// Seeded pair of aggregation trees for `q` parties.
pub fn build_tree_pair(q: usize, seed: u64) -> Result<TreePair> {
    if q < 2 {
        return Err(Error::InvalidPartyCount(q));
    }
    let mut rng = rng_stream(seed, 0x5452_4545);
    let mut order: Vec<usize> = (0..q).collect();
    order.shuffle(&mut rng);
    let t1 = AggTree::balanced(&order)?;
    let degraded = q < 4;
    let mut fallback = None;
    for _ in 0..10_000 {
        order.shuffle(&mut rng);
        let t2 = AggTree::balanced(&order)?;
        if t2 == t1 {
            continue;
        }
        if degraded {
            if leaf_receivers_differ(&t1, &t2) {
                return Ok(TreePair { t1, t2, degraded });
            }
            fallback.get_or_insert(t2);
            continue;
        }
        if significantly_different(&t1, &t2)? && leaf_receivers_differ(&t1, &t2) {
            return Ok(TreePair { t1, t2, degraded });
        }
    }
    match fallback {
        Some(t2) => Ok(TreePair { t1, t2, degraded }),
        None => Err(Error::InvalidInput(format!("no usable tree pair found for q={q}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// partial + mask sums, carried by the first tree
    Masked,
    /// mask-only sums, carried by the second tree
    MaskOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptMessage {
    pub sender: usize,
    pub receiver: usize,
    pub payload: RingValue,
    pub phase: Phase,
    /// Parties whose contributions are summed into the payload.
    pub covers: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationTranscript {
    pub messages: Vec<TranscriptMessage>,
    pub result: f64,
    /// Party holding the result (root of the first tree).
    pub aggregator: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    #[default]
    Random,
    /// All masks zero; only for exercising the auditor.
    Zero,
}

/// Sums `values` (indexed by party) up `tree`. Every edge, including a leaf
/// feeding its own aggregator, is recorded.
fn tree_sum(
    tree: &AggTree,
    values: &[RingValue],
    phase: Phase,
    mut record: Option<&mut Vec<TranscriptMessage>>,
) -> RingValue {
    // Children always have larger ids than their parent, so a reverse sweep
    // finishes every child before its parent.
    let mut acc = vec![RingValue::default(); tree.nodes.len()];
    for id in (0..tree.nodes.len()).rev() {
        let node = &tree.nodes[id];
        if node.is_leaf() {
            acc[id] = values[node.party];
        } else {
            let mut s = RingValue::default();
            for &c in &node.children {
                s = s.wrapping_add(acc[c]);
            }
            acc[id] = s;
        }
        if let (Some(parent), Some(log)) = (node.parent, record.as_deref_mut()) {
            log.push(TranscriptMessage {
                sender: node.party,
                receiver: tree.nodes[parent].party,
                payload: acc[id],
                phase,
                covers: tree.leaf_set(id),
            });
        }
    }
    acc[tree.root]
}

fn draw_masks(q: usize, seed: u64, mode: MaskMode) -> Vec<RingValue> {
    match mode {
        MaskMode::Zero => vec![RingValue::default(); q],
        MaskMode::Random => {
            let mut rng = rng_stream(seed, 0x4d41_534b);
            (0..q).map(|_| RingValue(rng.gen::<u128>())).collect()
        }
    }
}

fn aggregate(
    partials: &[f64],
    seed: u64,
    trees: &TreePair,
    mode: MaskMode,
    mut record: Option<&mut Vec<TranscriptMessage>>,
) -> Result<f64> {
    let q = partials.len();
    if trees.t1.q != q || trees.t2.q != q {
        return Err(Error::InvalidInput(format!(
            "{q} partials for trees over {} and {} parties",
            trees.t1.q, trees.t2.q
        )));
    }
    let masks = draw_masks(q, seed, mode);
    let mut masked = Vec::with_capacity(q);
    for (p, m) in partials.iter().zip(&masks) {
        masked.push(RingValue::encode(*p)?.wrapping_add(*m));
    }
    let xi1 = tree_sum(&trees.t1, &masked, Phase::Masked, record.as_deref_mut());
    let xi2 = tree_sum(&trees.t2, &masks, Phase::MaskOnly, record.as_deref_mut());
    let (a1, a2) = (trees.t1.root_party(), trees.t2.root_party());
    if let Some(log) = record {
        if a1 != a2 {
            log.push(TranscriptMessage {
                sender: a2,
                receiver: a1,
                payload: xi2,
                phase: Phase::MaskOnly,
                covers: (0..q).collect(),
            });
        }
    }
    Ok(xi1.wrapping_sub(xi2).decode())
}

/// Sum of `partials` computed as xi1 - xi2 through the two trees, with the
/// full message transcript.
pub fn masked_aggregate(
    partials: &[f64],
    seed: u64,
    trees: &TreePair,
) -> Result<(f64, AggregationTranscript)> {
    masked_aggregate_with(partials, seed, trees, MaskMode::Random)
}

pub fn masked_aggregate_with(
    partials: &[f64],
    seed: u64,
    trees: &TreePair,
    mode: MaskMode,
) -> Result<(f64, AggregationTranscript)> {
    let mut messages = Vec::with_capacity(4 * partials.len());
    let result = aggregate(partials, seed, trees, mode, Some(&mut messages))?;
    Ok((
        result,
        AggregationTranscript { messages, result, aggregator: trees.t1.root_party() },
    ))
}

/// Same result as [`masked_aggregate`] without recording a transcript.
pub fn masked_sum(partials: &[f64], seed: u64, trees: &TreePair) -> Result<f64> {
    aggregate(partials, seed, trees, MaskMode::Random, None)
}

/// How a dominator obtains `w^T x_i` from the parties' partial products.
#[derive(Debug, Clone)]
pub enum Aggregation {
    /// Partials added in party order; exact reference path.
    Plain,
    /// Two-tree masked aggregation; masks are derived from `seed` and a
    /// per-request nonce.
    Masked { trees: TreePair, seed: u64 },
}

impl Aggregation {
    pub fn masked(q: usize, seed: u64) -> Result<Self> {
        Ok(Self::Masked { trees: build_tree_pair(q, seed)?, seed })
    }

    pub fn sum(&self, partials: &[f64], nonce: u64) -> Result<f64> {
        match self {
            Self::Plain => {
                let mut s = 0.0;
                for p in partials {
                    s += p;
                }
                Ok(s)
            }
            // a single party has nobody to hide from
            Self::Masked { .. } if partials.len() == 1 => Ok(partials[0]),
            Self::Masked { trees, seed } => {
                masked_sum(partials, seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ nonce, trees)
            }
        }
    }
}

const MATCH_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    /// A masked message equals a bare partial.
    BarePartial,
    /// The difference of a masked and a mask-only value known to the
    /// observers equals a bare partial.
    Reconstructed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub exposed: usize,
    pub observers: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: AuditReport) {
        self.violations.extend(other.violations);
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} violations", self.violations.len())?;
        for v in &self.violations {
            let kind = match v.kind {
                ViolationKind::BarePartial => "bare-partial",
                ViolationKind::Reconstructed => "reconstructed",
            };
            writeln!(f, "{kind} party={} observers={:?}", v.exposed, v.observers)?;
        }
        Ok(())
    }
}

fn matching_party(value: f64, partials: &[f64], exclude: &[usize]) -> Option<usize> {
    partials
        .iter()
        .enumerate()
        .find(|&(j, p)| !exclude.contains(&j) && (value - p).abs() <= MATCH_TOL)
        .map(|(j, _)| j)
}

/// Checks what `observers` (one party, or a colluding group pooling their
/// records) can learn about partials of parties outside the group.
pub fn audit_observers(t: &AggregationTranscript, partials: &[f64], observers: &[usize]) -> AuditReport {
    let mut exposed: BTreeSet<usize> = BTreeSet::new();
    let mut violations = Vec::new();
    // the aggregate itself is public and never counts as a leak
    let total: f64 = partials.iter().sum();
    let seen = |m: &TranscriptMessage| observers.contains(&m.receiver);
    let masked: Vec<RingValue> = t
        .messages
        .iter()
        .filter(|m| m.phase == Phase::Masked && seen(m))
        .map(|m| m.payload)
        .collect();
    let masks: Vec<RingValue> = t
        .messages
        .iter()
        .filter(|m| m.phase == Phase::MaskOnly && seen(m))
        .map(|m| m.payload)
        .collect();
    for &a in &masked {
        for b in masks.iter().copied() {
            let value = a.wrapping_sub(b).decode();
            if (value - total).abs() <= MATCH_TOL {
                continue;
            }
            if let Some(j) = matching_party(value, partials, observers) {
                if exposed.insert(j) {
                    violations.push(Violation {
                        kind: ViolationKind::Reconstructed,
                        exposed: j,
                        observers: observers.to_vec(),
                    });
                }
            }
        }
    }
    AuditReport { violations }
}

/// Honest-but-curious audit: masked payloads must never equal a bare
/// partial, and no single receiver may reconstruct another party's partial.
pub fn audit_transcript(t: &AggregationTranscript, partials: &[f64]) -> AuditReport {
    let mut exposed: BTreeSet<usize> = BTreeSet::new();
    let mut report = AuditReport::default();
    for m in t.messages.iter().filter(|m| m.phase == Phase::Masked) {
        if let Some(j) = matching_party(m.payload.decode(), partials, &[]) {
            if exposed.insert(j) {
                report.violations.push(Violation {
                    kind: ViolationKind::BarePartial,
                    exposed: j,
                    observers: vec![m.receiver],
                });
            }
        }
    }
    for r in 0..partials.len() {
        for v in audit_observers(t, partials, &[r]).violations {
            if exposed.insert(v.exposed) {
                report.violations.push(v);
            }
        }
    }
    report
}

/// Audit under collusion: every pair of parties pools its records.
pub fn audit_pairwise_collusion(t: &AggregationTranscript, partials: &[f64]) -> AuditReport {
    let q = partials.len();
    let mut report = AuditReport::default();
    for a in 0..q {
        for b in a + 1..q {
            report.merge(audit_observers(t, partials, &[a, b]));
        }
    }
    report
}
