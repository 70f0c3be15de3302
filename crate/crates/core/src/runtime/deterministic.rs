//! Seeded single-threaded interleaver.
//!
//! Each tick either issues a dominated update or delivers one pending
//! message. Reads made by dominators may hide up to `tau1` of the most recent
//! block updates; a message waiting `tau2` ticks is delivered before anything
//! else happens. The centralized baseline replays the same sample sequence
//! with exact reads and no messages.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{gather, partials, AggregationKind, DelayInjector, Engine, EpochStats, Mode, SimConfig, ThetaMessage};
use crate::data::PartitionedDataset;
use crate::error::Result;
use crate::model::{rng_stream, Algorithm, PartyRole};
use crate::objectives::theta;
use crate::optimizers::{
    block_delta, collaborative_step, dominated_step, init_saga_table, take_snapshot, LocalState,
};
use crate::secure_agg::Aggregation;

/// Sample order shared by the federated runs and the centralized replay:
/// the dominator is drawn from its own stream, then the sample from that
/// party's stream.
pub(crate) struct SampleSchedule {
    chooser: ChaCha8Rng,
    parties: Vec<ChaCha8Rng>,
    n: usize,
}

impl SampleSchedule {
    pub(crate) fn new(seed: u64, m: usize, n: usize) -> Self {
        Self {
            chooser: rng_stream(seed, 0x444f_4d00),
            parties: (0..m).map(|p| party_stream(seed, p)).collect(),
            n,
        }
    }

    pub(crate) fn next(&mut self) -> (usize, usize) {
        let m = self.parties.len();
        let p = if m == 1 { 0 } else { self.chooser.gen_range(0..m) };
        (p, self.next_for(p))
    }

    pub(crate) fn next_for(&mut self, party: usize) -> usize {
        self.parties[party].gen_range(0..self.n)
    }
}

pub(crate) fn party_stream(seed: u64, party: usize) -> ChaCha8Rng {
    rng_stream(seed, 0x5041_0000 + party as u64)
}

pub(crate) fn make_aggregation(config: &SimConfig) -> Result<Aggregation> {
    match config.aggregation {
        AggregationKind::Plain => Ok(Aggregation::Plain),
        // a single party has nobody to hide its partial from
        AggregationKind::Masked if config.q == 1 => Ok(Aggregation::Plain),
        AggregationKind::Masked => Aggregation::masked(config.q, config.hp.seed),
    }
}

struct LogEntry {
    party: usize,
    old: Vec<f64>,
}

struct Pending {
    msg: ThetaMessage,
    target: usize,
    age: usize,
}

pub(crate) struct DeterministicEngine<'a> {
    config: &'a SimConfig,
    data: &'a PartitionedDataset,
    agg: Aggregation,
    w: Vec<f64>,
    versions: Vec<u64>,
    log: VecDeque<LogEntry>,
    injector: DelayInjector,
    schedule: SampleSchedule,
    delivery: ChaCha8Rng,
    pending: VecDeque<Pending>,
    states: Vec<LocalState>,
    clock: u64,
    nonce: u64,
    trajectory: Vec<Vec<f64>>,
    sim_us: f64,
}

impl<'a> DeterministicEngine<'a> {
    pub(crate) fn new(config: &'a SimConfig, data: &'a PartitionedDataset) -> Result<Self> {
        let seed = config.hp.seed;
        let agg = if config.mode == Mode::Centralized { Aggregation::Plain } else { make_aggregation(config)? };
        let w = vec![0.0; data.d()];
        let states = match config.hp.algorithm {
            Algorithm::Saga => init_saga_table(data, &w, &config.hp, &agg)?
                .blocks
                .into_iter()
                .map(LocalState::Saga)
                .collect(),
            _ => vec![LocalState::Sgd; data.q()],
        };
        let bound = if config.mode == Mode::Centralized { 0 } else { config.hp.tau1 };
        Ok(Self {
            config,
            data,
            agg,
            w,
            versions: vec![0; data.q()],
            log: VecDeque::new(),
            injector: DelayInjector::new(config.delay_policy, bound, seed),
            schedule: SampleSchedule::new(seed, config.m, data.n()),
            delivery: rng_stream(seed, 0x4445_4c56),
            pending: VecDeque::new(),
            states,
            clock: 0,
            nonce: 0,
            trajectory: Vec::new(),
            sim_us: 0.0,
        })
    }

    /// Simulated cost of one block update, charged sequentially.
    fn charge(&mut self, party: usize, width: usize) {
        let cost = &self.config.cost;
        let unit = if cost.feature_cost_us > 0.0 { cost.feature_cost_us } else { 1.0 };
        let factor = match self.config.straggler {
            Some(s) if s.party == party => s.factor,
            _ => 1.0,
        };
        self.sim_us += unit * width as f64 * factor;
    }

    fn apply(&mut self, party: usize, delta: &[f64]) {
        self.charge(party, delta.len());
        let idx = &self.data.partition().blocks()[party];
        if self.injector.bound() > 0 {
            self.log.push_back(LogEntry { party, old: gather(&self.w, idx) });
            if self.log.len() > self.injector.bound() {
                self.log.pop_front();
            }
        }
        for (&j, d) in idx.iter().zip(delta) {
            self.w[j] += d;
        }
        self.versions[party] += 1;
    }

    /// The model as it was `s` block updates ago.
    fn stale_read(&self, s: usize) -> Vec<f64> {
        let mut view = self.w.clone();
        for entry in self.log.iter().rev().take(s) {
            for (&j, &v) in self.data.partition().blocks()[entry.party].iter().zip(&entry.old) {
                view[j] = v;
            }
        }
        view
    }

    fn next_nonce(&mut self) -> u64 {
        self.nonce += 1;
        self.nonce
    }

    fn record(&mut self) {
        if self.config.record_trajectory {
            self.trajectory.push(self.w.clone());
        }
    }

    fn targets(&self, issuer: usize) -> Vec<usize> {
        let limit = if self.config.mode == Mode::FrozenPassive { self.config.m } else { self.config.q };
        (0..limit).filter(|&l| l != issuer).collect()
    }

    /// Dominated update by `party` on sample `i` against a read with
    /// staleness `s`; returns the message for collaborators.
    fn dominate(&mut self, party: usize, i: usize, view: &[f64]) -> Result<ThetaMessage> {
        let nonce = self.next_nonce();
        let inner = self.agg.sum(&partials(self.data, view, i), nonce)?;
        let w_block = gather(view, &self.data.partition().blocks()[party]);
        let role = PartyRole::active(party);
        let (msg, dir) =
            dominated_step(&self.states[party], &role, self.data, &self.config.hp, i, inner, &w_block, self.clock)?;
        self.apply(party, &dir.delta);
        Ok(msg)
    }

    fn deliver(&mut self, p: Pending) -> Result<()> {
        self.sim_us += self.config.cost.latency_us;
        let w_block = gather(&self.w, &self.data.partition().blocks()[p.target]);
        let dir = collaborative_step(
            &self.states[p.target],
            p.target,
            self.data.block(p.target)?,
            &self.config.hp,
            &p.msg,
            &w_block,
            self.clock,
        )?;
        self.apply(p.target, &dir.delta);
        Ok(())
    }

    /// Messages issued during the current tick keep age zero.
    fn age_pending(&mut self) {
        for p in &mut self.pending {
            p.age += 1;
        }
    }

    fn async_epoch(&mut self) -> Result<EpochStats> {
        let tau2 = self.config.hp.tau2;
        let n = self.data.n();
        let mut issued = 0;
        let mut max_age = 0;
        self.injector.reset_max();
        loop {
            while let Some(pos) = self.pending.iter().position(|p| p.age >= tau2) {
                let p = self.pending.remove(pos).expect("position is in range");
                max_age = max_age.max(p.age);
                self.deliver(p)?;
                if self.pending.is_empty() {
                    self.record();
                }
            }
            if issued == n {
                break;
            }
            if self.pending.is_empty() || self.delivery.gen_bool(0.5) {
                let (party, i) = self.schedule.next();
                let s = self.injector.inject_delay(self.log.len());
                let view = self.stale_read(s);
                let msg = self.dominate(party, i, &view)?;
                issued += 1;
                let targets = self.targets(party);
                if targets.is_empty() && self.pending.is_empty() {
                    self.record();
                }
                self.age_pending();
                self.pending.extend(targets.into_iter().map(|target| Pending { msg, target, age: 0 }));
            } else {
                let pos = self.delivery.gen_range(0..self.pending.len());
                let p = self.pending.remove(pos).expect("position is in range");
                max_age = max_age.max(p.age);
                self.deliver(p)?;
                if self.pending.is_empty() {
                    self.record();
                }
                self.age_pending();
            }
            self.clock += 1;
        }
        // no message crosses an epoch boundary
        while let Some(p) = self.pending.pop_front() {
            max_age = max_age.max(p.age);
            self.deliver(p)?;
        }
        Ok(EpochStats { max_staleness: self.injector.realized_max(), max_message_age: max_age })
    }

    /// Rounds of one sample per active party, all read from the same model
    /// and applied together.
    fn sync_epoch(&mut self) -> Result<EpochStats> {
        let n = self.data.n();
        let m = self.config.m;
        let mut issued = 0;
        while issued < n {
            let view = self.w.clone();
            let mut deltas: Vec<(usize, Vec<f64>)> = Vec::new();
            for party in 0..m.min(n - issued) {
                let i = self.schedule.next_for(party);
                let nonce = self.next_nonce();
                let inner = self.agg.sum(&partials(self.data, &view, i), nonce)?;
                let role = PartyRole::active(party);
                let own = gather(&view, &self.data.partition().blocks()[party]);
                let (msg, dir) =
                    dominated_step(&self.states[party], &role, self.data, &self.config.hp, i, inner, &own, self.clock)?;
                deltas.push((party, dir.delta));
                for target in self.targets(party) {
                    let wb = gather(&view, &self.data.partition().blocks()[target]);
                    let dir = collaborative_step(
                        &self.states[target],
                        target,
                        self.data.block(target)?,
                        &self.config.hp,
                        &msg,
                        &wb,
                        self.clock,
                    )?;
                    deltas.push((target, dir.delta));
                }
                issued += 1;
            }
            for (party, delta) in deltas {
                self.apply(party, &delta);
            }
            self.clock += 1;
            self.record();
        }
        Ok(EpochStats { max_staleness: 0, max_message_age: 0 })
    }

    fn centralized_epoch(&mut self) -> Result<EpochStats> {
        let hp = &self.config.hp;
        let labels_as = PartyRole::active(0);
        for _ in 0..self.data.n() {
            let (_, i) = self.schedule.next();
            let inner = self.agg.sum(&partials(self.data, &self.w, i), 0)?;
            let t = theta(hp.loss, inner, self.data.label(i, &labels_as)?)?;
            for l in 0..self.data.q() {
                let wb = gather(&self.w, &self.data.partition().blocks()[l]);
                let mut delta = vec![0.0; wb.len()];
                block_delta(&self.states[l], l, t, self.data.block(l)?.row(i), i, &wb, hp, &mut delta)?;
                self.apply(l, &delta);
            }
            self.clock += 1;
            self.record();
        }
        Ok(EpochStats { max_staleness: 0, max_message_age: 0 })
    }
}

impl Engine for DeterministicEngine<'_> {
    fn run_epoch(&mut self, epoch: u64) -> Result<EpochStats> {
        if self.config.hp.algorithm == Algorithm::Svrg {
            let snap = Arc::new(take_snapshot(self.data, &self.w, &self.config.hp, &self.agg, epoch)?);
            self.states = vec![LocalState::Svrg(snap); self.data.q()];
        }
        match self.config.mode {
            Mode::Centralized => self.centralized_epoch(),
            Mode::Sync => self.sync_epoch(),
            Mode::Async | Mode::FrozenPassive => self.async_epoch(),
        }
    }

    fn weights(&self) -> Vec<f64> {
        self.w.clone()
    }

    fn versions(&self) -> Vec<u64> {
        self.versions.clone()
    }

    fn staleness_histogram(&self) -> Vec<u64> {
        self.injector.histogram().to_vec()
    }

    fn simulated_ms(&self) -> Option<f64> {
        Some(self.sim_us / 1e3)
    }

    fn take_trajectory(&mut self) -> Vec<Vec<f64>> {
        std::mem::take(&mut self.trajectory)
    }
}
