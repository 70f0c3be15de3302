//! Real-thread execution.
//!
//! Every active party runs a dominator thread; every party runs `k` workers
//! draining a bounded message queue. The model is a vector of atomically
//! updated cells, so block writes are element-atomic and never torn. A gate
//! bounds how many iterations are in flight, which bounds both read
//! staleness and message delay, counted in iterations.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Barrier, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::deterministic::{make_aggregation, party_stream};
use super::{gather, partials, Engine, EpochStats, Mode, SimConfig, ThetaMessage};
use crate::data::PartitionedDataset;
use crate::error::{Error, Result};
use crate::model::{Algorithm, PartyRole};
use crate::optimizers::{collaborative_step, dominated_step, init_saga_table, take_snapshot, LocalState, SagaBlock};
use crate::secure_agg::Aggregation;

struct Gate {
    in_flight: Mutex<usize>,
    cv: Condvar,
    cap: usize,
}

impl Gate {
    fn new(cap: usize) -> Self {
        Self { in_flight: Mutex::new(0), cv: Condvar::new(), cap }
    }

    /// Blocks until a slot is free; returns how many iterations were
    /// already in flight.
    fn enter(&self) -> usize {
        let mut g = self.in_flight.lock().expect("gate poisoned");
        while *g >= self.cap {
            g = self.cv.wait(g).expect("gate poisoned");
        }
        let before = *g;
        *g += 1;
        before
    }

    fn leave(&self) {
        let mut g = self.in_flight.lock().expect("gate poisoned");
        *g -= 1;
        self.cv.notify_all();
    }

    fn wait_idle(&self) {
        let mut g = self.in_flight.lock().expect("gate poisoned");
        while *g > 0 {
            g = self.cv.wait(g).expect("gate poisoned");
        }
    }
}

/// Held by every envelope of one iteration; the slot is released when the
/// last copy drops.
struct Ticket<'g>(&'g Gate);

impl Drop for Ticket<'_> {
    fn drop(&mut self) {
        self.0.leave();
    }
}

struct Envelope<'g> {
    msg: ThetaMessage,
    sent: Instant,
    _ticket: Arc<Ticket<'g>>,
}

struct AtomicModel {
    cells: Vec<AtomicU64>,
}

impl AtomicModel {
    fn new(w: &[f64]) -> Self {
        Self { cells: w.iter().map(|v| AtomicU64::new(v.to_bits())).collect() }
    }

    fn read(&self) -> Vec<f64> {
        self.cells.iter().map(|c| f64::from_bits(c.load(Ordering::Acquire))).collect()
    }

    fn read_block(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&j| f64::from_bits(self.cells[j].load(Ordering::Acquire))).collect()
    }

    fn add_block(&self, idx: &[usize], delta: &[f64]) {
        for (&j, &d) in idx.iter().zip(delta) {
            let _ = self.cells[j].fetch_update(Ordering::AcqRel, Ordering::Acquire, |bits| {
                Some((f64::from_bits(bits) + d).to_bits())
            });
        }
    }
}

fn pause(us: f64) {
    if us > 0.0 {
        thread::sleep(Duration::from_secs_f64(us * 1e-6));
    }
}

fn sleep_until(t: Instant) {
    let now = Instant::now();
    if t > now {
        thread::sleep(t - now);
    }
}

struct Shared<'e, 'g> {
    engine: &'e ThreadedEngine<'e>,
    states: Vec<LocalState>,
    gate: &'g Gate,
    issued: AtomicUsize,
    stop: AtomicBool,
    error: Mutex<Option<Error>>,
    epoch: u64,
}

impl Shared<'_, '_> {
    fn fail(&self, e: Error) {
        self.stop.store(true, Ordering::SeqCst);
        let mut slot = self.error.lock().expect("error slot poisoned");
        slot.get_or_insert(e);
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }
}

pub(crate) struct ThreadedEngine<'a> {
    config: &'a SimConfig,
    data: &'a PartitionedDataset,
    agg: Aggregation,
    model: AtomicModel,
    versions: Vec<AtomicU64>,
    rngs: Vec<ChaCha8Rng>,
    saga: Option<Vec<Arc<Mutex<SagaBlock>>>>,
    histogram: Vec<u64>,
    nonce: AtomicU64,
}

impl<'a> ThreadedEngine<'a> {
    pub(crate) fn new(config: &'a SimConfig, data: &'a PartitionedDataset) -> Result<Self> {
        let agg = make_aggregation(config)?;
        let w = vec![0.0; data.d()];
        let saga = match config.hp.algorithm {
            Algorithm::Saga => Some(init_saga_table(data, &w, &config.hp, &agg)?.blocks),
            _ => None,
        };
        Ok(Self {
            config,
            data,
            agg,
            model: AtomicModel::new(&w),
            versions: (0..data.q()).map(|_| AtomicU64::new(0)).collect(),
            rngs: (0..config.m).map(|p| party_stream(config.hp.seed, p)).collect(),
            saga,
            histogram: vec![0; bound(config) + 1],
            nonce: AtomicU64::new(0),
        })
    }

    fn block_cost(&self, party: usize) -> f64 {
        self.config.cost.feature_cost_us * self.data.block(party).map_or(0, |b| b.width()) as f64 * self.config.slowdown(party)
    }

    /// Every party computes its partial in parallel, then partials climb
    /// the aggregation tree one hop per level.
    fn aggregation_cost(&self) -> f64 {
        let q = self.data.q();
        let slowest = (0..q).map(|l| self.block_cost(l)).fold(0.0, f64::max);
        let hops = if q > 1 { (usize::BITS - (q - 1).leading_zeros()) as f64 } else { 0.0 };
        slowest + hops * self.config.cost.latency_us
    }

    fn apply(&self, party: usize, delta: &[f64]) {
        self.model.add_block(&self.data.partition().blocks()[party], delta);
        self.versions[party].fetch_add(1, Ordering::AcqRel);
    }

    fn targets(&self, issuer: usize) -> impl Iterator<Item = usize> {
        let limit = if self.config.mode == Mode::FrozenPassive { self.config.m } else { self.config.q };
        (0..limit).filter(move |&l| l != issuer)
    }

    /// Aggregates, computes the dominated update from `view`, charges its
    /// cost and applies it; returns the message to broadcast.
    fn dominate(&self, shared: &Shared<'_, '_>, party: usize, i: usize, view: &[f64]) -> Result<ThetaMessage> {
        let nonce = self.nonce.fetch_add(1, Ordering::Relaxed);
        let inner = self.agg.sum(&partials(self.data, view, i), nonce)?;
        pause(self.aggregation_cost());
        let own = gather(view, &self.data.partition().blocks()[party]);
        let (msg, dir) = dominated_step(
            &shared.states[party],
            &PartyRole::active(party),
            self.data,
            &self.config.hp,
            i,
            inner,
            &own,
            nonce,
        )?;
        pause(self.block_cost(party));
        self.apply(party, &dir.delta);
        Ok(msg)
    }

    fn worker(&self, shared: &Shared<'_, '_>, party: usize, rx: Receiver<Envelope<'_>>) {
        let latency = Duration::from_secs_f64(self.config.cost.latency_us * 1e-6);
        let idx = &self.data.partition().blocks()[party];
        let Ok(features) = self.data.block(party) else { return };
        for env in rx.iter() {
            if shared.stopped() {
                continue;
            }
            sleep_until(env.sent + latency);
            let wb = self.model.read_block(idx);
            match collaborative_step(&shared.states[party], party, features, &self.config.hp, &env.msg, &wb, env.msg.timestamp) {
                Ok(dir) => {
                    pause(self.block_cost(party));
                    self.apply(party, &dir.delta);
                }
                Err(e) => shared.fail(e),
            }
        }
    }

    fn broadcast<'g>(&self, party: usize, msg: ThetaMessage, ticket: &Arc<Ticket<'g>>, senders: &[Sender<Envelope<'g>>]) {
        let sent = Instant::now();
        for t in self.targets(party) {
            // workers outlive every sender, so a send can only fail after a stop
            let _ = senders[t].send(Envelope { msg, sent, _ticket: Arc::clone(ticket) });
        }
    }

    fn async_dominator<'g>(
        &self,
        shared: &Shared<'_, 'g>,
        party: usize,
        rng: &mut ChaCha8Rng,
        senders: &[Sender<Envelope<'g>>],
    ) -> Vec<u64> {
        let n = self.data.n();
        let mut hist = vec![0u64; self.histogram.len()];
        while !shared.stopped() {
            let before = shared.gate.enter();
            let ticket = Arc::new(Ticket(shared.gate));
            if shared.issued.fetch_add(1, Ordering::AcqRel) >= n {
                break;
            }
            let top = hist.len() - 1;
            hist[before.min(top)] += 1;
            let i = rng.gen_range(0..n);
            let view = self.model.read();
            match self.dominate(shared, party, i, &view) {
                Ok(msg) => self.broadcast(party, msg, &ticket, senders),
                Err(e) => shared.fail(e),
            }
        }
        hist
    }

    fn sync_dominator<'g>(
        &self,
        shared: &Shared<'_, 'g>,
        party: usize,
        rng: &mut ChaCha8Rng,
        senders: &[Sender<Envelope<'g>>],
        barrier: &Barrier,
    ) -> Vec<u64> {
        let n = self.data.n();
        let m = self.config.m;
        let mut hist = vec![0u64; self.histogram.len()];
        for round in 0..n.div_ceil(m) {
            barrier.wait();
            let active = round * m + party < n && !shared.stopped();
            let view = active.then(|| self.model.read());
            barrier.wait();
            if let Some(view) = view {
                shared.gate.enter();
                hist[0] += 1;
                let ticket = Arc::new(Ticket(shared.gate));
                let i = rng.gen_range(0..n);
                match self.dominate(shared, party, i, &view) {
                    Ok(msg) => self.broadcast(party, msg, &ticket, senders),
                    Err(e) => shared.fail(e),
                }
            }
            shared.gate.wait_idle();
        }
        hist
    }
}

fn bound(config: &SimConfig) -> usize {
    match config.mode {
        Mode::Sync => 0,
        _ => config.hp.tau1.min(config.hp.tau2),
    }
}

impl Engine for ThreadedEngine<'_> {
    fn run_epoch(&mut self, epoch: u64) -> Result<EpochStats> {
        let q = self.data.q();
        let m = self.config.m;
        let states: Vec<LocalState> = match self.config.hp.algorithm {
            Algorithm::Sgd => vec![LocalState::Sgd; q],
            Algorithm::Svrg => {
                let w = self.model.read();
                let snap = Arc::new(take_snapshot(self.data, &w, &self.config.hp, &self.agg, epoch)?);
                vec![LocalState::Svrg(snap); q]
            }
            Algorithm::Saga => self
                .saga
                .as_ref()
                .expect("SAGA table initialised")
                .iter()
                .map(|b| LocalState::Saga(Arc::clone(b)))
                .collect(),
        };
        let sync = self.config.mode == Mode::Sync;
        let cap = if sync { m } else { bound(self.config) + 1 };
        let gate = Gate::new(cap);
        let mut rngs = std::mem::take(&mut self.rngs);
        let this: &ThreadedEngine<'_> = self;
        let shared = Shared {
            engine: this,
            states,
            gate: &gate,
            issued: AtomicUsize::new(0),
            stop: AtomicBool::new(false),
            error: Mutex::new(None),
            epoch,
        };
        let barrier = Barrier::new(m);
        let hists: Vec<Vec<u64>> = thread::scope(|s| {
            let shared = &shared;
            let mut senders = Vec::with_capacity(q);
            for party in 0..q {
                let (tx, rx) = bounded::<Envelope<'_>>(cap.max(1));
                senders.push(tx);
                for _ in 0..self.config.k {
                    let rx = rx.clone();
                    s.spawn(move || shared.engine.worker(shared, party, rx));
                }
            }
            let handles: Vec<_> = rngs
                .iter_mut()
                .enumerate()
                .map(|(party, rng)| {
                    let senders = senders.clone();
                    let barrier = &barrier;
                    s.spawn(move || {
                        if sync {
                            shared.engine.sync_dominator(shared, party, rng, &senders, barrier)
                        } else {
                            shared.engine.async_dominator(shared, party, rng, &senders)
                        }
                    })
                })
                .collect();
            drop(senders);
            handles.into_iter().map(|h| h.join().expect("dominator panicked")).collect()
        });
        debug_assert_eq!(shared.epoch, epoch);
        let error = shared.error.into_inner().expect("error slot poisoned");
        drop(shared.states);
        self.rngs = rngs;
        if let Some(e) = error {
            return Err(e);
        }
        let mut max_staleness = 0;
        for h in hists {
            for (s, c) in h.into_iter().enumerate() {
                self.histogram[s] += c;
                if c > 0 {
                    max_staleness = max_staleness.max(s);
                }
            }
        }
        Ok(EpochStats { max_staleness, max_message_age: max_staleness })
    }

    fn weights(&self) -> Vec<f64> {
        self.model.read()
    }

    fn versions(&self) -> Vec<u64> {
        self.versions.iter().map(|v| v.load(Ordering::Acquire)).collect()
    }

    fn staleness_histogram(&self) -> Vec<u64> {
        self.histogram.clone()
    }
}
