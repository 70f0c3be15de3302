use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::rng_stream;

/// How the deterministic scheduler picks read staleness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DelayPolicy {
    /// Uniform over every admissible staleness.
    #[default]
    Uniform,
    /// Always the largest admissible staleness.
    Adversarial,
}

impl std::str::FromStr for DelayPolicy {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Self::Uniform),
            "adversarial" => Ok(Self::Adversarial),
            other => Err(crate::Error::Config(format!("unknown delay policy '{other}'"))),
        }
    }
}

/// Seeded staleness source with instrumentation.
///
/// Staleness is counted in applied block updates: a read with staleness `s`
/// sees the model as it was before the `s` most recent block updates.
#[derive(Debug, Clone)]
pub struct DelayInjector {
    policy: DelayPolicy,
    bound: usize,
    rng: ChaCha8Rng,
    realized_max: usize,
    histogram: Vec<u64>,
}

impl DelayInjector {
    pub fn new(policy: DelayPolicy, bound: usize, seed: u64) -> Self {
        Self {
            policy,
            bound,
            rng: rng_stream(seed, 0x5354_414c),
            realized_max: 0,
            histogram: vec![0; bound + 1],
        }
    }

    pub fn bound(&self) -> usize {
        self.bound
    }

    /// Staleness for the next read when `available` past updates can be
    /// hidden. Never exceeds the bound.
    pub fn inject_delay(&mut self, available: usize) -> usize {
        let cap = available.min(self.bound);
        let s = match self.policy {
            DelayPolicy::Adversarial => cap,
            DelayPolicy::Uniform if cap == 0 => 0,
            DelayPolicy::Uniform => self.rng.gen_range(0..=cap),
        };
        debug_assert!(s <= self.bound);
        self.realized_max = self.realized_max.max(s);
        self.histogram[s] += 1;
        s
    }

    pub fn realized_max(&self) -> usize {
        self.realized_max
    }

    /// Count of reads per staleness value `0..=bound`.
    pub fn histogram(&self) -> &[u64] {
        &self.histogram
    }

    pub(crate) fn reset_max(&mut self) {
        self.realized_max = 0;
    }
}
