//! Counter-based deterministic random streams.
//!
//! Every random decision in the simulator is drawn from a stream keyed by
//! `(master_seed, purpose, round, unit)`. Streams are stateless to construct
//! and independent of scheduling, so a coupled twin run, a re-run on a
//! different thread count, and a lightweight replay of just one client's
//! draws all consume bit-identical values.

use rand_core::RngCore;

/// What a stream is used for. Tags keep unrelated draws independent even
/// when they share a round and unit index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    /// Model parameter initialization.
    Init,
    /// Per-round client subset selection (CFL).
    ClientSelection,
    /// Per-(round, client) minibatch index draws.
    Minibatch,
    /// Synthetic class means.
    PoolMeans,
    /// Per-sample feature noise in the synthetic pool.
    PoolNoise,
    /// Dirichlet proportions per client.
    PartitionProportions,
    /// Per-class shuffles during partitioning.
    PartitionShuffle,
    /// Replacement sample for the neighboring federation.
    Replacement,
    /// Probe draws for constant estimation and generalization probes.
    Probe,
    /// Perturbation position sampling.
    PerturbPositions,
    /// Bootstrap resampling in curve aggregation.
    Bootstrap,
    /// Start vectors for operator-norm power iteration.
    NormEstimate,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Init => 0x01,
            Purpose::ClientSelection => 0x02,
            Purpose::Minibatch => 0x03,
            Purpose::PoolMeans => 0x04,
            Purpose::PoolNoise => 0x05,
            Purpose::PartitionProportions => 0x06,
            Purpose::PartitionShuffle => 0x07,
            Purpose::Replacement => 0x08,
            Purpose::Probe => 0x09,
            Purpose::PerturbPositions => 0x0a,
            Purpose::Bootstrap => 0x0b,
            Purpose::NormEstimate => 0x0c,
        }
    }
}

/// SplitMix64 finalizer; full-avalanche 64-bit mix.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// A counter-based stream: output `i` is a pure function of `(key, i)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(master_seed: u64, purpose: Purpose, round: u64, unit: u64) -> Self {
        let mut key = mix64(master_seed ^ GOLDEN);
        key = mix64(key ^ purpose.tag());
        key = mix64(key ^ round);
        key = mix64(key ^ unit);
        CounterRng { key, counter: 0 }
    }

    /// Standard normal via Box-Muller on two uniform draws. Pinned here so
    /// stream layouts never depend on a distribution crate's internals.
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1], u2 in [0, 1)
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) / 9_007_199_254_740_992.0;
        let u2 = (self.next_u64() >> 11) as f64 / 9_007_199_254_740_992.0;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / 9_007_199_254_740_992.0
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Multiply-shift rejection-free mapping; bias is < 2^-53 for the
        // small ranges used here.
        ((self.next_u64() >> 11) as u128 * n as u128 >> 53) as usize
    }

    /// Fisher-Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample `n` distinct indices from [0, m), returned sorted ascending.
    pub fn sample_distinct_sorted(&mut self, m: usize, n: usize) -> Vec<usize> {
        debug_assert!(n <= m);
        // Partial Fisher-Yates over an index array.
        let mut idx: Vec<usize> = (0..m).collect();
        for i in 0..n {
            let j = i + self.index(m - i);
            idx.swap(i, j);
        }
        let mut picked: Vec<usize> = idx[..n].to_vec();
        picked.sort_unstable();
        picked
    }
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        let v = mix64(self.key ^ self.counter.wrapping_mul(GOLDEN).wrapping_add(1));
        self.counter = self.counter.wrapping_add(1);
        v
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        let mut chunks = dst.chunks_exact_mut(8);
        for chunk in &mut chunks {
            chunk.copy_from_slice(&self.next_u64().to_le_bytes());
        }
        let rem = chunks.into_remainder();
        if !rem.is_empty() {
            let bytes = self.next_u64().to_le_bytes();
            rem.copy_from_slice(&bytes[..rem.len()]);
        }
    }
}
