//! Deterministic 64-bit generator used for all seeded sampling.
//!
//! SplitMix64 is fixed here so that a seed selects the same claims on every
//! platform and in every future release; swapping in a library RNG would
//! silently change published numbers.

/// SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `0..bound` via modulo reduction. `bound` must be > 0.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        self.next_u64() % bound
    }

    /// Uniform f64 in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// FNV-1a over arbitrary bytes; used to derive per-record seed streams and
/// to bucket tokens in the hashing mock embedder.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01B3);
    }
    hash
}

/// Mixes a run seed with a record id so each record gets an independent,
/// reproducible stream from one configured seed.
pub fn record_seed(seed: u64, record_id: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + record_id.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(record_id.as_bytes());
    fnv1a64(&bytes)
}
