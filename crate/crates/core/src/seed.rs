//! Stable seed derivation.
//!
//! Sub-streams of randomness (per segment, per iteration, per resample) are
//! derived from a master seed by hashing a label path with a fixed 64-bit
//! mixer. The scheme is independent of `std`'s hasher so derived seeds are
//! identical across platforms, Rust versions, and process runs.

/// splitmix64 finalizer; full-avalanche 64-bit mixing.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Accumulates labeled components into a single derived seed.
#[derive(Clone, Copy, Debug)]
pub struct SeedDeriver {
    state: u64,
}

impl SeedDeriver {
    pub fn new(master: u64) -> Self {
        Self { state: mix(master ^ 0x6573_645f_7365_6564) }
    }

    pub fn with_u64(mut self, value: u64) -> Self {
        self.state = mix(self.state ^ mix(value));
        self
    }

    pub fn with_str(mut self, value: &str) -> Self {
        for chunk in value.as_bytes().chunks(8) {
            let mut word = [0u8; 8];
            word[..chunk.len()].copy_from_slice(chunk);
            self.state = mix(self.state ^ u64::from_le_bytes(word) ^ chunk.len() as u64);
        }
        // Separator so "ab" + "c" and "a" + "bc" derive differently.
        self.state = mix(self.state ^ value.len() as u64 ^ 0x5345_5041_5241_544f);
        self
    }

    pub fn finish(self) -> u64 {
        mix(self.state)
    }
}

/// Derives a seed for a (segment, iteration)-style sub-stream.
pub fn derive_seed(master: u64, labels: &[&str], indices: &[u64]) -> u64 {
    let mut d = SeedDeriver::new(master);
    for label in labels {
        d = d.with_str(label);
    }
    for &index in indices {
        d = d.with_u64(index);
    }
    d.finish()
}
