//! Deterministic 64-bit generator behind every fixture and parameter.
//!
//! splitmix64 with the published constants; the stream for a given seed is
//! bit-identical on every platform.

const INCREMENT: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_A: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_B: u64 = 0x94D0_49BB_1331_11EB;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng64 {
    state: u64,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(INCREMENT);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(MIX_A);
        z = (z ^ (z >> 27)).wrapping_mul(MIX_B);
        z ^ (z >> 31)
    }

    /// Uniform draw in [-0.05, 0.05): (u / 2^64) * 0.1 - 0.05, rounded to f32.
    pub fn next_unit(&mut self) -> f32 {
        let u = self.next_u64();
        ((u as f64 / 18_446_744_073_709_551_616.0) * 0.1 - 0.05) as f32
    }
}
