//! Seeded random sources. Every stochastic component of a run draws from its
//! own stream derived from the run seed, so adding draws in one component
//! never shifts another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type RunRng = ChaCha8Rng;

/// Stream tags used by the runner.
pub mod stream {
    pub const TASKS: u64 = 1;
    pub const ENV: u64 = 2;
    pub const INIT: u64 = 3;
    pub const ACT: u64 = 4;
    pub const REPLAY: u64 = 5;
    pub const UPDATE: u64 = 6;
    pub const EVAL: u64 = 7;
    pub const SCHEDULE: u64 = 8;
    pub const SWEEP: u64 = 9;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(tag.wrapping_mul(0x2545_F491_4F6C_DD1D)))
}

pub fn seeded(seed: u64) -> RunRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, tag: u64) -> RunRng {
    seeded(derive_seed(seed, tag))
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
