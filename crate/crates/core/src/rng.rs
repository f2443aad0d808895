//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream derived from a base
//! seed plus a key path, so a stream can be recreated in isolation (e.g. the
//! initial noise of the 7th image of the 3rd label) and results do not depend
//! on call interleaving or platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tch::{Kind, Tensor};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha8 stream keyed by `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed);
    for &k in keys {
        state = splitmix(state ^ splitmix(k.wrapping_add(0x51_7CC1_B727_220A)));
    }
    let mut bytes = [0u8; 32];
    let mut s = state;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stream roles used across the crate.
pub mod role {
    pub const BATCH: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const SAMPLE: u64 = 3;
    pub const DISTILL: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const EMBED: u64 = 6;
    pub const DATA: u64 = 7;
}

pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// A standard-normal tensor of the given shape, drawn from `rng`.
pub fn normal_tensor<R: rand::Rng + ?Sized>(rng: &mut R, shape: &[i64], kind: Kind) -> Tensor {
    let n: i64 = shape.iter().product();
    let v = normal_vec(rng, n as usize);
    Tensor::from_slice(&v).reshape(shape).to_kind(kind)
}
