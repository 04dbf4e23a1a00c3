//! Seeded generators for synthetic weights and clips.
//!
//! Everything random in the crate flows through ChaCha8 seeded from a `u64`,
//! so a seed fully determines every output on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Matrix;
use crate::Scalar;

/// Default half-width of the uniform weight initializer.
pub const INIT_SCALE: f64 = 0.02;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed, e.g. one per layer.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        ^ stream
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform_matrix<T: Scalar, R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.gen_range(-scale..=scale)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches shape")
}

pub fn uniform_vec<T: Scalar, R: Rng>(rng: &mut R, len: usize, scale: f64) -> Vec<T> {
    (0..len)
        .map(|_| T::lit(rng.gen_range(-scale..=scale)))
        .collect()
}
