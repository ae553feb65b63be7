//! Dense FP32 linear algebra, binary16 storage, SVD and the seeded RNG.

mod half;
mod matrix;
mod rng;
mod svd;

pub use self::half::{f32_to_half_bits, half_bits_to_f32, half_roundtrip};
pub use self::matrix::{matvec, DenseMatrix, RowVector};
pub(crate) use self::matrix::matvec_accumulate;
pub use self::rng::{seed_from_env, Rng, SEED_ENV};
pub use self::svd::{svd, Svd, SVD_MAX_SWEEPS, SVD_TOLERANCE};
