//! Dense tensors, seeded randomness, hand-written reverse-mode rules and gradient checking.

mod gradcheck;
pub mod ops;
pub mod pool;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamSet, FD_STEP};
pub use ops::{dropout_mask, layer_norm, leaky_relu, matmul};
pub use pool::{adaptive_max_pool, adaptive_max_pool_runs, bin_range, PooledRuns, PooledSequence};
pub use rng::{SeededRng, RNG_ALGORITHM};
pub use tensor::Tensor;
