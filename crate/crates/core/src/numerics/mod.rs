//! Dense arrays, trainable layers with explicit backward passes, the
//! optimizer and gradient checking.

pub mod array;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod param;

pub use array::NumArray;
pub use layers::{affine, maxpool1d_same, BiGru, Conv1d, ConvBank, Embedding, Gru, Highway, Linear};
pub use ops::{dropout_mask, softmax};
pub use optim::{adam_step, clip_grad_norm, noam_lr, LrSchedule, OptimizerState};
pub use param::{Grads, Param, ParamId, ParamSet};

/// The single seedable generator type used for every stochastic operation.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Generator for an independent stream of the run seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    use rand::SeedableRng;
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
