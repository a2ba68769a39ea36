//! Dense tensors, a reverse-mode tape, and AdamW.

mod optim;
mod tape;
mod tensor;

pub use optim::{adamw_step, AdamState, AdamW, Optimizer};
pub use tape::{Tape, Var};
pub use tensor::{checksum_all, Tensor};

/// Mixes `parts` into `base` (splitmix64 finalizer per step), giving
/// independent-looking seeds for named sub-streams.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(*p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}
