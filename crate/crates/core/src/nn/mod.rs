//! Dense neural-network substrate: small MLPs with manual backprop, the
//! sinusoidal direction encoding, and Adam.

mod adam;
mod encoding;
mod mlp;

pub use adam::{adam_step, AdamConfig, Moments};
pub use encoding::{positional_encode, positional_encode_backward, DEFAULT_PE_RANK};
pub use mlp::{mlp_backward, mlp_forward, GradTape, Head, Mlp, DEFAULT_HIDDEN};
