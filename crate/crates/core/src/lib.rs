//! Physics-embedded single-image dehazing.
//!
//! The forward haze model `I = J·t + A(1 − t)` is used both to synthesize
//! training data ([`datagen`]) and, inverted, as a differentiable layer
//! ([`physics`], [`graph`]) that couples the transmission estimator
//! ([`transmission_net`]) and the airlight estimator ([`airlight_net`]) during
//! joint training ([`trainer`]) against a joint discriminator
//! ([`discriminator`]). [`eval`] provides SSIM scoring and the ablation harness.
//!
//! All arithmetic is `f64` on NCHW [`Tensor`]s with a small tape-based reverse
//! mode engine; networks are sized for CPU training at 64×64.

pub mod airlight_net;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod graph;
pub mod imageio;
pub mod kernels;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod physics;
pub mod tensor;
pub mod trainer;
pub mod transmission_net;

pub use error::{Error, Result};
pub use tensor::Tensor;
