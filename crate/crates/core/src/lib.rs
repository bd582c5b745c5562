//! Single-stage distillation and few-shot adaptation of diffusion models on
//! synthetic 2-D distributions.
//!
//! A frozen source teacher trained on a large source distribution is
//! compressed into a few-step student while the student is adapted to a
//! handful of target exemplars. The student is driven by a convex mix of two
//! distribution-matching directions (source teacher and an optional target
//! teacher, both measured against an online "fake" teacher that tracks the
//! student) and by a multi-head adversarial loss whose heads sit on the fake
//! teacher's hidden layers.
//!
//! Module map:
//! - [`diffusion`]: noise schedule, ε-prediction denoisers, DDIM sampling.
//! - [`distillation`]: student generator and distribution-matching directions.
//! - [`adversarial`]: discriminator heads and GAN loss families.
//! - [`datasets`]: synthetic source/target benchmarks and few-shot sets.
//! - [`evaluation`]: 2-Wasserstein, intra-cluster diversity, coverage.
//! - [`training`]: the alternating training loop, baselines, checkpoints.

pub mod adversarial;
pub mod datasets;
pub mod diffusion;
pub mod distillation;
mod error;
pub mod evaluation;
pub mod training;

pub use error::{Error, Result};
pub use udad_tensor as tensor;
