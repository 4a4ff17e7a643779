//! Takeover-driven post-training for a toy language-conditioned driving
//! policy.
//!
//! The crate is organised around the post-training round:
//!
//! 1. [`takeover`]: the learned policy drives while a privileged
//!    [`expert`] watches in shadow mode and takes over when a trigger fires;
//!    takeover and pre-takeover frames land in a [`datastore`].
//! 2. [`sft`]: masked supervised fine-tuning on a mixture of pretraining and
//!    takeover data.
//! 3. [`dreaming`]: group-relative policy optimisation inside replayed
//!    two-second pseudo-simulations of the recorded takeover frames.
//!
//! [`eval`] scores a policy in closed loop, and [`pipeline`] chains the
//! stages into rounds.

pub mod codec;
pub mod collect;
pub mod datastore;
pub mod dreaming;
pub mod error;
pub mod eval;
pub mod expert;
pub mod language;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod sft;
pub mod takeover;
pub mod world;

pub use error::{Error, Result};

// The guide's snippets run as doc-tests so the book cannot drift from the code.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/world.md")]
    struct World;
    #[doc = include_str!("../../../book/src/policy.md")]
    struct Policy;
    #[doc = include_str!("../../../book/src/takeover.md")]
    struct Takeover;
    #[doc = include_str!("../../../book/src/datastore.md")]
    struct Datastore;
    #[doc = include_str!("../../../book/src/sft.md")]
    struct Sft;
    #[doc = include_str!("../../../book/src/dreaming.md")]
    struct Dreaming;
    #[doc = include_str!("../../../book/src/eval.md")]
    struct Eval;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
