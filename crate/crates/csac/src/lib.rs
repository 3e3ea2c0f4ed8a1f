//! Cooperative Soft Actor-Critic (CSAC).
//!
//! Sequential sub-agents solve a decomposed task by training each policy
//! against a convex combination of its own and the next agent's
//! batch-normalised critics, so that every sub-policy leaves the world in a
//! state the next one can work with. The crate ships the full stack needed
//! to study the method on a desk: a small `f64` autodiff core, soft
//! actor-critic agents, per-subtask replay buffers, a continuous multi-room
//! maze with raycast observations, and an epoch-based experiment harness
//! with sweeps, checkpointing and CSV metrics.
//!
//! The `book/` directory holds a guided tour; its code snippets compile as
//! doc-tests of this crate.

pub mod ckpt;
pub mod coop;
pub mod gradcheck;
pub mod harness;
pub mod maze;
pub mod nn;
pub mod replay;
pub mod sac;
pub mod seeding;
pub mod tensor;

pub use nn::{Activation, Adam, GaussianHead, Mlp, NnError, SquashedGaussianPolicy};
pub use tensor::{Tape, Tensor, TensorError, Var};

// The book's code blocks compile as doc-tests of this crate, one module
// per chapter, so the prose cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/sac.md")]
    mod sac {}
    #[doc = include_str!("../../../book/src/cooperation.md")]
    mod cooperation {}
    #[doc = include_str!("../../../book/src/maze.md")]
    mod maze {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
