//! Training-free differentiable architecture search.
//!
//! A supernet over candidate operations is scored at initialization with
//! zero-cost operation sensitivity (the absolute product of an architecture
//! parameter and its loss gradient) and pruned one operation at a time until
//! a discrete architecture remains. No weight training is involved in the
//! search itself.
//!
//! The crate ships four layers:
//!
//! - [`tensor`]: a small f64 tape with reverse-mode differentiation,
//!   direct convolutions, and finite-difference utilities;
//! - [`spaces`] + [`scoring`] + [`search`]: supernets, sensitivity scores in
//!   vanilla / label-agnostic / data-agnostic variants, summing-up proxy
//!   baselines, and the iterative / one-shot pruning loops;
//! - [`ntk`]: exact finite-width neural-tangent-kernel extraction and the
//!   trace-norm checks backing the scoring theory;
//! - [`oracle`] + [`cli`]: miniature-space ground truth by exhaustive
//!   training, rank/bias reports, and the command-line front end.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod cli;
pub mod ntk;
pub mod oracle;
pub mod report;
pub mod scoring;
pub mod search;
pub mod spaces;
pub mod stats;
pub mod tensor;

pub use spaces::{CellSpace, Genotype, OpKind, SequentialSpace, SpaceError, Supernet};
pub use tensor::{Tape, Tensor, TensorError, Var};
