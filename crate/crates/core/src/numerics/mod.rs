//! Dense-array numerics with reverse-mode differentiation.
//!
//! Double precision throughout. Forward passes are recorded on a
//! single-use [`Graph`] tape; parameters live in a [`ParamStore`] keyed by
//! dotted paths and are leased into each graph.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod mat;
pub mod params;
pub mod rng;

pub use gradcheck::{finite_difference_check, GradCheckReport, DEFAULT_FD_STEP};
pub use graph::{Activation, Graph, Reduce, TensorId};
pub use layers::{Ffn, LayerNorm, Linear, Mlp, LN_EPS};
pub use mat::{Mat, NumericsError};
pub use params::{glorot_uniform, ParamStore};
pub use rng::{derive_seed, seeded_rng, stream};
