//! Open-vocabulary features for class-agnostic 3D instance masks.
//!
//! Given a reconstructed point cloud, posed RGB-D frames and a set of 3D mask
//! proposals, the pipeline:
//!
//! 1. splits proposals into spatially contiguous pieces ([`proposals`]),
//! 2. counts how many points of each mask are visible in each frame and keeps
//!    the best views ([`visibility`]),
//! 3. refines a 2D mask per view with a point-prompted segmenter and derives
//!    nested multi-scale crops ([`mask2d`]),
//! 4. embeds the crops and averages them into one feature per mask ([`features`]).
//!
//! The resulting feature store supports text retrieval and closed-vocabulary
//! labeling ([`query`]) and AP evaluation against ground truth ([`eval`]).
//! Models live behind the [`mask2d::Segmenter`] and
//! [`features::EmbeddingProvider`] traits; [`sidecar`] talks to an external
//! inference process and [`synthetic`] provides deterministic stand-ins.

pub mod error;
pub mod eval;
pub mod features;
pub mod mask2d;
pub mod npy;
pub mod pipeline;
pub mod ply;
pub mod proposals;
pub mod query;
pub mod scene;
pub mod sidecar;
pub mod synthetic;
pub mod visibility;

pub use error::FormatError;
