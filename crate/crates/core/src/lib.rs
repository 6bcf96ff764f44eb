//! Online shape-and-caption augmentation for cross-modal 3D retrieval.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] point-cloud primitives (centroid, bounds, gaps, containment).
//! * [`library`] the component library of captioned parts and assembly schemas.
//! * [`augment`] assembles sampled parts into labelled shapes with paired captions.
//! * [`encoders`] toy-scale point and text encoders with hand-written gradients.
//! * [`matching`] cosine transport costs, log-domain Sinkhorn and the EMD score.
//! * [`objective`] contrastive losses, Adam and the training loop.
//! * [`evalharness`] RR@k / NDCG@k retrieval metrics.

pub mod augment;
pub mod encoders;
pub mod error;
pub mod evalharness;
pub mod geometry;
pub mod library;
pub mod matching;
pub mod objective;
pub mod rng;

pub use error::{Error, Result};
