//! Distribution-regularized self-training for two-domain semantic
//! segmentation.
//!
//! The pipeline trains a small segmentation network on a labeled source
//! domain, then adapts it to an unlabeled target domain through rounds of
//! class-balanced pseudo-labeling. A parallel embedding head regularizes
//! the feature space with a bank of per-class mode prototypes (several
//! modes per class, capturing multi-modal appearance), and a stochastic
//! cross-domain triplet loss pulls same-mode embeddings of the two
//! domains together. A synthetic shape benchmark with a controllable
//! photometric domain shift makes the whole loop runnable and testable in
//! minutes on one CPU core.

pub mod alignment;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mmdl;
pub mod ops;
pub mod params;
pub mod pseudolabel;
pub mod report;
pub mod rng;
pub mod segnet;
pub mod tape;
pub mod toyworld;
pub mod trainer;
pub mod types;

pub use error::{DrslError, Result};
pub use types::{Domain, ImageTensor, LabelMap, IGNORE};
