//! Density estimation on the unit hypersphere via conditional flow matching.
//!
//! The crate trains a modality-conditioned, time-dependent vector field whose
//! flow transports the uniform distribution on `S^(d-1)` onto an empirical
//! embedding distribution, then scores arbitrary embeddings with their exact
//! negative log-likelihood by integrating the field's divergence backwards
//! along the flow. High scores mark low-density regions, i.e. embeddings the
//! training corpus does not support.
//!
//! Module map:
//!
//! - [`sphere`] — closed-form geometry of `S^(d-1)`: tangent projections,
//!   geodesics, slerp, uniform sampling, log-volume.
//! - [`fieldnet`] — the conditioned vector-field network with hand-written
//!   forward, parameter gradients, and input vector-Jacobian products.
//! - [`trainer`] — flow-matching regression training with AdamW and a
//!   linear-warmup-then-constant schedule.
//! - [`likelihood`] — reverse manifold Euler integration with Hutchinson (or
//!   exact) divergence accumulation, producing per-sample uncertainty scores.
//! - [`datastore`] — embedding file formats, synthetic von Mises-Fisher
//!   generators, and the analytic vMF density used as a recovery oracle.
//! - [`evalkit`] — accuracy-rejection curves, Spearman rank correlation, OOD
//!   ROC/PR, and uncertainty-ranked curation.

pub mod datastore;
pub mod error;
pub mod evalkit;
pub mod fieldnet;
pub mod likelihood;
pub mod sphere;
pub mod trainer;

pub use error::{Error, Result};
pub use fieldnet::FieldParams;
pub use likelihood::{IntegratorConfig, ScoreRecord};
pub use sphere::{Modality, SpherePoint, TangentVector};
pub use trainer::{FlowConfig, GeometryMode};
