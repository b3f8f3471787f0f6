//! Desk-scale pipeline for artifact classification as a reward signal:
//! a taxonomy-driven classifier interface, a text-similarity reward, a toy
//! denoising diffusion model over procedural scenes, and the policy-gradient
//! trainer that ties them together, plus the evaluation machinery
//! (multi-label metrics, IOU detection scoring, instruction templates,
//! annotated dataset format).

pub mod error;
pub mod annotations;
pub mod ddpo;
pub mod diffusion;
pub mod instructions;
pub mod metrics;
pub mod reward;
pub mod scenes;
pub mod taxonomy;
pub mod textsim;

pub use error::{Error, Result};
