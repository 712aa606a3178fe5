//! Facial shadow benchmark toolkit.
//!
//! The crate is organised around the stages of a shadow-robustness benchmark:
//!
//! - [`imaging`]: image / scalar-field containers, CIELAB conversion and PNG I/O.
//! - [`shadow_synth`]: depth-aware shadow matte rendering and the shadow
//!   compositing model, with analytic derivatives.
//! - [`factor_bench`]: intensity / size / shape / location factor sampling and
//!   the 81-cell factor grid generator.
//! - [`adv_attack`]: sign-gradient adversarial shadow mining against a
//!   pluggable landmark detector.
//! - [`metrics`]: LAB RMSE with shadow region splits, NME and report aggregation.
//! - [`mafus`]: forward reference of the mutual attention fusion block, the
//!   recovery network and the training losses.
//! - [`harness`]: configuration and the command implementations behind the
//!   `shadowbench` binary.

pub mod adv_attack;
pub mod error;
pub mod factor_bench;
pub mod fixtures;
pub mod harness;
pub mod imaging;
pub mod mafus;
pub mod metrics;
pub mod rng;
pub mod shadow_synth;

pub use error::{Error, Result};
pub use imaging::{Image, LabImage, ScalarField};
