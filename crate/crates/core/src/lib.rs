//! Bronchovascular bundle modelling for chest CT volumes.
//!
//! The crate is organised as a cascade of stages, each consuming the output
//! of the previous one:
//!
//! * [`airway_prep`]: lung and trachea masks, plus the working mask.
//! * [`gmm`]: intensity quantization and raw bundle extraction.
//! * [`skeleton`]: 3D thinning and skeleton graphs.
//! * [`bundle_tree`]: branch directions, label growing, branch hierarchy.
//! * [`bronchi`]: fast-marching airway modelling with leak repair.
//! * [`volume_qa`]: volume regression and over/under-segmentation checks.
//! * [`pipeline`]: staged, resumable orchestration of all of the above.
//!
//! [`phantom`] generates synthetic CT volumes with exact ground truth.

pub mod airway_prep;
pub mod bronchi;
pub mod bundle_tree;
pub mod components;
pub mod error;
pub mod gmm;
pub mod grid;
pub mod hull;
pub mod io;
pub mod morphology;
pub mod phantom;
pub mod pipeline;
pub mod skeleton;
pub mod volume_qa;

pub use error::{BroncoError, Result};
pub use grid::{BinaryMask, Connectivity, Geometry, Grid, LabelMap, ScalarVolume};
