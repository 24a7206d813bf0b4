//! Airway segmentation by fast marching over a gradient speed image, walked
//! node by node along the candidate-region graph with leak detection.

mod fmm;
mod leak;
mod model;
mod speed;

pub use fmm::{fast_march, fast_march_with, MarchResult, DEFAULT_SOURCE_RADIUS};
pub use leak::{repair_leak, LeakOutcome, LeakRepair, DEFAULT_MAX_EROSIONS};
pub use model::{
    initial_bronchi_mask, model_bronchi, node_log_jsonl, parse_node_log, BronchiParams, BronchiResult,
    CandidateClasses, NodeAction, NodeLog, StopReference,
};
pub use speed::{block, gradient_magnitude, speed_image, BLOCKED_SPEED};
