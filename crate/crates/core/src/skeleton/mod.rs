//! Skeletonization of binary masks and skeleton graphs.

mod graph;
mod thinning;

pub use graph::{build_graph, check_coverage, degree_histogram, SkeletonEdge, SkeletonGraph, SkeletonNode};
pub use thinning::{skeletonize, skeletonize_with, Skeleton, SkeletonParams};
