//! Fixed-length encodings of parts, instructions and trajectories.

mod grid;
mod text;
mod traj;

pub use grid::{
    compact_grids, voxelize_indices, voxelize_local, CompactGridPair, CompactSpec, GridSpec, OccupancyGrid, SparseGrid,
};
pub use text::{bag_of_words, tokenize, Vocabulary, WordBag};
pub use traj::{normalize_trajectory, NormalizedTrajectory, Resample, TrajectorySpec, TRAJ_DIM, TRAJ_WAYPOINTS, WAYPOINT_DIM};

use crate::data::{PointCloud, SegmentedPart, Trajectory};
use crate::error::Result;

/// Settings for every modality.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FeatureSpec {
    pub grid: GridSpec,
    pub compact: CompactSpec,
    pub trajectory: TrajectorySpec,
}

pub fn voxelize(cloud: &PointCloud, part: &SegmentedPart, spec: &GridSpec) -> Result<OccupancyGrid> {
    voxelize_indices(cloud, &part.point_indices, &part.frame, spec)
}

/// Flattened compact-grid vector for a part.
pub fn part_vector(cloud: &PointCloud, part: &SegmentedPart, spec: &FeatureSpec) -> Result<Vec<f64>> {
    let full = voxelize(cloud, part, &spec.grid)?;
    Ok(compact_grids(&full, &spec.compact)?.flattened())
}

pub fn trajectory_vector(t: &Trajectory, spec: &TrajectorySpec) -> Result<Vec<f64>> {
    Ok(normalize_trajectory(&t.waypoints, spec)?.flattened(spec))
}
