//! Rigid transforms, slice-pose displacement fields and trajectories.
//!
//! Coordinate conventions used throughout the crate:
//!
//! - Volume coordinates are voxel indices (x fastest), continuous.
//! - A slice pixel `p = (px, py)` lives at `(px, py, 0)` in its own frame.
//! - A slice pose maps slice-frame coordinates (pixel units) into volume
//!   voxel coordinates. In-plane pixel spacing equals the voxel spacing.
//! - Resolution pyramids are corner aligned: pixel `p` at a level with
//!   scale `σ` sits at full-resolution position `σ·p`.

mod arun;
mod field;
mod trajectory;
mod transform;

pub use arun::{project_to_rigid, project_to_rigid_weighted, rigid_fit};
pub use field::{
    prescribed_pose_field, reduced_len, uplift, DisplacementField, PixelGrid, PyramidLevel,
};
pub use trajectory::{interpolate_rigid_trajectory, CubicBSpline};
pub use transform::RigidTransform;
