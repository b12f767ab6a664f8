//! Model-based optimisation: volume and pose updates, multi-resolution
//! displacement-field refinement and the alternating reconstruction loop.

mod alternating;
mod flow;
mod loss;
mod multiscale;
mod pose;
mod volume_update;

pub use alternating::{
    alternating_svr, alternating_svr_from_fields, data_consistency, IterationLog, SvrResult,
};
pub use flow::{flow_residual, probe_slice, probe_slice_reduced, FlowParams, FlowProbe, FlowResidual, ThroughPlane};
pub use loss::{multilayer_residual_loss, upsample_to_full};
pub use multiscale::{
    effective_levels, finalize, level_geometry, multiscale_refine, prescribed_fields, FieldSet,
    rigid_from_flow, LevelGeometry, RefineOutput,
};
pub use pose::{
    fd_jacobian, group_pose_update, perturb, pose_objective, pose_update, GroupMember, GroupUpdate, PoseOptions,
    PoseStatus, PoseUpdate,
};
pub use volume_update::{volume_update, SolveStatus, VolumeUpdate};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Slice, SliceStack};
use crate::par::Exec;
use crate::sampling::{PsfKernel, WeightMode};

/// A slice paired with the PSF it was acquired through.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub slice: &'a Slice,
    pub psf: &'a PsfKernel,
}

/// Kernel used by the alternating reconstruction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsfChoice {
    #[default]
    Boxcar,
    Gaussian,
    Thin,
}

impl PsfChoice {
    pub fn kernel(self, stack: &SliceStack) -> Result<PsfKernel> {
        match self {
            PsfChoice::Boxcar => stack.boxcar_psf(),
            PsfChoice::Gaussian => {
                PsfKernel::gaussian(stack.slice_thickness, stack.in_plane_spacing, stack.in_plane_spacing)
            }
            PsfChoice::Thin => Ok(PsfKernel::thin()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Outer alternations of volume and pose updates.
    pub outer_iters: usize,
    /// Krylov iterations per volume update.
    pub inner_recon_iters: usize,
    /// Relative normal-equation residual at which the volume solve stops.
    pub cg_tol: f64,
    pub pose_step_tol_deg: f64,
    pub pose_step_tol_mm: f64,
    pub pose_max_iters: usize,
    /// Gaussian σ (voxels) of the coarsest registration pass; each pose
    /// update runs passes at σ, σ/2, … (down to 0.5) and then unsmoothed.
    pub pose_smoothing: f64,
    /// Trust region of a single Gauss–Newton step.
    pub pose_max_step_deg: f64,
    pub pose_max_step_mm: f64,
    /// Outer iterations (from the first) that register every stack as a
    /// rigid whole before the per-slice updates.
    pub stack_iters: usize,
    /// Requested pyramid depth; capped so the coarsest grid keeps
    /// `min_level_size` pixels.
    pub pyramid_levels: usize,
    pub min_level_size: usize,
    pub refine_iters_per_level: usize,
    /// Largest per-update displacement, in level voxels.
    pub max_disp: f64,
    pub flow_window: usize,
    pub flow_damping: f64,
    pub through_plane: ThroughPlane,
    /// Constrain each refinement update to a rigid motion of the slice.
    pub rigid_updates: bool,
    pub psf: PsfChoice,
    pub weight_mode: WeightMode,
    pub intensity_scaling: bool,
    /// Output grid; defaults to a cube matching the slice grid.
    pub volume_dims: Option<[usize; 3]>,
    pub exec: Exec,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            outer_iters: 5,
            inner_recon_iters: 3,
            cg_tol: 1e-6,
            pose_step_tol_deg: 0.01,
            pose_step_tol_mm: 0.01,
            pose_max_iters: 20,
            pose_smoothing: 0.0,
            pose_max_step_deg: 2.0,
            pose_max_step_mm: 1.0,
            stack_iters: 2,
            pyramid_levels: 5,
            min_level_size: 8,
            refine_iters_per_level: 3,
            max_disp: 1.0,
            flow_window: 5,
            flow_damping: 1e-3,
            through_plane: ThroughPlane::Linearized,
            rigid_updates: true,
            psf: PsfChoice::Boxcar,
            weight_mode: WeightMode::Unit,
            intensity_scaling: true,
            volume_dims: None,
            exec: Exec::Parallel,
        }
    }
}

impl ReconConfig {
    /// Gaussian σ of each registration pass, coarsest first and always
    /// ending with the unsmoothed data.
    pub fn smoothing_schedule(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut s = self.pose_smoothing;
        while s >= 0.5 {
            out.push(s);
            s /= 2.0;
        }
        out.push(0.0);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("outer_iters", self.outer_iters),
            ("inner_recon_iters", self.inner_recon_iters),
            ("pose_max_iters", self.pose_max_iters),
            ("pyramid_levels", self.pyramid_levels),
            ("refine_iters_per_level", self.refine_iters_per_level),
            ("flow_window", self.flow_window),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        let tols = [
            ("cg_tol", self.cg_tol),
            ("pose_step_tol_deg", self.pose_step_tol_deg),
            ("pose_step_tol_mm", self.pose_step_tol_mm),
            ("max_disp", self.max_disp),
            ("pose_max_step_deg", self.pose_max_step_deg),
            ("pose_max_step_mm", self.pose_max_step_mm),
        ];
        for (name, v) in tols {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(self.pose_smoothing >= 0.0 && self.pose_smoothing.is_finite()) {
            return Err(Error::InvalidArgument("pose_smoothing must be non-negative".into()));
        }
        if self.flow_damping < 0.0 {
            return Err(Error::InvalidArgument("flow_damping must be non-negative".into()));
        }
        Ok(())
    }

    /// Reconstruction grid for `stacks`.
    pub fn dims_for(&self, stacks: &[SliceStack]) -> Result<[usize; 3]> {
        if let Some(d) = self.volume_dims {
            return Ok(d);
        }
        let n = stacks
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| s.grid().width.max(s.grid().height))
            .max()
            .ok_or_else(|| Error::Empty("no slices".into()))?;
        Ok([n; 3])
    }
}

/// Flatten `stacks` into observations with one kernel per stack.
pub(crate) fn observations<'a>(stacks: &'a [SliceStack], kernels: &'a [PsfKernel]) -> Vec<Observation<'a>> {
    stacks
        .iter()
        .zip(kernels)
        .flat_map(|(st, k)| st.slices.iter().map(move |s| Observation { slice: s, psf: k }))
        .collect()
}
