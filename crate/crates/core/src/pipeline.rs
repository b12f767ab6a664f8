//! The three reconstruction modes behind `svr reconstruct`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Slice, SliceStack};
use crate::geometry::{DisplacementField, PyramidLevel, RigidTransform};
use crate::init::init_volume;
use crate::optim::{
    alternating_svr_from_fields, effective_levels, finalize, level_geometry, multiscale_refine, prescribed_fields,
    FieldSet, ReconConfig,
};
use crate::sampling::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Splat every slice at its prescribed position.
    #[serde(rename = "init")]
    Init,
    /// Multi-resolution field refinement, then a splat at the refined fields.
    #[serde(rename = "refine")]
    Refine,
    /// Refinement followed by alternating volume and pose updates.
    #[serde(rename = "refine+svr")]
    RefineSvr,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Init, Mode::Refine, Mode::RefineSvr];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Init => "init",
            Mode::Refine => "refine",
            Mode::RefineSvr => "refine+svr",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode `{s}`; expected init, refine or refine+svr")))
    }
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub volume: Volume,
    /// Per stack, per slice.
    pub poses: Vec<Vec<RigidTransform>>,
    /// Full-resolution fields, per stack, per slice.
    pub fields: FieldSet,
    /// Data-consistency history of the alternating loop; empty otherwise.
    pub history: Vec<f64>,
}

fn splat(stacks: &[SliceStack], fields: &FieldSet, dims: [usize; 3], config: &ReconConfig) -> Result<Volume> {
    let slices: Vec<&Slice> = stacks.iter().flat_map(|s| s.slices.iter()).collect();
    let fr: Vec<&DisplacementField> = fields.iter().flatten().collect();
    init_volume(&slices, &fr, dims, stacks[0].in_plane_spacing, config.weight_mode, config.exec)
}

pub fn reconstruct(stacks: &[SliceStack], mode: Mode, config: &ReconConfig) -> Result<Reconstruction> {
    config.validate()?;
    let first = stacks.first().ok_or_else(|| Error::Empty("no stacks".into()))?;
    let dims = config.dims_for(stacks)?;
    let full = PyramidLevel::full(first.center);
    match mode {
        Mode::Init => {
            let fields = prescribed_fields(stacks, &full)?;
            Ok(Reconstruction {
                volume: splat(stacks, &fields, dims, config)?,
                poses: stacks.iter().map(|s| (0..s.len()).map(|n| s.prescribed_pose(n)).collect()).collect(),
                fields,
                history: Vec::new(),
            })
        }
        Mode::Refine | Mode::RefineSvr => {
            let grid = first.grid();
            let n_levels = effective_levels(config.pyramid_levels, grid.width.min(grid.height), config.min_level_size);
            let levels = level_geometry(&grid, dims, first.in_plane_spacing, first.center, n_levels)?;
            let init = prescribed_fields(stacks, &levels[0].level)?;
            let refined = multiscale_refine(stacks, &init, dims, config)?;
            if mode == Mode::Refine {
                let fields = refined.full_resolution().clone();
                return Ok(Reconstruction {
                    volume: splat(stacks, &fields, dims, config)?,
                    poses: finalize(&fields, stacks)?,
                    fields,
                    history: Vec::new(),
                });
            }
            let mut out = alternating_svr_from_fields(stacks, refined.fields_per_level, config)?;
            Ok(Reconstruction {
                volume: out.volume,
                poses: out.poses,
                fields: out.fields_per_level.pop().expect("final fields"),
                history: out.data_consistency_history,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{extract_stacks, Acquisition};
    use crate::optim::PsfChoice;
    use crate::par::Exec;
    use crate::phantom::{make_phantom, PhantomKind};

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("svr".parse::<Mode>().is_err());
    }

    #[test]
    fn init_on_still_thin_stacks_is_lossless() {
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 4).unwrap();
        let acq = Acquisition {
            slice_thickness: 1.0,
            slice_gap: 1.0,
            psf: PsfChoice::Thin,
            ..Acquisition::default()
        };
        let stacks = extract_stacks(&v, &acq, Exec::Sequential).unwrap();
        let r = reconstruct(&stacks, Mode::Init, &ReconConfig::default()).unwrap();
        for i in 0..v.len() {
            if r.volume.covered(i) {
                assert!((r.volume.data[i] - v.data[i]).abs() <= 1e-6);
            }
        }
        assert_eq!(r.poses[2][5], stacks[2].prescribed_pose(5));
        assert!(r.history.is_empty());
    }
}
