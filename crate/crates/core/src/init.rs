//! Normalised splat initialisation of a volume from posed slices.

use crate::error::{Error, Result};
use crate::forward::Slice;
use crate::geometry::{uplift, DisplacementField, RigidTransform};
use crate::par::{self, Exec};
use crate::sampling::{normalize, push_one, PsfKernel, Volume, WeightMode};

/// Splat the foreground pixels of `slices` at `p↑ + f(p)` into a fresh
/// accumulator (data and weight, not normalised).
pub fn accumulate_thin(
    slices: &[&Slice],
    fields: &[&DisplacementField],
    dims: [usize; 3],
    spacing: f64,
    mode: WeightMode,
    exec: Exec,
) -> Result<Volume> {
    if slices.len() != fields.len() {
        return Err(Error::InvalidArgument(format!(
            "{} slices but {} fields",
            slices.len(),
            fields.len()
        )));
    }
    for (s, f) in slices.iter().zip(fields) {
        if s.grid.width != f.width || s.grid.height != f.height {
            return Err(Error::GridMismatch(format!(
                "slice {}x{} vs field {}x{}",
                s.grid.width, s.grid.height, f.width, f.height
            )));
        }
    }
    let empty = Volume::zeros(dims, spacing);
    Ok(par::fold(
        exec,
        slices.len(),
        || empty.clone(),
        |acc, n| {
            let (s, f) = (slices[n], fields[n]);
            for i in 0..s.data.len() {
                if s.mask[i] {
                    push_one(acc, &f.target(i), s.data[i], 1.0, mode);
                }
            }
        },
        |a, b| a.accumulate(&b),
    ))
}

/// Thin-slice initialisation: splat every foreground pixel at
/// `p↑ + f(p)` and divide by the accumulated weight.
pub fn init_volume(
    slices: &[&Slice],
    fields: &[&DisplacementField],
    dims: [usize; 3],
    spacing: f64,
    mode: WeightMode,
    exec: Exec,
) -> Result<Volume> {
    if slices.iter().all(|s| s.foreground_count() == 0) {
        return Err(Error::NoForeground);
    }
    let acc = accumulate_thin(slices, fields, dims, spacing, mode, exec)?;
    Ok(normalize(&acc))
}

/// PSF initialisation: every foreground pixel is spread over its posed PSF
/// taps, then normalised by the total tap weight per voxel.
pub fn init_volume_psf(
    slices: &[&Slice],
    poses: &[RigidTransform],
    psfs: &[&PsfKernel],
    dims: [usize; 3],
    spacing: f64,
    mode: WeightMode,
    exec: Exec,
) -> Result<Volume> {
    if slices.len() != poses.len() || slices.len() != psfs.len() {
        return Err(Error::InvalidArgument("slices, poses and kernels must align".into()));
    }
    if slices.iter().all(|s| s.foreground_count() == 0) {
        return Err(Error::NoForeground);
    }
    let empty = Volume::zeros(dims, spacing);
    let acc = par::fold(
        exec,
        slices.len(),
        || empty.clone(),
        |acc, n| {
            let (s, pose, psf) = (slices[n], &poses[n], psfs[n]);
            let taps: Vec<_> = psf.taps.iter().map(|t| (pose.apply_vector(&t.offset), t.weight)).collect();
            for i in 0..s.data.len() {
                if !s.mask[i] {
                    continue;
                }
                let p = pose.apply(&uplift(s.grid.pixel(i)));
                for (off, w) in &taps {
                    push_one(acc, &(p + off), s.data[i], *w, mode);
                }
            }
        },
        |a, b| a.accumulate(&b),
    );
    Ok(normalize(&acc))
}
