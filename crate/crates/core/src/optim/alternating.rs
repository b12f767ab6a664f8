//! Alternating volume and pose estimation with per-slice intensity scales.

use serde::Serialize;

use super::multiscale::{finalize, FieldSet};
use super::pose::{best_scale, group_pose_update, pose_objective, pose_update, GroupMember, PoseOptions};
use super::volume_update::volume_update;
use super::{observations, Observation, ReconConfig};
use crate::error::{Error, Result};
use crate::filter::{smooth_slice, smooth_volume};
use crate::forward::{simulate_slice_psf, Slice, SliceStack};
use crate::geometry::{uplift, DisplacementField, PyramidLevel, RigidTransform};
use crate::init::init_volume_psf;
use crate::metrics::ncc_masked;
use crate::par;
use crate::sampling::{PsfKernel, Volume};

/// One line of the per-iteration log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub data_consistency: f64,
    pub mean_pose_step_deg: f64,
    pub mean_pose_step_vox: f64,
    pub slice_ncc: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SvrResult {
    /// Reconstruction, rescaled by the mean slice scale.
    pub volume: Volume,
    /// Per stack, per slice.
    pub poses: Vec<Vec<RigidTransform>>,
    /// Fields of every refinement level (coarsest first) followed by the
    /// full-resolution fields of the final poses.
    pub fields_per_level: Vec<FieldSet>,
    /// Before the first and after every outer iteration.
    pub data_consistency_history: Vec<f64>,
    pub slice_scales: Vec<Vec<f64>>,
    pub log: Vec<IterationLog>,
}

/// `Σ_n ‖I_n − s_n·M(F_n)V‖²` over observed foreground.
pub fn data_consistency(obs: &[Observation<'_>], poses: &[RigidTransform], scales: &[f64], volume: &Volume) -> f64 {
    obs.iter()
        .zip(poses)
        .zip(scales)
        .map(|((o, p), &s)| pose_objective(o.slice, volume, p, o.psf, s))
        .sum()
}

fn fit_scale(obs: &Observation<'_>, volume: &Volume, pose: &RigidTransform, current: f64) -> f64 {
    let (sim, _) = simulate_slice_psf(volume, pose, &obs.slice.grid, obs.psf);
    best_scale(obs.slice, &sim.data, current)
}

/// Slice objective, with the scale profiled out when `fit` is set.
fn objective(obs: &Observation<'_>, volume: &Volume, pose: &RigidTransform, scale: f64, fit: Option<()>) -> f64 {
    let s = match fit {
        Some(()) => {
            let (sim, _) = simulate_slice_psf(volume, pose, &obs.slice.grid, obs.psf);
            best_scale(obs.slice, &sim.data, scale)
        }
        None => scale,
    };
    pose_objective(obs.slice, volume, pose, obs.psf, s)
}

fn slice_center(obs: &Observation<'_>, pose: &RigidTransform) -> nalgebra::Vector3<f64> {
    pose.apply(&uplift(obs.slice.grid.center()))
}

fn slice_ncc(obs: &Observation<'_>, volume: &Volume, pose: &RigidTransform) -> f64 {
    let (sim, _) = simulate_slice_psf(volume, pose, &obs.slice.grid, obs.psf);
    ncc_masked(&obs.slice.data, &sim.data, &obs.slice.mask).value
}

fn regroup<T: Clone>(flat: &[T], stacks: &[SliceStack]) -> Vec<Vec<T>> {
    let mut it = flat.iter().cloned();
    stacks.iter().map(|s| it.by_ref().take(s.len()).collect()).collect()
}

/// Run the alternating loop from rigid initial poses.
pub fn alternating_svr(
    stacks: &[SliceStack],
    init_poses: &[Vec<RigidTransform>],
    config: &ReconConfig,
) -> Result<SvrResult> {
    run(stacks, init_poses, Vec::new(), config)
}

/// Project full-resolution fields to rigid poses, then run the loop.
pub fn alternating_svr_from_fields(
    stacks: &[SliceStack],
    fields_per_level: Vec<FieldSet>,
    config: &ReconConfig,
) -> Result<SvrResult> {
    let full = fields_per_level
        .last()
        .ok_or_else(|| Error::Empty("no refinement levels".into()))?;
    let poses = finalize(full, stacks)?;
    run(stacks, &poses, fields_per_level, config)
}

fn run(
    stacks: &[SliceStack],
    init_poses: &[Vec<RigidTransform>],
    mut fields_per_level: Vec<FieldSet>,
    config: &ReconConfig,
) -> Result<SvrResult> {
    config.validate()?;
    if stacks.is_empty() {
        return Err(Error::Empty("no stacks".into()));
    }
    for st in stacks {
        st.validate()?;
    }
    if init_poses.len() != stacks.len() || init_poses.iter().zip(stacks).any(|(p, s)| p.len() != s.len()) {
        return Err(Error::InvalidArgument("one initial pose per slice required".into()));
    }
    let dims = config.dims_for(stacks)?;
    let spacing = stacks[0].in_plane_spacing;
    let kernels: Vec<PsfKernel> = stacks.iter().map(|s| config.psf.kernel(s)).collect::<Result<_>>()?;
    let obs = observations(stacks, &kernels);
    let mut poses: Vec<RigidTransform> = init_poses.iter().flatten().copied().collect();
    let mut scales = vec![1.0; obs.len()];

    let slices: Vec<_> = obs.iter().map(|o| o.slice).collect();
    let psfs: Vec<_> = obs.iter().map(|o| o.psf).collect();
    let mut volume = init_volume_psf(&slices, &poses, &psfs, dims, spacing, config.weight_mode, config.exec)?;

    let pose_opts = PoseOptions {
        step_tol_deg: config.pose_step_tol_deg,
        step_tol_vox: config.pose_step_tol_mm / spacing,
        max_iters: config.pose_max_iters,
        max_step_deg: config.pose_max_step_deg,
        max_step_vox: config.pose_max_step_mm / spacing,
        fit_scale: config.intensity_scaling,
        ..PoseOptions::default()
    };
    let mut offset = 0;
    let ranges: Vec<(usize, usize)> = stacks
        .iter()
        .map(|st| {
            let r = (offset, offset + st.len());
            offset += st.len();
            r
        })
        .collect();

    let mut history = vec![data_consistency(&obs, &poses, &scales, &volume)];
    let mut log = Vec::with_capacity(config.outer_iters);
    for iteration in 1..=config.outer_iters {
        let up = volume_update(&obs, &poses, &scales, &volume, config.inner_recon_iters, config.cg_tol, config.exec)?;
        volume = up.volume;

        let fit = config.intensity_scaling.then_some(());
        let schedule = config.smoothing_schedule();
        let pyramid: Vec<(f64, Volume)> = schedule.iter().map(|&sg| (sg, smooth_volume(&volume, sg))).collect();
        if iteration <= config.stack_iters {
            let corrections = par::map(config.exec, stacks.len(), |j| {
                let (a, b) = ranges[j];
                let mut d = RigidTransform::identity();
                for (sg, v) in &pyramid {
                    let smoothed: Vec<Slice> = (a..b).map(|n| smooth_slice(obs[n].slice, *sg)).collect();
                    let members: Vec<GroupMember<'_>> = (a..b)
                        .zip(&smoothed)
                        .map(|(n, sl)| GroupMember {
                            slice: sl,
                            psf: obs[n].psf,
                            pose: d.compose(&poses[n]),
                            scale: scales[n],
                        })
                        .collect();
                    d = group_pose_update(&members, v, &stacks[j].center, &pose_opts).correction.compose(&d);
                }
                d
            });
            for (j, d) in corrections.iter().enumerate() {
                let (a, b) = ranges[j];
                let total = |moved: bool| -> f64 {
                    (a..b)
                        .map(|n| {
                            let p = if moved { d.compose(&poses[n]) } else { poses[n] };
                            objective(&obs[n], &volume, &p, scales[n], fit)
                        })
                        .sum()
                };
                if total(true) <= total(false) {
                    for p in &mut poses[a..b] {
                        *p = d.compose(p);
                    }
                }
            }
        }
        let updates = par::map(config.exec, obs.len(), |n| {
            let opts = PoseOptions {
                scale: scales[n],
                ..pose_opts
            };
            let mut pose = poses[n];
            for (sg, v) in &pyramid {
                let sl = smooth_slice(obs[n].slice, *sg);
                pose = pose_update(&sl, v, &pose, obs[n].psf, &opts).pose;
            }
            pose
        });
        let mut step_deg = 0.0;
        let mut step_vox = 0.0;
        for (n, u) in updates.into_iter().enumerate() {
            let before = objective(&obs[n], &volume, &poses[n], scales[n], fit);
            let after = objective(&obs[n], &volume, &u, scales[n], fit);
            if after <= before {
                let d = u.compose(&poses[n].inverse());
                step_deg += d.angle_deg();
                step_vox += (slice_center(&obs[n], &u) - slice_center(&obs[n], &poses[n])).norm();
                poses[n] = u;
            }
        }

        if config.intensity_scaling {
            scales = par::map(config.exec, obs.len(), |n| fit_scale(&obs[n], &volume, &poses[n], scales[n]));
        }

        let dc = data_consistency(&obs, &poses, &scales, &volume);
        if !dc.is_finite() {
            return Err(Error::Diverged(format!("data consistency at iteration {iteration}")));
        }
        history.push(dc);
        log.push(IterationLog {
            iteration,
            data_consistency: dc,
            mean_pose_step_deg: step_deg / obs.len() as f64,
            mean_pose_step_vox: step_vox / obs.len() as f64,
            slice_ncc: par::map(config.exec, obs.len(), |n| slice_ncc(&obs[n], &volume, &poses[n])),
        });
    }

    let mean_scale = scales.iter().sum::<f64>() / scales.len() as f64;
    let volume = volume.scaled(mean_scale);
    let full = PyramidLevel::full(stacks[0].center);
    let final_fields: FieldSet = stacks
        .iter()
        .zip(regroup(&poses, stacks))
        .map(|(st, ps)| ps.iter().map(|p| DisplacementField::from_pose(p, &st.grid(), &full)).collect())
        .collect();
    fields_per_level.push(final_fields);
    Ok(SvrResult {
        volume,
        poses: regroup(&poses, stacks),
        fields_per_level,
        data_consistency_history: history,
        slice_scales: regroup(&scales, stacks),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{simulate_subject, Acquisition, MotionConfig};
    use crate::par::Exec;
    use crate::phantom::{make_phantom, PhantomKind};

    fn config() -> ReconConfig {
        ReconConfig {
            exec: Exec::Sequential,
            outer_iters: 3,
            ..ReconConfig::default()
        }
    }

    fn prescribed(stacks: &[SliceStack]) -> Vec<Vec<RigidTransform>> {
        stacks.iter().map(|s| (0..s.len()).map(|n| s.prescribed_pose(n)).collect()).collect()
    }

    #[test]
    fn still_subject_keeps_poses() {
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 1).unwrap();
        let acq = Acquisition { slice_thickness: 1.0, slice_gap: 1.0, ..Acquisition::default() };
        let gt = simulate_subject(&v, &acq, &MotionConfig::still(), Exec::Sequential).unwrap();
        let init = prescribed(&gt.corrupted);
        let out = alternating_svr(&gt.corrupted, &init, &config()).unwrap();
        for (a, b) in out.poses.iter().flatten().zip(init.iter().flatten()) {
            assert!(a.compose(&b.inverse()).angle_deg() < 0.05);
            assert!((a.translation - b.translation).norm() < 0.05);
        }
        for w in out.data_consistency_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
    }

    #[test]
    fn history_is_monotone_under_motion() {
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 4).unwrap();
        for seed in 0..3 {
            let mc = MotionConfig { rot_sigma: 5.0, trans_range: 3.0, seed, ..MotionConfig::default() };
            let gt = simulate_subject(&v, &Acquisition::default(), &mc, Exec::Sequential).unwrap();
            let out = alternating_svr(&gt.corrupted, &prescribed(&gt.corrupted), &config()).unwrap();
            assert_eq!(out.data_consistency_history.len(), 4);
            assert_eq!(out.log.len(), 3);
            for w in out.data_consistency_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-6, "seed {seed}: {:?}", out.data_consistency_history);
            }
        }
    }

    #[test]
    fn pose_count_is_checked() {
        let v = make_phantom(PhantomKind::Ellipsoids, [8; 3], 1).unwrap();
        let gt = simulate_subject(&v, &Acquisition::default(), &MotionConfig::still(), Exec::Sequential).unwrap();
        let mut init = prescribed(&gt.corrupted);
        init[0].pop();
        assert!(alternating_svr(&gt.corrupted, &init, &config()).is_err());
    }
}
