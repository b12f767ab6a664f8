//! Per-slice rigid registration to a fixed volume by Gauss–Newton.
//!
//! The six parameters are a rotation vector in degrees and a translation in
//! voxels, applied on the left of the current pose about the slice centre in
//! volume coordinates. The Jacobian is taken by central finite differences of
//! the PSF forward model.

use nalgebra::{Matrix6, Vector3, Vector6};

use crate::forward::{simulate_slice_psf, Slice};
use crate::geometry::{uplift, RigidTransform};
use crate::sampling::{PsfKernel, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseOptions {
    pub step_tol_deg: f64,
    /// Translation step tolerance, voxels.
    pub step_tol_vox: f64,
    pub max_iters: usize,
    pub fd_step_deg: f64,
    pub fd_step_vox: f64,
    pub max_halvings: usize,
    /// Trust region: each Gauss–Newton step is shortened so its rotation and
    /// translation parts stay within these bounds.
    pub max_step_deg: f64,
    pub max_step_vox: f64,
    /// Intensity scale applied to the simulated slice.
    pub scale: f64,
    /// Replace `scale` by its least-squares optimum (clamped at zero) for
    /// every evaluated pose.
    pub fit_scale: bool,
}

impl Default for PoseOptions {
    fn default() -> Self {
        Self {
            step_tol_deg: 0.01,
            step_tol_vox: 0.01,
            max_iters: 20,
            fd_step_deg: 0.1,
            fd_step_vox: 0.1,
            max_halvings: 12,
            max_step_deg: f64::INFINITY,
            max_step_vox: f64::INFINITY,
            scale: 1.0,
            fit_scale: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseStatus {
    /// Step fell below tolerance, or no descent step was found.
    Converged,
    MaxIters,
    /// No foreground pixels; pose left unchanged.
    Skipped,
}

#[derive(Clone, Copy, Debug)]
pub struct PoseUpdate {
    pub pose: RigidTransform,
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
    pub status: PoseStatus,
    /// Total rotation between the initial and returned pose, degrees.
    pub rotation_change_deg: f64,
    /// Displacement of the slice centre, voxels.
    pub translation_change_vox: f64,
}

/// `D(θ)∘pose`, with `D` acting about `center`.
pub fn perturb(pose: &RigidTransform, params: &[f64; 6], center: &Vector3<f64>) -> RigidTransform {
    RigidTransform::from_params(params).about(center).compose(pose)
}

fn slice_center(slice: &Slice, pose: &RigidTransform) -> Vector3<f64> {
    pose.apply(&uplift(slice.grid.center()))
}

/// Least-squares `s ≥ 0` minimising `Σ (I − s·sim)²` over the mask, or
/// `fallback` when the simulation vanishes there.
pub fn best_scale(observed: &Slice, sim: &[f64], fallback: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &m) in observed.mask.iter().enumerate() {
        if m {
            num += observed.data[i] * sim[i];
            den += sim[i] * sim[i];
        }
    }
    if den > 0.0 {
        (num / den).max(0.0)
    } else {
        fallback
    }
}

fn residual_with(slice: &Slice, volume: &Volume, pose: &RigidTransform, psf: &PsfKernel, scale: Option<f64>) -> Vec<f64> {
    let (sim, _) = simulate_slice_psf(volume, pose, &slice.grid, psf);
    let s = scale.unwrap_or_else(|| best_scale(slice, &sim.data, 0.0));
    slice
        .mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| slice.data[i] - s * sim.data[i])
        .collect()
}

/// Masked residual `I − s·sim` over the observed foreground.
fn residual(slice: &Slice, volume: &Volume, pose: &RigidTransform, psf: &PsfKernel, scale: f64) -> Vec<f64> {
    residual_with(slice, volume, pose, psf, Some(scale))
}

/// `Σ (I − s·sim)²` over the observed foreground.
pub fn pose_objective(slice: &Slice, volume: &Volume, pose: &RigidTransform, psf: &PsfKernel, scale: f64) -> f64 {
    residual(slice, volume, pose, psf, scale).iter().map(|r| r * r).sum()
}

fn fd_columns<F: Fn(&RigidTransform) -> Vec<f64>>(
    residual: &F,
    center: &Vector3<f64>,
    opts: &PoseOptions,
    order: usize,
    n: usize,
) -> Vec<[f64; 6]> {
    let mut jac = vec![[0.0; 6]; n];
    let at = |k: usize, h: f64| {
        let mut p = [0.0; 6];
        p[k] = h;
        residual(&perturb(&RigidTransform::identity(), &p, center))
    };
    for k in 0..6 {
        let h = if k < 3 { opts.fd_step_deg } else { opts.fd_step_vox };
        // Residual is I − s·sim, so −residual differences give s·sim differences.
        let col: Vec<f64> = if order == 4 {
            let (m2, m1, p1, p2) = (at(k, -2.0 * h), at(k, -h), at(k, h), at(k, 2.0 * h));
            (0..n)
                .map(|i| -(-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h))
                .collect()
        } else {
            let (m1, p1) = (at(k, -h), at(k, h));
            (0..n).map(|i| -(p1[i] - m1[i]) / (2.0 * h)).collect()
        };
        for (row, v) in jac.iter_mut().zip(col) {
            row[k] = v;
        }
    }
    jac
}

/// Derivatives of the scaled simulation w.r.t. the six parameters at zero,
/// one column per parameter, rows over foreground pixels.
///
/// `order` 2 uses the central stencil; 4 the five-point stencil.
pub fn fd_jacobian(
    slice: &Slice,
    volume: &Volume,
    pose: &RigidTransform,
    psf: &PsfKernel,
    opts: &PoseOptions,
    order: usize,
) -> Vec<[f64; 6]> {
    let center = slice_center(slice, pose);
    let r = |d: &RigidTransform| residual(slice, volume, &d.compose(pose), psf, opts.scale);
    fd_columns(&r, &center, opts, order, slice.foreground_count())
}

struct Solve {
    correction: RigidTransform,
    objective: f64,
    iterations: usize,
    status: PoseStatus,
}

/// Gauss–Newton over a left correction `D` acting about `D(c0)`.
fn gauss_newton<F: Fn(&RigidTransform) -> Vec<f64>>(residual: F, c0: &Vector3<f64>, e0: f64, opts: &PoseOptions) -> Solve {
    let objective = |d: &RigidTransform| residual(d).iter().map(|r| r * r).sum::<f64>();
    let mut d = RigidTransform::identity();
    let mut e = e0;
    let mut status = PoseStatus::MaxIters;
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        iterations += 1;
        let r = residual(&d);
        let center = d.apply(c0);
        let shifted = |x: &RigidTransform| residual(&x.compose(&d));
        let jac = fd_columns(&shifted, &center, opts, 2, r.len());
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (row, ri) in jac.iter().zip(&r) {
            let j = Vector6::from_row_slice(row);
            jtj += j * j.transpose();
            jtr += j * *ri;
        }
        let damping = 1e-9 * jtj.trace().max(f64::MIN_POSITIVE);
        jtj += Matrix6::identity() * damping;
        let Some(step) = jtj.cholesky().map(|c| c.solve(&jtr)) else {
            status = PoseStatus::Converged;
            break;
        };
        let rot = Vector3::new(step[0], step[1], step[2]).norm();
        let trans = Vector3::new(step[3], step[4], step[5]).norm();
        let mut alpha = 1f64.min(opts.max_step_deg / rot).min(opts.max_step_vox / trans);
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let s = step * alpha;
            let cand = perturb(&d, &[s[0], s[1], s[2], s[3], s[4], s[5]], &center);
            let ec = objective(&cand);
            if ec < e {
                accepted = Some((cand, ec, s));
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, ec, s)) = accepted else {
            status = PoseStatus::Converged;
            break;
        };
        d = cand;
        e = ec;
        let rot = Vector3::new(s[0], s[1], s[2]).norm();
        let trans = Vector3::new(s[3], s[4], s[5]).norm();
        if rot < opts.step_tol_deg && trans < opts.step_tol_vox {
            status = PoseStatus::Converged;
            break;
        }
    }
    Solve {
        correction: d,
        objective: e,
        iterations,
        status,
    }
}

fn has_signal(slice: &Slice) -> bool {
    slice.data.iter().zip(&slice.mask).any(|(v, &m)| m && *v != 0.0)
}

/// Gauss–Newton registration of one slice; the returned objective never
/// exceeds the initial one.
pub fn pose_update(
    slice: &Slice,
    volume: &Volume,
    pose0: &RigidTransform,
    psf: &PsfKernel,
    opts: &PoseOptions,
) -> PoseUpdate {
    let c0 = slice_center(slice, pose0);
    let scale = (!opts.fit_scale).then_some(opts.scale);
    let r = |d: &RigidTransform| residual_with(slice, volume, &d.compose(pose0), psf, scale);
    let e0 = r(&RigidTransform::identity()).iter().map(|x| x * x).sum::<f64>();
    let mut out = PoseUpdate {
        pose: *pose0,
        objective_before: e0,
        objective_after: e0,
        iterations: 0,
        status: PoseStatus::Converged,
        rotation_change_deg: 0.0,
        translation_change_vox: 0.0,
    };
    if !has_signal(slice) {
        out.status = PoseStatus::Skipped;
        return out;
    }
    if e0 == 0.0 || !e0.is_finite() {
        return out;
    }
    let sol = gauss_newton(r, &c0, e0, opts);
    let pose = sol.correction.compose(pose0);
    out.pose = pose;
    out.objective_after = sol.objective;
    out.iterations = sol.iterations;
    out.status = sol.status;
    out.rotation_change_deg = sol.correction.angle_deg();
    out.translation_change_vox = (slice_center(slice, &pose) - c0).norm();
    out
}

/// One slice registered as part of a rigid group.
#[derive(Clone, Copy, Debug)]
pub struct GroupMember<'a> {
    pub slice: &'a Slice,
    pub psf: &'a PsfKernel,
    pub pose: RigidTransform,
    pub scale: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GroupUpdate {
    /// Left correction shared by every member.
    pub correction: RigidTransform,
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
    pub status: PoseStatus,
}

/// Register a group of slices (typically one stack) to `volume` with a single
/// rigid correction acting about `center`. `opts.scale` is ignored in favour
/// of the per-member scales (or their per-slice optima with `fit_scale`).
pub fn group_pose_update(
    members: &[GroupMember<'_>],
    volume: &Volume,
    center: &Vector3<f64>,
    opts: &PoseOptions,
) -> GroupUpdate {
    let r = |d: &RigidTransform| -> Vec<f64> {
        members
            .iter()
            .flat_map(|m| {
                let scale = (!opts.fit_scale).then_some(m.scale);
                residual_with(m.slice, volume, &d.compose(&m.pose), m.psf, scale)
            })
            .collect()
    };
    let e0: f64 = r(&RigidTransform::identity()).iter().map(|x| x * x).sum();
    let mut out = GroupUpdate {
        correction: RigidTransform::identity(),
        objective_before: e0,
        objective_after: e0,
        iterations: 0,
        status: PoseStatus::Converged,
    };
    if !members.iter().any(|m| has_signal(m.slice)) {
        out.status = PoseStatus::Skipped;
        return out;
    }
    if e0 == 0.0 || !e0.is_finite() {
        return out;
    }
    let sol = gauss_newton(r, center, e0, opts);
    out.correction = sol.correction;
    out.objective_after = sol.objective;
    out.iterations = sol.iterations;
    out.status = sol.status;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PixelGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Smooth 32³ blob volume.
    fn smooth_volume() -> Volume {
        let n = 32;
        let mut v = Volume::zeros([n; 3], 1.0);
        let blobs = [
            (Vector3::new(12.0, 14.0, 15.0), 5.0, 1.0),
            (Vector3::new(20.0, 17.0, 14.0), 4.0, 0.7),
            (Vector3::new(15.0, 21.0, 18.0), 3.5, 0.5),
        ];
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p = Vector3::new(x as f64, y as f64, z as f64);
                    let val: f64 = blobs
                        .iter()
                        .map(|(c, s, a)| a * (-(p - c).norm_squared() / (2.0 * s * s)).exp())
                        .sum();
                    v.set(x, y, z, val);
                }
            }
        }
        v.weight.iter_mut().for_each(|w| *w = 1.0);
        v
    }

    fn axial_pose(z: f64) -> RigidTransform {
        RigidTransform::from_translation(Vector3::new(0.0, 0.0, z))
    }

    fn observe(v: &Volume, pose: &RigidTransform, psf: &PsfKernel) -> Slice {
        let g = PixelGrid::new(32, 32, 1.0).unwrap();
        let (mut s, _) = simulate_slice_psf(v, pose, &g, psf);
        s.apply_mask();
        s
    }

    #[test]
    fn exact_pose_is_returned_unchanged() {
        let v = smooth_volume();
        let psf = PsfKernel::boxcar(2.0, 1.0).unwrap();
        let pose = axial_pose(15.0);
        let s = observe(&v, &pose, &psf);
        let up = pose_update(&s, &v, &pose, &psf, &PoseOptions::default());
        assert_eq!(up.objective_before, 0.0);
        assert_eq!(up.pose, pose);
    }

    #[test]
    fn recovers_in_plane_rotation() {
        let v = smooth_volume();
        let psf = PsfKernel::boxcar(2.0, 1.0).unwrap();
        let truth = axial_pose(15.0);
        let s = observe(&v, &truth, &psf);
        let c = truth.apply(&uplift(s.grid.center()));
        let start = perturb(&truth, &[0.0, 0.0, 2.0, 0.0, 0.0, 0.0], &c);
        let up = pose_update(&s, &v, &start, &psf, &PoseOptions::default());
        let err = up.pose.compose(&truth.inverse()).angle_deg();
        assert!(err < 0.1, "rotation error {err}");
        assert!(up.objective_after < up.objective_before);
    }

    #[test]
    fn objective_never_increases() {
        let v = smooth_volume();
        let psf = PsfKernel::thin();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let opts = PoseOptions {
            max_iters: 2,
            ..PoseOptions::default()
        };
        for _ in 0..100 {
            let truth = axial_pose(rng.random_range(10.0..20.0));
            let s = observe(&v, &truth, &psf);
            let c = truth.apply(&uplift(s.grid.center()));
            let p: [f64; 6] = std::array::from_fn(|_| rng.random_range(-4.0..4.0));
            let start = perturb(&truth, &p, &c);
            let up = pose_update(&s, &v, &start, &psf, &opts);
            assert!(up.objective_after <= up.objective_before);
        }
    }

    #[test]
    fn empty_slice_is_skipped() {
        let v = smooth_volume();
        let g = PixelGrid::new(8, 8, 1.0).unwrap();
        let s = Slice::new(g, vec![0.0; 64], vec![false; 64]).unwrap();
        let pose = axial_pose(3.0);
        let up = pose_update(&s, &v, &pose, &PsfKernel::thin(), &PoseOptions::default());
        assert_eq!(up.status, PoseStatus::Skipped);
        assert_eq!(up.pose, pose);
    }

    #[test]
    fn jacobian_stencils_agree() {
        let v = smooth_volume();
        let psf = PsfKernel::boxcar(2.0, 1.0).unwrap();
        let truth = axial_pose(14.3);
        let s = observe(&v, &truth, &psf);
        let c = truth.apply(&uplift(s.grid.center()));
        let pose = perturb(&truth, &[1.0, -0.5, 3.0, 0.3, 0.2, -0.4], &c);
        let opts = PoseOptions::default();
        let j2 = fd_jacobian(&s, &v, &pose, &psf, &opts, 2);
        let j4 = fd_jacobian(&s, &v, &pose, &psf, &opts, 4);
        for k in 0..6 {
            let a: f64 = j2.iter().map(|r| r[k] * r[k]).sum::<f64>().sqrt();
            let d: f64 = j2.iter().zip(&j4).map(|(x, y)| (x[k] - y[k]).powi(2)).sum::<f64>().sqrt();
            assert!(d <= 0.05 * a, "column {k}: {d} vs {a}");
        }
    }

    #[test]
    fn group_recovers_shared_shift() {
        let v = smooth_volume();
        let psf = PsfKernel::boxcar(2.0, 1.0).unwrap();
        let truths: Vec<_> = [12.0, 15.0, 18.0].iter().map(|&z| axial_pose(z)).collect();
        let slices: Vec<_> = truths.iter().map(|t| observe(&v, t, &psf)).collect();
        let center = Vector3::new(15.5, 15.5, 15.0);
        let shift = RigidTransform::from_translation(Vector3::new(0.8, -0.6, 0.4));
        let members: Vec<_> = slices
            .iter()
            .zip(&truths)
            .map(|(s, t)| GroupMember { slice: s, psf: &psf, pose: shift.compose(t), scale: 1.0 })
            .collect();
        let up = group_pose_update(&members, &v, &center, &PoseOptions::default());
        let err = up.correction.compose(&shift);
        assert!(err.translation.norm() < 0.05, "residual {:?}", err.translation);
        assert!(err.angle_deg() < 0.1);
        assert!(up.objective_after < 1e-3 * up.objective_before);
    }

    #[test]
    fn best_scale_is_least_squares_and_non_negative() {
        let g = PixelGrid::new(2, 2, 1.0).unwrap();
        let s = Slice::new(g, vec![2.0, 4.0, 6.0, 100.0], vec![true, true, true, false]).unwrap();
        assert!((best_scale(&s, &[1.0, 2.0, 3.0, 0.0], 7.0) - 2.0).abs() < 1e-12);
        assert_eq!(best_scale(&s, &[-1.0, -2.0, -3.0, 0.0], 7.0), 0.0);
        assert_eq!(best_scale(&s, &[0.0; 4], 7.0), 7.0);
    }

    #[test]
    fn trust_region_limits_first_step() {
        let v = smooth_volume();
        let psf = PsfKernel::thin();
        let truth = axial_pose(15.0);
        let s = observe(&v, &truth, &psf);
        let start = axial_pose(15.0).compose(&RigidTransform::from_translation(Vector3::new(2.0, 0.0, 0.0)));
        let opts = PoseOptions { max_iters: 1, max_step_vox: 0.5, ..PoseOptions::default() };
        let up = pose_update(&s, &v, &start, &psf, &opts);
        assert!(up.translation_change_vox <= 0.5 + 1e-9, "moved {}", up.translation_change_vox);
    }
}
