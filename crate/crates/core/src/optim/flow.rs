//! Deterministic residual-displacement estimator comparing simulated and
//! observed slices.
//!
//! The slice is re-simulated one voxel either side along its normal. A
//! windowed Lucas–Kanade with Tikhonov damping then solves for the in-plane
//! shift `(dx, dy)` and depth `δ` jointly, warping bilinearly in-plane and
//! linearly across the three probe planes. The result is mapped to 3D with
//! the local tangents and normal of the field.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::forward::Slice;
use crate::geometry::{DisplacementField, PixelGrid};
use crate::sampling::{pull, PsfKernel, Volume};

/// Through-plane estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThroughPlane {
    /// Depth solved jointly with the in-plane shift.
    #[default]
    Linearized,
    /// Depth replaced by the vertex of a parabola through the windowed SSD
    /// at −1, 0, +1 after the in-plane warp.
    QuadraticFit,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowParams {
    /// Per-pixel clamp on the residual norm, voxels.
    pub max_disp: f64,
    /// Odd window side.
    pub window: usize,
    pub damping: f64,
    pub through_plane: ThroughPlane,
    pub warp_iters: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            max_disp: 1.0,
            window: 5,
            damping: 1e-3,
            through_plane: ThroughPlane::Linearized,
            warp_iters: 3,
        }
    }
}

/// Simulated slice together with its through-plane neighbours and the local
/// frame of the field.
#[derive(Clone, Debug)]
pub struct FlowProbe {
    pub center: Slice,
    pub minus: Slice,
    pub plus: Slice,
    pub tangent_x: Vec<Vector3<f64>>,
    pub tangent_y: Vec<Vector3<f64>>,
    pub normal: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug)]
pub struct FlowResidual {
    pub field: DisplacementField,
    /// Weakest windowed gradient energy over the in-plane and normal
    /// directions; zero where the residual is undefined.
    pub confidence: Vec<f64>,
    /// Windowed structure tensor in volume coordinates: the quadratic form
    /// the residual minimises locally. Zero where undefined.
    pub tensor: Vec<Matrix3<f64>>,
}

fn finite_diff(targets: &[Vector3<f64>], w: usize, h: usize, i: usize, along_x: bool) -> Vector3<f64> {
    let (x, y) = (i % w, i / w);
    let (n, c) = if along_x { (w, x) } else { (h, y) };
    let at = |k: usize| if along_x { targets[k + w * y] } else { targets[x + w * k] };
    if n < 2 {
        return if along_x { Vector3::x() } else { Vector3::y() };
    }
    if c == 0 {
        at(1) - at(0)
    } else if c == n - 1 {
        at(n - 1) - at(n - 2)
    } else {
        (at(c + 1) - at(c - 1)) / 2.0
    }
}

fn thin_sample(volume: &Volume, coords: &[Vector3<f64>], grid: PixelGrid) -> Slice {
    let p = pull(volume, coords);
    let mut s = Slice {
        grid,
        data: p.values,
        mask: p.in_bounds,
        index_in_stack: 0,
        acquisition_time_index: 0,
    };
    s.apply_mask();
    s
}

fn local_frame(field: &DisplacementField) -> (Vec<Vector3<f64>>, [Vec<Vector3<f64>>; 3]) {
    let (w, h) = (field.width, field.height);
    let targets = field.targets();
    let tangent_x: Vec<_> = (0..targets.len()).map(|i| finite_diff(&targets, w, h, i, true)).collect();
    let tangent_y: Vec<_> = (0..targets.len()).map(|i| finite_diff(&targets, w, h, i, false)).collect();
    let normal: Vec<_> = tangent_x
        .iter()
        .zip(&tangent_y)
        .map(|(a, b)| a.cross(b).try_normalize(1e-12).unwrap_or_else(Vector3::z))
        .collect();
    (targets, [tangent_x, tangent_y, normal])
}

/// Thin-slice simulations at the field and ±1 voxel along the local normal.
pub fn probe_slice(volume: &Volume, field: &DisplacementField) -> FlowProbe {
    let grid = PixelGrid {
        width: field.width,
        height: field.height,
        spacing: volume.spacing[0],
    };
    let (targets, [tangent_x, tangent_y, normal]) = local_frame(field);
    let at = |sign: f64| {
        let coords: Vec<_> = targets.iter().zip(&normal).map(|(t, n)| t + n * sign).collect();
        thin_sample(volume, &coords, grid)
    };
    FlowProbe {
        center: at(0.0),
        minus: at(-1.0),
        plus: at(1.0),
        tangent_x,
        tangent_y,
        normal,
    }
}

/// Probes for a field at `k` halvings below `full`, simulated at full
/// resolution through `psf` and reduced with the same 2D prefilter as the
/// observed slices. Normal probes sit one level voxel away.
pub fn probe_slice_reduced(
    volume: &Volume,
    field: &DisplacementField,
    full: &PixelGrid,
    k: usize,
    psf: &PsfKernel,
) -> FlowProbe {
    let factor = (1u64 << k) as f64;
    let (_, [tangent_x, tangent_y, normal]) = local_frame(field);
    let (targets, [fx, fy, fnormal]) = local_frame(&field.upsample(full, factor, field.level));
    let grid = PixelGrid {
        spacing: volume.spacing[0],
        ..*full
    };
    let at = |sign: f64| {
        let mut s = thin_sample(
            volume,
            &targets.iter().zip(&fnormal).map(|(t, n)| t + n * (sign * factor)).collect::<Vec<_>>(),
            grid,
        );
        if psf.taps.len() > 1 {
            let mut acc = vec![0.0; s.data.len()];
            for tap in &psf.taps {
                let coords: Vec<_> = (0..targets.len())
                    .map(|i| {
                        let o = tap.offset;
                        targets[i] + fnormal[i] * (sign * factor) + fx[i] * o.x + fy[i] * o.y + fnormal[i] * o.z
                    })
                    .collect();
                let p = pull(volume, &coords);
                for (a, v) in acc.iter_mut().zip(&p.values) {
                    *a += tap.weight * v;
                }
            }
            s.data = acc;
            s.apply_mask();
        }
        s.reduced(k)
    };
    FlowProbe {
        center: at(0.0),
        minus: at(-1.0),
        plus: at(1.0),
        tangent_x,
        tangent_y,
        normal,
    }
}

struct Raster<'a> {
    w: usize,
    h: usize,
    data: &'a [f64],
    mask: &'a [bool],
}

impl Raster<'_> {
    /// Bilinear sample at `(x, y)`; `None` if any corner is invalid or
    /// outside.
    fn sample(&self, x: f64, y: f64) -> Option<f64> {
        if x < -1e-9 || y < -1e-9 || x > (self.w - 1) as f64 + 1e-9 || y > (self.h - 1) as f64 + 1e-9 {
            return None;
        }
        let x0 = (x.floor().max(0.0) as usize).min(self.w.saturating_sub(2));
        let y0 = (y.floor().max(0.0) as usize).min(self.h.saturating_sub(2));
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = (x - x0 as f64).clamp(0.0, 1.0);
        let fy = (y - y0 as f64).clamp(0.0, 1.0);
        let mut acc = 0.0;
        for (xx, yy, wt) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            if wt == 0.0 {
                continue;
            }
            let i = xx + self.w * yy;
            if !self.mask[i] {
                return None;
            }
            acc += wt * self.data[i];
        }
        Some(acc)
    }

}

fn clamp_norm(v: Vector3<f64>, max: f64) -> Vector3<f64> {
    let n = v.norm();
    if n > max {
        v * (max / n)
    } else {
        v
    }
}

/// Residual displacement `Δf` such that observed pixel `p` is best explained
/// by the simulation at `p↑ + f(p) + Δf(p)`.
pub fn flow_residual(probe: &FlowProbe, observed: &Slice, params: &FlowParams) -> FlowResidual {
    let grid = probe.center.grid;
    let (w, h) = (grid.width, grid.height);
    let n = w * h;
    assert_eq!(observed.data.len(), n, "observed slice must share the probe grid");
    let r = (params.window / 2) as i64;
    let lam = params.damping;

    let sim = Raster { w, h, data: &probe.center.data, mask: &probe.center.mask };
    let minus = Raster { w, h, data: &probe.minus.data, mask: &probe.minus.mask };
    let plus = Raster { w, h, data: &probe.plus.data, mask: &probe.plus.mask };
    let valid = |i: usize| observed.mask[i] && probe.center.mask[i];

    let window = |x: usize, y: usize| {
        let (x, y) = (x as i64, y as i64);
        (-r..=r)
            .flat_map(move |dy| (-r..=r).map(move |dx| (x + dx, y + dy)))
            .filter(move |&(a, b)| a >= 0 && b >= 0 && a < w as i64 && b < h as i64)
            .map(move |(a, b)| a as usize + w * b as usize)
    };

    // Warped simulation at in-plane offset (dx, dy) and depth t ∈ [−1, 1],
    // linear across the three probe planes.
    let planes = [&minus, &sim, &plus];
    let eval = |x: f64, y: f64, t: f64| -> Option<f64> {
        let k = if t < 0.0 { 0 } else { 1 };
        let f = t - (k as f64 - 1.0);
        let a = planes[k].sample(x, y)?;
        let b = planes[k + 1].sample(x, y)?;
        Some(a + f * (b - a))
    };
    let value_grad = |x: f64, y: f64, t: f64| -> Option<(f64, Vector3<f64>)> {
        let v = eval(x, y, t)?;
        let diff = |a: Option<f64>, b: Option<f64>, h: f64| match (a, b) {
            (Some(a), Some(b)) => Some((b - a) / h),
            _ => None,
        };
        let axis = |dx: f64, dy: f64| {
            diff(eval(x - dx, y - dy, t), eval(x + dx, y + dy, t), 2.0)
                .or_else(|| diff(Some(v), eval(x + dx, y + dy, t), 1.0))
                .or_else(|| diff(eval(x - dx, y - dy, t), Some(v), 1.0))
                .unwrap_or(0.0)
        };
        let gt = if t == 0.0 {
            diff(minus.sample(x, y), plus.sample(x, y), 2.0).unwrap_or(0.0)
        } else {
            let k = if t < 0.0 { 0 } else { 1 };
            planes[k + 1].sample(x, y)? - planes[k].sample(x, y)?
        };
        Some((v, Vector3::new(axis(1.0, 0.0), axis(0.0, 1.0), gt)))
    };

    // Iterated, damped Lucas–Kanade over in-plane offset and depth jointly.
    let mut u = vec![Vector3::<f64>::zeros(); n];
    let mut g3 = vec![Matrix3::<f64>::zeros(); n];
    let mut defined = vec![false; n];
    for _ in 0..params.warp_iters.max(1) {
        let warped: Vec<Option<(f64, Vector3<f64>)>> = (0..n)
            .map(|i| {
                if !valid(i) {
                    return None;
                }
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                value_grad(x + u[i].x, y + u[i].y, u[i].z)
            })
            .collect();
        let mut next = u.clone();
        for i in 0..n {
            defined[i] = warped[i].is_some();
            if !defined[i] {
                continue;
            }
            let mut g = Matrix3::zeros();
            let mut b = Vector3::zeros();
            for j in window(i % w, i / w) {
                if let Some((v, grad)) = warped[j] {
                    g += grad * grad.transpose();
                    b += grad * (observed.data[j] - v);
                }
            }
            g3[i] = g;
            if let Some(inv) = (g + Matrix3::identity() * lam).try_inverse() {
                let mut step = u[i] + inv * b;
                step.z = step.z.clamp(-1.0, 1.0);
                next[i] = clamp_norm(step, params.max_disp);
            }
        }
        u = next;
    }

    if params.through_plane == ThroughPlane::QuadraticFit {
        // Replace the depth by the vertex of the windowed SSD parabola over
        // the in-plane-warped probes.
        let probes: Vec<Option<[f64; 3]>> = (0..n)
            .map(|i| {
                if !defined[i] {
                    return None;
                }
                let (x, y) = ((i % w) as f64 + u[i].x, (i / w) as f64 + u[i].y);
                Some([minus.sample(x, y)?, sim.sample(x, y)?, plus.sample(x, y)?])
            })
            .collect();
        for i in 0..n {
            if probes[i].is_none() {
                continue;
            }
            let mut ssd = [0.0; 3];
            for j in window(i % w, i / w) {
                if let Some(p) = probes[j] {
                    for k in 0..3 {
                        ssd[k] += (observed.data[j] - p[k]).powi(2);
                    }
                }
            }
            let curv = ssd[0] - 2.0 * ssd[1] + ssd[2];
            u[i].z = if ssd[1] > 0.0 && curv > 0.0 {
                ((ssd[0] - ssd[2]) / (2.0 * curv)).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            // The SSD's second derivative is twice the normal gradient energy.
            let gn = (curv / 2.0).max(0.0);
            for k in 0..2 {
                g3[i][(k, 2)] = 0.0;
                g3[i][(2, k)] = 0.0;
            }
            g3[i][(2, 2)] = gn;
        }
    }

    let mut data = vec![Vector3::zeros(); n];
    let mut confidence = vec![0.0; n];
    let mut tensor = vec![Matrix3::zeros(); n];
    for i in 0..n {
        if !defined[i] {
            continue;
        }
        let (tx, ty, nn) = (probe.tangent_x[i], probe.tangent_y[i], probe.normal[i]);
        data[i] = clamp_norm(tx * u[i].x + ty * u[i].y + nn * u[i].z, params.max_disp);
        confidence[i] = g3[i].symmetric_eigenvalues().min().max(0.0);
        // A volume-space displacement maps to (pixels, depth) through the
        // dual basis of the local frame.
        if let Some(dual) = Matrix3::from_columns(&[tx, ty, nn]).try_inverse() {
            tensor[i] = dual.transpose() * g3[i] * dual;
        }
    }
    let field = DisplacementField {
        width: w,
        height: h,
        level: 0,
        data,
    };
    FlowResidual {
        field,
        confidence,
        tensor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;

    fn smooth_volume(n: usize) -> Volume {
        let mut v = Volume::zeros([n; 3], 1.0);
        let c = (n as f64 - 1.0) / 2.0;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let (dx, dy, dz) = (x as f64 - c, y as f64 - c + 2.0, z as f64 - c + 1.0);
                    let val = (-(dx * dx) / 40.0 - (dy * dy) / 60.0 - (dz * dz) / 30.0).exp()
                        + 0.5 * (-((dx - 4.0).powi(2) + (dy + 3.0).powi(2) + dz * dz) / 20.0).exp();
                    v.set(x, y, z, val);
                }
            }
        }
        v
    }

    fn axial_field(n: usize, z: f64, shift: Vector3<f64>) -> DisplacementField {
        let g = PixelGrid::new(n, n, 1.0).unwrap();
        let level = crate::geometry::PyramidLevel::full(Vector3::zeros());
        DisplacementField::from_pose(&RigidTransform::from_translation(Vector3::new(0.0, 0.0, z) + shift), &g, &level)
    }

    fn interior_mean(r: &FlowResidual, n: usize, margin: usize) -> Vector3<f64> {
        let mut acc = Vector3::zeros();
        let mut k = 0.0;
        for y in margin..n - margin {
            for x in margin..n - margin {
                acc += r.field.data[x + n * y];
                k += 1.0;
            }
        }
        acc / k
    }

    #[test]
    fn identical_slices_give_zero_residual() {
        let v = smooth_volume(24);
        let f = axial_field(24, 11.0, Vector3::zeros());
        let probe = probe_slice(&v, &f);
        for tp in [ThroughPlane::Linearized, ThroughPlane::QuadraticFit] {
            let params = FlowParams { through_plane: tp, ..Default::default() };
            let r = flow_residual(&probe, &probe.center, &params);
            assert!(r.field.max_abs() < 1e-12, "{tp:?}: {}", r.field.max_abs());
        }
    }

    #[test]
    fn recovers_unit_in_plane_shift() {
        let n = 24;
        let v = smooth_volume(n);
        let f = axial_field(n, 11.0, Vector3::zeros());
        let observed = probe_slice(&v, &axial_field(n, 11.0, Vector3::new(1.0, 0.0, 0.0))).center;
        let probe = probe_slice(&v, &f);
        let params = FlowParams { max_disp: 2.0, ..Default::default() };
        let r = flow_residual(&probe, &observed, &params);
        let m = interior_mean(&r, n, 5);
        assert!((m.x - 1.0).abs() < 0.1, "{m:?}");
        assert!(m.y.abs() < 0.1, "{m:?}");
    }

    #[test]
    fn deeper_plane_gives_positive_normal_residual() {
        let n = 24;
        let v = smooth_volume(n);
        let f = axial_field(n, 13.0, Vector3::zeros());
        let observed = probe_slice(&v, &axial_field(n, 13.0, Vector3::new(0.0, 0.0, 1.0))).center;
        let probe = probe_slice(&v, &f);

        // Exhaustive search over whole-slice depth offsets in [−2, 2].
        let ssd = |dz: f64| -> f64 {
            let s = probe_slice(&v, &axial_field(n, 13.0, Vector3::new(0.0, 0.0, dz))).center;
            s.data.iter().zip(&observed.data).map(|(a, b)| (a - b).powi(2)).sum()
        };
        let best = (-20..=20)
            .map(|k| k as f64 / 10.0)
            .min_by(|a, b| ssd(*a).total_cmp(&ssd(*b)))
            .unwrap();
        assert!((best - 1.0).abs() < 1e-9, "{best}");

        for tp in [ThroughPlane::Linearized, ThroughPlane::QuadraticFit] {
            let params = FlowParams { through_plane: tp, ..Default::default() };
            let r = flow_residual(&probe, &observed, &params);
            let m = interior_mean(&r, n, 3);
            assert!(m.z > 0.0 && best > 0.0, "{tp:?}: {m:?}");
        }
    }

    #[test]
    fn residual_is_clamped_and_zero_off_mask() {
        let n = 16;
        let v = smooth_volume(n);
        let f = axial_field(n, 7.0, Vector3::zeros());
        let probe = probe_slice(&v, &f);
        let mut observed = probe_slice(&v, &axial_field(n, 7.0, Vector3::new(2.5, -1.0, 1.5))).center;
        observed.mask[0] = false;
        let params = FlowParams { max_disp: 0.5, ..Default::default() };
        let r = flow_residual(&probe, &observed, &params);
        assert!(r.field.max_abs() <= 0.5 + 1e-12);
        assert_eq!(r.field.data[0], Vector3::zeros());
        assert_eq!(r.confidence[0], 0.0);
    }

    #[test]
    fn recovers_joint_shift_and_depth() {
        let n = 24;
        let v = smooth_volume(n);
        let truth = Vector3::new(0.4, -0.3, 0.5);
        let observed = probe_slice(&v, &axial_field(n, 12.0, truth)).center;
        let probe = probe_slice(&v, &axial_field(n, 12.0, Vector3::zeros()));
        let params = FlowParams { max_disp: 2.0, warp_iters: 8, damping: 1e-7, ..Default::default() };
        let r = flow_residual(&probe, &observed, &params);
        let m = interior_mean(&r, n, 5);
        assert!((m - truth).norm() < 0.1, "{m:?}");
    }

    #[test]
    fn reduced_probe_matches_reduced_observation() {
        let n = 24;
        let v = smooth_volume(n);
        let full = PixelGrid::new(n, n, 1.0).unwrap();
        let fine = axial_field(n, 12.0, Vector3::zeros());
        let observed = probe_slice(&v, &fine).center.reduced(1);
        let coarse = DisplacementField {
            width: observed.grid.width,
            height: observed.grid.height,
            level: 1,
            data: (0..observed.grid.len())
                .map(|i| fine.data[2 * (i % observed.grid.width) + n * 2 * (i / observed.grid.width)] / 2.0)
                .collect(),
        };
        let probe = probe_slice_reduced(&v, &coarse, &full, 1, &PsfKernel::thin());
        assert_eq!(probe.center.data.len(), observed.data.len());
        for (a, b) in probe.center.data.iter().zip(&observed.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = flow_residual(&probe, &observed, &FlowParams::default());
        assert!(r.field.max_abs() < 1e-12);
        let at0 = probe_slice_reduced(&v, &fine, &full, 0, &PsfKernel::thin());
        assert_eq!(at0.center, probe_slice(&v, &fine).center);
    }

    #[test]
    fn tensor_is_symmetric_and_positive() {
        let n = 16;
        let v = smooth_volume(n);
        let probe = probe_slice(&v, &axial_field(n, 7.0, Vector3::zeros()));
        let observed = probe_slice(&v, &axial_field(n, 7.0, Vector3::new(0.3, 0.2, 0.1))).center;
        let r = flow_residual(&probe, &observed, &FlowParams::default());
        for t in &r.tensor {
            assert!((t - t.transpose()).amax() < 1e-9);
            assert!(t.symmetric_eigenvalues().min() > -1e-9);
        }
    }
}
