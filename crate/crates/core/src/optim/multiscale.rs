//! Coarse-to-fine refinement of per-slice displacement fields.
//!
//! At every level each stack is compared against a volume splatted from the
//! *other* stacks, so a stack never explains itself. Residuals from
//! [`flow_residual`] either move the field directly or, with rigid updates,
//! through the weighted rigid motion that best matches them.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};

use super::flow::{flow_residual, probe_slice_reduced, FlowParams, FlowResidual};
use super::ReconConfig;
use crate::error::{Error, Result};
use crate::forward::{Slice, SliceStack};
use crate::geometry::{
    project_to_rigid, reduced_len, DisplacementField, PixelGrid, PyramidLevel, RigidTransform,
};
use crate::init::accumulate_thin;
use crate::par;
use crate::sampling::{normalize, PsfKernel, Volume};

/// Per stack, per slice fields.
pub type FieldSet = Vec<Vec<DisplacementField>>;

#[derive(Clone, Debug, PartialEq)]
pub struct LevelGeometry {
    pub level: PyramidLevel,
    pub grid: PixelGrid,
    pub dims: [usize; 3],
    pub spacing: f64,
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    pub levels: Vec<LevelGeometry>,
    /// Refined fields at every level, coarsest first.
    pub fields_per_level: Vec<FieldSet>,
}

impl RefineOutput {
    pub fn full_resolution(&self) -> &FieldSet {
        self.fields_per_level.last().expect("at least one level")
    }
}

/// Number of pyramid levels actually used: at most `requested`, and no more
/// than keeps the coarsest grid at `min_size` pixels or more.
pub fn effective_levels(requested: usize, grid_size: usize, min_size: usize) -> usize {
    let mut levels = requested.max(1);
    while levels > 1 && reduced_len(grid_size, levels - 1) < min_size {
        levels -= 1;
    }
    levels
}

/// Geometry of each level for a shared slice grid and full-resolution volume.
pub fn level_geometry(
    grid: &PixelGrid,
    dims: [usize; 3],
    spacing: f64,
    center: Vector3<f64>,
    n_levels: usize,
) -> Result<Vec<LevelGeometry>> {
    (0..n_levels)
        .map(|s| {
            let level = PyramidLevel::dyadic(s, n_levels, center)?;
            let k = level.halvings();
            Ok(LevelGeometry {
                level,
                grid: grid.reduced(k),
                dims: dims.map(|n| reduced_len(n, k)),
                spacing: spacing * level.scale,
            })
        })
        .collect()
}

/// Prescribed fields of every slice at `level`.
pub fn prescribed_fields(stacks: &[SliceStack], level: &PyramidLevel) -> Result<FieldSet> {
    stacks
        .iter()
        .map(|st| (0..st.len()).map(|n| st.prescribed_field(n, level)).collect())
        .collect()
}

fn check_stacks(stacks: &[SliceStack]) -> Result<PixelGrid> {
    let first = stacks.first().ok_or_else(|| Error::Empty("no stacks".into()))?;
    for st in stacks {
        st.validate()?;
    }
    let grid = first.grid();
    if stacks.iter().any(|s| s.grid() != grid || s.center != first.center) {
        return Err(Error::GridMismatch("stacks must share one slice grid and centre".into()));
    }
    Ok(grid)
}

/// Small rigid motion `u(x) = ω×(x−c) + t` minimising
/// `Σ (u(xᵢ) − dᵢ)ᵀ Tᵢ (u(xᵢ) − dᵢ)` over the points `xᵢ` with local
/// residuals `dᵢ` and structure tensors `Tᵢ`, about their tensor-weighted
/// centroid `c`. `None` when the tensors do not pin all six parameters.
pub fn rigid_from_flow(
    points: &[Vector3<f64>],
    residual: &[Vector3<f64>],
    tensor: &[Matrix3<f64>],
) -> Option<RigidTransform> {
    let wsum: f64 = tensor.iter().map(|t| t.trace()).sum();
    if !(wsum > 0.0) {
        return None;
    }
    let c = points.iter().zip(tensor).map(|(x, t)| x * t.trace()).sum::<Vector3<f64>>() / wsum;
    let mut a = Matrix6::<f64>::zeros();
    let mut b = Vector6::<f64>::zeros();
    for ((x, d), t) in points.iter().zip(residual).zip(tensor) {
        if t.trace() == 0.0 {
            continue;
        }
        // u = −[r]×·ω + t
        let mut j = Matrix3x6::<f64>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-(x - c).cross_matrix()));
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
        a += j.transpose() * t * j;
        b += j.transpose() * t * d;
    }
    let eig = a.symmetric_eigenvalues();
    if eig.min() <= 1e-9 * eig.max() {
        return None;
    }
    let xi = a.cholesky()?.solve(&b);
    let omega = Vector3::new(xi[0], xi[1], xi[2]).map(f64::to_degrees);
    let step = RigidTransform::from_rotation_vector_deg(omega, Vector3::new(xi[3], xi[4], xi[5]));
    Some(step.about(&c))
}

fn apply_residual(field: &DisplacementField, res: &FlowResidual, rigid: bool) -> DisplacementField {
    let mut out = field.clone();
    if !rigid {
        out.data.iter_mut().zip(&res.field.data).for_each(|(f, r)| *f += r);
        return out;
    }
    let old = field.targets();
    // Too little texture to pin a rigid motion: keep the field.
    if let Some(u) = rigid_from_flow(&old, &res.field.data, &res.tensor) {
        for (i, f) in out.data.iter_mut().enumerate() {
            let p = Vector3::new((i % field.width) as f64, (i / field.width) as f64, 0.0);
            *f = u.apply(&old[i]) - p;
        }
    }
    out
}

/// One refinement pass at a single level. Reference volumes are splatted at
/// full resolution and probes reduced to the level, so observed and
/// simulated slices see the same prefilter.
fn refine_once(
    full: &[SliceStack],
    stacks: &[Vec<Slice>],
    fields: &FieldSet,
    geom: &LevelGeometry,
    top: &LevelGeometry,
    config: &ReconConfig,
    params: &FlowParams,
) -> Result<FieldSet> {
    if stacks.len() < 2 {
        return Ok(fields.clone());
    }
    let k = geom.level.halvings();
    let factor = (1u64 << k) as f64;
    let thin = PsfKernel::thin();
    let accs: Vec<Volume> = full
        .iter()
        .zip(fields)
        .map(|(st, f)| {
            let s: Vec<&Slice> = st.slices.iter().collect();
            let up: Vec<DisplacementField> = f.iter().map(|x| x.upsample(&top.grid, factor, x.level)).collect();
            let f: Vec<&DisplacementField> = up.iter().collect();
            accumulate_thin(&s, &f, top.dims, top.spacing, config.weight_mode, config.exec)
        })
        .collect::<Result<_>>()?;
    let mut total = Volume::zeros(top.dims, top.spacing);
    for a in &accs {
        total.accumulate(a);
    }
    let others: Vec<Volume> = accs
        .iter()
        .map(|a| {
            let mut rest = total.clone();
            for (d, x) in rest.data.iter_mut().zip(&a.data) {
                *d -= x;
            }
            for (w, x) in rest.weight.iter_mut().zip(&a.weight) {
                *w -= x;
            }
            normalize(&rest)
        })
        .collect();

    let index: Vec<(usize, usize)> = stacks
        .iter()
        .enumerate()
        .flat_map(|(j, s)| (0..s.len()).map(move |n| (j, n)))
        .collect();
    let updated = par::map(config.exec, index.len(), |i| {
        let (j, n) = index[i];
        let probe = probe_slice_reduced(&others[j], &fields[j][n], &top.grid, k, &thin);
        let res = flow_residual(&probe, &stacks[j][n], params);
        apply_residual(&fields[j][n], &res, config.rigid_updates)
    });
    let mut it = updated.into_iter();
    Ok(stacks.iter().map(|s| (0..s.len()).map(|_| it.next().expect("one field per slice")).collect()).collect())
}

/// Refine `init_coarsest` (fields at the coarsest level) up to full
/// resolution.
pub fn multiscale_refine(
    stacks: &[SliceStack],
    init_coarsest: &FieldSet,
    dims: [usize; 3],
    config: &ReconConfig,
) -> Result<RefineOutput> {
    config.validate()?;
    let grid = check_stacks(stacks)?;
    if init_coarsest.len() != stacks.len() || init_coarsest.iter().zip(stacks).any(|(f, s)| f.len() != s.len()) {
        return Err(Error::InvalidArgument("one initial field per slice required".into()));
    }
    let n_levels = effective_levels(config.pyramid_levels, grid.width.min(grid.height), config.min_level_size);
    let levels = level_geometry(&grid, dims, stacks[0].in_plane_spacing, stacks[0].center, n_levels)?;
    for f in init_coarsest.iter().flatten() {
        if f.width != levels[0].grid.width || f.height != levels[0].grid.height {
            return Err(Error::GridMismatch(format!(
                "initial field is {}x{}, coarsest grid is {}x{}",
                f.width, f.height, levels[0].grid.width, levels[0].grid.height
            )));
        }
    }
    let params = FlowParams {
        max_disp: config.max_disp,
        window: config.flow_window,
        damping: config.flow_damping,
        through_plane: config.through_plane,
        ..FlowParams::default()
    };

    let mut fields = init_coarsest.clone();
    let mut per_level = Vec::with_capacity(n_levels);
    for (s, geom) in levels.iter().enumerate() {
        if s > 0 {
            fields = fields
                .iter()
                .map(|fs| fs.iter().map(|f| f.upsample(&geom.grid, 2.0, s)).collect())
                .collect();
        }
        let k = geom.level.halvings();
        let slices: Vec<Vec<Slice>> = stacks
            .iter()
            .map(|st| st.slices.iter().map(|sl| sl.reduced(k)).collect())
            .collect();
        for _ in 0..config.refine_iters_per_level {
            fields = refine_once(stacks, &slices, &fields, geom, &levels[n_levels - 1], config, &params)?;
        }
        per_level.push(fields.clone());
    }
    Ok(RefineOutput {
        levels,
        fields_per_level: per_level,
    })
}

/// Rigid pose of every slice from its full-resolution field.
pub fn finalize(fields: &FieldSet, stacks: &[SliceStack]) -> Result<Vec<Vec<RigidTransform>>> {
    fields
        .iter()
        .zip(stacks)
        .map(|(fs, st)| fs.iter().map(|f| project_to_rigid(f, &st.grid())).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Orientation;

    fn stack(n_slices: usize, size: usize, o: Orientation) -> SliceStack {
        let g = PixelGrid::new(size, size, 1.0).unwrap();
        let c = (size as f64 - 1.0) / 2.0;
        SliceStack {
            slices: (0..n_slices)
                .map(|i| Slice::new(g, vec![1.0; g.len()], vec![true; g.len()]).unwrap().with_indices(i, i))
                .collect(),
            orientation: o,
            slice_thickness: 1.0,
            slice_gap: 1.0,
            in_plane_spacing: 1.0,
            center: Vector3::new(c, c, c),
        }
    }

    #[test]
    fn level_count_respects_minimum_size() {
        assert_eq!(effective_levels(5, 32, 8), 3);
        assert_eq!(effective_levels(5, 128, 8), 5);
        assert_eq!(effective_levels(2, 128, 8), 2);
        assert_eq!(effective_levels(5, 4, 8), 1);
    }

    #[test]
    fn geometry_doubles_per_level() {
        let g = PixelGrid::new(32, 32, 1.0).unwrap();
        let levels = level_geometry(&g, [32; 3], 1.0, Vector3::repeat(15.5), 3).unwrap();
        let sizes: Vec<_> = levels.iter().map(|l| l.grid.width).collect();
        assert_eq!(sizes, [8, 16, 32]);
        assert_eq!(levels[0].dims, [8; 3]);
        assert_eq!(levels[0].spacing, 4.0);
    }

    #[test]
    fn upsampled_prescribed_fields_match_finer_level() {
        let st = stack(16, 16, Orientation::Coronal);
        let levels = level_geometry(&st.grid(), [16; 3], 1.0, st.center, 3).unwrap();
        let coarse = prescribed_fields(std::slice::from_ref(&st), &levels[0].level).unwrap();
        let fine = prescribed_fields(std::slice::from_ref(&st), &levels[1].level).unwrap();
        for (c, f) in coarse[0].iter().zip(&fine[0]) {
            let up = c.upsample(&levels[1].grid, 2.0, 1);
            for (a, b) in up.data.iter().zip(&f.data) {
                assert!((a - b).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn finalize_prescribed_fields_gives_prescribed_poses() {
        let stacks: Vec<_> = Orientation::ALL.iter().map(|&o| stack(8, 12, o)).collect();
        let full = PyramidLevel::full(stacks[0].center);
        let fields = prescribed_fields(&stacks, &full).unwrap();
        let poses = finalize(&fields, &stacks).unwrap();
        for (st, ps) in stacks.iter().zip(&poses) {
            for (n, p) in ps.iter().enumerate() {
                let q = st.prescribed_pose(n);
                assert!((p.rotation - q.rotation).amax() < 1e-9);
                assert!((p.translation - q.translation).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn single_stack_is_left_unchanged() {
        let st = vec![stack(8, 16, Orientation::Axial)];
        let cfg = ReconConfig {
            exec: crate::par::Exec::Sequential,
            ..ReconConfig::default()
        };
        let levels = level_geometry(&st[0].grid(), [16; 3], 1.0, st[0].center, 2).unwrap();
        let init = prescribed_fields(&st, &levels[0].level).unwrap();
        let out = multiscale_refine(&st, &init, [16; 3], &cfg).unwrap();
        let expected = prescribed_fields(&st, &PyramidLevel::full(st[0].center)).unwrap();
        for (a, b) in out.full_resolution()[0].iter().zip(&expected[0]) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn rigid_from_flow_recovers_small_motion() {
        let omega = Vector3::new(0.01, -0.02, 0.015);
        let t = Vector3::new(0.3, -0.1, 0.2);
        let points: Vec<Vector3<f64>> = (0..64)
            .map(|i| Vector3::new((i % 4) as f64 * 3.0, ((i / 4) % 4) as f64 * 3.0, (i / 16) as f64 * 3.0))
            .collect();
        let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
        let residual: Vec<_> = points.iter().map(|x| omega.cross(&(x - c)) + t).collect();
        let tensor = vec![Matrix3::identity(); points.len()];
        let u = rigid_from_flow(&points, &residual, &tensor).unwrap();
        for (x, d) in points.iter().zip(&residual) {
            assert!((u.apply(x) - x - d).norm() < 5e-3, "{:?} vs {:?}", u.apply(x) - x, d);
        }
    }

    #[test]
    fn rigid_from_flow_needs_texture() {
        let points = vec![Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)];
        let residual = vec![Vector3::x(); 2];
        assert!(rigid_from_flow(&points, &residual, &[Matrix3::zeros(); 2]).is_none());
        // Normal-only tensors on one plane leave in-plane motion free.
        let plane: Vec<_> = (0..16).map(|i| Vector3::new((i % 4) as f64, (i / 4) as f64, 0.0)).collect();
        let normal_only = vec![Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 1.0)); 16];
        assert!(rigid_from_flow(&plane, &vec![Vector3::zeros(); 16], &normal_only).is_none());
    }

    #[test]
    fn matched_thin_stacks_do_not_drift() {
        use crate::motion::{simulate_subject, Acquisition, MotionConfig};
        use crate::phantom::{make_phantom, PhantomKind};
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 3).unwrap();
        let acq = Acquisition {
            slice_thickness: 1.0,
            slice_gap: 1.0,
            psf: super::super::PsfChoice::Thin,
            ..Acquisition::default()
        };
        let gt = simulate_subject(&v, &acq, &MotionConfig::still(), crate::par::Exec::Sequential).unwrap();
        let cfg = ReconConfig {
            exec: crate::par::Exec::Sequential,
            min_level_size: 4,
            ..ReconConfig::default()
        };
        let n = effective_levels(cfg.pyramid_levels, 16, cfg.min_level_size);
        let levels = level_geometry(&gt.corrupted[0].grid(), [16; 3], 1.0, gt.corrupted[0].center, n).unwrap();
        let init = prescribed_fields(&gt.corrupted, &levels[0].level).unwrap();
        let out = multiscale_refine(&gt.corrupted, &init, [16; 3], &cfg).unwrap();
        let expected = prescribed_fields(&gt.corrupted, &PyramidLevel::full(gt.corrupted[0].center)).unwrap();
        for (a, b) in out.full_resolution().iter().flatten().zip(expected.iter().flatten()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).norm() < 1e-6);
            }
        }
    }
}
