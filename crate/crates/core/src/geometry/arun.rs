use nalgebra::{Matrix3, Vector3};

use super::{DisplacementField, PixelGrid, RigidTransform};
use crate::error::{Error, Result};

/// Weighted least-squares rigid transform taking `sources` onto `targets`
/// (SVD of the cross-covariance of the centred sets, reflection corrected).
pub fn rigid_fit(
    sources: &[Vector3<f64>],
    targets: &[Vector3<f64>],
    weights: Option<&[f64]>,
) -> Result<RigidTransform> {
    if sources.len() != targets.len() || weights.is_some_and(|w| w.len() != sources.len()) {
        return Err(Error::InvalidArgument("point set lengths differ".into()));
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..sources.len()).map(w).sum();
    if sources.len() < 3 || !(total > 0.0) {
        return Err(Error::Degenerate("fewer than three weighted points".into()));
    }

    let mut src_mean = Vector3::zeros();
    let mut dst_mean = Vector3::zeros();
    for i in 0..sources.len() {
        src_mean += sources[i] * w(i);
        dst_mean += targets[i] * w(i);
    }
    src_mean /= total;
    dst_mean /= total;

    let mut cross = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for i in 0..sources.len() {
        let a = sources[i] - src_mean;
        let b = targets[i] - dst_mean;
        cross += a * b.transpose() * w(i);
        spread += a * a.transpose() * w(i);
    }

    // A rotation is pinned down only if the sources span at least a plane.
    let ev = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = ev.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("points are collinear or coincident".into()));
    }

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation = dst_mean - rotation * src_mean;
    Ok(RigidTransform::new(rotation, translation))
}

/// Least-squares rigid transform between pixel positions `p↑` and the
/// field targets `p↑ + f(p)`.
pub fn project_to_rigid(field: &DisplacementField, grid: &PixelGrid) -> Result<RigidTransform> {
    project_to_rigid_weighted(field, grid, None)
}

pub fn project_to_rigid_weighted(
    field: &DisplacementField,
    grid: &PixelGrid,
    weights: Option<&[f64]>,
) -> Result<RigidTransform> {
    if field.width != grid.width || field.height != grid.height {
        return Err(Error::GridMismatch(format!(
            "field is {}x{}, grid is {}x{}",
            field.width, field.height, grid.width, grid.height
        )));
    }
    let sources: Vec<_> = (0..grid.len())
        .map(|i| super::uplift(grid.pixel(i)))
        .collect();
    let targets = field.targets();
    rigid_fit(&sources, &targets, weights)
}
