use nalgebra::{Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::RigidTransform;
use crate::error::{Error, Result};

/// Lift a slice pixel coordinate onto the `z = 0` plane.
#[inline]
pub fn uplift(p: Vector2<f64>) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 0.0)
}

/// Length of an axis after `k` corner-aligned halvings.
pub fn reduced_len(n: usize, k: usize) -> usize {
    (0..k).fold(n, |n, _| n.div_ceil(2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelGrid {
    pub width: usize,
    pub height: usize,
    /// mm per pixel, in-plane.
    pub spacing: f64,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize, spacing: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("pixel grid must be at least 1x1".into()));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidArgument(format!("pixel spacing must be positive, got {spacing}")));
        }
        Ok(Self { width, height, spacing })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        x + self.width * y
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> Vector2<f64> {
        Vector2::new((i % self.width) as f64, (i / self.width) as f64)
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    /// Grid after `k` corner-aligned halvings.
    pub fn reduced(&self, k: usize) -> PixelGrid {
        PixelGrid {
            width: reduced_len(self.width, k),
            height: reduced_len(self.height, k),
            spacing: self.spacing * (1u64 << k) as f64,
        }
    }
}

/// One level of the dyadic resolution pyramid: `C_s` and `S_s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PyramidLevel {
    /// Level index, 0 = coarsest.
    pub index: usize,
    /// Full-resolution pixels per level pixel.
    pub scale: f64,
    /// Rotation centre in full-resolution voxel coordinates.
    pub center: Vector3<f64>,
}

impl PyramidLevel {
    /// Level `index` of an `n_levels` dyadic pyramid (the last level is full resolution).
    pub fn dyadic(index: usize, n_levels: usize, center: Vector3<f64>) -> Result<Self> {
        if n_levels == 0 || index >= n_levels {
            return Err(Error::InvalidArgument(format!(
                "level {index} out of range for {n_levels} levels"
            )));
        }
        Self::with_scale(index, (1u64 << (n_levels - 1 - index)) as f64, center)
    }

    pub fn with_scale(index: usize, scale: f64, center: Vector3<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::NonPositiveScale(scale));
        }
        Ok(Self { index, scale, center })
    }

    pub fn full(center: Vector3<f64>) -> Self {
        Self {
            index: 0,
            scale: 1.0,
            center,
        }
    }

    /// Number of halvings between full resolution and this level.
    pub fn halvings(&self) -> usize {
        self.scale.log2().round() as usize
    }

    /// `C_s`: translation to the centre expressed in level coordinates.
    pub fn centering(&self) -> Matrix4<f64> {
        Matrix4::new_translation(&(self.center / self.scale))
    }

    /// `S_s`: uniform scaling by the level scale.
    pub fn scaling(&self) -> Matrix4<f64> {
        Matrix4::new_scaling(self.scale)
    }

    /// Maps a full-resolution pose to the homogeneous matrix acting on
    /// level pixel coordinates: `S⁻¹·F·S`.
    pub fn pose_matrix(&self, pose: &RigidTransform) -> Matrix4<f64> {
        Matrix4::new_scaling(1.0 / self.scale) * pose.to_homogeneous() * self.scaling()
    }
}

/// Per-pixel 3D displacement mapping slice pixels into volume voxels:
/// pixel `p` lands at `p↑ + f(p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub level: usize,
    pub data: Vec<Vector3<f64>>,
}

impl DisplacementField {
    pub fn zeros(grid: &PixelGrid, level: usize) -> Self {
        Self {
            width: grid.width,
            height: grid.height,
            level,
            data: vec![Vector3::zeros(); grid.len()],
        }
    }

    pub fn from_data(width: usize, height: usize, level: usize, data: Vec<Vector3<f64>>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::GridMismatch(format!(
                "field data has {} entries for a {width}x{height} grid",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("displacement field contains non-finite values".into()));
        }
        Ok(Self { width, height, level, data })
    }

    /// Field realised by a homogeneous matrix acting on pixel coordinates.
    pub fn from_homogeneous(h: &Matrix4<f64>, grid: &PixelGrid, level: usize) -> Self {
        let data = (0..grid.len())
            .map(|i| {
                let p = uplift(grid.pixel(i));
                let q = h * p.push(1.0);
                Vector3::new(q.x, q.y, q.z) - p
            })
            .collect();
        Self {
            width: grid.width,
            height: grid.height,
            level,
            data,
        }
    }

    /// Field of a full-resolution pose sampled on the pixel grid of `level`.
    pub fn from_pose(pose: &RigidTransform, grid: &PixelGrid, level: &PyramidLevel) -> Self {
        Self::from_homogeneous(&level.pose_matrix(pose), grid, level.index)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &DisplacementField) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        self.data[x + self.width * y]
    }

    /// Volume position `p↑ + f(p)` of pixel index `i`.
    #[inline]
    pub fn target(&self, i: usize) -> Vector3<f64> {
        let p = Vector3::new((i % self.width) as f64, (i / self.width) as f64, 0.0);
        p + self.data[i]
    }

    pub fn targets(&self) -> Vec<Vector3<f64>> {
        (0..self.len()).map(|i| self.target(i)).collect()
    }

    /// Bilinear lookup. Outside the grid the edge cells are extended
    /// linearly, so affine fields are reproduced exactly everywhere.
    pub fn sample(&self, x: f64, y: f64) -> Vector3<f64> {
        let x0 = (x.floor().max(0.0) as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor().max(0.0) as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = if x1 > x0 { x - x0 as f64 } else { 0.0 };
        let fy = if y1 > y0 { y - y0 as f64 } else { 0.0 };
        self.get(x0, y0) * ((1.0 - fx) * (1.0 - fy))
            + self.get(x1, y0) * (fx * (1.0 - fy))
            + self.get(x0, y1) * ((1.0 - fx) * fy)
            + self.get(x1, y1) * (fx * fy)
    }

    /// Resample onto a grid `factor` times finer, scaling displacements by
    /// `factor` so positions stay in the finer level's voxel units.
    pub fn upsample(&self, grid: &PixelGrid, factor: f64, level: usize) -> DisplacementField {
        let data = (0..grid.len())
            .map(|i| {
                let p = grid.pixel(i);
                self.sample(p.x / factor, p.y / factor) * factor
            })
            .collect();
        DisplacementField {
            width: grid.width,
            height: grid.height,
            level,
            data,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Displacement field placing a slice at its prescribed position at one
/// pyramid level.
///
/// Evaluates the fused product `H = C_s·R·C_s⁻¹·S_s⁻¹·T` once and applies it
/// to every pixel, with level pixel coordinates first expressed in
/// full-resolution units (`S_s·p↑`): `f(p) = H·S_s·p↑ − p↑`.
pub fn prescribed_pose_field(
    slice_translation: &RigidTransform,
    orientation: &RigidTransform,
    grid: &PixelGrid,
    level: &PyramidLevel,
) -> Result<DisplacementField> {
    if !(level.scale > 0.0 && level.scale.is_finite()) {
        return Err(Error::NonPositiveScale(level.scale));
    }
    let c = level.centering();
    let c_inv = Matrix4::new_translation(&(-level.center / level.scale));
    let s_inv = Matrix4::new_scaling(1.0 / level.scale);
    let h = c
        * orientation.to_homogeneous()
        * c_inv
        * s_inv
        * slice_translation.to_homogeneous()
        * level.scaling();
    Ok(DisplacementField::from_homogeneous(&h, grid, level.index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> PixelGrid {
        PixelGrid::new(n, n, 1.0).unwrap()
    }

    #[test]
    fn uplift_appends_zero() {
        assert_eq!(uplift(Vector2::new(0.0, 0.0)), Vector3::zeros());
        assert_eq!(uplift(Vector2::new(3.0, -2.0)), Vector3::new(3.0, -2.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = Vector2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            assert_eq!(uplift(p).xy(), p);
        }
    }

    #[test]
    fn slice_translation_alone_gives_constant_field() {
        let t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 4.0));
        let level = PyramidLevel::full(Vector3::zeros());
        let f = prescribed_pose_field(&t, &RigidTransform::identity(), &grid(5), &level).unwrap();
        assert!(f.data.iter().all(|v| *v == Vector3::new(0.0, 0.0, 4.0)));
    }

    #[test]
    fn all_identity_gives_zero_field() {
        let level = PyramidLevel::full(Vector3::zeros());
        let f = prescribed_pose_field(
            &RigidTransform::identity(),
            &RigidTransform::identity(),
            &grid(6),
            &level,
        )
        .unwrap();
        assert_eq!(f.max_abs(), 0.0);
    }

    #[test]
    fn in_plane_quarter_turn_rotates_about_grid_center() {
        let g = grid(8);
        let c = Vector3::new(3.5, 3.5, 0.0);
        let level = PyramidLevel::full(c);
        let rz = RigidTransform::from_axis_angle_deg(Vector3::z(), 90.0);
        let f = prescribed_pose_field(&RigidTransform::identity(), &rz, &g, &level).unwrap();
        let dense = Matrix4::new_translation(&c) * rz.to_homogeneous() * Matrix4::new_translation(&-c);
        for i in 0..g.len() {
            let p = uplift(g.pixel(i));
            let expected = rz.rotation * (p - c) + c - p;
            let q = dense * p.push(1.0);
            assert!((f.data[i] - expected).amax() < 1e-12);
            assert!((f.data[i] - (q.xyz() - p)).amax() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_positive_scale() {
        assert!(matches!(
            PyramidLevel::with_scale(0, 0.0, Vector3::zeros()),
            Err(Error::NonPositiveScale(_))
        ));
        let bad = PyramidLevel {
            index: 0,
            scale: -2.0,
            center: Vector3::zeros(),
        };
        assert!(prescribed_pose_field(&RigidTransform::identity(), &RigidTransform::identity(), &grid(4), &bad).is_err());
    }

    #[test]
    fn coarse_level_positions_are_scaled_full_positions() {
        let center = Vector3::new(15.5, 15.5, 15.5);
        let pose = RigidTransform::from_rotation_vector_deg(
            Vector3::new(4.0, -7.0, 20.0),
            Vector3::new(0.3, 1.0, -2.0),
        );
        let full = grid(32);
        for idx in 0..3 {
            let level = PyramidLevel::dyadic(idx, 3, center).unwrap();
            let g = full.reduced(level.halvings());
            let f = DisplacementField::from_pose(&pose, &g, &level);
            for i in 0..g.len() {
                let p = uplift(g.pixel(i));
                let expected = pose.apply(&(p * level.scale)) / level.scale;
                assert!((f.target(i) - expected).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn upsampling_a_pose_field_is_exact_inside() {
        let center = Vector3::new(15.5, 15.5, 15.5);
        let pose = RigidTransform::from_rotation_vector_deg(
            Vector3::new(3.0, 2.0, -9.0),
            Vector3::new(1.0, -1.0, 0.5),
        );
        let coarse = PyramidLevel::dyadic(0, 2, center).unwrap();
        let fine = PyramidLevel::dyadic(1, 2, center).unwrap();
        let gf = grid(32);
        let gc = gf.reduced(1);
        let fc = DisplacementField::from_pose(&pose, &gc, &coarse);
        let up = fc.upsample(&gf, 2.0, 1);
        let truth = DisplacementField::from_pose(&pose, &gf, &fine);
        for y in 0..32 {
            for x in 0..32 {
                assert!((up.get(x, y) - truth.get(x, y)).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn from_data_validates() {
        assert!(DisplacementField::from_data(2, 2, 0, vec![Vector3::zeros(); 3]).is_err());
        let mut d = vec![Vector3::zeros(); 4];
        d[1].x = f64::NAN;
        assert!(DisplacementField::from_data(2, 2, 0, d).is_err());
    }
}
