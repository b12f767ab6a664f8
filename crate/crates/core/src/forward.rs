//! Slice simulation: the PSF forward model for rigid poses and the
//! thin-slice model driven by displacement fields.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, PixelGrid, PyramidLevel, RigidTransform};
use crate::sampling::{self, PsfKernel, Volume};

/// Fraction of PSF weight that must fall inside the volume for a pixel to
/// count as foreground.
pub const MASK_COVERAGE: f64 = 0.5;

/// Upper bound on voxels for [`assemble_dense_system`].
pub const DENSE_VOXEL_LIMIT: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Sagittal,
    Axial,
    Coronal,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Sagittal, Orientation::Axial, Orientation::Coronal];

    /// Maps slice axes (x, y, normal) onto volume axes.
    pub fn rotation(self) -> RigidTransform {
        let r = match self {
            Orientation::Axial => Matrix3::identity(),
            // slice x → y, slice y → z, normal → x
            Orientation::Sagittal => Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
            // slice x → x, slice y → z, normal → −y
            Orientation::Coronal => Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
        };
        RigidTransform::from_rotation(r)
    }

    pub fn label(self) -> &'static str {
        match self {
            Orientation::Sagittal => "sagittal",
            Orientation::Axial => "axial",
            Orientation::Coronal => "coronal",
        }
    }
}

impl std::str::FromStr for Orientation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sagittal" => Ok(Orientation::Sagittal),
            "axial" => Ok(Orientation::Axial),
            "coronal" => Ok(Orientation::Coronal),
            other => Err(Error::InvalidArgument(format!("unknown orientation `{other}`"))),
        }
    }
}

/// One acquired (or simulated) 2D slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub grid: PixelGrid,
    pub data: Vec<f64>,
    /// Foreground pixels; masked-out pixels hold 0.
    pub mask: Vec<bool>,
    pub index_in_stack: usize,
    pub acquisition_time_index: usize,
}

impl Slice {
    pub fn new(grid: PixelGrid, data: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() || mask.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "slice buffers ({} values, {} mask) do not match a {}x{} grid",
                data.len(),
                mask.len(),
                grid.width,
                grid.height
            )));
        }
        let mut s = Self {
            grid,
            data,
            mask,
            index_in_stack: 0,
            acquisition_time_index: 0,
        };
        s.apply_mask();
        Ok(s)
    }

    pub fn with_indices(mut self, index: usize, time: usize) -> Self {
        self.index_in_stack = index;
        self.acquisition_time_index = time;
        self
    }

    pub fn apply_mask(&mut self) {
        for (d, &m) in self.data.iter_mut().zip(&self.mask) {
            if !m {
                *d = 0.0;
            }
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Corner-aligned 2× reduction with a `[1/4, 1/2, 1/4]` separable
    /// prefilter; a reduced pixel is foreground when at least half of its
    /// filter weight is.
    pub fn reduce(&self) -> Slice {
        let (w, h) = (self.grid.width, self.grid.height);
        let grid = self.grid.reduced(1);
        let taps = [(-1i64, 0.25), (0, 0.5), (1, 0.25)];
        let mut data = vec![0.0; grid.len()];
        let mut mask = vec![false; grid.len()];
        for y in 0..grid.height {
            for x in 0..grid.width {
                let (cx, cy) = (2 * x as i64, 2 * y as i64);
                let (mut acc, mut wsum, mut fg) = (0.0, 0.0, 0.0);
                for (dy, wy) in taps {
                    for (dx, wx) in taps {
                        let (sx, sy) = (cx + dx, cy + dy);
                        if sx < 0 || sy < 0 || sx >= w as i64 || sy >= h as i64 {
                            continue;
                        }
                        let i = sx as usize + w * sy as usize;
                        let wt = wx * wy;
                        wsum += wt;
                        if self.mask[i] {
                            acc += wt * self.data[i];
                            fg += wt;
                        }
                    }
                }
                let o = grid.index(x, y);
                if fg >= 0.5 * wsum && fg > 0.0 {
                    data[o] = acc / fg;
                    mask[o] = true;
                }
            }
        }
        Slice {
            grid,
            data,
            mask,
            index_in_stack: self.index_in_stack,
            acquisition_time_index: self.acquisition_time_index,
        }
    }

    pub fn reduced(&self, k: usize) -> Slice {
        (0..k).fold(self.clone(), |s, _| s.reduce())
    }
}

/// Parallel slices acquired in one prescribed orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub slices: Vec<Slice>,
    pub orientation: Orientation,
    /// mm
    pub slice_thickness: f64,
    /// mm between consecutive slice centres.
    pub slice_gap: f64,
    /// mm per pixel; equal to the reconstruction voxel spacing.
    pub in_plane_spacing: f64,
    /// Rotation centre of the field of view, full-resolution voxels.
    pub center: Vector3<f64>,
}

impl SliceStack {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn grid(&self) -> PixelGrid {
        self.slices[0].grid
    }

    pub fn gap_voxels(&self) -> f64 {
        self.slice_gap / self.in_plane_spacing
    }

    /// Through-plane position of slice `n` in its own frame.
    pub fn depth(&self, n: usize) -> f64 {
        let mid = (self.len() as f64 - 1.0) / 2.0;
        self.center.z + (n as f64 - mid) * self.gap_voxels()
    }

    /// `T_n`: translation of slice `n` along its normal.
    pub fn slice_translation(&self, n: usize) -> RigidTransform {
        RigidTransform::from_translation(Vector3::new(0.0, 0.0, self.depth(n)))
    }

    /// Orientation rotation about the field-of-view centre, `C·R·C⁻¹`.
    pub fn centered_rotation(&self, extra: &RigidTransform) -> RigidTransform {
        self.orientation.rotation().compose(extra).about(&self.center)
    }

    /// Full-resolution prescribed pose of slice `n`, optionally perturbed by
    /// a motion `g` acting in the slice frame about the centre.
    pub fn pose_with_motion(&self, n: usize, g: &RigidTransform) -> RigidTransform {
        self.centered_rotation(g).compose(&self.slice_translation(n))
    }

    pub fn prescribed_pose(&self, n: usize) -> RigidTransform {
        self.pose_with_motion(n, &RigidTransform::identity())
    }

    /// Displacement field of slice `n`'s prescribed pose at `level`.
    pub fn prescribed_field(&self, n: usize, level: &PyramidLevel) -> Result<DisplacementField> {
        let grid = self.grid().reduced(level.halvings());
        crate::geometry::prescribed_pose_field(
            &self.slice_translation(n),
            &self.orientation.rotation(),
            &grid,
            level,
        )
    }

    /// Boxcar PSF across the slice thickness.
    pub fn boxcar_psf(&self) -> Result<PsfKernel> {
        PsfKernel::boxcar(self.slice_thickness, self.in_plane_spacing)
    }

    pub fn validate(&self) -> Result<()> {
        if self.slices.is_empty() {
            return Err(Error::Empty("stack has no slices".into()));
        }
        if !(self.slice_thickness > 0.0) {
            return Err(Error::InvalidArgument("slice thickness must be positive".into()));
        }
        let g = self.grid();
        if self.slices.iter().any(|s| s.grid != g) {
            return Err(Error::GridMismatch("slices in a stack must share one grid".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimStatus {
    Ok,
    /// No pixel reached the coverage threshold.
    EmptyOverlap,
}

/// Volume positions of every pixel under `pose`, plus per-tap rotated offsets.
fn tap_offsets(pose: &RigidTransform, psf: &PsfKernel) -> Vec<(Vector3<f64>, f64)> {
    psf.taps
        .iter()
        .map(|t| (pose.apply_vector(&t.offset), t.weight))
        .collect()
}

/// PSF forward model for one slice.
///
/// Each pixel is the PSF-weighted sum of trilinear samples at the posed tap
/// positions, with the volume zero-padded outside its grid. A pixel is
/// foreground when more than half of its tap weight falls inside the volume.
pub fn simulate_slice_psf(
    volume: &Volume,
    pose: &RigidTransform,
    grid: &PixelGrid,
    psf: &PsfKernel,
) -> (Slice, SimStatus) {
    let taps = tap_offsets(pose, psf);
    let mut data = vec![0.0; grid.len()];
    let mut mask = vec![false; grid.len()];
    for i in 0..grid.len() {
        let p = pose.apply(&crate::geometry::uplift(grid.pixel(i)));
        let (mut acc, mut inside) = (0.0, 0.0);
        for (off, w) in &taps {
            let x = p + off;
            acc += w * sampling::sample_padded(&volume.dims, &volume.data, &x);
            if sampling::trilinear(&volume.dims, &x).is_some() {
                inside += w;
            }
        }
        data[i] = acc;
        mask[i] = inside > MASK_COVERAGE;
    }
    let status = if mask.iter().any(|&m| m) {
        SimStatus::Ok
    } else {
        SimStatus::EmptyOverlap
    };
    // Partially covered pixels keep their values; the mask only flags them.
    let slice = Slice {
        grid: *grid,
        data,
        mask,
        index_in_stack: 0,
        acquisition_time_index: 0,
    };
    (slice, status)
}

/// Adjoint of [`simulate_slice_psf`]'s pixel values: splat `values[i]·w_tap`
/// for each selected pixel into `out`.
pub fn splat_slice_psf(
    out: &mut [f64],
    dims: &[usize; 3],
    pose: &RigidTransform,
    grid: &PixelGrid,
    psf: &PsfKernel,
    values: &[f64],
    select: &[bool],
) {
    let taps = tap_offsets(pose, psf);
    for i in 0..grid.len() {
        if !select[i] || values[i] == 0.0 {
            continue;
        }
        let p = pose.apply(&crate::geometry::uplift(grid.pixel(i)));
        for (off, w) in &taps {
            sampling::splat_padded(dims, out, &(p + off), values[i] * w);
        }
    }
}

/// Thin-slice model: sample the volume at `p↑ + f(p)`.
pub fn simulate_slice_field(volume: &Volume, field: &DisplacementField, spacing: f64) -> Slice {
    let coords = field.targets();
    let pulled = sampling::pull(volume, &coords);
    let grid = PixelGrid {
        width: field.width,
        height: field.height,
        spacing,
    };
    let mut s = Slice {
        grid,
        data: pulled.values,
        mask: pulled.in_bounds,
        index_in_stack: 0,
        acquisition_time_index: 0,
    };
    s.apply_mask();
    s
}

/// Explicit slicing matrix for tiny volumes: one row per pixel (slices in
/// order), one column per voxel (x fastest).
///
/// Built directly from the hat-function form of trilinear interpolation,
/// `Π_a max(0, 1 − |x_a − i_a|)`, so it is independent of the corner-walking
/// code in [`crate::sampling`].
pub fn assemble_dense_system(
    dims: [usize; 3],
    poses: &[RigidTransform],
    grids: &[PixelGrid],
    psf: &PsfKernel,
) -> Result<DMatrix<f64>> {
    let voxels: usize = dims.iter().product();
    if voxels > DENSE_VOXEL_LIMIT {
        return Err(Error::TooLarge {
            voxels,
            limit: DENSE_VOXEL_LIMIT,
        });
    }
    if poses.len() != grids.len() {
        return Err(Error::InvalidArgument("one grid per pose required".into()));
    }
    let rows: usize = grids.iter().map(|g| g.len()).sum();
    let mut a = DMatrix::<f64>::zeros(rows, voxels);
    let hat = |d: f64| (1.0 - d.abs()).max(0.0);
    let mut row = 0;
    for (pose, grid) in poses.iter().zip(grids) {
        for i in 0..grid.len() {
            let p = pose.apply(&crate::geometry::uplift(grid.pixel(i)));
            for tap in &psf.taps {
                let x = p + pose.apply_vector(&tap.offset);
                for k in 0..dims[2] {
                    let wz = hat(x.z - k as f64);
                    if wz == 0.0 {
                        continue;
                    }
                    for j in 0..dims[1] {
                        let wy = hat(x.y - j as f64);
                        if wy == 0.0 {
                            continue;
                        }
                        for ii in 0..dims[0] {
                            let wx = hat(x.x - ii as f64);
                            if wx != 0.0 {
                                a[(row, ii + dims[0] * (j + dims[1] * k))] += tap.weight * wx * wy * wz;
                            }
                        }
                    }
                }
            }
            row += 1;
        }
    }
    Ok(a)
}

/// Concatenate slice rasters into one vector, matching the dense row order.
pub fn stack_slice_vector(slices: &[&Slice]) -> DVector<f64> {
    DVector::from_iterator(
        slices.iter().map(|s| s.data.len()).sum(),
        slices.iter().flat_map(|s| s.data.iter().copied()),
    )
}
