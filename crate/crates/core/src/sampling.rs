//! Trilinear push (splat) and pull (sample) operators and PSF kernels.
//!
//! `push` and `pull` use identical corner weights, so the data part of
//! `push` is the exact adjoint of `pull`. Points outside `[0, n-1]` on any
//! axis are dropped by `push` and read as zero by `pull`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coverage threshold on accumulated weights.
pub const COVERAGE_EPS: f64 = 1e-8;

/// Slack allowed on the volume bounds before a point counts as outside.
const BOUNDS_TOL: f64 = 1e-9;

/// Scalar voxel grid with a per-voxel accumulated weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// mm per voxel along x, y, z.
    pub spacing: [f64; 3],
    /// mm position of voxel (0,0,0).
    pub origin: [f64; 3],
    pub data: Vec<f64>,
    /// Zero marks an uncovered voxel.
    pub weight: Vec<f64>,
}

impl Volume {
    /// Empty accumulator: zero data, zero weight.
    pub fn zeros(dims: [usize; 3], spacing: f64) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            spacing: [spacing; 3],
            origin: [0.0; 3],
            data: vec![0.0; n],
            weight: vec![0.0; n],
        }
    }

    /// Fully covered volume holding `data`.
    pub fn from_data(dims: [usize; 3], spacing: f64, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::GridMismatch(format!(
                "volume data has {} voxels, dims {:?} need {n}",
                data.len(),
                dims
            )));
        }
        Ok(Self {
            dims,
            spacing: [spacing; 3],
            origin: [0.0; 3],
            data,
            weight: vec![1.0; n],
        })
    }

    pub fn filled(dims: [usize; 3], spacing: f64, value: f64) -> Self {
        let n = dims.iter().product();
        Self::from_data(dims, spacing, vec![value; n]).expect("consistent dims")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    #[inline]
    pub fn covered(&self, i: usize) -> bool {
        self.weight[i] > COVERAGE_EPS
    }

    pub fn covered_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.covered(i)).count()
    }

    /// Geometric centre in voxel coordinates.
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        )
    }

    /// Same geometry, zero data and weight.
    pub fn empty_like(&self) -> Volume {
        let mut v = self.clone();
        v.data.iter_mut().for_each(|d| *d = 0.0);
        v.weight.iter_mut().for_each(|w| *w = 0.0);
        v
    }

    /// Elementwise sum of data and weights; used to merge accumulators.
    pub fn accumulate(&mut self, other: &Volume) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Volume {
        let mut v = self.clone();
        v.data.iter_mut().for_each(|d| *d *= s);
        v
    }
}

/// The eight corner indices and trilinear weights around `x`, or `None`
/// when `x` lies outside the grid.
#[inline]
pub fn trilinear(dims: &[usize; 3], x: &Vector3<f64>) -> Option<([usize; 8], [f64; 8])> {
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let hi = (n - 1) as f64;
        let c = x[a];
        if !(c >= -BOUNDS_TOL && c <= hi + BOUNDS_TOL) {
            return None;
        }
        let c = c.clamp(0.0, hi);
        if n == 1 {
            base[a] = 0;
            frac[a] = 0.0;
        } else {
            let i0 = (c.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = c - i0 as f64;
        }
    }
    let sx = 1;
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    let step = |a: usize, s: usize| if dims[a] > 1 { s } else { 0 };
    let (dx, dy, dz) = (step(0, sx), step(1, sy), step(2, sz));
    let i000 = base[0] + dims[0] * (base[1] + dims[1] * base[2]);
    let [fx, fy, fz] = frac;
    let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
    Some((
        [
            i000,
            i000 + dx,
            i000 + dy,
            i000 + dx + dy,
            i000 + dz,
            i000 + dx + dz,
            i000 + dy + dz,
            i000 + dx + dy + dz,
        ],
        [
            gx * gy * gz,
            fx * gy * gz,
            gx * fy * gz,
            fx * fy * gz,
            gx * gy * fz,
            fx * gy * fz,
            gx * fy * fz,
            fx * fy * fz,
        ],
    ))
}

/// Trilinear sample of a raw grid; `None` outside.
#[inline]
pub fn sample_raw(dims: &[usize; 3], data: &[f64], x: &Vector3<f64>) -> Option<f64> {
    trilinear(dims, x).map(|(idx, w)| (0..8).map(|c| w[c] * data[idx[c]]).sum())
}

/// Trilinear splat of `value` into a raw grid; returns false when dropped.
#[inline]
pub fn splat_raw(dims: &[usize; 3], data: &mut [f64], x: &Vector3<f64>, value: f64) -> bool {
    match trilinear(dims, x) {
        Some((idx, w)) => {
            for c in 0..8 {
                data[idx[c]] += w[c] * value;
            }
            true
        }
        None => false,
    }
}

/// Trilinear weights with zero padding: corners outside the grid carry no
/// weight, so the interpolant decays continuously to 0 within one voxel of
/// the boundary. `None` when no corner is inside.
#[inline]
pub fn trilinear_padded(dims: &[usize; 3], x: &Vector3<f64>) -> Option<([usize; 8], [f64; 8])> {
    let mut taps = [[(0usize, 0f64); 2]; 3];
    for a in 0..3 {
        let c = x[a];
        if !(c > -1.0 && c < dims[a] as f64) {
            return None;
        }
        let i0 = c.floor();
        let f = c - i0;
        let i0 = i0 as i64;
        for (k, (i, w)) in [(i0, 1.0 - f), (i0 + 1, f)].into_iter().enumerate() {
            if i >= 0 && (i as usize) < dims[a] {
                taps[a][k] = (i as usize, w);
            }
        }
    }
    let mut idx = [0usize; 8];
    let mut wts = [0f64; 8];
    for c in 0..8 {
        let (ix, wx) = taps[0][c & 1];
        let (iy, wy) = taps[1][(c >> 1) & 1];
        let (iz, wz) = taps[2][(c >> 2) & 1];
        idx[c] = ix + dims[0] * (iy + dims[1] * iz);
        wts[c] = wx * wy * wz;
    }
    Some((idx, wts))
}

#[inline]
pub fn sample_padded(dims: &[usize; 3], data: &[f64], x: &Vector3<f64>) -> f64 {
    trilinear_padded(dims, x).map_or(0.0, |(idx, w)| (0..8).map(|c| w[c] * data[idx[c]]).sum())
}

#[inline]
pub fn splat_padded(dims: &[usize; 3], data: &mut [f64], x: &Vector3<f64>, value: f64) {
    if let Some((idx, w)) = trilinear_padded(dims, x) {
        for c in 0..8 {
            data[idx[c]] += w[c] * value;
        }
    }
}

/// How `push` accumulates the normalisation weight of each contribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Every contributing pixel adds its trilinear weights.
    #[default]
    Unit,
    /// Only pixels with positive intensity add weight (`[I > 0]`).
    Indicator,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PushStats {
    pub pushed: usize,
    pub dropped: usize,
}

impl std::ops::AddAssign for PushStats {
    fn add_assign(&mut self, o: PushStats) {
        self.pushed += o.pushed;
        self.dropped += o.dropped;
    }
}

/// Splat one contribution: `value·tap` into data and `tap` (or `tap·[value > 0]`) into weight.
#[inline]
pub fn push_one(acc: &mut Volume, x: &Vector3<f64>, value: f64, tap: f64, mode: WeightMode) -> bool {
    let Some((idx, w)) = trilinear(&acc.dims, x) else {
        return false;
    };
    let wt = match mode {
        WeightMode::Unit => tap,
        WeightMode::Indicator => {
            if value > 0.0 {
                tap
            } else {
                0.0
            }
        }
    };
    for c in 0..8 {
        acc.data[idx[c]] += w[c] * value * tap;
        acc.weight[idx[c]] += w[c] * wt;
    }
    true
}

/// Distribute `values` at `coords` into `acc` with trilinear weights.
pub fn push(acc: &mut Volume, coords: &[Vector3<f64>], values: &[f64], mode: WeightMode) -> Result<PushStats> {
    if coords.len() != values.len() {
        return Err(Error::InvalidArgument(format!(
            "{} coordinates for {} values",
            coords.len(),
            values.len()
        )));
    }
    let mut stats = PushStats::default();
    for (x, &v) in coords.iter().zip(values) {
        if push_one(acc, x, v, 1.0, mode) {
            stats.pushed += 1;
        } else {
            stats.dropped += 1;
        }
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pulled {
    pub values: Vec<f64>,
    pub in_bounds: Vec<bool>,
}

/// Trilinear interpolation of `source.data` at each coordinate.
pub fn pull(source: &Volume, coords: &[Vector3<f64>]) -> Pulled {
    let mut values = Vec::with_capacity(coords.len());
    let mut in_bounds = Vec::with_capacity(coords.len());
    for x in coords {
        match sample_raw(&source.dims, &source.data, x) {
            Some(v) => {
                values.push(v);
                in_bounds.push(true);
            }
            None => {
                values.push(0.0);
                in_bounds.push(false);
            }
        }
    }
    Pulled { values, in_bounds }
}

/// `data / weight` on covered voxels, zero elsewhere. Weights are kept.
pub fn normalize(acc: &Volume) -> Volume {
    let mut out = acc.clone();
    for (d, &w) in out.data.iter_mut().zip(&acc.weight) {
        if w > COVERAGE_EPS {
            *d /= w;
        } else {
            *d = 0.0;
        }
    }
    for w in out.weight.iter_mut() {
        if *w <= COVERAGE_EPS {
            *w = 0.0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsfKind {
    Gaussian,
    Boxcar,
    Thin,
}

/// One PSF sample: an offset in the slice frame (voxel units, z through-plane).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsfTap {
    pub offset: Vector3<f64>,
    pub weight: f64,
}

/// Discretised point-spread function in the slice frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfKernel {
    pub kind: PsfKind,
    /// Half-extent in voxels along slice x, y and the slice normal.
    pub support: [usize; 3],
    pub taps: Vec<PsfTap>,
}

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")))
    }
}

fn gaussian_profile(sigma: f64) -> Vec<f64> {
    let half = (2.5 * sigma).floor() as i64;
    (-half..=half)
        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

impl PsfKernel {
    /// Identity PSF: a single unit tap.
    pub fn thin() -> Self {
        Self {
            kind: PsfKind::Thin,
            support: [0; 3],
            taps: vec![PsfTap {
                offset: Vector3::zeros(),
                weight: 1.0,
            }],
        }
    }

    fn separable(kind: PsfKind, px: &[f64], py: &[f64], pz: &[f64]) -> Self {
        let half = |p: &[f64]| (p.len() - 1) / 2;
        let (hx, hy, hz) = (half(px), half(py), half(pz));
        let mut taps = Vec::with_capacity(px.len() * py.len() * pz.len());
        for (k, wz) in pz.iter().enumerate() {
            for (j, wy) in py.iter().enumerate() {
                for (i, wx) in px.iter().enumerate() {
                    let w = wx * wy * wz;
                    if w > 0.0 {
                        taps.push(PsfTap {
                            offset: Vector3::new(
                                i as f64 - hx as f64,
                                j as f64 - hy as f64,
                                k as f64 - hz as f64,
                            ),
                            weight: w,
                        });
                    }
                }
            }
        }
        let total: f64 = taps.iter().map(|t| t.weight).sum();
        taps.iter_mut().for_each(|t| t.weight /= total);
        Self {
            kind,
            support: [hx, hy, hz],
            taps,
        }
    }

    /// Separable Gaussian: through-plane FWHM = slice thickness, in-plane
    /// FWHM = pixel spacing; truncated at 2.5σ and renormalised.
    pub fn gaussian(slice_thickness: f64, in_plane_spacing: f64, voxel_spacing: f64) -> Result<Self> {
        check_positive("slice thickness", slice_thickness)?;
        check_positive("in-plane spacing", in_plane_spacing)?;
        check_positive("voxel spacing", voxel_spacing)?;
        let s_xy = in_plane_spacing / voxel_spacing / FWHM_PER_SIGMA;
        let s_z = slice_thickness / voxel_spacing / FWHM_PER_SIGMA;
        let pxy = gaussian_profile(s_xy);
        let pz = gaussian_profile(s_z);
        Ok(Self::separable(PsfKind::Gaussian, &pxy, &pxy, &pz))
    }

    /// Uniform through-plane profile over the slice thickness; taps at the
    /// edges carry their fractional overlap.
    pub fn boxcar(slice_thickness: f64, voxel_spacing: f64) -> Result<Self> {
        check_positive("slice thickness", slice_thickness)?;
        check_positive("voxel spacing", voxel_spacing)?;
        let half_width = slice_thickness / voxel_spacing / 2.0;
        let half = (half_width + 0.5 - 1e-9).ceil().max(1.0) as i64 - 1;
        let pz: Vec<f64> = (-half..=half)
            .map(|j| {
                let lo = (j as f64 - 0.5).max(-half_width);
                let hi = (j as f64 + 0.5).min(half_width);
                (hi - lo).max(0.0)
            })
            .collect();
        Ok(Self::separable(PsfKind::Boxcar, &[1.0], &[1.0], &pz))
    }

    pub fn weight_sum(&self) -> f64 {
        self.taps.iter().map(|t| t.weight).sum()
    }

    /// Through-plane marginal profile, indexed from `-support[2]`.
    pub fn through_plane_profile(&self) -> Vec<f64> {
        let hz = self.support[2] as i64;
        let mut p = vec![0.0; (2 * hz + 1) as usize];
        for t in &self.taps {
            p[(t.offset.z.round() as i64 + hz) as usize] += t.weight;
        }
        p
    }
}
