//! Synthetic acquisitions: ideal stacks from a phantom, smooth rigid motion
//! trajectories and intensity corruption, with ground truth.
//!
//! Randomness comes from `ChaCha8Rng`: stack `j` of a subject seeded with `s`
//! draws from `ChaCha8Rng::seed_from_u64(s)` on stream `j`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{simulate_slice_psf, Orientation, SimStatus, Slice, SliceStack};
use crate::geometry::{interpolate_rigid_trajectory, DisplacementField, PyramidLevel, RigidTransform};
use crate::optim::PsfChoice;
use crate::par::{self, Exec};
use crate::sampling::{PsfKernel, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Bulk in-plane rotation is drawn from `U[−r, r]` degrees.
    pub bulk_inplane_rot_range: f64,
    /// Inclusive range for the number of keyframes.
    pub n_perturbations: [usize; 2],
    /// Per-axis keyframe rotation-vector standard deviation, degrees.
    pub rot_sigma: f64,
    /// Keyframe translations are drawn from `U[−r, r]` mm per axis.
    pub trans_range: f64,
    /// Noise standard deviation as a fraction of the foreground range.
    pub noise_sigma: f64,
    /// Peak relative deviation of the per-slice bias field.
    pub bias_amplitude: f64,
    pub gamma_range: [f64; 2],
    pub seed: u64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            bulk_inplane_rot_range: 12.0,
            n_perturbations: [1, 100],
            rot_sigma: 20.0,
            trans_range: 6.1,
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            gamma_range: [1.0, 1.0],
            seed: 0,
        }
    }
}

impl MotionConfig {
    /// No motion and no corruption.
    pub fn still() -> Self {
        Self {
            bulk_inplane_rot_range: 0.0,
            n_perturbations: [1, 1],
            rot_sigma: 0.0,
            trans_range: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [kmin, kmax] = self.n_perturbations;
        let ok = self.bulk_inplane_rot_range >= 0.0
            && self.rot_sigma >= 0.0
            && self.trans_range >= 0.0
            && self.noise_sigma >= 0.0
            && (0.0..1.0).contains(&self.bias_amplitude)
            && kmin >= 1
            && kmin <= kmax
            && self.gamma_range[0] > 0.0
            && self.gamma_range[0] <= self.gamma_range[1];
        if ok && [self.bulk_inplane_rot_range, self.rot_sigma, self.trans_range, self.noise_sigma]
            .iter()
            .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument("invalid motion configuration".into()))
        }
    }

    /// Generator for stack `stack`.
    pub fn rng(&self, stack: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stack as u64);
        rng
    }
}

/// Acquisition geometry shared by all stacks of a subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Acquisition {
    pub orientations: Vec<Orientation>,
    /// mm
    pub slice_thickness: f64,
    /// mm between slice centres.
    pub slice_gap: f64,
    /// Slices per stack; by default as many as fit the field of view.
    pub n_slices: Option<usize>,
    pub psf: PsfChoice,
    /// Pixels at or below this intensity are background; `None` keeps every
    /// in-volume pixel.
    pub foreground_threshold: Option<f64>,
}

impl Default for Acquisition {
    fn default() -> Self {
        Self {
            orientations: Orientation::ALL.to_vec(),
            slice_thickness: 2.0,
            slice_gap: 2.0,
            n_slices: None,
            psf: PsfChoice::Boxcar,
            foreground_threshold: None,
        }
    }
}

/// Sampled motion of one stack.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionTrajectory {
    pub keyframes: Vec<(f64, RigidTransform)>,
    pub bulk_deg: f64,
    /// Slice-frame motion `G_n` for each slice.
    pub per_slice: Vec<RigidTransform>,
}

impl MotionTrajectory {
    pub fn identity(n_slices: usize) -> Self {
        Self {
            keyframes: vec![(0.0, RigidTransform::identity())],
            bulk_deg: 0.0,
            per_slice: vec![RigidTransform::identity(); n_slices],
        }
    }
}

/// One keyframe: rotation vector `N(0, σ)` per axis and translation
/// `U[−r, r]` mm per axis, expressed in voxels of size `spacing`.
pub fn sample_keyframe(config: &MotionConfig, spacing: f64, rng: &mut impl Rng) -> RigidTransform {
    let rot = if config.rot_sigma > 0.0 {
        let n = Normal::new(0.0, config.rot_sigma).expect("finite sigma");
        Vector3::from_fn(|_, _| n.sample(rng))
    } else {
        Vector3::zeros()
    };
    let r = config.trans_range;
    let t = if r > 0.0 {
        Vector3::from_fn(|_, _| rng.random_range(-r..=r) / spacing)
    } else {
        Vector3::zeros()
    };
    RigidTransform::from_rotation_vector_deg(rot, t)
}

/// Keyframes at evenly spaced acquisition times over `[0, n_slices − 1]`.
pub fn sample_keyframes(
    config: &MotionConfig,
    n_slices: usize,
    spacing: f64,
    rng: &mut impl Rng,
) -> Vec<(f64, RigidTransform)> {
    let [kmin, kmax] = config.n_perturbations;
    let k = rng.random_range(kmin..=kmax);
    let span = (n_slices.max(2) - 1) as f64;
    (0..k)
        .map(|j| {
            let t = if k == 1 { 0.0 } else { span * j as f64 / (k - 1) as f64 };
            (t, sample_keyframe(config, spacing, rng))
        })
        .collect()
}

/// Smooth rigid motion of one stack: keyframes interpolated at the slice
/// acquisition times, composed with one bulk in-plane rotation.
pub fn sample_motion(
    config: &MotionConfig,
    acquisition_times: &[usize],
    spacing: f64,
    rng: &mut impl Rng,
) -> Result<MotionTrajectory> {
    if acquisition_times.is_empty() {
        return Err(Error::Empty("no slices to move".into()));
    }
    let keyframes = sample_keyframes(config, acquisition_times.len(), spacing, rng);
    let r = config.bulk_inplane_rot_range;
    let bulk_deg = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let bulk = RigidTransform::from_rotation_vector_deg(Vector3::new(0.0, 0.0, bulk_deg), Vector3::zeros());
    let times: Vec<f64> = acquisition_times.iter().map(|&t| t as f64).collect();
    let per_slice = interpolate_rigid_trajectory(&keyframes, &times)?
        .into_iter()
        .map(|m| m.compose(&bulk))
        .collect();
    Ok(MotionTrajectory {
        keyframes,
        bulk_deg,
        per_slice,
    })
}

/// Motion-free stacks sampled from `phantom` at prescribed poses.
///
/// The phantom must be a cube whose voxel spacing equals the in-plane pixel
/// spacing.
pub fn extract_stacks(phantom: &Volume, acq: &Acquisition, exec: Exec) -> Result<Vec<SliceStack>> {
    let n = phantom.dims[0];
    if phantom.dims.iter().any(|&d| d != n) {
        return Err(Error::InvalidArgument("phantom must be a cube".into()));
    }
    let spacing = phantom.spacing[0];
    if !(acq.slice_gap > 0.0 && acq.slice_thickness > 0.0) {
        return Err(Error::InvalidArgument("slice gap and thickness must be positive".into()));
    }
    let gap_vox = acq.slice_gap / spacing;
    let n_slices = acq
        .n_slices
        .unwrap_or(((n - 1) as f64 / gap_vox + 1e-9).floor() as usize + 1);
    let grid = crate::geometry::PixelGrid::new(n, n, spacing)?;
    let center = phantom.center();
    acq.orientations
        .iter()
        .map(|&orientation| {
            let mut stack = SliceStack {
                slices: Vec::new(),
                orientation,
                slice_thickness: acq.slice_thickness,
                slice_gap: acq.slice_gap,
                in_plane_spacing: spacing,
                center,
            };
            stack.slices = vec![Slice::new(grid, vec![0.0; grid.len()], vec![false; grid.len()])?; n_slices];
            let psf = acq.psf.kernel(&stack)?;
            let slices = par::map(exec, n_slices, |i| {
                let (mut s, status) = simulate_slice_psf(phantom, &stack.prescribed_pose(i), &grid, &psf);
                mask_foreground(&mut s, acq.foreground_threshold);
                (s.with_indices(i, i), status)
            });
            if slices.iter().all(|(_, st)| *st == SimStatus::EmptyOverlap) {
                return Err(Error::Empty(format!("{} stack misses the phantom", orientation.label())));
            }
            stack.slices = slices.into_iter().map(|(s, _)| s).collect();
            Ok(stack)
        })
        .collect()
}

fn mask_foreground(s: &mut Slice, threshold: Option<f64>) {
    if let Some(t) = threshold {
        for (m, &v) in s.mask.iter_mut().zip(&s.data) {
            *m &= v > t;
        }
    }
    s.apply_mask();
}

/// Ground truth for one stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackTruth {
    pub motion: MotionTrajectory,
    pub poses: Vec<RigidTransform>,
    /// Full-resolution fields of `poses`.
    pub fields: Vec<DisplacementField>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub clean: Vec<SliceStack>,
    pub corrupted: Vec<SliceStack>,
    pub stacks: Vec<StackTruth>,
}

fn foreground_range(stack: &SliceStack) -> (f64, f64) {
    stack
        .slices
        .iter()
        .flat_map(|s| s.data.iter().zip(&s.mask).filter(|(_, &m)| m).map(|(&v, _)| v))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Smooth multiplicative field `1 + Σ c_k φ_k(u, v)` over the slice with
/// `φ ∈ {u, v, u², uv, v²}`, `u, v ∈ [−1, 1]`, scaled so its peak
/// deviation is `amplitude`.
fn bias_field(w: usize, h: usize, amplitude: f64, rng: &mut impl Rng) -> Vec<f64> {
    let c: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let coord = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    let raw: Vec<f64> = (0..w * h)
        .map(|i| {
            let (u, v) = (coord(i % w, w), coord(i / w, h));
            c[0] * u + c[1] * v + c[2] * u * u + c[3] * u * v + c[4] * v * v
        })
        .collect();
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let s = if peak > 0.0 { amplitude / peak } else { 0.0 };
    raw.iter().map(|r| 1.0 + s * r).collect()
}

/// Re-simulate `stack` from `phantom` under `motion`, then corrupt
/// intensities (noise, bias, gamma, in that order). The foreground mask is
/// taken from the motion-corrupted but noise-free slices.
#[allow(clippy::too_many_arguments)]
pub fn corrupt_stack(
    stack: &SliceStack,
    phantom: &Volume,
    motion: &MotionTrajectory,
    config: &MotionConfig,
    psf: &PsfKernel,
    threshold: Option<f64>,
    rng: &mut impl Rng,
    exec: Exec,
) -> Result<(SliceStack, StackTruth)> {
    if motion.per_slice.len() != stack.len() {
        return Err(Error::InvalidArgument(format!(
            "{} motion samples for {} slices",
            motion.per_slice.len(),
            stack.len()
        )));
    }
    let grid = stack.grid();
    let full = PyramidLevel::full(stack.center);
    let poses: Vec<RigidTransform> = (0..stack.len())
        .map(|n| stack.pose_with_motion(n, &motion.per_slice[n]))
        .collect();
    let fields = poses.iter().map(|p| DisplacementField::from_pose(p, &grid, &full)).collect();
    let mut out = stack.clone();
    let sims = par::map(exec, stack.len(), |n| {
        let (mut s, _) = simulate_slice_psf(phantom, &poses[n], &grid, psf);
        mask_foreground(&mut s, threshold);
        s
    });
    for (dst, s) in out.slices.iter_mut().zip(sims) {
        dst.data = s.data;
        dst.mask = s.mask;
    }

    if config.noise_sigma > 0.0 {
        let (lo, hi) = foreground_range(&out);
        let sigma = config.noise_sigma * (hi - lo).max(0.0);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for s in &mut out.slices {
                for (v, &m) in s.data.iter_mut().zip(&s.mask) {
                    if m {
                        *v += normal.sample(rng);
                    }
                }
            }
        }
    }
    if config.bias_amplitude > 0.0 {
        for s in &mut out.slices {
            let amp = config.bias_amplitude * rng.random_range(0.0..=1.0);
            let b = bias_field(grid.width, grid.height, amp, rng);
            for ((v, &m), f) in s.data.iter_mut().zip(&s.mask).zip(&b) {
                if m {
                    *v *= f;
                }
            }
        }
    }
    let [g0, g1] = config.gamma_range;
    if !(g0 == 1.0 && g1 == 1.0) {
        let (lo, hi) = foreground_range(&out);
        let range = hi - lo;
        if range > 0.0 {
            for s in &mut out.slices {
                let gamma = if g1 > g0 { rng.random_range(g0..=g1) } else { g0 };
                for (v, &m) in s.data.iter_mut().zip(&s.mask) {
                    if m {
                        *v = lo + range * ((*v - lo) / range).clamp(0.0, 1.0).powf(gamma);
                    }
                }
            }
        }
    }
    let truth = StackTruth {
        motion: motion.clone(),
        poses,
        fields,
    };
    Ok((out, truth))
}

/// Extract, move and corrupt every stack of a subject.
pub fn simulate_subject(phantom: &Volume, acq: &Acquisition, config: &MotionConfig, exec: Exec) -> Result<GroundTruth> {
    config.validate()?;
    let clean = extract_stacks(phantom, acq, exec)?;
    let spacing = phantom.spacing[0];
    let results: Vec<Result<(SliceStack, StackTruth)>> = clean
        .iter()
        .enumerate()
        .map(|(j, st)| {
            let mut rng = config.rng(j);
            let times: Vec<usize> = st.slices.iter().map(|s| s.acquisition_time_index).collect();
            let motion = sample_motion(config, &times, spacing, &mut rng)?;
            let psf = acq.psf.kernel(st)?;
            corrupt_stack(st, phantom, &motion, config, &psf, acq.foreground_threshold, &mut rng, exec)
        })
        .collect();
    let mut corrupted = Vec::with_capacity(clean.len());
    let mut stacks = Vec::with_capacity(clean.len());
    for r in results {
        let (c, t) = r?;
        corrupted.push(c);
        stacks.push(t);
    }
    Ok(GroundTruth {
        clean,
        corrupted,
        stacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::prescribed_pose_field;
    use crate::init::init_volume;
    use crate::phantom::{make_phantom, PhantomKind};
    use crate::sampling::WeightMode;

    fn thin_acq(gap: f64) -> Acquisition {
        Acquisition {
            slice_thickness: gap,
            slice_gap: gap,
            psf: PsfChoice::Thin,
            ..Acquisition::default()
        }
    }

    #[test]
    fn still_config_gives_identity_trajectory() {
        let mut rng = MotionConfig::still().rng(0);
        let m = sample_motion(&MotionConfig::still(), &(0..10).collect::<Vec<_>>(), 1.0, &mut rng).unwrap();
        for g in &m.per_slice {
            assert!((g.rotation - nalgebra::Matrix3::identity()).amax() < 1e-15);
            assert_eq!(g.translation, Vector3::zeros());
        }
    }

    #[test]
    fn single_keyframe_gives_constant_motion() {
        let cfg = MotionConfig {
            n_perturbations: [1, 1],
            ..MotionConfig::default()
        };
        let mut rng = cfg.rng(3);
        let m = sample_motion(&cfg, &(0..12).collect::<Vec<_>>(), 1.0, &mut rng).unwrap();
        assert!(m.per_slice[0].angle_deg() > 0.0);
        for g in &m.per_slice {
            assert!((g.rotation - m.per_slice[0].rotation).amax() < 1e-12);
            assert!((g.translation - m.per_slice[0].translation).amax() < 1e-12);
        }
    }

    #[test]
    fn axial_thin_slices_are_voxel_planes() {
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 1).unwrap();
        let acq = Acquisition {
            orientations: vec![Orientation::Axial],
            ..thin_acq(1.0)
        };
        let st = &extract_stacks(&v, &acq, Exec::Sequential).unwrap()[0];
        assert_eq!(st.len(), 16);
        for (z, s) in st.slices.iter().enumerate() {
            for y in 0..16 {
                for x in 0..16 {
                    assert!((s.data[x + 16 * y] - v.get(x, y, z)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_phantom_gives_constant_slices() {
        let v = Volume::filled([12; 3], 1.0, 0.7);
        for psf in [PsfChoice::Thin, PsfChoice::Boxcar] {
            let acq = Acquisition { psf, slice_thickness: 1.0, slice_gap: 1.0, ..Acquisition::default() };
            for st in extract_stacks(&v, &acq, Exec::Sequential).unwrap() {
                for s in &st.slices {
                    for (d, m) in s.data.iter().zip(&s.mask) {
                        if *m {
                            assert!((d - 0.7).abs() < 1e-12, "{:?}", st.orientation);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn thin_stacks_resplat_losslessly() {
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 2).unwrap();
        let stacks = extract_stacks(&v, &thin_acq(1.0), Exec::Sequential).unwrap();
        let full = PyramidLevel::full(v.center());
        let fields: Vec<DisplacementField> = stacks
            .iter()
            .flat_map(|st| (0..st.len()).map(move |n| st.prescribed_field(n, &full).unwrap()))
            .collect();
        let slices: Vec<&Slice> = stacks.iter().flat_map(|s| s.slices.iter()).collect();
        let fr: Vec<&DisplacementField> = fields.iter().collect();
        let r = init_volume(&slices, &fr, [16; 3], 1.0, WeightMode::Unit, Exec::Sequential).unwrap();
        for i in 0..r.len() {
            if r.covered(i) {
                assert!((r.data[i] - v.data[i]).abs() <= 1e-6);
            }
        }
        assert_eq!(r.covered_count(), r.len());
    }

    #[test]
    fn zero_corruption_is_bitwise_identity() {
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 5).unwrap();
        let acq = Acquisition { slice_thickness: 2.0, slice_gap: 2.0, ..Acquisition::default() };
        let cfg = MotionConfig::still();
        let gt = simulate_subject(&v, &acq, &cfg, Exec::Sequential).unwrap();
        assert_eq!(gt.clean, gt.corrupted);
    }

    #[test]
    fn truth_fields_match_composed_prescription() {
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 5).unwrap();
        let gt = simulate_subject(&v, &Acquisition::default(), &MotionConfig { seed: 9, ..MotionConfig::default() }, Exec::Sequential)
            .unwrap();
        let full = PyramidLevel::full(v.center());
        for (st, truth) in gt.clean.iter().zip(&gt.stacks) {
            for n in 0..st.len() {
                let r = st.orientation.rotation().compose(&truth.motion.per_slice[n]);
                let f = prescribed_pose_field(&st.slice_translation(n), &r, &st.grid(), &full).unwrap();
                for (a, b) in f.data.iter().zip(&truth.fields[n].data) {
                    assert!((a - b).amax() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn identical_seed_is_bitwise_reproducible() {
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 5).unwrap();
        let cfg = MotionConfig { seed: 42, noise_sigma: 0.05, bias_amplitude: 0.2, gamma_range: [0.7, 1.4], ..MotionConfig::default() };
        let a = simulate_subject(&v, &Acquisition::default(), &cfg, Exec::Parallel).unwrap();
        let b = simulate_subject(&v, &Acquisition::default(), &cfg, Exec::Sequential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_has_half_normal_mean_deviation() {
        let v = make_phantom(PhantomKind::Ellipsoids, [24; 3], 5).unwrap();
        let acq = Acquisition::default();
        let cfg = MotionConfig { noise_sigma: 0.05, seed: 1, ..MotionConfig::still() };
        let gt = simulate_subject(&v, &acq, &cfg, Exec::Sequential).unwrap();
        for (c, k) in gt.clean.iter().zip(&gt.corrupted) {
            let (lo, hi) = foreground_range(c);
            let sigma = 0.05 * (hi - lo);
            let (mut sum, mut n) = (0.0, 0.0);
            for (a, b) in c.slices.iter().zip(&k.slices) {
                for i in 0..a.data.len() {
                    if a.mask[i] {
                        sum += (a.data[i] - b.data[i]).abs();
                        n += 1.0;
                    }
                }
            }
            let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
            assert!((sum / n - expected).abs() <= 0.2 * expected);
        }
    }

    #[test]
    fn gamma_one_and_no_bias_only_adds_noise() {
        let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 5).unwrap();
        let cfg = MotionConfig { noise_sigma: 0.02, seed: 3, ..MotionConfig::still() };
        let with = simulate_subject(&v, &Acquisition::default(), &cfg, Exec::Sequential).unwrap();
        let bias_gamma = MotionConfig { bias_amplitude: 0.0, gamma_range: [1.0, 1.0], ..cfg.clone() };
        let same = simulate_subject(&v, &Acquisition::default(), &bias_gamma, Exec::Sequential).unwrap();
        assert_eq!(with.corrupted, same.corrupted);
        assert_ne!(with.corrupted, with.clean);
    }

    #[test]
    fn bias_field_peak_is_bounded() {
        let mut rng = MotionConfig::default().rng(0);
        for _ in 0..50 {
            let b = bias_field(16, 12, 0.3, &mut rng);
            let peak = b.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
            assert!(peak <= 0.3 + 1e-12);
        }
    }
}
