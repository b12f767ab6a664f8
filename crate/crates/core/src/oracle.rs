//! Named correctness cases with known answers.
//!
//! Each case builds its own small problem, compares the library against an
//! independent computation and returns one [`Check`] per quantity. The
//! `svr oracle --case <name>` verb and the acceptance suite both run these.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{assemble_dense_system, simulate_slice_psf, Slice};
use crate::geometry::{
    prescribed_pose_field, project_to_rigid, uplift, DisplacementField, PixelGrid, PyramidLevel, RigidTransform,
};
use crate::init::init_volume;
use crate::metrics::{ncc, psnr, ssim, tre, PSNR_CAP_DB};
use crate::motion::{extract_stacks, sample_motion, Acquisition, MotionConfig};
use crate::optim::{multilayer_residual_loss, volume_update, Observation, PsfChoice};
use crate::par::Exec;
use crate::phantom::{make_phantom, PhantomKind};
use crate::sampling::{pull, push, PsfKernel, Volume, WeightMode};

pub const CASES: &[&str] = &["adjoint", "dense", "field", "arun", "roundtrip", "metrics", "sampler"];

/// One compared quantity; passes when `value <= tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub case: String,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run_case(name: &str) -> Result<OracleReport> {
    let start = Instant::now();
    let mut checks = match name {
        "adjoint" => adjoint()?,
        "dense" => dense()?,
        "field" => field()?,
        "arun" => arun()?,
        "roundtrip" => roundtrip()?,
        "metrics" => metrics()?,
        "sampler" => sampler(100_000)?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown oracle case `{name}`; expected one of {}",
                CASES.join(", ")
            )))
        }
    };
    let seconds = start.elapsed().as_secs_f64();
    match name {
        "adjoint" => checks.push(Check::new("seconds", seconds, 1.0)),
        "dense" => checks.push(Check::new("seconds", seconds, 10.0)),
        _ => {}
    }
    Ok(OracleReport {
        case: name.to_string(),
        checks,
        seconds,
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn max_abs_diff(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// `⟨push(v), x⟩ = ⟨v, pull(x)⟩` on a 16³ grid with 1000 coordinates, some
/// of them outside the volume.
pub fn adjoint() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [16; 3];
    let x = Volume::from_data(dims, 1.0, (0..4096).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let coords: Vec<_> = (0..1000)
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.5..16.5)))
        .collect();
    let values: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut acc = Volume::zeros(dims, 1.0);
    push(&mut acc, &coords, &values, WeightMode::Unit)?;
    let lhs: f64 = acc.data.iter().zip(&x.data).map(|(a, b)| a * b).sum();
    let rhs: f64 = pull(&x, &coords).values.iter().zip(&values).map(|(a, b)| a * b).sum();
    Ok(vec![Check::new("relative inner-product gap", rel(lhs, rhs), 1e-6)])
}

/// 4³ volume seen by 12 thin slices: the forward model against an explicitly
/// assembled matrix, and the iterative volume solve against its
/// pseudo-inverse.
pub fn dense() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let dims = [4; 3];
    let g = PixelGrid::new(4, 4, 1.0)?;
    let c = Vector3::repeat(1.5);
    let psf = PsfKernel::thin();
    let poses: Vec<RigidTransform> = (0..12)
        .map(|_| {
            let rv = Vector3::from_fn(|_, _| rng.random_range(-60.0..60.0));
            let t = RigidTransform::from_translation(Vector3::new(0.0, 0.0, rng.random_range(0.0..3.0)));
            RigidTransform::from_rotation_vector_deg(rv, Vector3::zeros()).about(&c).compose(&t)
        })
        .collect();
    let a = assemble_dense_system(dims, &poses, &vec![g; 12], &psf)?;

    let truth = Volume::from_data(dims, 1.0, (0..64).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let ax = &a * nalgebra::DVector::from_column_slice(&truth.data);
    let simulated: Vec<f64> = poses
        .iter()
        .flat_map(|p| simulate_slice_psf(&truth, p, &g, &psf).0.data)
        .collect();
    let forward_err = max_abs_diff(simulated, ax.iter().copied());

    let slices: Vec<Slice> = (0..12)
        .map(|_| Slice::new(g, (0..16).map(|_| rng.random_range(0.0..1.0)).collect(), vec![true; 16]))
        .collect::<Result<_>>()?;
    let b = nalgebra::DVector::from_iterator(192, slices.iter().flat_map(|s| s.data.iter().copied()));
    let pinv = a
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Degenerate(e.to_string()))?
        * &b;
    let obs: Vec<_> = slices.iter().map(|s| Observation { slice: s, psf: &psf }).collect();
    let solved = volume_update(&obs, &poses, &[1.0; 12], &Volume::zeros(dims, 1.0), 2000, 1e-13, Exec::Sequential)?;
    let solve_err = max_abs_diff(solved.volume.data.iter().copied(), pinv.iter().copied());
    Ok(vec![
        Check::new("forward vs dense matrix", forward_err, 1e-6),
        Check::new("volume solve vs pseudo-inverse", solve_err, 1e-4),
    ])
}

/// Level-aware prescribed fields against point-by-point evaluation of the
/// same chain of transforms.
pub fn field() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n_levels = rng.random_range(1..=4usize);
        let index = rng.random_range(0..n_levels);
        let full = rng.random_range(8..=40usize);
        let center = Vector3::from_fn(|_, _| rng.random_range(0.0..full as f64));
        let level = PyramidLevel::dyadic(index, n_levels, center)?;
        let grid = PixelGrid::new(full, full, 1.0)?.reduced(level.halvings());
        let orient = RigidTransform::from_rotation_vector_deg(
            Vector3::from_fn(|_, _| rng.random_range(-180.0..180.0)),
            Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
        );
        let tn = RigidTransform::from_translation(Vector3::new(0.0, 0.0, rng.random_range(-20.0..20.0)));
        let f = prescribed_pose_field(&tn, &orient, &grid, &level)?;
        let s = level.scale;
        for i in 0..grid.len() {
            let p = uplift(grid.pixel(i));
            let q = tn.apply(&(p * s)) / s - center / s;
            let q = orient.apply(&q) + center / s;
            worst = worst.max((f.data[i] - (q - p)).amax());
        }
    }
    Ok(vec![Check::new("max field deviation", worst, 1e-9)])
}

/// Rigid projection of exact and noisy rigid fields.
pub fn arun() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = PixelGrid::new(16, 16, 1.0)?;
    let level = PyramidLevel::full(Vector3::new(7.5, 7.5, 7.5));
    let noise = Normal::new(0.0, 0.05).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (mut exact, mut excess): (f64, f64) = (0.0, f64::NEG_INFINITY);
    for _ in 0..50 {
        let truth = RigidTransform::from_rotation_vector_deg(
            Vector3::from_fn(|_, _| rng.random_range(-90.0..90.0)),
            Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
        );
        let f = DisplacementField::from_pose(&truth, &g, &level);
        exact = exact.max((project_to_rigid(&f, &g)?.to_homogeneous() - truth.to_homogeneous()).amax());

        let mut noisy = f.clone();
        let mut noise_ss = 0.0;
        for v in noisy.data.iter_mut() {
            let e = Vector3::from_fn(|_, _| noise.sample(&mut rng));
            noise_ss += e.norm_squared();
            *v += e;
        }
        let noise_rms = (noise_ss / g.len() as f64).sqrt();
        let est = project_to_rigid(&noisy, &g)?;
        let rms = ((0..g.len())
            .map(|i| (est.apply(&uplift(g.pixel(i))) - f.target(i)).norm_squared())
            .sum::<f64>()
            / g.len() as f64)
            .sqrt();
        excess = excess.max(rms - noise_rms);
    }
    Ok(vec![
        Check::new("exact field projection error", exact, 1e-9),
        Check::new("noisy fit rms minus noise rms", excess, 0.0),
    ])
}

/// Thin, abutting stacks of a 16³ phantom splatted back at their prescribed
/// positions.
pub fn roundtrip() -> Result<Vec<Check>> {
    let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 1)?;
    let acq = Acquisition {
        slice_thickness: 1.0,
        slice_gap: 1.0,
        psf: PsfChoice::Thin,
        ..Acquisition::default()
    };
    let stacks = extract_stacks(&v, &acq, Exec::Sequential)?;
    let full = PyramidLevel::full(v.center());
    let mut slices = Vec::new();
    let mut fields = Vec::new();
    for st in &stacks {
        for n in 0..st.len() {
            slices.push(&st.slices[n]);
            fields.push(st.prescribed_field(n, &full)?);
        }
    }
    let fr: Vec<&DisplacementField> = fields.iter().collect();
    let r = init_volume(&slices, &fr, v.dims, 1.0, WeightMode::Unit, Exec::Sequential)?;
    let err = (0..r.len())
        .filter(|&i| r.covered(i))
        .map(|i| (r.data[i] - v.data[i]).abs())
        .fold(0.0, f64::max);
    Ok(vec![
        Check::new("max covered-voxel error", err, 1e-6),
        Check::new("uncovered voxels", (r.len() - r.covered_count()) as f64, 0.0),
    ])
}

/// Metrics and the multi-level loss against the textbook formulas in
/// [`reference`].
pub fn metrics() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 8;
    let (mut d_ssim, mut d_psnr, mut d_ncc, mut d_tre, mut d_loss): (f64, f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for _ in 0..3 {
        let mut vol = || Volume::from_data([n; 3], 1.0, (0..n * n * n).map(|_| rng.random_range(0.0..1.0)).collect());
        let (a, b) = (vol()?, vol()?);
        d_ssim = d_ssim.max((ssim(&a, &b)? - reference::ssim(n, &a.data, &b.data)).abs());
        d_psnr = d_psnr.max((psnr(&a, &b, PSNR_CAP_DB)? - reference::psnr(&a.data, &b.data)).abs());
        d_ncc = d_ncc.max((ncc(&a, &b)?.value - reference::ncc(&a.data, &b.data)).abs());
    }
    let mut field = |w: usize, h: usize| {
        let data = (0..w * h)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        DisplacementField::from_data(w, h, 0, data)
    };
    for _ in 0..5 {
        let (a, b) = (field(12, 9)?, field(12, 9)?);
        d_tre = d_tre.max((tre(&a, &b, 0.8)? - 0.8 * reference::max_displacement_gap(&a, &b)).abs());
    }
    for (w, h) in [(16, 16), (13, 10)] {
        let n_levels = 3;
        let gt: Vec<_> = (0..4).map(|_| field(w, h)).collect::<Result<_>>()?;
        let levels: Vec<Vec<_>> = (0..n_levels)
            .map(|s| {
                let k = n_levels - 1 - s;
                let (lw, lh) = (crate::geometry::reduced_len(w, k), crate::geometry::reduced_len(h, k));
                (0..4).map(|_| field(lw, lh)).collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let got = multilayer_residual_loss(&levels, &gt)?;
        d_loss = d_loss.max(rel(got, reference::multilayer_loss(&levels, &gt)));
    }
    Ok(vec![
        Check::new("ssim", d_ssim, 1e-9),
        Check::new("psnr", d_psnr, 1e-9),
        Check::new("ncc", d_ncc, 1e-9),
        Check::new("tre", d_tre, 1e-9),
        Check::new("multilevel loss (relative)", d_loss, 1e-9),
    ])
}

/// Statistics of the default motion sampler over `draws` stacks.
pub fn sampler(draws: usize) -> Result<Vec<Check>> {
    let config = MotionConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut n, mut s1, mut s2) = (0.0, 0.0, 0.0);
    let mut max_t: f64 = 0.0;
    let mut max_bulk: f64 = 0.0;
    let mut bad_counts = 0usize;
    let [kmin, kmax] = config.n_perturbations;
    for _ in 0..draws {
        let m = sample_motion(&config, &[0, 1], 1.0, &mut rng)?;
        if !(kmin..=kmax).contains(&m.keyframes.len()) {
            bad_counts += 1;
        }
        for (_, k) in &m.keyframes {
            for r in k.rotation_vector_deg().iter() {
                n += 1.0;
                s1 += r;
                s2 += r * r;
            }
            max_t = max_t.max(k.translation.amax());
        }
        max_bulk = max_bulk.max(m.bulk_deg.abs());
    }
    let mean = s1 / n;
    let std = (s2 / n - mean * mean).sqrt();
    Ok(vec![
        Check::new("rotation std relative error", (std - config.rot_sigma).abs() / config.rot_sigma, 0.02),
        Check::new("max |translation| mm", max_t, config.trans_range),
        Check::new("keyframe counts outside range", bad_counts as f64, 0.0),
        Check::new("max |bulk rotation| deg", max_bulk, config.bulk_inplane_rot_range),
    ])
}

/// Straightforward implementations used as references.
pub mod reference {
    use nalgebra::Vector3;

    use crate::geometry::DisplacementField;

    /// Mean 3D SSIM over an `n³` volume with an 11³ Gaussian window
    /// (σ = 1.5) truncated at the borders; the dynamic range comes from `a`.
    pub fn ssim(n: usize, a: &[f64], b: &[f64]) -> f64 {
        let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = hi - lo;
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let idx = |x: usize, y: usize, z: usize| x + n * (y + n * z);
        let mut total = 0.0;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let (mut ws, mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for k in z.saturating_sub(5)..(z + 6).min(n) {
                        for j in y.saturating_sub(5)..(y + 6).min(n) {
                            for i in x.saturating_sub(5)..(x + 6).min(n) {
                                let d2 = (i as f64 - x as f64).powi(2)
                                    + (j as f64 - y as f64).powi(2)
                                    + (k as f64 - z as f64).powi(2);
                                let w = (-d2 / 4.5).exp();
                                let (p, q) = (a[idx(i, j, k)], b[idx(i, j, k)]);
                                ws += w;
                                sa += w * p;
                                sb += w * q;
                                saa += w * p * p;
                                sbb += w * q * q;
                                sab += w * p * q;
                            }
                        }
                    }
                    let (ma, mb) = (sa / ws, sb / ws);
                    let va = saa / ws - ma * ma;
                    let vb = sbb / ws - mb * mb;
                    let cov = sab / ws - ma * mb;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                }
            }
        }
        total / (n * n * n) as f64
    }

    pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
        let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        10.0 * ((hi - lo) * (hi - lo) / mse).log10()
    }

    pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let da: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let db: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        num / (da * db).sqrt()
    }

    /// Largest pixelwise Euclidean distance between two fields, in pixels.
    pub fn max_displacement_gap(a: &DisplacementField, b: &DisplacementField) -> f64 {
        let mut worst: f64 = 0.0;
        for y in 0..a.height {
            for x in 0..a.width {
                let d = a.get(x, y) - b.get(x, y);
                worst = worst.max((d.x * d.x + d.y * d.y + d.z * d.z).sqrt());
            }
        }
        worst
    }

    /// Bilinear value of `f` at `(x, y)`, continuing the boundary cells
    /// linearly past the edge.
    fn bilinear(f: &DisplacementField, x: f64, y: f64) -> Vector3<f64> {
        let cell = |t: f64, len: usize| -> (usize, f64) {
            if len == 1 {
                return (0, 0.0);
            }
            let i = (t.floor() as isize).clamp(0, len as isize - 2) as usize;
            (i, t - i as f64)
        };
        let (x0, fx) = cell(x, f.width);
        let (y0, fy) = cell(y, f.height);
        let x1 = (x0 + 1).min(f.width - 1);
        let y1 = (y0 + 1).min(f.height - 1);
        let top = f.get(x0, y0) + (f.get(x1, y0) - f.get(x0, y0)) * fx;
        let bottom = f.get(x0, y1) + (f.get(x1, y1) - f.get(x0, y1)) * fx;
        top + (bottom - top) * fy
    }

    /// Sum over slices and full-resolution pixels of the squared gap between
    /// the truth and the mean of the upsampled level fields (coarsest first).
    pub fn multilayer_loss(levels: &[Vec<DisplacementField>], gt: &[DisplacementField]) -> f64 {
        let l = levels.len();
        let mut total = 0.0;
        for (n, g) in gt.iter().enumerate() {
            for y in 0..g.height {
                for x in 0..g.width {
                    let mut mean = Vector3::zeros();
                    for (s, level) in levels.iter().enumerate() {
                        let k = 2f64.powi((l - 1 - s) as i32);
                        mean += bilinear(&level[n], x as f64 / k, y as f64 / k) * k;
                    }
                    mean /= l as f64;
                    total += (g.get(x, y) - mean).norm_squared();
                }
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_case_is_rejected() {
        assert!(matches!(run_case("nope"), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn cheap_cases_pass() {
        for name in ["adjoint", "field", "arun", "roundtrip", "metrics"] {
            let r = run_case(name).unwrap();
            assert!(r.passed(), "{r:#?}");
        }
    }

    #[test]
    fn small_sampler_is_in_range() {
        let checks = sampler(200).unwrap();
        assert!(checks[1..].iter().all(|c| c.passed), "{checks:#?}");
    }
}
