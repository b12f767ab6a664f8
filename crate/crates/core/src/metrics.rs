//! Registration and reconstruction quality metrics.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{simulate_slice_psf, SliceStack};
use crate::geometry::DisplacementField;
use crate::optim::SvrResult;
use crate::sampling::{PsfKernel, Volume};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_RADIUS: usize = 5;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Largest `‖f̂(p) − f(p)‖` over pixels (all of them, or those in `mask`),
/// in mm.
pub fn tre(est: &DisplacementField, gt: &DisplacementField, spacing: f64) -> Result<f64> {
    tre_masked(est, gt, None, spacing)
}

pub fn tre_masked(est: &DisplacementField, gt: &DisplacementField, mask: Option<&[bool]>, spacing: f64) -> Result<f64> {
    if !est.same_shape(gt) || mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::GridMismatch(format!(
            "fields are {}x{} and {}x{}",
            est.width, est.height, gt.width, gt.height
        )));
    }
    Ok(est
        .data
        .iter()
        .zip(&gt.data)
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (a, b))| (a - b).norm())
        .fold(0.0, f64::max)
        * spacing)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreSummary {
    /// Median over slices of the per-slice maximum TRE, one per stack, mm.
    pub per_stack: Vec<f64>,
    /// Mean of `per_stack`.
    pub mean: f64,
}

/// Median max TRE of every stack; `est[j][n]` and `gt[j][n]` are slice `n`
/// of stack `j`.
pub fn median_max_tre(
    est: &[Vec<DisplacementField>],
    gt: &[Vec<DisplacementField>],
    spacing: f64,
) -> Result<TreSummary> {
    if est.len() != gt.len() || est.is_empty() {
        return Err(Error::InvalidArgument("estimated and true stacks must match".into()));
    }
    let per_stack = est
        .iter()
        .zip(gt)
        .map(|(e, g)| {
            if e.is_empty() || e.len() != g.len() {
                return Err(Error::Empty("stack without matching slices".into()));
            }
            let mut v = e.iter().zip(g).map(|(a, b)| tre(a, b, spacing)).collect::<Result<Vec<_>>>()?;
            Ok(median(&mut v))
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_stack.iter().sum::<f64>() / per_stack.len() as f64;
    Ok(TreSummary { per_stack, mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Ncc {
    pub value: f64,
    /// One of the inputs is constant over the mask.
    pub degenerate: bool,
}

/// Zero-mean normalised cross-correlation over `mask`.
pub fn ncc_masked(a: &[f64], b: &[f64], mask: &[bool]) -> Ncc {
    let idx: Vec<usize> = (0..a.len()).filter(|&i| mask[i]).collect();
    let n = idx.len() as f64;
    if idx.is_empty() {
        return Ncc { value: 0.0, degenerate: true };
    }
    let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (x, y) = (a[i] - ma, b[i] - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    if saa == 0.0 || sbb == 0.0 {
        let identical = idx.iter().all(|&i| a[i] == b[i]);
        return Ncc {
            value: if identical { 1.0 } else { 0.0 },
            degenerate: true,
        };
    }
    Ncc {
        value: (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

fn check_same(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::GridMismatch(format!("volumes are {:?} and {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Voxels covered in either volume.
pub fn union_mask(a: &Volume, b: &Volume) -> Vec<bool> {
    (0..a.len()).map(|i| a.covered(i) || b.covered(i)).collect()
}

pub fn ncc(a: &Volume, b: &Volume) -> Result<Ncc> {
    check_same(a, b)?;
    Ok(ncc_masked(&a.data, &b.data, &union_mask(a, b)))
}

fn dynamic_range(reference: &[f64], mask: &[bool]) -> f64 {
    let (lo, hi) = reference
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    let r = hi - lo;
    if r > 0.0 && r.is_finite() {
        r
    } else {
        1.0
    }
}

/// PSNR of `b` against reference `a` over `mask`, capped at `cap`.
pub fn psnr_masked(a: &[f64], b: &[f64], mask: &[bool], cap: f64) -> f64 {
    let l = dynamic_range(a, mask);
    let (mut se, mut n) = (0.0, 0usize);
    for i in 0..a.len() {
        if mask[i] {
            se += (a[i] - b[i]).powi(2);
            n += 1;
        }
    }
    if n == 0 || se == 0.0 {
        return cap;
    }
    (10.0 * (l * l / (se / n as f64)).log10()).min(cap)
}

pub fn psnr(a: &Volume, b: &Volume, cap: f64) -> Result<f64> {
    check_same(a, b)?;
    Ok(psnr_masked(&a.data, &b.data, &union_mask(a, b), cap))
}

fn gaussian_window() -> Vec<f64> {
    let r = SSIM_RADIUS as i64;
    (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect()
}

fn local_mean(dims: [usize; 3], data: &[f64], w: &[f64]) -> Vec<f64> {
    crate::filter::separable(dims, data, w)
}

/// Mean SSIM of `b` against reference `a` over `mask`; `dims` may be
/// `[w, h, 1]` for images.
pub fn ssim_masked(dims: [usize; 3], a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let l = dynamic_range(a, mask);
    let (c1, c2) = ((K1 * l).powi(2), (K2 * l).powi(2));
    let w = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let ma = local_mean(dims, a, &w);
    let mb = local_mean(dims, b, &w);
    let maa = local_mean(dims, &prod(a, a), &w);
    let mbb = local_mean(dims, &prod(b, b), &w);
    let mab = local_mean(dims, &prod(a, b), &w);
    let (mut acc, mut n) = (0.0, 0usize);
    for i in 0..a.len() {
        if !mask[i] {
            continue;
        }
        let va = maa[i] - ma[i] * ma[i];
        let vb = mbb[i] - mb[i] * mb[i];
        let cov = mab[i] - ma[i] * mb[i];
        acc += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2))
            / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

pub fn ssim(a: &Volume, b: &Volume) -> Result<f64> {
    check_same(a, b)?;
    Ok(ssim_masked(a.dims, &a.data, &b.data, &union_mask(a, b)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SliceConsistency {
    pub stack: usize,
    pub slice: usize,
    pub ssim: f64,
    pub ncc: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub tre_max: Option<f64>,
    pub tre_median_max_per_stack: Option<Vec<f64>>,
    pub tre_median_max_mean: Option<f64>,
    pub ssim: f64,
    pub ncc: f64,
    pub psnr: f64,
    pub per_slice_consistency: Vec<SliceConsistency>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Compare every acquired slice with its simulation from `result` at the
/// final pose; slice-wise scales are applied relative to their mean.
pub fn slice_consistency(stacks: &[SliceStack], result: &SvrResult, psfs: &[PsfKernel]) -> Result<MetricReport> {
    if stacks.len() != result.poses.len() || psfs.len() != stacks.len() {
        return Err(Error::InvalidArgument("stacks, poses and kernels must align".into()));
    }
    let all: Vec<f64> = result.slice_scales.iter().flatten().copied().collect();
    let mean_scale = if all.is_empty() { 1.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
    let mut per_slice = Vec::new();
    for (j, st) in stacks.iter().enumerate() {
        for (n, sl) in st.slices.iter().enumerate() {
            let (sim, _) = simulate_slice_psf(&result.volume, &result.poses[j][n], &sl.grid, &psfs[j]);
            let s = if mean_scale > 0.0 { result.slice_scales[j][n] / mean_scale } else { 1.0 };
            let simd: Vec<f64> = sim.data.iter().map(|v| v * s).collect();
            let mask: Vec<bool> = sl.mask.iter().zip(&sim.mask).map(|(a, b)| *a && *b).collect();
            let dims = [sl.grid.width, sl.grid.height, 1];
            per_slice.push(SliceConsistency {
                stack: j,
                slice: n,
                ssim: ssim_masked(dims, &sl.data, &simd, &mask),
                ncc: ncc_masked(&sl.data, &simd, &mask).value,
                psnr: psnr_masked(&sl.data, &simd, &mask, PSNR_CAP_DB),
            });
        }
    }
    let k = per_slice.len().max(1) as f64;
    Ok(MetricReport {
        ssim: per_slice.iter().map(|c| c.ssim).sum::<f64>() / k,
        ncc: per_slice.iter().map(|c| c.ncc).sum::<f64>() / k,
        psnr: per_slice.iter().map(|c| c.psnr).sum::<f64>() / k,
        per_slice_consistency: per_slice,
        ..MetricReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(n: usize, rng: &mut ChaCha8Rng) -> Volume {
        Volume::from_data([n; 3], 1.0, (0..n * n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn field(w: usize, h: usize, rng: &mut ChaCha8Rng) -> DisplacementField {
        let data = (0..w * h).map(|_| Vector3::new(rng.random(), rng.random(), rng.random())).collect();
        DisplacementField::from_data(w, h, 0, data).unwrap()
    }

    #[test]
    fn tre_of_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = field(8, 8, &mut rng);
        let mut g = f.clone();
        g.data.iter_mut().for_each(|v| *v += Vector3::new(3.0, 0.0, 0.0));
        assert_eq!(tre(&f, &f, 1.0).unwrap(), 0.0);
        assert!((tre(&g, &f, 1.0).unwrap() - 3.0).abs() < 1e-12);
        assert!((tre(&g, &f, 0.5).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn tre_matches_naive_loop_and_is_a_pseudometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (a, b, c) = (field(8, 8, &mut rng), field(8, 8, &mut rng), field(8, 8, &mut rng));
            let mut naive: f64 = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    let d = a.get(x, y) - b.get(x, y);
                    naive = naive.max((d.x * d.x + d.y * d.y + d.z * d.z).sqrt());
                }
            }
            let t = tre(&a, &b, 1.0).unwrap();
            assert!((t - naive).abs() <= 1e-12);
            assert_eq!(t, tre(&b, &a, 1.0).unwrap());
            assert!(t <= tre(&a, &c, 1.0).unwrap() + tre(&c, &b, 1.0).unwrap() + 1e-12);
        }
    }

    #[test]
    fn tre_rejects_mismatched_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            tre(&field(8, 8, &mut rng), &field(4, 8, &mut rng), 1.0),
            Err(Error::GridMismatch(_))
        ));
    }

    fn offset_stack(errors_mm: &[f64]) -> (Vec<DisplacementField>, Vec<DisplacementField>) {
        let g = crate::geometry::PixelGrid::new(4, 4, 1.0).unwrap();
        let gt: Vec<_> = errors_mm.iter().map(|_| DisplacementField::zeros(&g, 0)).collect();
        let est = errors_mm
            .iter()
            .map(|&e| DisplacementField::from_data(4, 4, 0, vec![Vector3::new(0.0, e, 0.0); 16]).unwrap())
            .collect();
        (est, gt)
    }

    #[test]
    fn median_max_tre_cases() {
        let (e, g) = offset_stack(&[1.0, 2.0, 3.0]);
        let s = median_max_tre(&[e], &[g], 1.0).unwrap();
        assert!((s.per_stack[0] - 2.0).abs() < 1e-12);

        let mut errs = vec![0.0; 31];
        errs.push(5.0);
        let (e, g) = offset_stack(&errs);
        let (e, g) = (vec![e], vec![g]);
        assert_eq!(median_max_tre(&e, &g, 1.0).unwrap().per_stack, vec![0.0]);
        assert_eq!(median_max_tre(&g, &g, 1.0).unwrap().mean, 0.0);
        assert!(matches!(median_max_tre(&[vec![]], &[vec![]], 1.0), Err(Error::Empty(_))));
    }

    #[test]
    fn identical_volumes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_volume(8, &mut rng);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ncc(&a, &a).unwrap().value, 1.0);
        assert_eq!(psnr(&a, &a, PSNR_CAP_DB).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn offset_keeps_ncc_but_lowers_ssim() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_volume(8, &mut rng);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v += 0.3);
        assert!((ncc(&a, &b).unwrap().value - 1.0).abs() < 1e-12);
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn constant_inputs_are_degenerate() {
        let a = Volume::filled([4; 3], 1.0, 2.0);
        let b = Volume::filled([4; 3], 1.0, 3.0);
        let same = ncc(&a, &a).unwrap();
        let diff = ncc(&a, &b).unwrap();
        assert!(same.degenerate && same.value == 1.0);
        assert!(diff.degenerate && diff.value == 0.0);
    }

    /// Direct-formula reference implementations with explicit loops.
    use crate::oracle::reference as naive;

    #[test]
    fn volume_metrics_match_direct_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..3 {
            let a = random_volume(8, &mut rng);
            let b = random_volume(8, &mut rng);
            assert!((ssim(&a, &b).unwrap() - naive::ssim(8, &a.data, &b.data)).abs() <= 1e-9);
            assert!((psnr(&a, &b, PSNR_CAP_DB).unwrap() - naive::psnr(&a.data, &b.data)).abs() <= 1e-9);
            assert!((ncc(&a, &b).unwrap().value - naive::ncc(&a.data, &b.data)).abs() <= 1e-9);
        }
    }

    #[test]
    fn identical_masking_leaves_scores_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_volume(8, &mut rng);
        let b = random_volume(8, &mut rng);
        let mask = union_mask(&a, &b);
        let before = ncc_masked(&a.data, &b.data, &mask).value;
        let (mut am, mut bm) = (a.clone(), b.clone());
        for i in (0..am.len()).step_by(3) {
            am.data[i] = 0.0;
            bm.data[i] = 0.0;
            am.weight[i] = 0.0;
            bm.weight[i] = 0.0;
        }
        let sub: Vec<bool> = (0..a.len()).map(|i| i % 3 != 0).collect();
        let masked = ncc_masked(&am.data, &bm.data, &sub).value;
        let direct = ncc_masked(&a.data, &b.data, &sub).value;
        assert_eq!(masked, direct);
        assert!(before.is_finite());
    }

    #[test]
    fn psnr_falls_with_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_volume(8, &mut rng);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let mut previous = f64::INFINITY;
        for sigma in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let mut mean = 0.0;
            for _ in 0..100 {
                let mut b = a.clone();
                b.data.iter_mut().for_each(|v| *v += sigma * rand_distr::Distribution::sample(&normal, &mut rng));
                mean += psnr(&a, &b, PSNR_CAP_DB).unwrap() / 100.0;
            }
            assert!(mean < previous);
            previous = mean;
        }
    }
}
