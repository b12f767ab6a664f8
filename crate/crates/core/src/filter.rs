//! Separable Gaussian smoothing of volumes and slices.

use crate::forward::Slice;
use crate::sampling::Volume;

/// Unnormalised Gaussian taps of radius `ceil(3σ)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(0.0) as i64;
    (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect()
}

/// Separable filter with taps `w` along every axis of length > 1,
/// renormalised over in-grid neighbours.
pub fn separable(dims: [usize; 3], data: &[f64], w: &[f64]) -> Vec<f64> {
    let r = (w.len() / 2) as i64;
    let mut cur = data.to_vec();
    let stride = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        if dims[axis] < 2 {
            continue;
        }
        let n = dims[axis] as i64;
        let mut out = vec![0.0; cur.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let c = ((i / stride[axis]) % dims[axis]) as i64;
            let (mut acc, mut ws) = (0.0, 0.0);
            for k in -r..=r {
                let j = c + k;
                if j < 0 || j >= n {
                    continue;
                }
                let wt = w[(k + r) as usize];
                acc += wt * cur[(i as i64 + k * stride[axis] as i64) as usize];
                ws += wt;
            }
            *o = acc / ws;
        }
        cur = out;
    }
    cur
}

/// Gaussian-smoothed copy of `v`; weights are kept.
pub fn smooth_volume(v: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return v.clone();
    }
    let mut out = v.clone();
    out.data = separable(v.dims, &v.data, &gaussian_taps(sigma));
    out
}

/// Gaussian-smoothed copy of `s`, averaging over masked pixels only.
pub fn smooth_slice(s: &Slice, sigma: f64) -> Slice {
    if sigma <= 0.0 {
        return s.clone();
    }
    let dims = [s.grid.width, s.grid.height, 1];
    let w = gaussian_taps(sigma);
    let m: Vec<f64> = s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let dm: Vec<f64> = s.data.iter().zip(&m).map(|(d, m)| d * m).collect();
    let num = separable(dims, &dm, &w);
    let den = separable(dims, &m, &w);
    let mut out = s.clone();
    for (i, d) in out.data.iter_mut().enumerate() {
        if s.mask[i] {
            *d = num[i] / den[i];
        }
    }
    out
}
