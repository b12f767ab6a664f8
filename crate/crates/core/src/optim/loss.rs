//! Multi-level residual loss against a full-resolution ground-truth field.

use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, PixelGrid};

/// Resample a level field onto the full-resolution grid, scaling
/// displacements by `scale` (full-resolution pixels per level pixel).
pub fn upsample_to_full(field: &DisplacementField, full: &PixelGrid, scale: f64) -> DisplacementField {
    field.upsample(full, scale, field.level)
}

/// `Σ_n Σ_p ‖f_GT(p) − (1/L) Σ_s f^{s↑}(p)‖²` for slices `n`.
///
/// `levels[s][n]` is slice `n` at level `s` (coarsest first, scale
/// `2^(L−1−s)`); `gt[n]` is its full-resolution ground truth.
pub fn multilayer_residual_loss(levels: &[Vec<DisplacementField>], gt: &[DisplacementField]) -> Result<f64> {
    let n_levels = levels.len();
    if n_levels == 0 {
        return Err(Error::Empty("no levels".into()));
    }
    if levels.iter().any(|l| l.len() != gt.len()) {
        return Err(Error::GridMismatch("every level needs one field per slice".into()));
    }
    let mut total = 0.0;
    for (n, g) in gt.iter().enumerate() {
        let full = PixelGrid {
            width: g.width,
            height: g.height,
            spacing: 1.0,
        };
        let mut mean = vec![nalgebra::Vector3::zeros(); g.len()];
        for (s, level) in levels.iter().enumerate() {
            let scale = (1u64 << (n_levels - 1 - s)) as f64;
            let f = &level[n];
            let expected = (crate::geometry::reduced_len(g.width, n_levels - 1 - s), crate::geometry::reduced_len(g.height, n_levels - 1 - s));
            if (f.width, f.height) != expected {
                return Err(Error::GridMismatch(format!(
                    "level {s} field is {}x{}, expected {}x{}",
                    f.width, f.height, expected.0, expected.1
                )));
            }
            let up = upsample_to_full(f, &full, scale);
            for (m, u) in mean.iter_mut().zip(&up.data) {
                *m += u / n_levels as f64;
            }
        }
        total += g.data.iter().zip(&mean).map(|(a, b)| (a - b).norm_squared()).sum::<f64>();
    }
    Ok(total)
}
