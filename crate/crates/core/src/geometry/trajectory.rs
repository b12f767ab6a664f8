use nalgebra::{DMatrix, Vector3};

use super::RigidTransform;
use crate::error::{Error, Result};

/// Cubic B-spline on a clamped knot vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CubicBSpline {
    pub knots: Vec<f64>,
    pub control: Vec<f64>,
}

const DEGREE: usize = 3;

/// Cox–de Boor basis function `N_{i,p}` or its `deriv`-th derivative.
fn basis(knots: &[f64], i: usize, p: usize, t: f64, deriv: usize) -> f64 {
    if deriv > p {
        return 0.0;
    }
    if p == 0 {
        let last = *knots.last().unwrap();
        let (a, b) = (knots[i], knots[i + 1]);
        let inside = (a <= t && t < b) || (t == last && b == last && a < b);
        return if inside { 1.0 } else { 0.0 };
    }
    let left_den = knots[i + p] - knots[i];
    let right_den = knots[i + p + 1] - knots[i + 1];
    if deriv == 0 {
        let mut v = 0.0;
        if left_den > 0.0 {
            v += (t - knots[i]) / left_den * basis(knots, i, p - 1, t, 0);
        }
        if right_den > 0.0 {
            v += (knots[i + p + 1] - t) / right_den * basis(knots, i + 1, p - 1, t, 0);
        }
        v
    } else {
        let mut v = 0.0;
        if left_den > 0.0 {
            v += p as f64 / left_den * basis(knots, i, p - 1, t, deriv - 1);
        }
        if right_den > 0.0 {
            v -= p as f64 / right_den * basis(knots, i + 1, p - 1, t, deriv - 1);
        }
        v
    }
}

impl CubicBSpline {
    /// Splines through `values[c][j]` at `times[j]` for every channel `c`,
    /// sharing one knot vector. Clamped knots with zero second derivative at
    /// both ends; a single sample yields a constant.
    pub fn interpolate_many(times: &[f64], values: &[Vec<f64>]) -> Result<Vec<CubicBSpline>> {
        if times.is_empty() {
            return Err(Error::Empty("no interpolation samples".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) || times.iter().any(|t| !t.is_finite()) {
            return Err(Error::UnsortedTimes);
        }
        if values.iter().any(|v| v.len() != times.len()) {
            return Err(Error::InvalidArgument("value count differs from time count".into()));
        }
        let k = times.len();
        if k == 1 {
            let t0 = times[0];
            let knots = [vec![t0; 4], vec![t0 + 1.0; 4]].concat();
            return Ok(values
                .iter()
                .map(|v| CubicBSpline {
                    knots: knots.clone(),
                    control: vec![v[0]; 4],
                })
                .collect());
        }

        let mut knots = vec![times[0]; DEGREE + 1];
        knots.extend_from_slice(&times[1..k - 1]);
        knots.extend(std::iter::repeat_n(times[k - 1], DEGREE + 1));
        let n_ctrl = k + 2;

        let mut a = DMatrix::<f64>::zeros(n_ctrl, n_ctrl);
        for (row, &t) in times.iter().enumerate() {
            for i in 0..n_ctrl {
                a[(row, i)] = basis(&knots, i, DEGREE, t, 0);
            }
        }
        for i in 0..n_ctrl {
            a[(k, i)] = basis(&knots, i, DEGREE, times[0], 2);
            a[(k + 1, i)] = basis(&knots, i, DEGREE, times[k - 1], 2);
        }
        let lu = a.lu();
        values
            .iter()
            .map(|v| {
                let mut b = nalgebra::DVector::<f64>::zeros(n_ctrl);
                for (j, y) in v.iter().enumerate() {
                    b[j] = *y;
                }
                let c = lu
                    .solve(&b)
                    .ok_or_else(|| Error::Degenerate("singular spline collocation system".into()))?;
                Ok(CubicBSpline {
                    knots: knots.clone(),
                    control: c.iter().copied().collect(),
                })
            })
            .collect()
    }

    pub fn interpolate(times: &[f64], values: &[f64]) -> Result<CubicBSpline> {
        Ok(Self::interpolate_many(times, &[values.to_vec()])?.remove(0))
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[DEGREE], self.knots[self.knots.len() - 1 - DEGREE])
    }

    /// de Boor evaluation; queries outside the domain are clamped to it.
    pub fn eval(&self, t: f64) -> f64 {
        let (lo, hi) = self.domain();
        let t = t.clamp(lo, hi);
        let n = self.control.len();
        // Span index k with knots[k] <= t < knots[k+1], k in [3, n-1].
        let mut k = DEGREE;
        while k + 1 < n && self.knots[k + 1] <= t {
            k += 1;
        }
        let mut d: [f64; DEGREE + 1] = std::array::from_fn(|j| self.control[j + k - DEGREE]);
        for r in 1..=DEGREE {
            for j in (r..=DEGREE).rev() {
                let lo = self.knots[j + k - DEGREE];
                let hi = self.knots[j + 1 + k - r];
                let alpha = if hi > lo { (t - lo) / (hi - lo) } else { 0.0 };
                d[j] = (1.0 - alpha) * d[j - 1] + alpha * d[j];
            }
        }
        d[DEGREE]
    }
}

/// Interpolate rigid keyframes componentwise on `[rotation vector (deg),
/// translation]` with cubic B-splines.
pub fn interpolate_rigid_trajectory(
    keyframes: &[(f64, RigidTransform)],
    query_times: &[f64],
) -> Result<Vec<RigidTransform>> {
    if keyframes.is_empty() {
        return Err(Error::Empty("no keyframes".into()));
    }
    let times: Vec<f64> = keyframes.iter().map(|k| k.0).collect();
    let params: Vec<[f64; 6]> = keyframes.iter().map(|k| k.1.to_params()).collect();
    let channels: Vec<Vec<f64>> = (0..6).map(|c| params.iter().map(|p| p[c]).collect()).collect();
    let splines = CubicBSpline::interpolate_many(&times, &channels)?;
    Ok(query_times
        .iter()
        .map(|&t| {
            let p: [f64; 6] = std::array::from_fn(|c| splines[c].eval(t));
            RigidTransform::from_rotation_vector_deg(
                Vector3::new(p[0], p[1], p[2]),
                Vector3::new(p[3], p[4], p[5]),
            )
        })
        .collect())
}
