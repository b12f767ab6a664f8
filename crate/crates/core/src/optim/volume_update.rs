//! Volume update: least squares over the voxel values with poses fixed.
//!
//! Solved matrix-free with the conjugate-residual method on the normal
//! equations `AᵀA·v = Aᵀb`, where `A` stacks the (scaled) PSF forward model
//! of every slice restricted to its foreground. Conjugate residual minimises
//! `‖Aᵀ(b − Av)‖` over the Krylov space, so both that residual and the data
//! residual `‖b − Av‖` decrease monotonically.

use crate::error::{Error, Result};
use crate::forward::{simulate_slice_psf, splat_slice_psf};
use crate::geometry::RigidTransform;
use crate::par::{self, Exec};
use crate::sampling::Volume;

use super::Observation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Iteration budget reached before the tolerance.
    Truncated,
}

#[derive(Clone, Debug)]
pub struct VolumeUpdate {
    pub volume: Volume,
    /// `‖b − Av‖²` at the start and after every iteration.
    pub data_residual: Vec<f64>,
    /// `‖Aᵀ(b − Av)‖` at the start and after every iteration.
    pub normal_residual: Vec<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
}

struct Operator<'a> {
    obs: &'a [Observation<'a>],
    poses: &'a [RigidTransform],
    scales: &'a [f64],
    dims: [usize; 3],
    exec: Exec,
}

impl Operator<'_> {
    /// `A·v`: per-slice scaled simulations on foreground pixels.
    fn apply(&self, v: &[f64]) -> Vec<Vec<f64>> {
        let vol = Volume {
            dims: self.dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: v.to_vec(),
            weight: Vec::new(),
        };
        par::map(self.exec, self.obs.len(), |n| {
            let o = &self.obs[n];
            let (sim, _) = simulate_slice_psf(&vol, &self.poses[n], &o.slice.grid, o.psf);
            sim.data
                .iter()
                .zip(&o.slice.mask)
                .map(|(&d, &m)| if m { self.scales[n] * d } else { 0.0 })
                .collect()
        })
    }

    /// `Aᵀ·y`.
    fn adjoint(&self, y: &[Vec<f64>]) -> Vec<f64> {
        let len: usize = self.dims.iter().product();
        par::fold(
            self.exec,
            self.obs.len(),
            || vec![0.0; len],
            |acc, n| {
                let o = &self.obs[n];
                let vals: Vec<f64> = y[n].iter().map(|v| v * self.scales[n]).collect();
                splat_slice_psf(acc, &self.dims, &self.poses[n], &o.slice.grid, o.psf, &vals, &o.slice.mask);
            },
            |a, b| a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
        )
    }
}

fn dot_nested(exec: Exec, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| par::dot(exec, x, y)).sum()
}

fn axpy_nested(alpha: f64, x: &[Vec<f64>], y: &mut [Vec<f64>]) {
    for (xs, ys) in x.iter().zip(y.iter_mut()) {
        for (a, b) in xs.iter().zip(ys.iter_mut()) {
            *b += alpha * a;
        }
    }
}

fn check(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged(format!("non-finite {what}")))
    }
}

/// Run up to `iters` conjugate-residual iterations from `v0`.
pub fn volume_update(
    obs: &[Observation<'_>],
    poses: &[RigidTransform],
    scales: &[f64],
    v0: &Volume,
    iters: usize,
    tol: f64,
    exec: Exec,
) -> Result<VolumeUpdate> {
    if obs.len() != poses.len() || obs.len() != scales.len() {
        return Err(Error::InvalidArgument("observations, poses and scales must align".into()));
    }
    let op = Operator {
        obs,
        poses,
        scales,
        dims: v0.dims,
        exec,
    };
    let b: Vec<Vec<f64>> = obs
        .iter()
        .map(|o| o.slice.data.iter().zip(&o.slice.mask).map(|(&d, &m)| if m { d } else { 0.0 }).collect())
        .collect();

    let mut x = v0.data.clone();
    let ax = op.apply(&x);
    let mut resid: Vec<Vec<f64>> = b
        .iter()
        .zip(&ax)
        .map(|(bi, ai)| bi.iter().zip(ai).map(|(p, q)| p - q).collect())
        .collect();
    let mut g = op.adjoint(&resid);

    let mut data_residual = vec![check(dot_nested(exec, &resid, &resid), "data residual")?];
    let g0 = check(par::dot(exec, &g, &g).sqrt(), "normal residual")?;
    let mut normal_residual = vec![g0];

    let finish = |x: Vec<f64>, data_residual, normal_residual, iterations, status| {
        let mut volume = v0.clone();
        volume.data = x;
        Ok(VolumeUpdate {
            volume,
            data_residual,
            normal_residual,
            iterations,
            status,
        })
    };
    if g0 == 0.0 {
        return finish(x, data_residual, normal_residual, 0, SolveStatus::Converged);
    }

    let mut ap = op.apply(&g);
    let mut np = op.adjoint(&ap);
    let mut p = g.clone();
    let mut g_ng = par::dot(exec, &g, &np);

    for k in 1..=iters {
        let np_np = par::dot(exec, &np, &np);
        if np_np == 0.0 {
            return finish(x, data_residual, normal_residual, k - 1, SolveStatus::Converged);
        }
        let alpha = check(g_ng / np_np, "step length")?;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        axpy_nested(-alpha, &ap, &mut resid);
        g.iter_mut().zip(&np).for_each(|(gi, ni)| *gi -= alpha * ni);

        data_residual.push(check(dot_nested(exec, &resid, &resid), "data residual")?);
        let gn = check(par::dot(exec, &g, &g).sqrt(), "normal residual")?;
        normal_residual.push(gn);
        if gn <= tol * g0 {
            return finish(x, data_residual, normal_residual, k, SolveStatus::Converged);
        }
        if k == iters {
            break;
        }

        let ag = op.apply(&g);
        let ng = op.adjoint(&ag);
        let g_ng_new = par::dot(exec, &g, &ng);
        let beta = check(g_ng_new / g_ng, "conjugation coefficient")?;
        g_ng = g_ng_new;
        p.iter_mut().zip(&g).for_each(|(pi, gi)| *pi = gi + beta * *pi);
        for (apn, agn) in ap.iter_mut().zip(&ag) {
            apn.iter_mut().zip(agn).for_each(|(a, b)| *a = b + beta * *a);
        }
        np.iter_mut().zip(&ng).for_each(|(a, b)| *a = b + beta * *a);
    }
    finish(x, data_residual, normal_residual, iters, SolveStatus::Truncated)
}
