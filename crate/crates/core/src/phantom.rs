//! Procedural test volumes.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::Volume;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    /// Nested soft-edged ellipsoids with smooth internal texture.
    #[default]
    Ellipsoids,
    /// Checkerboard blocks inside an ellipsoidal head.
    Checker,
    /// Binary ellipsoidal shell.
    Shell,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipsoids" => Ok(Self::Ellipsoids),
            "checker" => Ok(Self::Checker),
            "shell" => Ok(Self::Shell),
            other => Err(Error::InvalidArgument(format!("unknown phantom `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: Vector3<f64>,
    radii: Vector3<f64>,
}

impl Ellipsoid {
    /// Signed distance proxy in voxels: negative inside.
    fn level(&self, p: &Vector3<f64>) -> f64 {
        let q = (p - self.center).component_div(&self.radii);
        (q.norm() - 1.0) * self.radii.min()
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        (p - self.center).component_div(&self.radii).norm_squared() <= 1.0
    }

    fn volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.x * self.radii.y * self.radii.z
    }
}

/// 1 well inside, 0 outside, cubic ramp across one voxel of the boundary.
fn soft_inside(level: f64) -> f64 {
    let t = (0.5 - level).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn head(dims: [usize; 3], rng: &mut ChaCha8Rng) -> Ellipsoid {
    let c = Vector3::from_fn(|a, _| (dims[a] as f64 - 1.0) / 2.0);
    let jitter = Vector3::from_fn(|_, _| rng.random_range(-0.5..0.5));
    let radii = Vector3::from_fn(|a, _| dims[a] as f64 * rng.random_range(0.34..0.40));
    Ellipsoid {
        center: c + jitter,
        radii,
    }
}

fn voxels(dims: [usize; 3]) -> impl Iterator<Item = (usize, Vector3<f64>)> {
    (0..dims[0] * dims[1] * dims[2]).map(move |i| {
        let x = i % dims[0];
        let y = (i / dims[0]) % dims[1];
        let z = i / (dims[0] * dims[1]);
        (i, Vector3::new(x as f64, y as f64, z as f64))
    })
}

/// Shell phantom geometry: the outer and inner ellipsoid.
pub fn shell_ellipsoids(dims: [usize; 3], seed: u64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outer = head(dims, &mut rng);
    let inner = outer.radii * rng.random_range(0.6..0.75);
    (outer.center, outer.radii, inner)
}

/// Analytic foreground volume of the shell phantom, voxels.
pub fn shell_volume(dims: [usize; 3], seed: u64) -> f64 {
    let (c, r_out, r_in) = shell_ellipsoids(dims, seed);
    Ellipsoid { center: c, radii: r_out }.volume() - Ellipsoid { center: c, radii: r_in }.volume()
}

/// Deterministic procedural volume with intensities in `[0, 1]` and a
/// bounded foreground.
pub fn make_phantom(kind: PhantomKind, dims: [usize; 3], seed: u64) -> Result<Volume> {
    if dims.iter().any(|&d| d < 8) {
        return Err(Error::InvalidArgument(format!("phantom dims must be at least 8, got {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vol = Volume::zeros(dims, 1.0);
    match kind {
        PhantomKind::Shell => {
            let (c, r_out, r_in) = shell_ellipsoids(dims, seed);
            let outer = Ellipsoid { center: c, radii: r_out };
            let inner = Ellipsoid { center: c, radii: r_in };
            for (i, p) in voxels(dims) {
                if outer.contains(&p) && !inner.contains(&p) {
                    vol.data[i] = 1.0;
                }
            }
        }
        PhantomKind::Checker => {
            let outer = head(dims, &mut rng);
            let block = (dims.iter().min().copied().unwrap_or(8) / 8).max(2) as i64;
            let phase: [i64; 3] = std::array::from_fn(|_| rng.random_range(0..block));
            for (i, p) in voxels(dims) {
                let cell: i64 = (0..3).map(|a| (p[a] as i64 + phase[a]) / block).sum();
                let v = if cell % 2 == 0 { 0.8 } else { 0.35 };
                vol.data[i] = v * soft_inside(outer.level(&p));
            }
        }
        PhantomKind::Ellipsoids => {
            let outer = head(dims, &mut rng);
            let n_inner = rng.random_range(3..6);
            let inner: Vec<(Ellipsoid, f64)> = (0..n_inner)
                .map(|_| {
                    let radii = outer.radii.map(|r| r * rng.random_range(0.2..0.45));
                    let offset = outer.radii.component_mul(&Vector3::from_fn(|_, _| rng.random_range(-0.35..0.35)));
                    let contrast = rng.random_range(-0.35..0.35);
                    (
                        Ellipsoid {
                            center: outer.center + offset,
                            radii,
                        },
                        contrast,
                    )
                })
                .collect();
            let waves: Vec<(Vector3<f64>, f64)> = (0..4)
                .map(|_| {
                    let k = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize()
                        * rng.random_range(0.15..0.35);
                    (k, rng.random_range(0.0..std::f64::consts::TAU))
                })
                .collect();
            for (i, p) in voxels(dims) {
                let body = soft_inside(outer.level(&p));
                if body == 0.0 {
                    continue;
                }
                let mut v = 0.55;
                for (e, c) in &inner {
                    v += c * soft_inside(e.level(&p) - 0.5);
                }
                let texture: f64 = waves.iter().map(|(k, ph)| (k.dot(&p) + ph).sin()).sum::<f64>() * 0.04;
                vol.data[i] = ((v + texture) * body).clamp(0.0, 1.0);
            }
        }
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bitwise_identical() {
        for kind in [PhantomKind::Ellipsoids, PhantomKind::Checker, PhantomKind::Shell] {
            let a = make_phantom(kind, [16, 18, 20], 3).unwrap();
            let b = make_phantom(kind, [16, 18, 20], 3).unwrap();
            assert_eq!(a, b);
            let c = make_phantom(kind, [16, 18, 20], 4).unwrap();
            assert_ne!(a.data, c.data);
        }
    }

    #[test]
    fn intensities_in_unit_interval_with_bounded_foreground() {
        for kind in [PhantomKind::Ellipsoids, PhantomKind::Checker, PhantomKind::Shell] {
            let v = make_phantom(kind, [24; 3], 11).unwrap();
            assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
            // Faces of the cube are background.
            assert_eq!(v.get(0, 0, 0), 0.0);
            assert_eq!(v.get(23, 12, 12), 0.0);
            assert!(v.data.iter().any(|&x| x > 0.0));
        }
    }

    #[test]
    fn shell_count_matches_ellipsoid_formula() {
        for seed in 0..5 {
            let dims = [64; 3];
            let v = make_phantom(PhantomKind::Shell, dims, seed).unwrap();
            let count = v.data.iter().filter(|&&x| x > 0.0).count() as f64;
            let expected = shell_volume(dims, seed);
            assert!((count - expected).abs() <= 0.01 * expected, "{count} vs {expected}");
        }
    }

    #[test]
    fn rejects_small_dims() {
        assert!(make_phantom(PhantomKind::Ellipsoids, [8, 8, 7], 0).is_err());
    }
}
