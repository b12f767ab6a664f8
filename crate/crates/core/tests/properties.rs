use nalgebra::Vector3;
use proptest::prelude::*;
use svr_core::forward::simulate_slice_psf;
use svr_core::geometry::{prescribed_pose_field, project_to_rigid, rigid_fit, uplift};
use svr_core::io::{read_volume, write_volume, Dtype};
use svr_core::metrics::{ncc, ssim};
use svr_core::sampling::{pull, push, WeightMode};
use svr_core::{DisplacementField, PixelGrid, PsfKernel, PyramidLevel, RigidTransform, Volume};

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn pose(deg: f64, mm: f64) -> impl Strategy<Value = RigidTransform> {
    (vec3(deg), vec3(mm)).prop_map(|(r, t)| RigidTransform::from_rotation_vector_deg(r, t))
}

fn volume(n: usize) -> impl Strategy<Value = Volume> {
    prop::collection::vec(0.0f64..1.0, n * n * n).prop_map(move |d| Volume::from_data([n; 3], 1.0, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn push_is_adjoint_to_pull(
        v in volume(6),
        pts in prop::collection::vec((vec3(4.0), -1.0f64..1.0), 1..60),
    ) {
        let coords: Vec<_> = pts.iter().map(|(p, _)| p + Vector3::repeat(2.5)).collect();
        let vals: Vec<f64> = pts.iter().map(|(_, w)| *w).collect();
        let mut acc = Volume::zeros(v.dims, 1.0);
        push(&mut acc, &coords, &vals, WeightMode::Unit).unwrap();
        let lhs: f64 = acc.data.iter().zip(&v.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = pull(&v, &coords).values.iter().zip(&vals).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn compose_with_inverse_is_identity(a in pose(170.0, 20.0), p in vec3(30.0)) {
        let back = a.compose(&a.inverse()).apply(&p);
        prop_assert!((back - p).amax() < 1e-9);
    }

    #[test]
    fn full_level_field_is_the_composed_pose(o in pose(90.0, 5.0), z in -10.0f64..10.0) {
        let g = PixelGrid::new(7, 5, 1.0).unwrap();
        let c = Vector3::new(3.0, 2.0, 4.0);
        let tn = RigidTransform::from_translation(Vector3::new(0.0, 0.0, z));
        let f = prescribed_pose_field(&tn, &o, &g, &PyramidLevel::full(c)).unwrap();
        let whole = o.about(&c).compose(&tn);
        for i in 0..g.len() {
            prop_assert!((f.target(i) - whole.apply(&uplift(g.pixel(i)))).amax() < 1e-9);
        }
    }

    #[test]
    fn rigid_fields_project_to_their_pose(truth in pose(120.0, 10.0)) {
        let g = PixelGrid::new(6, 6, 1.0).unwrap();
        let f = DisplacementField::from_pose(&truth, &g, &PyramidLevel::full(Vector3::zeros()));
        let est = project_to_rigid(&f, &g).unwrap();
        prop_assert!((est.to_homogeneous() - truth.to_homogeneous()).amax() < 1e-9);
    }

    #[test]
    fn rigid_fit_is_equivariant(a in pose(60.0, 5.0), b in pose(60.0, 5.0), pts in prop::collection::vec(vec3(10.0), 4..20)) {
        let dst: Vec<_> = pts.iter().map(|p| a.apply(p)).collect();
        let moved: Vec<_> = dst.iter().map(|p| b.apply(p)).collect();
        let fit = rigid_fit(&pts, &moved, None);
        prop_assume!(fit.is_ok());
        let got = fit.unwrap();
        let want = b.compose(&a);
        for p in &pts {
            prop_assert!((got.apply(p) - want.apply(p)).amax() < 1e-6);
        }
    }

    #[test]
    fn volume_files_round_trip_bitwise(v in volume(4), sp in 0.2f64..3.0) {
        let tmp = tempfile::tempdir().unwrap();
        let mut v = v;
        v.spacing = [sp, sp * 1.5, sp * 2.0];
        write_volume(&tmp.path().join("v"), &v, Dtype::F64, true).unwrap();
        prop_assert_eq!(read_volume(&tmp.path().join("v")).unwrap(), v);
    }

    #[test]
    fn ncc_is_bounded_and_symmetric(a in volume(4), b in volume(4)) {
        let ab = ncc(&a, &b).unwrap().value;
        prop_assert!(ab.abs() <= 1.0 + 1e-12);
        prop_assert!((ab - ncc(&b, &a).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn ssim_of_identical_volumes_is_one(a in volume(5)) {
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_model_is_linear(a in volume(5), b in volume(5), s in -2.0f64..2.0, p in pose(30.0, 1.0)) {
        let g = PixelGrid::new(5, 5, 1.0).unwrap();
        let pose = p.about(&Vector3::repeat(2.0));
        let psf = PsfKernel::boxcar(2.0, 1.0).unwrap();
        let mix = Volume::from_data(a.dims, 1.0, a.data.iter().zip(&b.data).map(|(x, y)| x + s * y).collect()).unwrap();
        let (fa, fb, fm) = (
            simulate_slice_psf(&a, &pose, &g, &psf).0,
            simulate_slice_psf(&b, &pose, &g, &psf).0,
            simulate_slice_psf(&mix, &pose, &g, &psf).0,
        );
        for i in 0..g.len() {
            prop_assert!((fm.data[i] - fa.data[i] - s * fb.data[i]).abs() < 1e-10);
        }
    }
}
