use svr_core::geometry::DisplacementField;
use svr_core::init::init_volume;
use svr_core::metrics::{median_max_tre, ssim};
use svr_core::motion::{simulate_subject, Acquisition, MotionConfig};
use svr_core::optim::{prescribed_fields, ReconConfig};
use svr_core::phantom::{make_phantom, PhantomKind};
use svr_core::pipeline::{reconstruct, Mode};
use svr_core::{Exec, PyramidLevel, Slice};

fn config(exec: Exec) -> ReconConfig {
    ReconConfig {
        exec,
        outer_iters: 3,
        ..ReconConfig::default()
    }
}

fn subject(seed: u64) -> svr_core::motion::GroundTruth {
    let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], seed).unwrap();
    let motion = MotionConfig {
        rot_sigma: 3.0,
        trans_range: 1.5,
        bulk_inplane_rot_range: 0.0,
        seed,
        ..MotionConfig::default()
    };
    let acq = Acquisition {
        slice_thickness: 2.0,
        slice_gap: 1.0,
        ..Acquisition::default()
    };
    simulate_subject(&v, &acq, &motion, Exec::Sequential).unwrap()
}

#[test]
fn every_mode_returns_consistent_shapes() {
    let gt = subject(1);
    for mode in Mode::ALL {
        let r = reconstruct(&gt.corrupted, mode, &config(Exec::Sequential)).unwrap();
        assert_eq!(r.volume.dims, [16; 3]);
        assert_eq!(r.poses.len(), 3);
        for (j, st) in gt.corrupted.iter().enumerate() {
            assert_eq!(r.poses[j].len(), st.len());
            assert_eq!(r.fields[j].len(), st.len());
            assert!(r.fields[j].iter().all(|f| f.width == 16 && f.height == 16));
        }
        assert_eq!(r.history.is_empty(), mode != Mode::RefineSvr);
    }
}

#[test]
fn svr_improves_on_the_uncorrected_splat() {
    let gt = subject(2);
    let v = make_phantom(PhantomKind::Ellipsoids, [16; 3], 2).unwrap();
    let base = reconstruct(&gt.corrupted, Mode::Init, &config(Exec::Sequential)).unwrap();
    let svr = reconstruct(&gt.corrupted, Mode::RefineSvr, &config(Exec::Sequential)).unwrap();
    assert!(ssim(&v, &svr.volume).unwrap() > ssim(&v, &base.volume).unwrap());
    assert!(svr.history.windows(2).all(|w| w[1] <= w[0] + 1e-6));
}

#[test]
fn init_mode_is_the_prescribed_splat() {
    let gt = subject(3);
    let stacks = &gt.corrupted;
    let fields = prescribed_fields(stacks, &PyramidLevel::full(stacks[0].center)).unwrap();
    let slices: Vec<&Slice> = stacks.iter().flat_map(|s| s.slices.iter()).collect();
    let fr: Vec<&DisplacementField> = fields.iter().flatten().collect();
    let direct = init_volume(&slices, &fr, [16; 3], 1.0, Default::default(), Exec::Sequential).unwrap();
    let r = reconstruct(stacks, Mode::Init, &config(Exec::Sequential)).unwrap();
    assert_eq!(r.volume, direct);
    let truth: Vec<Vec<_>> = gt.stacks.iter().map(|s| s.fields.clone()).collect();
    assert_eq!(
        median_max_tre(&r.fields, &truth, 1.0).unwrap(),
        median_max_tre(&fields, &truth, 1.0).unwrap()
    );
}

#[test]
fn sequential_runs_are_bitwise_repeatable() {
    let gt = subject(4);
    let a = reconstruct(&gt.corrupted, Mode::RefineSvr, &config(Exec::Sequential)).unwrap();
    let b = reconstruct(&gt.corrupted, Mode::RefineSvr, &config(Exec::Sequential)).unwrap();
    assert_eq!(a.volume, b.volume);
    assert_eq!(a.poses, b.poses);
    assert_eq!(a.history, b.history);
}

#[test]
fn parallel_matches_sequential_closely() {
    let gt = subject(5);
    let s = reconstruct(&gt.corrupted, Mode::Refine, &config(Exec::Sequential)).unwrap();
    let p = reconstruct(&gt.corrupted, Mode::Refine, &config(Exec::Parallel)).unwrap();
    let diff = s.volume.data.iter().zip(&p.volume.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-9, "max difference {diff}");
}

#[test]
fn empty_input_is_rejected() {
    assert!(reconstruct(&[], Mode::Init, &ReconConfig::default()).is_err());
    let bad = ReconConfig {
        outer_iters: 0,
        ..ReconConfig::default()
    };
    assert!(reconstruct(&subject(6).corrupted, Mode::Init, &bad).is_err());
}
