//! Slice-to-volume reconstruction engine.
//!
//! Recovers a 3D volume and per-slice rigid poses from motion-corrupted
//! stacks of 2D slices. The crate is organised bottom-up:
//!
//! - [`geometry`]: rigid transforms, slice-pose displacement fields, rigid
//!   projection of fields and B-spline rigid trajectories.
//! - [`sampling`]: the trilinear push (splat) and pull (sample) operators and
//!   point-spread-function kernels.
//! - [`forward`]: slice simulation from a volume, either through a PSF and a
//!   rigid pose or through a thin-slice displacement field.
//! - [`init`]: normalised splat initialisation of a volume.
//! - [`optim`]: volume update, pose update, multi-resolution field refinement
//!   and the alternating reconstruction loop.
//! - [`motion`]: synthetic motion and intensity corruption with ground truth.
//! - [`metrics`]: TRE, SSIM, PSNR, NCC and slice-consistency reports.
//! - [`io`] and [`phantom`]: raw+JSON file formats and procedural phantoms.
//! - [`pipeline`]: the init, refine and refine+svr reconstruction modes.
//! - [`oracle`]: named known-answer checks.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled;
//! every entry point also accepts [`Exec::Sequential`] for a fixed reduction
//! order and bitwise-reproducible output.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod filter;
pub mod forward;
pub mod geometry;
pub mod init;
pub mod io;
pub mod metrics;
pub mod motion;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod sampling;

pub use error::{Error, Result};
pub use forward::{Orientation, Slice, SliceStack};
pub use geometry::{DisplacementField, PixelGrid, PyramidLevel, RigidTransform};
pub use par::Exec;
pub use sampling::{PsfKernel, Volume};
