//! Raw+JSON file formats.
//!
//! Every object is a JSON header `<stem>.json` next to a little-endian raw
//! payload `<stem>.raw` and, for volumes and stacks, an optional byte mask
//! `<stem>.mask`. Writes go to a temporary file in the same directory and
//! are renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{Orientation, Slice, SliceStack};
use crate::geometry::{DisplacementField, PixelGrid, RigidTransform};
use crate::sampling::Volume;

pub const VOLUME_FORMAT: &str = "svr-volume";
pub const STACK_FORMAT: &str = "svr-stack";
pub const FIELDS_FORMAT: &str = "svr-fields";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn encode(self, values: &[f64]) -> Vec<u8> {
        match self {
            Dtype::F32 => values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect(),
            Dtype::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub format: String,
    pub version: u32,
    pub dims: [usize; 3],
    /// mm
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: String,
    pub endianness: String,
    /// A coverage mask (`weight > 0`) is stored alongside.
    pub mask: bool,
}

/// Pose of one slice as a row-major 3x4 matrix `[R | t]`.
pub type PoseMatrix = [[f64; 4]; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackHeader {
    pub format: String,
    pub version: u32,
    pub orientation: Orientation,
    pub width: usize,
    pub height: usize,
    /// mm
    pub in_plane_spacing: f64,
    pub slice_thickness: f64,
    pub slice_gap: f64,
    pub center: [f64; 3],
    pub n_slices: usize,
    /// `(index_in_stack, acquisition_time_index)` per slice.
    pub indices: Vec<[usize; 2]>,
    /// Optional per-slice poses, e.g. ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poses: Option<Vec<PoseMatrix>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub dtype: String,
    pub endianness: String,
    pub mask: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldsHeader {
    pub format: String,
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub level: usize,
    pub count: usize,
    pub dtype: String,
    pub endianness: String,
}

/// `<stem>.json`, `<stem>.raw`, `<stem>.mask` for a path with or without
/// extension.
pub fn sidecars(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = path.with_extension("");
    (
        stem.with_extension("json"),
        stem.with_extension("raw"),
        stem.with_extension("mask"),
    )
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn check_tags(path: &Path, format: &str, expected: &str, version: u32, endianness: &str) -> Result<()> {
    if format != expected {
        return Err(malformed(path, format!("format `{format}`, expected `{expected}`")));
    }
    if version != FORMAT_VERSION {
        return Err(malformed(path, format!("unsupported version {version}")));
    }
    if endianness != "little" {
        return Err(malformed(path, format!("unsupported endianness `{endianness}`")));
    }
    Ok(())
}

fn parse_dtype(path: &Path, tag: &str) -> Result<Dtype> {
    match tag {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(Error::DtypeMismatch {
            path: path.display().to_string(),
            expected: "f32 or f64".into(),
            found: other.into(),
        }),
    }
}

fn dtype_tag(d: Dtype) -> String {
    match d {
        Dtype::F32 => "f32".into(),
        Dtype::F64 => "f64".into(),
    }
}

/// Read a payload of exactly `expected` bytes; `field` names the header
/// entry blamed when the file is longer.
fn read_payload(path: &Path, expected: usize, field: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::HeaderMismatch {
            path: path.display().to_string(),
            field: field.into(),
        });
    }
    Ok(bytes)
}

fn read_mask(path: &Path, expected: usize, field: &str) -> Result<Vec<bool>> {
    let bytes = read_payload(path, expected, field)?;
    bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(malformed(path, format!("mask byte {b} is not 0 or 1"))),
        })
        .collect()
}

fn mask_bytes(mask: impl Iterator<Item = bool>) -> Vec<u8> {
    mask.map(u8::from).collect()
}

pub fn write_volume(path: &Path, volume: &Volume, dtype: Dtype, with_mask: bool) -> Result<()> {
    let (json, raw, mask) = sidecars(path);
    write_atomic(&raw, &dtype.encode(&volume.data))?;
    if with_mask {
        write_atomic(&mask, &mask_bytes((0..volume.len()).map(|i| volume.covered(i))))?;
    }
    write_json(
        &json,
        &VolumeHeader {
            format: VOLUME_FORMAT.into(),
            version: FORMAT_VERSION,
            dims: volume.dims,
            spacing: volume.spacing,
            origin: volume.origin,
            dtype: dtype_tag(dtype),
            endianness: "little".into(),
            mask: with_mask,
        },
    )
}

/// Voxel weights are 1 on the stored mask (everywhere without one).
pub fn read_volume(path: &Path) -> Result<Volume> {
    let (json, raw, mask) = sidecars(path);
    let h: VolumeHeader = read_json(&json)?;
    check_tags(&json, &h.format, VOLUME_FORMAT, h.version, &h.endianness)?;
    let dtype = parse_dtype(&json, &h.dtype)?;
    if h.dims.contains(&0) {
        return Err(malformed(&json, "dims must be positive"));
    }
    if h.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(malformed(&json, "spacing must be positive"));
    }
    let n: usize = h.dims.iter().product();
    let data = dtype.decode(&read_payload(&raw, n * dtype.size(), "dims")?);
    let weight = if h.mask {
        read_mask(&mask, n, "dims")?.into_iter().map(|m| if m { 1.0 } else { 0.0 }).collect()
    } else {
        vec![1.0; n]
    };
    Ok(Volume {
        dims: h.dims,
        spacing: h.spacing,
        origin: h.origin,
        data,
        weight,
    })
}

pub fn pose_to_matrix(p: &RigidTransform) -> PoseMatrix {
    std::array::from_fn(|r| {
        [
            p.rotation[(r, 0)],
            p.rotation[(r, 1)],
            p.rotation[(r, 2)],
            p.translation[r],
        ]
    })
}

pub fn pose_from_matrix(m: &PoseMatrix) -> RigidTransform {
    RigidTransform::new(
        Matrix3::from_fn(|r, c| m[r][c]),
        Vector3::new(m[0][3], m[1][3], m[2][3]),
    )
}

/// Stack metadata and optional extra per-slice information.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StackExtras {
    pub poses: Option<Vec<RigidTransform>>,
    pub seed: Option<u64>,
}

pub fn write_stack(path: &Path, stack: &SliceStack, extras: &StackExtras, dtype: Dtype) -> Result<()> {
    stack.validate()?;
    let (json, raw, mask) = sidecars(path);
    let g = stack.grid();
    if let Some(p) = &extras.poses {
        if p.len() != stack.len() {
            return Err(Error::InvalidArgument("one pose per slice required".into()));
        }
    }
    let values: Vec<f64> = stack.slices.iter().flat_map(|s| s.data.iter().copied()).collect();
    write_atomic(&raw, &dtype.encode(&values))?;
    write_atomic(&mask, &mask_bytes(stack.slices.iter().flat_map(|s| s.mask.iter().copied())))?;
    write_json(
        &json,
        &StackHeader {
            format: STACK_FORMAT.into(),
            version: FORMAT_VERSION,
            orientation: stack.orientation,
            width: g.width,
            height: g.height,
            in_plane_spacing: stack.in_plane_spacing,
            slice_thickness: stack.slice_thickness,
            slice_gap: stack.slice_gap,
            center: stack.center.into(),
            n_slices: stack.len(),
            indices: stack
                .slices
                .iter()
                .map(|s| [s.index_in_stack, s.acquisition_time_index])
                .collect(),
            poses: extras.poses.as_ref().map(|p| p.iter().map(pose_to_matrix).collect()),
            seed: extras.seed,
            dtype: dtype_tag(dtype),
            endianness: "little".into(),
            mask: true,
        },
    )
}

pub fn read_stack(path: &Path) -> Result<(SliceStack, StackExtras)> {
    let (json, raw, mask) = sidecars(path);
    let h: StackHeader = read_json(&json)?;
    check_tags(&json, &h.format, STACK_FORMAT, h.version, &h.endianness)?;
    let dtype = parse_dtype(&json, &h.dtype)?;
    if h.width == 0 || h.height == 0 || h.n_slices == 0 {
        return Err(malformed(&json, "width, height and n_slices must be positive"));
    }
    if h.indices.len() != h.n_slices {
        return Err(Error::HeaderMismatch {
            path: json.display().to_string(),
            field: "indices".into(),
        });
    }
    if h.poses.as_ref().is_some_and(|p| p.len() != h.n_slices) {
        return Err(Error::HeaderMismatch {
            path: json.display().to_string(),
            field: "poses".into(),
        });
    }
    let grid = PixelGrid::new(h.width, h.height, h.in_plane_spacing)?;
    let per = grid.len();
    let total = per * h.n_slices;
    let data = dtype.decode(&read_payload(&raw, total * dtype.size(), "n_slices")?);
    let masks = if h.mask {
        read_mask(&mask, total, "n_slices")?
    } else {
        vec![true; total]
    };
    let slices = (0..h.n_slices)
        .map(|n| {
            let [index, time] = h.indices[n];
            Ok(Slice::new(grid, data[n * per..(n + 1) * per].to_vec(), masks[n * per..(n + 1) * per].to_vec())?
                .with_indices(index, time))
        })
        .collect::<Result<Vec<_>>>()?;
    let stack = SliceStack {
        slices,
        orientation: h.orientation,
        slice_thickness: h.slice_thickness,
        slice_gap: h.slice_gap,
        in_plane_spacing: h.in_plane_spacing,
        center: Vector3::from(h.center),
    };
    stack.validate()?;
    let extras = StackExtras {
        poses: h.poses.map(|p| p.iter().map(pose_from_matrix).collect()),
        seed: h.seed,
    };
    Ok((stack, extras))
}

/// Fields of one stack; always stored as f64.
pub fn write_fields(path: &Path, fields: &[DisplacementField]) -> Result<()> {
    let first = fields.first().ok_or_else(|| Error::Empty("no fields".into()))?;
    if fields
        .iter()
        .any(|f| f.width != first.width || f.height != first.height || f.level != first.level)
    {
        return Err(Error::GridMismatch("fields must share one grid and level".into()));
    }
    let (json, raw, _) = sidecars(path);
    let values: Vec<f64> = fields.iter().flat_map(|f| f.data.iter().flat_map(|v| [v.x, v.y, v.z])).collect();
    write_atomic(&raw, &Dtype::F64.encode(&values))?;
    write_json(
        &json,
        &FieldsHeader {
            format: FIELDS_FORMAT.into(),
            version: FORMAT_VERSION,
            width: first.width,
            height: first.height,
            level: first.level,
            count: fields.len(),
            dtype: "f64".into(),
            endianness: "little".into(),
        },
    )
}

pub fn read_fields(path: &Path) -> Result<Vec<DisplacementField>> {
    let (json, raw, _) = sidecars(path);
    let h: FieldsHeader = read_json(&json)?;
    check_tags(&json, &h.format, FIELDS_FORMAT, h.version, &h.endianness)?;
    if parse_dtype(&json, &h.dtype)? != Dtype::F64 {
        return Err(Error::DtypeMismatch {
            path: json.display().to_string(),
            expected: "f64".into(),
            found: h.dtype,
        });
    }
    if h.width == 0 || h.height == 0 {
        return Err(malformed(&json, "width and height must be positive"));
    }
    let per = h.width * h.height;
    let values = Dtype::F64.decode(&read_payload(&raw, per * h.count * 3 * 8, "count")?);
    Ok(values
        .chunks_exact(per * 3)
        .map(|c| DisplacementField {
            width: h.width,
            height: h.height,
            level: h.level,
            data: c.chunks_exact(3).map(|v| Vector3::new(v[0], v[1], v[2])).collect(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TransformsFile {
    format: String,
    version: u32,
    poses: Vec<Vec<PoseMatrix>>,
}

/// Per stack, per slice rigid transforms as JSON.
pub fn write_transforms(path: &Path, poses: &[Vec<RigidTransform>]) -> Result<()> {
    write_json(
        path,
        &TransformsFile {
            format: "svr-transforms".into(),
            version: FORMAT_VERSION,
            poses: poses.iter().map(|ps| ps.iter().map(pose_to_matrix).collect()).collect(),
        },
    )
}

pub fn read_transforms(path: &Path) -> Result<Vec<Vec<RigidTransform>>> {
    let t: TransformsFile = read_json(path)?;
    if t.format != "svr-transforms" || t.version != FORMAT_VERSION {
        return Err(malformed(path, format!("format `{}` version {}", t.format, t.version)));
    }
    Ok(t.poses.iter().map(|ps| ps.iter().map(pose_from_matrix).collect()).collect())
}
