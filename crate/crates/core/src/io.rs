//! On-disk formats.
//!
//! Volumes and projection stacks are a raw `float32` payload next to a JSON
//! sidecar named `<payload>.json`. Payloads are written little-endian; the
//! sidecar declares the byte order and readers honour either. Geometry is a
//! single JSON document with angles in degrees and shifts in pixels.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::BlobParams;
use crate::error::{Error, Result};
use crate::geometry::{DetectorGrid, GeometryParams, Shift, VolumeGrid};
use crate::projector::{ProjectionStack, Volume};

pub const VOLUME_FORMAT: &str = "optcalib-volume/1";
pub const STACK_FORMAT: &str = "optcalib-stack/1";
pub const GEOMETRY_FORMAT: &str = "optcalib-geom/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
}

/// What the samples of a volume file mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeContent {
    /// Blob coefficients; `basis` describes the blob.
    Coefficients,
    /// Point samples of the object at the grid centres.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format: String,
    /// `(nx, ny, nz)`, `x` varying fastest in the payload.
    pub dims: [usize; 3],
    pub spacing: f64,
    pub dtype: Dtype,
    pub endianness: Endianness,
    pub content: VolumeContent,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BlobParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackHeader {
    pub format: String,
    pub projections: usize,
    /// `(columns ξ, rows η)`; `ξ` varies fastest, then `η`, then projection.
    pub dims: [usize; 2],
    pub pixel_size: f64,
    pub dtype: Dtype,
    pub endianness: Endianness,
}

/// `<payload>.json`.
pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_owned(),
        reason: reason.into(),
    }
}

fn encode(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn decode(path: &Path, bytes: &[u8], expected: usize, order: Endianness) -> Result<Vec<f64>> {
    if bytes.len() != expected * 4 {
        return Err(format_error(
            path,
            format!("payload has {} bytes, header implies {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            f64::from(match order {
                Endianness::Little => f32::from_le_bytes(b),
                Endianness::Big => f32::from_be_bytes(b),
            })
        })
        .collect())
}

fn check_tag(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(format_error(path, format!("format '{found}', expected '{expected}'")));
    }
    Ok(())
}

/// Writes a volume as `float32` (values are rounded to single precision).
pub fn write_volume(
    path: &Path,
    volume: &Volume,
    content: VolumeContent,
    basis: Option<BlobParams>,
) -> Result<()> {
    let header = VolumeHeader {
        format: VOLUME_FORMAT.into(),
        dims: volume.grid.dims,
        spacing: volume.grid.spacing,
        dtype: Dtype::Float32,
        endianness: Endianness::Little,
        content,
        basis,
    };
    write_bytes(path, &encode(&volume.data))?;
    write_json(&sidecar_path(path), &header)
}

pub fn read_volume(path: &Path) -> Result<(Volume, VolumeHeader)> {
    let side = sidecar_path(path);
    let header: VolumeHeader = read_json(&side)?;
    check_tag(&side, &header.format, VOLUME_FORMAT)?;
    let grid = VolumeGrid::new(header.dims, header.spacing).map_err(|e| format_error(&side, e.to_string()))?;
    let data = decode(path, &read_bytes(path)?, grid.len(), header.endianness)?;
    Ok((Volume::from_vec(grid, data)?, header))
}

pub fn write_stack(path: &Path, stack: &ProjectionStack) -> Result<()> {
    let header = StackHeader {
        format: STACK_FORMAT.into(),
        projections: stack.count,
        dims: stack.detector.dims,
        pixel_size: stack.detector.spacing,
        dtype: Dtype::Float32,
        endianness: Endianness::Little,
    };
    write_bytes(path, &encode(&stack.data))?;
    write_json(&sidecar_path(path), &header)
}

pub fn read_stack(path: &Path) -> Result<ProjectionStack> {
    let side = sidecar_path(path);
    let header: StackHeader = read_json(&side)?;
    check_tag(&side, &header.format, STACK_FORMAT)?;
    let det = DetectorGrid::new(header.dims, header.pixel_size).map_err(|e| format_error(&side, e.to_string()))?;
    let data = decode(path, &read_bytes(path)?, det.pixels() * header.projections, header.endianness)?;
    ProjectionStack::from_vec(det, header.projections, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AngleUnit {
    Deg,
    Rad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftUnit {
    Px,
    World,
}

/// Serialized acquisition geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryFile {
    pub format: String,
    pub angle_unit: AngleUnit,
    pub shift_unit: ShiftUnit,
    /// World size of one detector pixel, used to convert pixel shifts.
    pub pixel_size: f64,
    pub phi: Vec<f64>,
    pub psi1: f64,
    pub psi2: f64,
    pub shift: Shift,
}

impl GeometryFile {
    /// Degrees and pixels.
    pub fn from_geometry(g: &GeometryParams, pixel_size: f64) -> Self {
        let px = |t: [f64; 2]| t.map(|v| v / pixel_size);
        GeometryFile {
            format: GEOMETRY_FORMAT.into(),
            angle_unit: AngleUnit::Deg,
            shift_unit: ShiftUnit::Px,
            pixel_size,
            phi: g.phi.iter().map(|p| p.to_degrees()).collect(),
            psi1: g.psi1.to_degrees(),
            psi2: g.psi2.to_degrees(),
            shift: match &g.shift {
                Shift::Global(t) => Shift::Global(px(*t)),
                Shift::PerProjection(ts) => Shift::PerProjection(ts.iter().map(|&t| px(t)).collect()),
            },
        }
    }

    pub fn to_geometry(&self) -> Result<GeometryParams> {
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::InvalidParameter(format!("pixel_size {} must be > 0", self.pixel_size)));
        }
        let angle = |v: f64| match self.angle_unit {
            AngleUnit::Deg => v.to_radians(),
            AngleUnit::Rad => v,
        };
        let world = |t: [f64; 2]| match self.shift_unit {
            ShiftUnit::Px => t.map(|v| v * self.pixel_size),
            ShiftUnit::World => t,
        };
        GeometryParams::new(
            self.phi.iter().map(|&p| angle(p)).collect(),
            angle(self.psi1),
            angle(self.psi2),
            match &self.shift {
                Shift::Global(t) => Shift::Global(world(*t)),
                Shift::PerProjection(ts) => Shift::PerProjection(ts.iter().map(|&t| world(t)).collect()),
            },
        )
    }
}

pub fn write_geometry(path: &Path, g: &GeometryParams, pixel_size: f64) -> Result<()> {
    write_json(path, &GeometryFile::from_geometry(g, pixel_size))
}

/// Reads a geometry file, returning the geometry and its pixel size.
pub fn read_geometry(path: &Path) -> Result<(GeometryParams, f64)> {
    let file: GeometryFile = read_json(path)?;
    check_tag(path, &file.format, GEOMETRY_FORMAT)?;
    let g = file.to_geometry().map_err(|e| format_error(path, e.to_string()))?;
    Ok((g, file.pixel_size))
}

/// Bead centres written next to a simulated phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    /// World coordinates.
    pub centers: Vec<[f64; 3]>,
    pub bead_radius: f64,
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    write_json(path, truth)
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    read_json(path)
}

/// Writes any serializable value as pretty JSON with a trailing newline.
pub fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

/// Writes text, mapping failures to an I/O error naming the path.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_appends_json() {
        assert_eq!(sidecar_path(Path::new("a/vol.f32")), PathBuf::from("a/vol.f32.json"));
    }

    #[test]
    fn decode_honours_byte_order() {
        let p = Path::new("x");
        let le = 1.5f32.to_le_bytes();
        let be = 1.5f32.to_be_bytes();
        assert_eq!(decode(p, &le, 1, Endianness::Little).unwrap(), vec![1.5]);
        assert_eq!(decode(p, &be, 1, Endianness::Big).unwrap(), vec![1.5]);
        assert!(decode(p, &le, 2, Endianness::Little).is_err());
    }

    #[test]
    fn geometry_units_convert() {
        let g = GeometryParams::new(
            vec![0.0, std::f64::consts::FRAC_PI_2],
            0.01,
            -0.02,
            Shift::Global([1.0, -0.5]),
        )
        .unwrap();
        let f = GeometryFile::from_geometry(&g, 0.5);
        assert_eq!(f.phi[1], 90.0);
        assert_eq!(f.shift, Shift::Global([2.0, -1.0]));
        let back = f.to_geometry().unwrap();
        assert!((back.psi1 - 0.01).abs() < 1e-15);
        assert_eq!(back.shift, g.shift);
    }
}
