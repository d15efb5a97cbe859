//! Acquisition geometry of a rotating-sample projection setup.
//!
//! Sample space uses a right-handed frame `xyz` centred on the nominal
//! rotation centre `O`. The optical axis is `y`; the detector plane is
//! spanned by `ξ` (along `x`) and `η` (along `z`), with origin `O'` at the
//! detector centre.
//!
//! A pose is the tuple `(φ, ψ₁, ψ₂, t)`:
//!
//! * the sample turns by `φ` about the unit axis `a(ψ₁) = (0, sin ψ₁, cos ψ₁)`,
//!   i.e. the orientation axis leans out of the detector plane toward the
//!   optical axis by `ψ₁`;
//! * points are projected orthographically along `y`;
//! * the detector is rotated in its own plane by `ψ₂` (counter-clockwise when
//!   looking along `-y`, so `ξ → η` is positive);
//! * finally the detector frame is shifted by `t`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation by `phi` about the tilted orientation axis `a(psi1)`.
pub fn rotation_matrix(phi: f64, psi1: f64) -> Matrix3<f64> {
    let a = rotation_axis(psi1);
    let (s, c) = phi.sin_cos();
    let cross = Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0);
    Matrix3::identity() * c + cross * s + a * a.transpose() * (1.0 - c)
}

/// Unit orientation axis for an out-of-plane tilt `psi1`.
pub fn rotation_axis(psi1: f64) -> Vector3<f64> {
    let (s, c) = psi1.sin_cos();
    Vector3::new(0.0, s, c)
}

/// Counter-clockwise rotation of the detector plane.
pub fn detector_rotation(psi2: f64) -> nalgebra::Matrix2<f64> {
    let (s, c) = psi2.sin_cos();
    nalgebra::Matrix2::new(c, -s, s, c)
}

/// Geometry of a single projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub phi: f64,
    pub psi1: f64,
    pub psi2: f64,
    /// Detector shift in world units.
    pub t: [f64; 2],
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            phi: 0.0,
            psi1: 0.0,
            psi2: 0.0,
            t: [0.0, 0.0],
        }
    }

    /// The affine map `u ↦ v` collapsed into a 2×3 matrix and an offset.
    pub fn affine(&self) -> AffineProjection {
        let r = rotation_matrix(self.phi, self.psi1);
        let d = detector_rotation(self.psi2);
        let mut rows = [[0.0; 3]; 2];
        for (out, row) in rows.iter_mut().enumerate() {
            for (col, slot) in row.iter_mut().enumerate() {
                // Π_y keeps rows 0 (x) and 2 (z) of R.
                *slot = d[(out, 0)] * r[(0, col)] + d[(out, 1)] * r[(2, col)];
            }
        }
        AffineProjection {
            rows,
            offset: self.t,
        }
    }
}

/// `v = A·u + t` for one pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineProjection {
    pub rows: [[f64; 3]; 2],
    pub offset: [f64; 2],
}

impl AffineProjection {
    #[inline]
    pub fn apply(&self, u: [f64; 3]) -> [f64; 2] {
        let [a, b] = &self.rows;
        [
            a[0] * u[0] + a[1] * u[1] + a[2] * u[2] + self.offset[0],
            b[0] * u[0] + b[1] * u[1] + b[2] * u[2] + self.offset[1],
        ]
    }
}

/// Maps a sample-space point onto the detector for the given pose.
pub fn project_point(u: Vector3<f64>, pose: &Pose) -> Vector2<f64> {
    let p = rotation_matrix(pose.phi, pose.psi1) * u;
    let v = detector_rotation(pose.psi2) * Vector2::new(p.x, p.z);
    v + Vector2::new(pose.t[0], pose.t[1])
}

/// Detector shift, either shared by all projections or one per projection.
/// Values are in world units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shift {
    Global([f64; 2]),
    PerProjection(Vec<[f64; 2]>),
}

impl Shift {
    #[inline]
    pub fn get(&self, i: usize) -> [f64; 2] {
        match self {
            Shift::Global(t) => *t,
            Shift::PerProjection(ts) => ts[i],
        }
    }

    pub fn is_global(&self) -> bool {
        matches!(self, Shift::Global(_))
    }
}

/// Every unknown of the acquisition: rotation angles, both tilts, detector shift.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryParams {
    pub phi: Vec<f64>,
    pub psi1: f64,
    pub psi2: f64,
    pub shift: Shift,
}

impl GeometryParams {
    pub fn new(phi: Vec<f64>, psi1: f64, psi2: f64, shift: Shift) -> Result<Self> {
        let g = GeometryParams {
            phi,
            psi1,
            psi2,
            shift,
        };
        g.validate()?;
        Ok(g)
    }

    /// `count` equispaced angles over `[0, 2π)` with no tilt and no shift.
    pub fn uniform(count: usize) -> Self {
        let step = std::f64::consts::TAU / count as f64;
        GeometryParams {
            phi: (0..count).map(|i| i as f64 * step).collect(),
            psi1: 0.0,
            psi2: 0.0,
            shift: Shift::Global([0.0, 0.0]),
        }
    }

    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phi.is_empty() {
            return Err(Error::InvalidParameter("geometry needs at least one angle".into()));
        }
        if let Shift::PerProjection(ts) = &self.shift {
            if ts.len() != self.phi.len() {
                return Err(Error::Shape(format!(
                    "{} per-projection shifts for {} angles",
                    ts.len(),
                    self.phi.len()
                )));
            }
        }
        let half_pi = std::f64::consts::FRAC_PI_2;
        for (name, psi) in [("psi1", self.psi1), ("psi2", self.psi2)] {
            if !(psi.abs() < half_pi) {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {psi} must satisfy |{name}| < pi/2"
                )));
            }
        }
        let finite_shift = match &self.shift {
            Shift::Global(t) => t.iter().all(|v| v.is_finite()),
            Shift::PerProjection(ts) => ts.iter().flatten().all(|v| v.is_finite()),
        };
        if !finite_shift || !self.phi.iter().all(|p| p.is_finite()) {
            return Err(Error::InvalidParameter("geometry contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn pose(&self, i: usize) -> Pose {
        Pose {
            phi: self.phi[i],
            psi1: self.psi1,
            psi2: self.psi2,
            t: self.shift.get(i),
        }
    }

    pub fn poses(&self) -> impl Iterator<Item = Pose> + '_ {
        (0..self.len()).map(|i| self.pose(i))
    }

    /// Same geometry with a shift expanded to one entry per projection.
    pub fn with_per_projection_shift(&self) -> Self {
        let ts = (0..self.len()).map(|i| self.shift.get(i)).collect();
        GeometryParams {
            shift: Shift::PerProjection(ts),
            ..self.clone()
        }
    }
}

/// Regular grid of blob centres, centred on the origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    /// `(nx, ny, nz)`.
    pub dims: [usize; 3],
    /// World distance between neighbouring centres.
    pub spacing: f64,
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: f64) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidParameter(format!("volume dims {dims:?} must be >= 1")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidParameter(format!("volume spacing {spacing} must be > 0")));
        }
        Ok(VolumeGrid { dims, spacing })
    }

    pub fn cube(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n, n, n], spacing)
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World coordinate of sample `i` along `axis`.
    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        (i as f64 - (self.dims[axis] as f64 - 1.0) * 0.5) * self.spacing
    }

    #[inline]
    pub fn position(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [self.coord(0, ix), self.coord(1, iy), self.coord(2, iz)]
    }

    /// Flat index with `x` varying fastest.
    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    #[inline]
    pub fn unravel(&self, k: usize) -> [usize; 3] {
        let ix = k % self.dims[0];
        let rest = k / self.dims[0];
        [ix, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Continuous (fractional) index of a world coordinate along `axis`.
    #[inline]
    pub fn fractional_index(&self, axis: usize, w: f64) -> f64 {
        w / self.spacing + (self.dims[axis] as f64 - 1.0) * 0.5
    }
}

/// Detector pixel lattice, centred on `O'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorGrid {
    /// `(n_ξ, n_η)`: columns, rows.
    pub dims: [usize; 2],
    pub spacing: f64,
}

impl DetectorGrid {
    pub fn new(dims: [usize; 2], spacing: f64) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidParameter(format!("detector dims {dims:?} must be >= 1")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "detector spacing {spacing} must be > 0"
            )));
        }
        Ok(DetectorGrid { dims, spacing })
    }

    pub fn square(n: usize, spacing: f64) -> Result<Self> {
        Self::new([n, n], spacing)
    }

    pub fn cols(&self) -> usize {
        self.dims[0]
    }

    pub fn rows(&self) -> usize {
        self.dims[1]
    }

    pub fn pixels(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// World `ξ` of column `j`.
    #[inline]
    pub fn xi(&self, j: usize) -> f64 {
        (j as f64 - (self.dims[0] as f64 - 1.0) * 0.5) * self.spacing
    }

    /// World `η` of row `r`.
    #[inline]
    pub fn eta(&self, r: usize) -> f64 {
        (r as f64 - (self.dims[1] as f64 - 1.0) * 0.5) * self.spacing
    }

    /// Fractional column of a world `ξ`.
    #[inline]
    pub fn col_of(&self, xi: f64) -> f64 {
        xi / self.spacing + (self.dims[0] as f64 - 1.0) * 0.5
    }

    /// Fractional row of a world `η`.
    #[inline]
    pub fn row_of(&self, eta: f64) -> f64 {
        eta / self.spacing + (self.dims[1] as f64 - 1.0) * 0.5
    }

    pub fn px_to_world(&self, px: f64) -> f64 {
        px * self.spacing
    }

    pub fn world_to_px(&self, w: f64) -> f64 {
        w / self.spacing
    }
}
