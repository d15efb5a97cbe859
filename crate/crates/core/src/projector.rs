//! Blob-splatting forward projector `b = H(θ, t) c` and its adjoint.
//!
//! Each blob projects to a radially symmetric footprint centred on the image
//! of its centre, so a column of `H` is the tabulated line-integral profile
//! sampled at the detector pixels within the blob radius. Footprints falling
//! off the detector are clipped.

use rayon::prelude::*;

use crate::basis::{BlobProfile, SQUARED_SAMPLES};
use crate::error::{Error, Result};
use crate::geometry::{AffineProjection, DetectorGrid, GeometryParams, Pose, VolumeGrid};

/// Blob coefficients on a [`VolumeGrid`], `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: VolumeGrid,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: VolumeGrid) -> Self {
        Volume {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_vec(grid: VolumeGrid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} values for a {:?} grid",
                data.len(),
                grid.dims
            )));
        }
        Ok(Volume { grid, data })
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.data[self.grid.index(ix, iy, iz)]
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }
}

/// Measurements `b`: `count` projections of `rows × cols` pixels, `(P, η, ξ)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub detector: DetectorGrid,
    pub count: usize,
    pub data: Vec<f64>,
    /// Geometry the stack was generated with, when known.
    pub geometry: Option<GeometryParams>,
}

impl ProjectionStack {
    pub fn zeros(detector: DetectorGrid, count: usize) -> Self {
        ProjectionStack {
            detector,
            count,
            data: vec![0.0; count * detector.pixels()],
            geometry: None,
        }
    }

    pub fn from_vec(detector: DetectorGrid, count: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != count * detector.pixels() {
            return Err(Error::Shape(format!(
                "{} values for {count} projections of {:?}",
                data.len(),
                detector.dims
            )));
        }
        Ok(ProjectionStack {
            detector,
            count,
            data,
            geometry: None,
        })
    }

    pub fn projection(&self, i: usize) -> &[f64] {
        let n = self.detector.pixels();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn projection_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.detector.pixels();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.data, &self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Inner product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The discrete system operator for a fixed volume grid, detector and blob.
#[derive(Debug, Clone)]
pub struct Projector {
    volume: VolumeGrid,
    detector: DetectorGrid,
    blob: BlobProfile,
    kernel: Kernel,
}

/// Footprint lookup in detector-pixel units.
#[derive(Debug, Clone)]
struct Kernel {
    lut: Box<[f64; LUT_LEN]>,
    /// Converts a squared pixel distance into a fractional table index.
    lut_scale: f64,
    radius_px: f64,
    inv_spacing: f64,
    col_offset: f64,
    row_offset: f64,
    cols: usize,
    rows: usize,
}

const LUT_LEN: usize = SQUARED_SAMPLES + 2;

/// Longest run of columns a footprint can touch.
const MAX_SPAN: usize = 64;

impl Kernel {
    fn new(detector: &DetectorGrid, blob: &BlobProfile) -> Self {
        let (table, inv_step) = blob.squared_table();
        let d = detector.spacing;
        Kernel {
            lut: table[..LUT_LEN]
                .to_vec()
                .try_into()
                .expect("footprint table length"),
            lut_scale: inv_step * d * d,
            radius_px: blob.radius() / d,
            inv_spacing: 1.0 / d,
            col_offset: (detector.cols() as f64 - 1.0) * 0.5,
            row_offset: (detector.rows() as f64 - 1.0) * 0.5,
            cols: detector.cols(),
            rows: detector.rows(),
        }
    }

    #[inline(always)]
    fn weight(&self, u2: f64) -> f64 {
        let x = u2 * self.lut_scale;
        let i = (x as usize).min(LUT_LEN - 2);
        let f = x - i as f64;
        let lo = self.lut[i];
        lo + f * (self.lut[i + 1] - lo)
    }

    /// Half-open pixel window and fractional centre for a world point.
    #[inline(always)]
    fn window(&self, v: [f64; 2]) -> Option<(f64, f64, usize, usize, usize, usize)> {
        let col = v[0] * self.inv_spacing + self.col_offset;
        let row = v[1] * self.inv_spacing + self.row_offset;
        let r = self.radius_px;
        let j0 = (col - r).ceil().max(0.0);
        let j1 = ((col + r).floor() + 1.0).min(self.cols as f64);
        let r0 = (row - r).ceil().max(0.0);
        let r1 = ((row + r).floor() + 1.0).min(self.rows as f64);
        if !(j0 < j1 && r0 < r1) {
            return None;
        }
        Some((col, row, j0 as usize, j1 as usize, r0 as usize, r1 as usize))
    }

    #[inline(always)]
    fn splat(&self, out: &mut [f64], v: [f64; 2], weight: f64) {
        let Some((col, row, j0, j1, r0, r1)) = self.window(v) else {
            return;
        };
        let n = (j1 - j0).min(MAX_SPAN);
        let mut dx2 = [0.0; MAX_SPAN];
        for (k, slot) in dx2[..n].iter_mut().enumerate() {
            let dx = (j0 + k) as f64 - col;
            *slot = dx * dx;
        }
        for r in r0..r1 {
            let dy = r as f64 - row;
            let dy2 = dy * dy;
            let base = r * self.cols + j0;
            for (o, u) in out[base..base + n].iter_mut().zip(&dx2[..n]) {
                *o += weight * self.weight(u + dy2);
            }
        }
    }

    #[inline(always)]
    fn gather(&self, img: &[f64], v: [f64; 2]) -> f64 {
        let Some((col, row, j0, j1, r0, r1)) = self.window(v) else {
            return 0.0;
        };
        let n = (j1 - j0).min(MAX_SPAN);
        let mut dx2 = [0.0; MAX_SPAN];
        for (k, slot) in dx2[..n].iter_mut().enumerate() {
            let dx = (j0 + k) as f64 - col;
            *slot = dx * dx;
        }
        let mut acc = 0.0;
        for r in r0..r1 {
            let dy = r as f64 - row;
            let dy2 = dy * dy;
            let base = r * self.cols + j0;
            for (x, u) in img[base..base + n].iter().zip(&dx2[..n]) {
                acc += x * self.weight(u + dy2);
            }
        }
        acc
    }
}

impl Projector {
    pub fn new(volume: VolumeGrid, detector: DetectorGrid, blob: BlobProfile) -> Self {
        let kernel = Kernel::new(&detector, &blob);
        assert!(
            2.0 * kernel.radius_px + 1.0 <= MAX_SPAN as f64,
            "blob footprint spans more than {MAX_SPAN} pixels"
        );
        Projector {
            volume,
            detector,
            blob,
            kernel,
        }
    }

    pub fn volume_grid(&self) -> VolumeGrid {
        self.volume
    }

    pub fn detector(&self) -> DetectorGrid {
        self.detector
    }

    pub fn blob(&self) -> &BlobProfile {
        &self.blob
    }

    fn check_volume(&self, c: &Volume) -> Result<()> {
        if c.grid.dims != self.volume.dims || c.data.len() != self.volume.len() {
            return Err(Error::Shape(format!(
                "volume {:?} does not match projector grid {:?}",
                c.grid.dims, self.volume.dims
            )));
        }
        Ok(())
    }

    fn check_stack(&self, b: &ProjectionStack, g: &GeometryParams) -> Result<()> {
        if b.detector.dims != self.detector.dims {
            return Err(Error::Shape(format!(
                "stack detector {:?} does not match projector detector {:?}",
                b.detector.dims, self.detector.dims
            )));
        }
        if b.count != g.len() {
            return Err(Error::Shape(format!(
                "{} projections but {} angles",
                b.count,
                g.len()
            )));
        }
        Ok(())
    }

    /// Visits every blob centre in storage order with its detector image.
    #[inline(always)]
    fn for_each_centre(
        &self,
        aff: &AffineProjection,
        z_range: std::ops::Range<usize>,
        mut f: impl FnMut(usize, [f64; 2]),
    ) {
        let grid = &self.volume;
        let [nx, ny, _] = grid.dims;
        let h = grid.spacing;
        let step = [aff.rows[0][0] * h, aff.rows[1][0] * h];
        for iz in z_range {
            for iy in 0..ny {
                let v0 = aff.apply(grid.position(0, iy, iz));
                let base = grid.index(0, iy, iz);
                for ix in 0..nx {
                    let s = ix as f64;
                    f(base + ix, [v0[0] + s * step[0], v0[1] + s * step[1]]);
                }
            }
        }
    }

    /// Projects `c` for one pose into `out` (overwritten).
    pub fn project_one(&self, c: &[f64], pose: &Pose, out: &mut [f64]) {
        out.fill(0.0);
        let aff = pose.affine();
        self.for_each_centre(&aff, 0..self.volume.dims[2], |k, v| {
            let ck = c[k];
            if ck != 0.0 {
                self.kernel.splat(out, v, ck);
            }
        });
    }

    /// `H(θ, t) c`.
    pub fn forward(&self, c: &Volume, g: &GeometryParams) -> Result<ProjectionStack> {
        self.check_volume(c)?;
        g.validate()?;
        let mut stack = ProjectionStack::zeros(self.detector, g.len());
        stack
            .data
            .par_chunks_mut(self.detector.pixels())
            .enumerate()
            .for_each(|(i, out)| self.project_one(&c.data, &g.pose(i), out));
        stack.geometry = Some(g.clone());
        Ok(stack)
    }

    /// `H(θ, t)ᵀ b`.
    pub fn adjoint(&self, b: &ProjectionStack, g: &GeometryParams) -> Result<Volume> {
        self.check_stack(b, g)?;
        g.validate()?;
        let affines: Vec<AffineProjection> = g.poses().map(|p| p.affine()).collect();
        let mut vol = Volume::zeros(self.volume);
        let slab = self.volume.dims[0] * self.volume.dims[1];
        vol.data
            .par_chunks_mut(slab)
            .enumerate()
            .for_each(|(iz, out)| {
                let offset = iz * slab;
                for (i, aff) in affines.iter().enumerate() {
                    let img = b.projection(i);
                    self.for_each_centre(aff, iz..iz + 1, |k, v| {
                        out[k - offset] += self.kernel.gather(img, v);
                    });
                }
            });
        Ok(vol)
    }
}
