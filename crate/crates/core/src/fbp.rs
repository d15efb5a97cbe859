//! Slice-by-slice filtered backprojection with an optional centre-of-rotation
//! correction. The geometry is taken at face value: tilts are not modelled.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::geometry::VolumeGrid;
use crate::projector::{ProjectionStack, Volume};

/// One detector row seen from every angle.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram2D {
    /// `count × cols`, angle-major.
    pub data: Vec<f64>,
    pub angles: Vec<f64>,
    pub cols: usize,
    pub spacing: f64,
}

impl Sinogram2D {
    pub fn new(data: Vec<f64>, angles: Vec<f64>, cols: usize, spacing: f64) -> Result<Self> {
        let s = Sinogram2D {
            data,
            angles,
            cols,
            spacing,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cols == 0 || self.data.len() != self.angles.len() * self.cols {
            return Err(Error::Shape(format!(
                "sinogram of {} values for {} angles x {} bins",
                self.data.len(),
                self.angles.len(),
                self.cols
            )));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::InvalidParameter(format!("spacing {} must be > 0", self.spacing)));
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("sinogram".into()));
        }
        let in_range = self.angles.iter().all(|a| (0.0..TAU).contains(a));
        let increasing = self.angles.windows(2).all(|w| w[0] < w[1]);
        if !(in_range && increasing) {
            return Err(Error::InvalidParameter(
                "sinogram angles must increase strictly within [0, 2pi)".into(),
            ));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.angles.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Row `row` of every projection in a stack.
    pub fn from_stack(b: &ProjectionStack, angles: &[f64], row: usize) -> Result<Self> {
        let (cols, rows) = (b.detector.cols(), b.detector.rows());
        if row >= rows || angles.len() != b.count {
            return Err(Error::Shape(format!(
                "row {row} of {rows}, {} angles for {} projections",
                angles.len(),
                b.count
            )));
        }
        let data = (0..b.count)
            .flat_map(|i| b.projection(i)[row * cols..(row + 1) * cols].iter().copied())
            .collect();
        Sinogram2D::new(data, angles.to_vec(), cols, b.detector.spacing)
    }
}

/// Ram-Lak filtering of each row by zero-padded FFT convolution with the
/// band-limited spatial ramp kernel.
pub fn ramp_filter(rows: &[f64], cols: usize, spacing: f64) -> Vec<f64> {
    let len = (2 * cols).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(len);
    let ifft = planner.plan_fft_inverse(len);

    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    kernel[0].re = 1.0 / (4.0 * spacing * spacing);
    for n in (1..cols).step_by(2) {
        let v = -1.0 / (PI * PI * (n * n) as f64 * spacing * spacing);
        kernel[n].re = v;
        kernel[len - n].re = v;
    }
    fft.process(&mut kernel);

    let scale = spacing / len as f64;
    let mut out = vec![0.0; rows.len()];
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for (src, dst) in rows.chunks(cols).zip(out.chunks_mut(cols)) {
        buf.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
        for (z, &v) in buf.iter_mut().zip(src) {
            z.re = v;
        }
        fft.process(&mut buf);
        buf.iter_mut().zip(&kernel).for_each(|(z, k)| *z *= k);
        ifft.process(&mut buf);
        for (d, z) in dst.iter_mut().zip(&buf) {
            *d = z.re * scale;
        }
    }
    out
}

/// Linear interpolation of a detector row at fractional bin `f`; zero
/// outside.
#[inline]
fn sample(row: &[f64], f: f64) -> f64 {
    if !(f > -1.0 && f < row.len() as f64) {
        return 0.0;
    }
    let j = f.floor();
    let w = f - j;
    let j = j as isize;
    let at = |k: isize| {
        if k >= 0 && (k as usize) < row.len() {
            row[k as usize]
        } else {
            0.0
        }
    };
    (1.0 - w) * at(j) + w * at(j + 1)
}

/// Backprojects filtered rows onto an `nx × ny` grid (x fastest) centred on
/// the rotation axis, for a detector shifted by `shift` world units.
fn backproject(
    filtered: &[f64],
    s: &Sinogram2D,
    nx: usize,
    ny: usize,
    spacing: f64,
    shift: f64,
) -> Vec<f64> {
    let weight = PI / s.count() as f64;
    let centre = (s.cols as f64 - 1.0) * 0.5;
    let inv = 1.0 / s.spacing;
    let xs: Vec<f64> = (0..nx).map(|i| (i as f64 - (nx as f64 - 1.0) * 0.5) * spacing).collect();
    let ys: Vec<f64> = (0..ny).map(|i| (i as f64 - (ny as f64 - 1.0) * 0.5) * spacing).collect();
    let mut img = vec![0.0; nx * ny];
    for (i, &phi) in s.angles.iter().enumerate() {
        let row = &filtered[i * s.cols..(i + 1) * s.cols];
        let (sin, cos) = phi.sin_cos();
        for (iy, &y) in ys.iter().enumerate() {
            let base = (shift - y * sin) * inv + centre;
            let out = &mut img[iy * nx..(iy + 1) * nx];
            for (o, &x) in out.iter_mut().zip(&xs) {
                *o += sample(row, base + x * cos * inv);
            }
        }
    }
    img.iter_mut().for_each(|v| *v *= weight);
    img
}

/// Filtered backprojection of one slice onto an `nx × ny` grid with the given
/// spacing; `shift` (world units) is the assumed detector offset.
pub fn fbp_slice(s: &Sinogram2D, nx: usize, ny: usize, spacing: f64, shift: f64) -> Result<Vec<f64>> {
    s.validate()?;
    if s.count() < 2 {
        return Err(Error::InvalidParameter("filtered backprojection needs at least 2 angles".into()));
    }
    let filtered = ramp_filter(&s.data, s.cols, s.spacing);
    Ok(backproject(&filtered, s, nx, ny, spacing, shift))
}

/// Index of the projection closest to `phi + π`, if within half an angular
/// step.
fn opposite(angles: &[f64], i: usize) -> Option<usize> {
    let target = (angles[i] + PI).rem_euclid(TAU);
    let step = TAU / angles.len() as f64;
    let dist = |a: f64| {
        let d = (a - target).rem_euclid(TAU);
        d.min(TAU - d)
    };
    let (j, d) = angles
        .iter()
        .enumerate()
        .map(|(j, &a)| (j, dist(a)))
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    (d <= 0.5 * step).then_some(j)
}

/// Correlation of `p` with the mirror image of `q`, accumulated into `acc`
/// at lags `-(n-1)..=(n-1)`.
fn mirror_correlation(p: &[f64], q: &[f64], acc: &mut [f64]) {
    let n = p.len();
    for (li, slot) in acc.iter_mut().enumerate() {
        let lag = li as isize - (n as isize - 1);
        let mut sum = 0.0;
        for (j, &pj) in p.iter().enumerate() {
            // mirrored q at (j - lag)
            let k = j as isize - lag;
            if k >= 0 && (k as usize) < n {
                sum += pj * q[n - 1 - k as usize];
            }
        }
        *slot += sum;
    }
}

/// Detector offset in pixels from the correlation of opposing projections,
/// accumulated over `rows` (each a full sinogram with the same angles).
fn cor_from_rows<'a>(
    angles: &[f64],
    cols: usize,
    rows: impl Iterator<Item = &'a Sinogram2D>,
) -> Result<f64> {
    let pairs: Vec<(usize, usize)> = (0..angles.len())
        .filter_map(|i| opposite(angles, i).map(|j| (i, j)))
        .filter(|&(i, j)| i < j)
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidParameter(
            "no opposing projection pairs for a centre-of-rotation estimate".into(),
        ));
    }
    let mut acc = vec![0.0; 2 * cols - 1];
    for s in rows {
        for &(i, j) in &pairs {
            mirror_correlation(s.row(i), s.row(j), &mut acc);
        }
    }
    let (best, _) = acc
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty correlation");
    let mut lag = best as f64 - (cols as f64 - 1.0);
    if best > 0 && best + 1 < acc.len() {
        let (l, c, r) = (acc[best - 1], acc[best], acc[best + 1]);
        let denom = l - 2.0 * c + r;
        if denom < 0.0 {
            lag += 0.5 * (l - r) / denom;
        }
    }
    Ok(0.5 * lag)
}

/// Centre-of-rotation offset of one sinogram, in pixels.
pub fn estimate_cor_shift(s: &Sinogram2D) -> Result<f64> {
    s.validate()?;
    cor_from_rows(&s.angles, s.cols, std::iter::once(s))
}

/// Centre-of-rotation offset of a whole stack, in pixels.
pub fn estimate_cor_shift_stack(b: &ProjectionStack, angles: &[f64]) -> Result<f64> {
    let sinos = (0..b.detector.rows())
        .map(|r| Sinogram2D::from_stack(b, angles, r))
        .collect::<Result<Vec<_>>>()?;
    cor_from_rows(angles, b.detector.cols(), sinos.iter())
}

/// Reconstruction of a stack onto `grid` slice by slice, plus the detector
/// shift (pixels) that was assumed.
#[derive(Debug, Clone)]
pub struct FbpResult {
    pub volume: Volume,
    pub shift_px: f64,
}

/// Reconstructs each `z` of `grid` from the detector rows at that height.
/// With `shift_correction` the horizontal detector offset is estimated first
/// and compensated.
pub fn fbp_stack(
    b: &ProjectionStack,
    angles: &[f64],
    grid: &VolumeGrid,
    shift_correction: bool,
) -> Result<FbpResult> {
    if angles.len() != b.count {
        return Err(Error::Shape(format!("{} angles for {} projections", angles.len(), b.count)));
    }
    let det = b.detector;
    let sinos = (0..det.rows())
        .map(|r| Sinogram2D::from_stack(b, angles, r))
        .collect::<Result<Vec<_>>>()?;
    if sinos[0].count() < 2 {
        return Err(Error::InvalidParameter("filtered backprojection needs at least 2 angles".into()));
    }
    let shift_px = if shift_correction {
        cor_from_rows(angles, det.cols(), sinos.iter())?
    } else {
        0.0
    };
    let filtered: Vec<Vec<f64>> = sinos
        .par_iter()
        .map(|s| ramp_filter(&s.data, s.cols, s.spacing))
        .collect();
    let [nx, ny, nz] = grid.dims;
    let shift = det.px_to_world(shift_px);
    let slices: Vec<Vec<f64>> = (0..nz)
        .into_par_iter()
        .map(|iz| {
            let f = det.row_of(grid.coord(2, iz));
            let r0 = f.floor();
            let w = f - r0;
            let mut out = vec![0.0; nx * ny];
            for (r, wr) in [(r0, 1.0 - w), (r0 + 1.0, w)] {
                if wr == 0.0 || r < 0.0 || r >= det.rows() as f64 {
                    continue;
                }
                let r = r as usize;
                let img = backproject(&filtered[r], &sinos[r], nx, ny, grid.spacing, shift);
                out.iter_mut().zip(img).for_each(|(o, v)| *o += wr * v);
            }
            out
        })
        .collect();
    let volume = Volume::from_vec(*grid, slices.concat())?;
    Ok(FbpResult { volume, shift_px })
}
