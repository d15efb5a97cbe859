//! Image-domain quality measures shared by the reconstructions.
//!
//! Blob coefficients are first rendered to point samples at the grid
//! centres so that iterative and filtered-backprojection results are compared
//! on the same footing. Lengths reported here are in voxels.

use serde::{Deserialize, Serialize};

use crate::basis::BlobProfile;
use crate::error::{Error, Result};
use crate::geometry::VolumeGrid;
use crate::projector::Volume;

/// Samples `Σ_k c_k b(u − u_k)` at every grid centre.
pub fn render(c: &Volume, blob: &BlobProfile) -> Volume {
    let grid = c.grid;
    let h = grid.spacing;
    let reach = (blob.radius() / h).ceil() as i64;
    let mut stencil = Vec::new();
    for dz in -reach..=reach {
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let r = h * ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                let w = blob.value(r);
                if w != 0.0 {
                    stencil.push(([dx, dy, dz], w));
                }
            }
        }
    }
    let [nx, ny, nz] = grid.dims.map(|n| n as i64);
    let mut out = Volume::zeros(grid);
    for (k, &ck) in c.data.iter().enumerate() {
        if ck == 0.0 {
            continue;
        }
        let [x, y, z] = grid.unravel(k).map(|v| v as i64);
        for &([dx, dy, dz], w) in &stencil {
            let (i, j, l) = (x + dx, y + dy, z + dz);
            if (0..nx).contains(&i) && (0..ny).contains(&j) && (0..nz).contains(&l) {
                out.data[grid.index(i as usize, j as usize, l as usize)] += ck * w;
            }
        }
    }
    out
}

/// Voxels inside the cylinder inscribed in the grid about the `z` axis.
pub fn fov_mask(grid: &VolumeGrid) -> Vec<bool> {
    let radius = (grid.dims[0].min(grid.dims[1]) as f64 - 1.0) * 0.5 * grid.spacing;
    (0..grid.len())
        .map(|k| {
            let [x, y, _] = grid.unravel(k);
            let p = grid.position(x, y, 0);
            p[0] * p[0] + p[1] * p[1] <= radius * radius
        })
        .collect()
}

/// Root-mean-square difference over the field of view.
pub fn rmse(a: &Volume, b: &Volume) -> Result<f64> {
    if a.grid.dims != b.grid.dims {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.grid.dims, b.grid.dims)));
    }
    let mask = fov_mask(&a.grid);
    let (mut sum, mut n) = (0.0, 0usize);
    for ((x, y), &m) in a.data.iter().zip(&b.data).zip(&mask) {
        if m {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { (sum / n as f64).sqrt() })
}

/// Proxies measured in a cube around one ground-truth bead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeadMeasure {
    pub center: [f64; 3],
    /// `sqrt|M₂(recon) − M₂(truth)|` in voxels, where `M₂` is the mean
    /// squared distance from the true centre under the positive intensity.
    pub dispersion: f64,
    /// Intensity fraction of the half-maximum region lying outside its
    /// largest connected component.
    pub doubling: f64,
    /// Connected components of the half-maximum region.
    pub peaks: usize,
}

struct Window {
    lo: [usize; 3],
    hi: [usize; 3],
}

impl Window {
    fn around(grid: &VolumeGrid, center: [f64; 3], half: f64) -> Self {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let f = grid.fractional_index(a, center[a]);
            let n = grid.dims[a] as f64;
            lo[a] = (f - half).ceil().clamp(0.0, n - 1.0) as usize;
            hi[a] = (f + half).floor().clamp(0.0, n - 1.0) as usize;
        }
        Window { lo, hi }
    }

    fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let [x0, y0, z0] = self.lo;
        let [x1, y1, z1] = self.hi;
        (z0..=z1).flat_map(move |z| (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| [x, y, z])))
    }
}

fn second_moment(img: &Volume, win: &Window, center: [f64; 3]) -> f64 {
    let (mut m, mut w) = (0.0, 0.0);
    for v in win.voxels() {
        let value = img.at(v[0], v[1], v[2]).max(0.0);
        let p = img.grid.position(v[0], v[1], v[2]);
        let d2: f64 = (0..3).map(|a| ((p[a] - center[a]) / img.grid.spacing).powi(2)).sum();
        m += value * d2;
        w += value;
    }
    if w > 0.0 {
        m / w
    } else {
        0.0
    }
}

/// Connected components (face neighbours) of the half-maximum region; returns
/// their intensity masses.
fn half_max_components(img: &Volume, win: &Window) -> Vec<f64> {
    let size = [0, 1, 2].map(|a| win.hi[a] - win.lo[a] + 1);
    let local = |v: [usize; 3]| ((v[2] - win.lo[2]) * size[1] + (v[1] - win.lo[1])) * size[0] + v[0] - win.lo[0];
    let peak = win.voxels().map(|v| img.at(v[0], v[1], v[2])).fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Vec::new();
    }
    let inside: Vec<bool> = win.voxels().map(|v| img.at(v[0], v[1], v[2]) >= 0.5 * peak).collect();
    let mut seen = vec![false; inside.len()];
    let mut masses = Vec::new();
    for start in win.voxels() {
        let s = local(start);
        if !inside[s] || seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![start];
        let mut mass = 0.0;
        while let Some(v) = stack.pop() {
            mass += img.at(v[0], v[1], v[2]);
            for a in 0..3 {
                for up in [false, true] {
                    let mut n = v;
                    if up {
                        if v[a] == win.hi[a] {
                            continue;
                        }
                        n[a] += 1;
                    } else {
                        if v[a] == win.lo[a] {
                            continue;
                        }
                        n[a] -= 1;
                    }
                    let k = local(n);
                    if inside[k] && !seen[k] {
                        seen[k] = true;
                        stack.push(n);
                    }
                }
            }
        }
        masses.push(mass);
    }
    masses
}

/// Measures every bead of `truth` in `recon`. Both are rendered images.
///
/// The window around each centre extends `radius` plus two voxels.
pub fn bead_measures(
    recon: &Volume,
    truth: &Volume,
    centers: &[[f64; 3]],
    radius: f64,
) -> Result<Vec<BeadMeasure>> {
    if recon.grid.dims != truth.grid.dims {
        return Err(Error::Shape(format!("{:?} vs {:?}", recon.grid.dims, truth.grid.dims)));
    }
    let half = radius / recon.grid.spacing + 2.0;
    Ok(centers
        .iter()
        .map(|&center| {
            let win = Window::around(&recon.grid, center, half);
            let dispersion =
                (second_moment(recon, &win, center) - second_moment(truth, &win, center)).abs().sqrt();
            let masses = half_max_components(recon, &win);
            let total: f64 = masses.iter().sum();
            let largest = masses.iter().copied().fold(0.0, f64::max);
            BeadMeasure {
                center,
                dispersion,
                doubling: if total > 0.0 { (total - largest) / total } else { 0.0 },
                peaks: masses.len(),
            }
        })
        .collect())
}

/// Least-squares slope of `y` against `x`; zero when `x` has no spread.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x[..n].iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        0.0
    }
}

/// Root mean square of a sequence.
pub fn rms(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BlobParams;
    use crate::simulator::make_bead_phantom;

    fn blob() -> BlobProfile {
        BlobProfile::new(BlobParams::default_for_spacing(1.0)).unwrap()
    }

    #[test]
    fn render_single_coefficient_is_blob_samples() {
        let grid = VolumeGrid::cube(9, 1.0).unwrap();
        let mut c = Volume::zeros(grid);
        c.data[grid.index(4, 4, 4)] = 2.0;
        let img = render(&c, &blob());
        assert!((img.at(4, 4, 4) - 2.0 * blob().value(0.0)).abs() < 1e-12);
        assert!((img.at(5, 4, 4) - 2.0 * blob().value(1.0)).abs() < 1e-12);
        assert!((img.at(5, 5, 4) - 2.0 * blob().value(2f64.sqrt())).abs() < 1e-12);
        assert_eq!(img.at(6, 4, 4), 0.0);
    }

    #[test]
    fn truth_measures_zero() {
        let grid = VolumeGrid::cube(20, 1.0).unwrap();
        let ph = make_bead_phantom(grid, 4, 1.5, 2).unwrap();
        let img = render(&ph.volume, &blob());
        assert_eq!(rmse(&img, &img).unwrap(), 0.0);
        for m in bead_measures(&img, &img, &ph.centers, ph.radius).unwrap() {
            assert_eq!(m.dispersion, 0.0);
            assert_eq!(m.peaks, 1);
            assert_eq!(m.doubling, 0.0);
        }
    }

    #[test]
    fn split_bead_counts_two_peaks() {
        let grid = VolumeGrid::cube(21, 1.0).unwrap();
        let truth = render(&crate::simulator::BeadPhantom::from_centers(grid, vec![[0.0; 3]], 1.5).unwrap().volume, &blob());
        let two = crate::simulator::BeadPhantom::from_centers(grid, vec![[-3.0, 0.0, 0.0], [3.0, 0.0, 0.0]], 1.5)
            .unwrap();
        let img = render(&two.volume, &blob());
        let m = bead_measures(&img, &truth, &[[0.0; 3]], 1.5).unwrap()[0];
        assert_eq!(m.peaks, 2);
        assert!((m.doubling - 0.5).abs() < 1e-9, "{}", m.doubling);
        assert!(m.dispersion > 2.0);
    }

    #[test]
    fn fov_mask_is_inscribed_cylinder() {
        let grid = VolumeGrid::cube(11, 1.0).unwrap();
        let mask = fov_mask(&grid);
        assert!(mask[grid.index(5, 5, 0)]);
        assert!(mask[grid.index(0, 5, 10)]);
        assert!(!mask[grid.index(0, 0, 3)]);
    }

    #[test]
    fn slope_of_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        assert!((slope(&x, &y) - 2.5).abs() < 1e-12);
        assert_eq!(slope(&[1.0, 1.0], &[0.0, 5.0]), 0.0);
    }
}
