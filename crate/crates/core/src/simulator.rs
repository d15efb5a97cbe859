//! Phantoms and mechanical-error injection for synthetic acquisitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DetectorGrid, GeometryParams, Shift, VolumeGrid};
use crate::projector::{ProjectionStack, Projector, Volume};

/// Independent RNG streams derived from one seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Angles = 1,
    Shifts = 2,
    Noise = 3,
    Phantom = 4,
}

fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Mechanical imperfections of one acquisition. Angles in radians, shifts in
/// detector pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorModel {
    /// Standard deviation of each step of the accumulated angle error.
    pub angle_walk_sigma: f64,
    /// Standard deviation of each step of a per-projection shift walk.
    pub shift_walk_sigma: f64,
    pub static_cor_offset: [f64; 2],
    pub psi1_true: f64,
    pub psi2_true: f64,
    /// Gaussian noise level as a fraction of the peak noiseless signal.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        ErrorModel {
            angle_walk_sigma: 0.0,
            shift_walk_sigma: 0.0,
            static_cor_offset: [0.0, 0.0],
            psi1_true: 0.0,
            psi2_true: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl ErrorModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("angle_walk_sigma", self.angle_walk_sigma),
            ("shift_walk_sigma", self.shift_walk_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Applies `err` to a nominal geometry, returning the true (perturbed) one.
///
/// The first projection anchors the angle walk: its error is zero and every
/// later projection accumulates one more independent step.
pub fn perturb_geometry(
    nominal: &GeometryParams,
    err: &ErrorModel,
    det: &DetectorGrid,
) -> Result<GeometryParams> {
    err.validate()?;
    nominal.validate()?;
    let n = nominal.len();
    let mut phi = nominal.phi.clone();
    if err.angle_walk_sigma > 0.0 {
        let mut r = rng(err.seed, Stream::Angles);
        let step = Normal::new(0.0, err.angle_walk_sigma).expect("sigma validated");
        let mut acc = 0.0;
        for p in phi.iter_mut().skip(1) {
            acc += step.sample(&mut r);
            *p += acc;
        }
    }
    let offset = [
        det.px_to_world(err.static_cor_offset[0]),
        det.px_to_world(err.static_cor_offset[1]),
    ];
    let shift = if err.shift_walk_sigma > 0.0 {
        let mut r = rng(err.seed, Stream::Shifts);
        let step = Normal::new(0.0, det.px_to_world(err.shift_walk_sigma)).expect("sigma validated");
        let mut acc = [0.0, 0.0];
        let ts = (0..n)
            .map(|i| {
                if i > 0 {
                    acc[0] += step.sample(&mut r);
                    acc[1] += step.sample(&mut r);
                }
                let base = nominal.shift.get(i);
                [base[0] + offset[0] + acc[0], base[1] + offset[1] + acc[1]]
            })
            .collect();
        Shift::PerProjection(ts)
    } else {
        match &nominal.shift {
            Shift::Global(t) => Shift::Global([t[0] + offset[0], t[1] + offset[1]]),
            Shift::PerProjection(ts) => Shift::PerProjection(
                ts.iter().map(|t| [t[0] + offset[0], t[1] + offset[1]]).collect(),
            ),
        }
    };
    GeometryParams::new(phi, err.psi1_true, err.psi2_true, shift)
}

/// `H(g_true) c` plus i.i.d. Gaussian noise of `noise_sigma · max|Hc|`.
pub fn simulate_measurements(
    projector: &Projector,
    c: &Volume,
    g_true: &GeometryParams,
    noise_sigma: f64,
    seed: u64,
) -> Result<ProjectionStack> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise_sigma {noise_sigma} must be >= 0")));
    }
    let mut b = projector.forward(c, g_true)?;
    if noise_sigma > 0.0 {
        let std = noise_sigma * b.max_abs();
        add_noise(&mut b, std, seed);
    }
    Ok(b)
}

/// Adds i.i.d. `N(0, std²)` noise to every pixel.
pub fn add_noise(b: &mut ProjectionStack, std: f64, seed: u64) {
    if std <= 0.0 {
        return;
    }
    let mut r = rng(seed, Stream::Noise);
    let normal = Normal::new(0.0, std).expect("std > 0");
    b.data.iter_mut().for_each(|v| *v += normal.sample(&mut r));
}

/// A bead phantom with its ground-truth centres.
#[derive(Debug, Clone)]
pub struct BeadPhantom {
    pub volume: Volume,
    pub centers: Vec<[f64; 3]>,
    pub radius: f64,
}

const SUBSAMPLES: usize = 4;

impl BeadPhantom {
    /// Rasterises spheres of `radius` at `centers` by 4³ supersampled coverage.
    pub fn from_centers(grid: VolumeGrid, centers: Vec<[f64; 3]>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("bead radius {radius} must be > 0")));
        }
        for c in &centers {
            for axis in 0..3 {
                let half = (grid.dims[axis] as f64 - 1.0) * 0.5 * grid.spacing;
                if c[axis].abs() + radius > half {
                    return Err(Error::InvalidParameter(format!(
                        "bead at {c:?} with radius {radius} crosses the volume boundary"
                    )));
                }
            }
        }
        let mut volume = Volume::zeros(grid);
        let h = grid.spacing;
        let r2 = radius * radius;
        let sub = |i: usize| ((i as f64 + 0.5) / SUBSAMPLES as f64 - 0.5) * h;
        let total = (SUBSAMPLES * SUBSAMPLES * SUBSAMPLES) as f64;
        for c in &centers {
            let lo: Vec<usize> = (0..3)
                .map(|a| grid.fractional_index(a, c[a] - radius - h).floor().max(0.0) as usize)
                .collect();
            let hi: Vec<usize> = (0..3)
                .map(|a| {
                    (grid.fractional_index(a, c[a] + radius + h).ceil() as usize)
                        .min(grid.dims[a] - 1)
                })
                .collect();
            for iz in lo[2]..=hi[2] {
                for iy in lo[1]..=hi[1] {
                    for ix in lo[0]..=hi[0] {
                        let p = grid.position(ix, iy, iz);
                        let mut inside = 0usize;
                        for sz in 0..SUBSAMPLES {
                            let dz = p[2] + sub(sz) - c[2];
                            for sy in 0..SUBSAMPLES {
                                let dy = p[1] + sub(sy) - c[1];
                                for sx in 0..SUBSAMPLES {
                                    let dx = p[0] + sub(sx) - c[0];
                                    if dx * dx + dy * dy + dz * dz <= r2 {
                                        inside += 1;
                                    }
                                }
                            }
                        }
                        if inside > 0 {
                            let k = grid.index(ix, iy, iz);
                            volume.data[k] = (volume.data[k] + inside as f64 / total).min(1.0);
                        }
                    }
                }
            }
        }
        Ok(BeadPhantom {
            volume,
            centers,
            radius,
        })
    }
}

/// `n_beads` non-overlapping spheres placed at random inside the centred
/// cylinder of radius `0.45·min(nx, ny)·h`.
pub fn make_bead_phantom(
    grid: VolumeGrid,
    n_beads: usize,
    bead_radius: f64,
    seed: u64,
) -> Result<BeadPhantom> {
    if n_beads == 0 {
        return Err(Error::InvalidParameter("n_beads must be >= 1".into()));
    }
    let h = grid.spacing;
    let cyl = 0.45 * grid.dims[0].min(grid.dims[1]) as f64 * h - bead_radius;
    let half_z = (grid.dims[2] as f64 - 1.0) * 0.5 * h - bead_radius - h;
    if !(bead_radius > 0.0) || cyl <= 0.0 || half_z <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "beads of radius {bead_radius} do not fit in a {:?} grid",
            grid.dims
        )));
    }
    let min_sep = 2.0 * bead_radius + 3.0 * h;
    let mut r = rng(seed, Stream::Phantom);
    let mut centers: Vec<[f64; 3]> = Vec::with_capacity(n_beads);
    let mut attempts = 0;
    while centers.len() < n_beads {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidParameter(format!(
                "could not place {n_beads} separated beads of radius {bead_radius}"
            )));
        }
        // Uniform over the disc, then uniform height.
        let rho = cyl * r.gen::<f64>().sqrt();
        let theta = r.gen_range(0.0..std::f64::consts::TAU);
        let z = r.gen_range(-half_z..half_z);
        let c = [rho * theta.cos(), rho * theta.sin(), z];
        let clear = centers.iter().all(|o| {
            let d2: f64 = (0..3).map(|a| (o[a] - c[a]).powi(2)).sum();
            d2 >= min_sep * min_sep
        });
        if clear {
            centers.push(c);
        }
    }
    BeadPhantom::from_centers(grid, centers, bead_radius)
}

/// A tube wound around the orientation axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelixSpec {
    pub turns: f64,
    /// Distance from the axis to the tube centreline (world units).
    pub helix_radius: f64,
    pub tube_radius: f64,
    /// Extent along the axis (world units).
    pub length: f64,
    /// Tilt of the helix axis toward the optical axis, same convention as `ψ₁`.
    pub axis_tilt: f64,
}

/// Rasterises a helical tube; the seed sets the starting phase.
pub fn make_helix_phantom(grid: VolumeGrid, spec: &HelixSpec, seed: u64) -> Result<Volume> {
    let HelixSpec {
        turns,
        helix_radius,
        tube_radius,
        length,
        axis_tilt,
    } = *spec;
    let h = grid.spacing;
    if !(tube_radius > 0.0 && tube_radius.is_finite()) {
        return Err(Error::InvalidParameter(format!("tube radius {tube_radius} must be > 0")));
    }
    if !(helix_radius >= 0.0 && length > 0.0 && turns >= 0.0 && axis_tilt.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("degenerate helix {spec:?}")));
    }
    let mut r = rng(seed, Stream::Phantom);
    let phase = r.gen_range(0.0..std::f64::consts::TAU);

    // Dense centreline samples, spaced well under the tube radius.
    let arc = ((std::f64::consts::TAU * helix_radius * turns).powi(2) + length * length).sqrt();
    let n = ((arc / (tube_radius / 8.0)).ceil() as usize).max(2);
    let (st, ct) = axis_tilt.sin_cos();
    let mut pts: Vec<[f64; 3]> = (0..=n)
        .map(|i| {
            let s = i as f64 / n as f64 - 0.5;
            let ang = std::f64::consts::TAU * turns * s + phase;
            let (x, y, z) = (helix_radius * ang.cos(), helix_radius * ang.sin(), length * s);
            // Rotate the local z axis onto (0, sin, cos).
            [x, ct * y + st * z, -st * y + ct * z]
        })
        .collect();
    for p in &pts {
        for axis in 0..3 {
            let half = (grid.dims[axis] as f64 - 1.0) * 0.5 * h;
            if p[axis].abs() + tube_radius > half + 1e-9 && axis != 2 {
                return Err(Error::InvalidParameter(format!(
                    "helix {spec:?} does not fit in a {:?} grid",
                    grid.dims
                )));
            }
        }
    }
    pts.sort_by(|a, b| a[2].total_cmp(&b[2]));
    let zs: Vec<f64> = pts.iter().map(|p| p[2]).collect();

    let mut vol = Volume::zeros(grid);
    let r2 = tube_radius * tube_radius;
    const SS: usize = 2;
    let sub = |i: usize| ((i as f64 + 0.5) / SS as f64 - 0.5) * h;
    for k in 0..grid.len() {
        let [ix, iy, iz] = grid.unravel(k);
        let p = grid.position(ix, iy, iz);
        let lo = zs.partition_point(|&z| z < p[2] - tube_radius - h);
        let hi = zs.partition_point(|&z| z <= p[2] + tube_radius + h);
        if lo >= hi {
            continue;
        }
        let near = &pts[lo..hi];
        let mut inside = 0;
        for sz in 0..SS {
            for sy in 0..SS {
                for sx in 0..SS {
                    let q = [p[0] + sub(sx), p[1] + sub(sy), p[2] + sub(sz)];
                    let hit = near.iter().any(|c| {
                        let d2 = (c[0] - q[0]).powi(2) + (c[1] - q[1]).powi(2) + (c[2] - q[2]).powi(2);
                        d2 <= r2
                    });
                    if hit {
                        inside += 1;
                    }
                }
            }
        }
        vol.data[k] = inside as f64 / (SS * SS * SS) as f64;
    }
    Ok(vol)
}
