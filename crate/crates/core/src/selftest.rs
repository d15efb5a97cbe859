//! Quick numerical self-checks on a small problem: projector adjointness,
//! the finite-difference shift gradient against a detector-domain
//! derivative, and the calibration fixed point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::basis::{BlobParams, BlobProfile};
use crate::calibration::{calibrate, param_gradient, CalibConfig, FreeParams, OptimizerConfig, ShiftMode};
use crate::error::Result;
use crate::geometry::{DetectorGrid, GeometryParams, Shift, VolumeGrid};
use crate::projector::{dot, ProjectionStack, Projector, Volume};
use crate::simulator::make_bead_phantom;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub threshold: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value <= self.threshold
    }
}

fn projector(pixel: f64) -> Result<Projector> {
    let vol = VolumeGrid::cube(12, 1.0)?;
    let det = DetectorGrid::square((24.0 / pixel) as usize, pixel)?;
    Ok(Projector::new(vol, det, BlobProfile::new(BlobParams::default_for_spacing(1.0))?))
}

fn adjoint_check() -> Result<Check> {
    let p = projector(1.0)?;
    let g = GeometryParams::new(
        (0..16).map(|i| 0.37 * i as f64).collect(),
        0.05,
        -0.03,
        Shift::Global([0.4, -0.2]),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let c = Volume::from_vec(
            p.volume_grid(),
            (0..p.volume_grid().len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let pixels = p.detector().pixels() * g.len();
        let b = ProjectionStack::from_vec(p.detector(), g.len(), (0..pixels).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let lhs = dot(&p.forward(&c, &g)?.data, &b.data);
        let rhs = dot(&c.data, &p.adjoint(&b, &g)?.data);
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    Ok(Check {
        name: "adjoint dot-product relative error",
        value: worst,
        threshold: 1e-10,
    })
}

/// Fourth-order central difference along detector columns.
fn column_derivative(img: &[f64], cols: usize, spacing_px: f64) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for (row, dst) in img.chunks(cols).zip(out.chunks_mut(cols)) {
        for j in 2..cols.saturating_sub(2) {
            dst[j] = (-row[j + 2] + 8.0 * row[j + 1] - 8.0 * row[j - 1] + row[j - 2]) / (12.0 * spacing_px);
        }
    }
    out
}

fn gradient_check() -> Result<Check> {
    let p = projector(0.25)?;
    let c = make_bead_phantom(p.volume_grid(), 3, 1.5, 5)?.volume;
    let nominal = GeometryParams::uniform(12);
    let mut truth = nominal.clone();
    truth.shift = Shift::Global([0.3, 0.0]);
    let b = p.forward(&c, &truth)?;
    let free = FreeParams {
        angles: false,
        psi1: false,
        psi2: false,
        shift: ShiftMode::Global,
    };
    let fd = param_gradient(&p, &c, &nominal, &b, &free, &OptimizerConfig::default())?;
    let hc = p.forward(&c, &nominal)?;
    let cols = p.detector().cols();
    let mut oracle = 0.0;
    for i in 0..hc.count {
        let d = column_derivative(hc.projection(i), cols, 1.0);
        for ((x, y), dx) in hc.projection(i).iter().zip(b.projection(i)).zip(&d) {
            oracle -= (x - y) * dx;
        }
    }
    Ok(Check {
        name: "shift gradient vs detector derivative",
        value: (fd[0] - oracle).abs() / oracle.abs(),
        threshold: 1e-3,
    })
}

fn fixed_point_check() -> Result<Check> {
    let p = projector(1.0)?;
    let c = make_bead_phantom(p.volume_grid(), 3, 1.5, 5)?.volume;
    let g = GeometryParams::uniform(16);
    let b = p.forward(&c, &g)?;
    let cfg = CalibConfig {
        max_outer: 3,
        inner_solver: crate::recon::SolverConfig {
            max_iters: 200,
            tolerance: 1e-10,
            ..Default::default()
        },
        ..Default::default()
    };
    let report = calibrate(&p, &b, &g, &cfg)?;
    let drift = report
        .geometry
        .phi
        .iter()
        .zip(&g.phi)
        .map(|(a, b)| (a - b).abs())
        .fold((report.geometry.psi1).abs().max(report.geometry.psi2.abs()), f64::max);
    let shift = report.geometry.shift.get(0);
    Ok(Check {
        name: "calibration drift at the true geometry",
        value: drift.max(shift[0].abs()).max(shift[1].abs()),
        threshold: 1e-6,
    })
}

pub fn run() -> Result<Vec<Check>> {
    Ok(vec![adjoint_check()?, gradient_check()?, fixed_point_check()?])
}
