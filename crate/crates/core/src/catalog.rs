//! Catalogue of mechanical misalignment artifacts.
//!
//! Each case simulates a bead sample under one kind of setup error,
//! reconstructs it naively (filtered backprojection with the nominal
//! geometry) and reduces the result to a handful of scalars: volume error,
//! bead spread, peak doubling, and how the spread grows with height and
//! with distance from the rotation axis.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BlobParams, BlobProfile};
use crate::error::{Error, Result};
use crate::fbp::fbp_stack;
use crate::geometry::{DetectorGrid, GeometryParams, VolumeGrid};
use crate::metrics::{bead_measures, render, rms, rmse, slope};
use crate::projector::{ProjectionStack, Projector, Volume};
use crate::simulator::{make_bead_phantom, perturb_geometry, BeadPhantom, ErrorModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Horizontal detector offset, pixels.
    CorOffset,
    /// Accumulated angle error, degrees per projection step.
    AngleJitter,
    /// Rotation axis leaning toward the optical axis, degrees.
    AxisTiltPsi1,
    /// Detector rotated in its plane, degrees.
    DetectorTiltPsi2,
    /// All of the above; the magnitude `s` means `s` px offset, `0.1·s`
    /// degrees per angle step and `s` degrees of each tilt.
    Combined,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 5] = [
        ArtifactKind::CorOffset,
        ArtifactKind::AngleJitter,
        ArtifactKind::AxisTiltPsi1,
        ArtifactKind::DetectorTiltPsi2,
        ArtifactKind::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtifactKind::CorOffset => "cor_offset",
            ArtifactKind::AngleJitter => "angle_jitter",
            ArtifactKind::AxisTiltPsi1 => "axis_tilt_psi1",
            ArtifactKind::DetectorTiltPsi2 => "detector_tilt_psi2",
            ArtifactKind::Combined => "combined",
        }
    }

    /// Largest accepted magnitude.
    pub fn max_magnitude(self) -> f64 {
        match self {
            ArtifactKind::CorOffset => 10.0,
            ArtifactKind::AngleJitter => 2.0,
            ArtifactKind::AxisTiltPsi1 | ArtifactKind::DetectorTiltPsi2 | ArtifactKind::Combined => 10.0,
        }
    }

    pub fn validate(self, magnitude: f64) -> Result<()> {
        if !(0.0..=self.max_magnitude()).contains(&magnitude) {
            return Err(Error::InvalidParameter(format!(
                "{} magnitude {magnitude} outside [0, {}]",
                self.as_str(),
                self.max_magnitude()
            )));
        }
        Ok(())
    }

    /// Mechanical error producing this artifact at `magnitude`.
    pub fn error_model(self, magnitude: f64, seed: u64) -> Result<ErrorModel> {
        self.validate(magnitude)?;
        let deg = magnitude.to_radians();
        let base = ErrorModel {
            seed,
            ..Default::default()
        };
        Ok(match self {
            ArtifactKind::CorOffset => ErrorModel {
                static_cor_offset: [magnitude, 0.0],
                ..base
            },
            ArtifactKind::AngleJitter => ErrorModel {
                angle_walk_sigma: deg,
                ..base
            },
            ArtifactKind::AxisTiltPsi1 => ErrorModel {
                psi1_true: deg,
                ..base
            },
            ArtifactKind::DetectorTiltPsi2 => ErrorModel {
                psi2_true: deg,
                ..base
            },
            ArtifactKind::Combined => ErrorModel {
                static_cor_offset: [magnitude, 0.0],
                angle_walk_sigma: 0.1 * deg,
                psi1_true: deg,
                psi2_true: deg,
                ..base
            },
        })
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArtifactKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArtifactKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown artifact kind '{s}'")))
    }
}

/// Sample and acquisition shared by every case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeadScenario {
    pub volume: [usize; 3],
    pub voxel_size: f64,
    pub detector: [usize; 2],
    pub pixel_size: f64,
    pub projections: usize,
    pub beads: usize,
    pub bead_radius: f64,
}

impl Default for BeadScenario {
    fn default() -> Self {
        BeadScenario {
            volume: [32, 32, 32],
            voxel_size: 2.0,
            detector: [64, 64],
            pixel_size: 1.0,
            projections: 60,
            beads: 12,
            bead_radius: 3.0,
        }
    }
}

impl BeadScenario {
    pub fn volume_grid(&self) -> Result<VolumeGrid> {
        VolumeGrid::new(self.volume, self.voxel_size)
    }

    pub fn detector_grid(&self) -> Result<DetectorGrid> {
        DetectorGrid::new(self.detector, self.pixel_size)
    }

    pub fn blob(&self) -> Result<BlobProfile> {
        BlobProfile::new(BlobParams::default_for_spacing(self.voxel_size))
    }

    pub fn projector(&self) -> Result<Projector> {
        Ok(Projector::new(self.volume_grid()?, self.detector_grid()?, self.blob()?))
    }

    pub fn nominal_geometry(&self) -> Result<GeometryParams> {
        if self.projections < 2 {
            return Err(Error::InvalidParameter("a scenario needs at least 2 projections".into()));
        }
        Ok(GeometryParams::uniform(self.projections))
    }
}

/// One simulated acquisition with its ground truth.
#[derive(Debug, Clone)]
pub struct ArtifactCase {
    pub kind: ArtifactKind,
    pub magnitude: f64,
    pub seed: u64,
    pub scenario: BeadScenario,
    pub phantom: BeadPhantom,
    /// Geometry a naive reconstruction assumes.
    pub nominal: GeometryParams,
    /// Geometry the data were generated with.
    pub truth: GeometryParams,
    pub measurements: ProjectionStack,
}

/// Simulates `kind` at `magnitude`. The phantom depends only on `seed`, so
/// every kind sees the same sample.
pub fn generate_case(
    scenario: &BeadScenario,
    kind: ArtifactKind,
    magnitude: f64,
    seed: u64,
) -> Result<ArtifactCase> {
    let err = kind.error_model(magnitude, seed)?;
    let projector = scenario.projector()?;
    let phantom = make_bead_phantom(
        projector.volume_grid(),
        scenario.beads,
        scenario.bead_radius,
        seed,
    )?;
    let nominal = scenario.nominal_geometry()?;
    let truth = perturb_geometry(&nominal, &err, &projector.detector())?;
    let measurements = projector.forward(&phantom.volume, &truth)?;
    Ok(ArtifactCase {
        kind,
        magnitude,
        seed,
        scenario: *scenario,
        phantom,
        nominal,
        truth,
        measurements,
    })
}

impl ArtifactCase {
    /// Point samples of the true object on the volume grid.
    pub fn truth_image(&self) -> Result<Volume> {
        Ok(render(&self.phantom.volume, &self.scenario.blob()?))
    }

    /// Filtered backprojection with the nominal geometry.
    pub fn naive_reconstruction(&self, shift_correction: bool) -> Result<Volume> {
        Ok(fbp_stack(
            &self.measurements,
            &self.nominal.phi,
            &self.scenario.volume_grid()?,
            shift_correction,
        )?
        .volume)
    }

    /// Filtered backprojection of error-free data from the same sample.
    pub fn clean_reconstruction(&self) -> Result<Volume> {
        let clean = self.scenario.projector()?.forward(&self.phantom.volume, &self.nominal)?;
        Ok(fbp_stack(&clean, &self.nominal.phi, &self.scenario.volume_grid()?, false)?.volume)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMetrics {
    /// Over the inscribed cylinder, in object intensity units.
    pub rmse: f64,
    /// RMS over beads of the spread excess, voxels.
    pub centroid_dispersion_px: f64,
    /// Mean over beads of the off-peak half-maximum mass fraction.
    pub doubling_score: f64,
    /// Mean number of half-maximum components per bead.
    pub mean_peaks: f64,
    /// Slope of the bead spread excess against |z|, voxels per voxel.
    pub height_slope: f64,
    /// Slope of the bead spread excess against distance from the axis.
    pub radius_slope: f64,
}

/// Measures a rendered reconstruction against rendered ground truth with
/// known bead centres.
///
/// The slopes regress each bead's spread in excess of its spread in
/// `reference`, typically an error-free reconstruction by the same method,
/// so that resolution differences across the field cancel.
pub fn measure_image(
    recon: &Volume,
    truth: &Volume,
    reference: Option<&Volume>,
    centers: &[[f64; 3]],
    bead_radius: f64,
) -> Result<ArtifactMetrics> {
    if centers.is_empty() {
        return Err(Error::MissingGroundTruth("no bead centres to measure".into()));
    }
    let beads = bead_measures(recon, truth, centers, bead_radius)?;
    let spread: Vec<f64> = beads.iter().map(|b| b.dispersion).collect();
    let excess: Vec<f64> = match reference {
        Some(r) => bead_measures(r, truth, centers, bead_radius)?
            .iter()
            .zip(&spread)
            .map(|(b, s)| s - b.dispersion)
            .collect(),
        None => spread.clone(),
    };
    let h = recon.grid.spacing;
    let height: Vec<f64> = centers.iter().map(|c| c[2].abs() / h).collect();
    let radius: Vec<f64> = centers.iter().map(|c| c[0].hypot(c[1]) / h).collect();
    let n = beads.len() as f64;
    Ok(ArtifactMetrics {
        rmse: rmse(recon, truth)?,
        centroid_dispersion_px: rms(spread.iter().copied()),
        doubling_score: beads.iter().map(|b| b.doubling).sum::<f64>() / n,
        mean_peaks: beads.iter().map(|b| b.peaks as f64).sum::<f64>() / n,
        height_slope: slope(&height, &excess),
        radius_slope: slope(&radius, &excess),
    })
}

/// Measures a rendered reconstruction of `case`; slopes are taken relative
/// to the naive reconstruction of error-free data from the same sample.
pub fn measure(case: &ArtifactCase, recon: &Volume) -> Result<ArtifactMetrics> {
    let clean = case.clean_reconstruction()?;
    measure_image(
        recon,
        &case.truth_image()?,
        Some(&clean),
        &case.phantom.centers,
        case.phantom.radius,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub kind: ArtifactKind,
    pub magnitude: f64,
    pub metrics: ArtifactMetrics,
}

/// Representative magnitude of each kind.
pub fn default_suite() -> Vec<(ArtifactKind, f64)> {
    vec![
        (ArtifactKind::CorOffset, 2.5),
        (ArtifactKind::AngleJitter, 0.25),
        (ArtifactKind::AxisTiltPsi1, 5.0),
        (ArtifactKind::DetectorTiltPsi2, 5.0),
    ]
}

/// Generates, reconstructs and measures every case; entries keep the order
/// of `suite`.
pub fn run_catalog(
    scenario: &BeadScenario,
    suite: &[(ArtifactKind, f64)],
    seed: u64,
) -> Result<Vec<CatalogEntry>> {
    suite
        .par_iter()
        .map(|&(kind, magnitude)| {
            let case = generate_case(scenario, kind, magnitude, seed)?;
            let recon = case.naive_reconstruction(false)?;
            Ok(CatalogEntry {
                kind,
                magnitude,
                metrics: measure(&case, &recon)?,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str =
    "kind,magnitude,rmse,centroid_dispersion_px,doubling_score,height_slope,radius_slope";

/// The catalogue as CSV and as an aligned text table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogReport {
    pub csv: String,
    pub table: String,
}

pub fn catalog_report(entries: &[CatalogEntry]) -> CatalogReport {
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut table = format!(
        "{:<20} {:>9} {:>12} {:>12} {:>10} {:>12} {:>12}\n",
        "kind", "magnitude", "rmse", "dispersion", "doubling", "height_slope", "radius_slope"
    );
    for e in entries {
        let m = &e.metrics;
        let _ = writeln!(
            csv,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            e.kind, e.magnitude, m.rmse, m.centroid_dispersion_px, m.doubling_score, m.height_slope, m.radius_slope
        );
        let _ = writeln!(
            table,
            "{:<20} {:>9.3} {:>12.4e} {:>12.4} {:>10.4} {:>12.4} {:>12.4}",
            e.kind.as_str(),
            e.magnitude,
            m.rmse,
            m.centroid_dispersion_px,
            m.doubling_score,
            m.height_slope,
            m.radius_slope
        );
    }
    CatalogReport { csv, table }
}
