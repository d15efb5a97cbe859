//! Run configuration shared by every pipeline stage.
//!
//! Files are TOML or JSON (chosen by extension, TOML otherwise) and unknown
//! keys are rejected. User-facing error magnitudes are in degrees and
//! detector pixels; the calibration section keeps the solver's own units
//! (radians, pixels).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basis::{BlobParams, BlobProfile};
use crate::calibration::{CalibConfig, FreeParams, ShiftMode};
use crate::catalog::{default_suite, ArtifactKind, BeadScenario};
use crate::error::{Error, Result};
use crate::geometry::{DetectorGrid, GeometryParams, VolumeGrid};
use crate::projector::{Projector, Volume};
use crate::recon::SolverConfig;
use crate::simulator::{make_bead_phantom, make_helix_phantom, ErrorModel, HelixSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSection {
    pub dims: [usize; 3],
    pub spacing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    /// `(columns, rows)`.
    pub dims: [usize; 2],
    pub pixel_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomConfig {
    Beads {
        count: usize,
        radius: f64,
    },
    Helix {
        turns: f64,
        helix_radius: f64,
        tube_radius: f64,
        length: f64,
        axis_tilt_deg: f64,
    },
}

/// Mechanical errors injected by `simulate`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorSection {
    /// Step size of the accumulated angle error.
    pub angle_walk_deg: f64,
    pub shift_walk_px: f64,
    pub cor_offset_px: [f64; 2],
    pub psi1_deg: f64,
    pub psi2_deg: f64,
    /// Noise standard deviation relative to the peak signal.
    pub noise: f64,
}

impl Default for ErrorSection {
    fn default() -> Self {
        ErrorSection {
            angle_walk_deg: 0.0,
            shift_walk_px: 0.0,
            cor_offset_px: [0.0, 0.0],
            psi1_deg: 0.0,
            psi2_deg: 0.0,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogItem {
    pub kind: ArtifactKind,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatalogSection {
    pub suite: Vec<CatalogItem>,
}

impl Default for CatalogSection {
    fn default() -> Self {
        CatalogSection {
            suite: default_suite()
                .into_iter()
                .map(|(kind, magnitude)| CatalogItem { kind, magnitude })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub output_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            output_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub volume: VolumeSection,
    pub detector: DetectorSection,
    pub projections: usize,
    /// Defaults to the standard blob for the volume spacing.
    pub blob: Option<BlobParams>,
    pub phantom: PhantomConfig,
    pub errors: ErrorSection,
    pub solver: SolverConfig,
    pub calibration: CalibConfig,
    pub catalog: CatalogSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    /// The miscalibrated bead case: accumulated angle errors and an offset
    /// rotation centre.
    fn default() -> Self {
        let s = BeadScenario::default();
        RunConfig {
            seed: 1,
            volume: VolumeSection {
                dims: s.volume,
                spacing: s.voxel_size,
            },
            detector: DetectorSection {
                dims: s.detector,
                pixel_size: s.pixel_size,
            },
            projections: s.projections,
            blob: None,
            phantom: PhantomConfig::Beads {
                count: s.beads,
                radius: s.bead_radius,
            },
            errors: ErrorSection {
                angle_walk_deg: 0.25,
                cor_offset_px: [2.5, 0.0],
                ..Default::default()
            },
            solver: SolverConfig::default(),
            calibration: CalibConfig::default(),
            catalog: CatalogSection::default(),
            paths: PathsSection::default(),
        }
    }
}

/// A phantom and whatever ground truth it carries.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub centers: Vec<[f64; 3]>,
    pub bead_radius: Option<f64>,
}

impl RunConfig {
    /// Tilted-helix case: a fine acquisition calibrated at half resolution
    /// for the detector in-plane tilt, the axis tilt and a global shift.
    pub fn helix(psi2_deg: f64) -> Self {
        RunConfig {
            volume: VolumeSection {
                dims: [64, 64, 64],
                spacing: 1.0,
            },
            detector: DetectorSection {
                dims: [128, 128],
                pixel_size: 0.5,
            },
            projections: 36,
            phantom: PhantomConfig::Helix {
                turns: 2.0,
                helix_radius: 14.0,
                tube_radius: 3.0,
                length: 44.0,
                axis_tilt_deg: 0.0,
            },
            errors: ErrorSection {
                psi2_deg,
                ..Default::default()
            },
            calibration: CalibConfig {
                free: FreeParams {
                    angles: false,
                    psi1: true,
                    psi2: true,
                    shift: ShiftMode::Global,
                },
                coarse_detector: Some(64),
                final_solver: SolverConfig {
                    max_iters: 20,
                    ..Default::default()
                },
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Reads TOML or JSON (by extension) and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: RunConfig = if is_json {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        self.volume_grid().map_err(|e| Error::Config(format!("volume: {e}")))?;
        let det = self.detector_grid().map_err(|e| Error::Config(format!("detector: {e}")))?;
        if self.projections < 2 {
            return bad(format!("projections = {} must be >= 2", self.projections));
        }
        self.blob().map_err(|e| Error::Config(format!("blob: {e}")))?;
        match self.phantom {
            PhantomConfig::Beads { count, radius } => {
                if count == 0 || !(radius > 0.0) {
                    return bad("phantom needs count >= 1 and radius > 0".into());
                }
            }
            PhantomConfig::Helix {
                tube_radius, length, ..
            } => {
                if !(tube_radius > 0.0 && length > 0.0) {
                    return bad("helix needs tube_radius > 0 and length > 0".into());
                }
            }
        }
        self.error_model().validate().map_err(|e| Error::Config(format!("errors: {e}")))?;
        self.solver.validate()?;
        self.calibration.validate()?;
        self.calibration.coarse_factor(&det)?;
        for item in &self.catalog.suite {
            item.kind
                .validate(item.magnitude)
                .map_err(|e| Error::Config(format!("catalog: {e}")))?;
        }
        Ok(())
    }

    pub fn volume_grid(&self) -> Result<VolumeGrid> {
        VolumeGrid::new(self.volume.dims, self.volume.spacing)
    }

    pub fn detector_grid(&self) -> Result<DetectorGrid> {
        DetectorGrid::new(self.detector.dims, self.detector.pixel_size)
    }

    pub fn blob_params(&self) -> BlobParams {
        self.blob.unwrap_or_else(|| BlobParams::default_for_spacing(self.volume.spacing))
    }

    pub fn blob(&self) -> Result<BlobProfile> {
        BlobProfile::new(self.blob_params())
    }

    pub fn projector(&self) -> Result<Projector> {
        Ok(Projector::new(self.volume_grid()?, self.detector_grid()?, self.blob()?))
    }

    pub fn nominal_geometry(&self) -> GeometryParams {
        GeometryParams::uniform(self.projections)
    }

    /// Error model in solver units, seeded with `seed`.
    pub fn error_model(&self) -> ErrorModel {
        let e = &self.errors;
        ErrorModel {
            angle_walk_sigma: e.angle_walk_deg.to_radians(),
            shift_walk_sigma: e.shift_walk_px,
            static_cor_offset: e.cor_offset_px,
            psi1_true: e.psi1_deg.to_radians(),
            psi2_true: e.psi2_deg.to_radians(),
            noise_sigma: e.noise,
            seed: self.seed,
        }
    }

    pub fn scenario(&self) -> BeadScenario {
        let (beads, bead_radius) = match self.phantom {
            PhantomConfig::Beads { count, radius } => (count, radius),
            PhantomConfig::Helix { .. } => {
                let d = BeadScenario::default();
                (d.beads, d.bead_radius)
            }
        };
        BeadScenario {
            volume: self.volume.dims,
            voxel_size: self.volume.spacing,
            detector: self.detector.dims,
            pixel_size: self.detector.pixel_size,
            projections: self.projections,
            beads,
            bead_radius,
        }
    }

    pub fn phantom(&self) -> Result<Phantom> {
        let grid = self.volume_grid()?;
        Ok(match self.phantom {
            PhantomConfig::Beads { count, radius } => {
                let p = make_bead_phantom(grid, count, radius, self.seed)?;
                Phantom {
                    volume: p.volume,
                    centers: p.centers,
                    bead_radius: Some(p.radius),
                }
            }
            PhantomConfig::Helix {
                turns,
                helix_radius,
                tube_radius,
                length,
                axis_tilt_deg,
            } => Phantom {
                volume: make_helix_phantom(
                    grid,
                    &HelixSpec {
                        turns,
                        helix_radius,
                        tube_radius,
                        length,
                        axis_tilt: axis_tilt_deg.to_radians(),
                    },
                    self.seed,
                )?,
                centers: Vec::new(),
                bead_radius: None,
            },
        })
    }
}
