use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use optcalib::calibration::{run_multiscale, CalibrationReport, StageTimings};
use optcalib::catalog::{catalog_report, measure_image, run_catalog};
use optcalib::config::RunConfig;
use optcalib::fbp::fbp_stack;
use optcalib::io::{
    read_geometry, read_ground_truth, read_stack, read_volume, write_geometry, write_ground_truth,
    write_report, write_stack, write_text, write_volume, GroundTruth, VolumeContent,
};
use optcalib::metrics::render;
use optcalib::recon::solve_volume;
use optcalib::simulator::{perturb_geometry, simulate_measurements};
use optcalib::{BlobProfile, Error, GeometryParams, ProjectionStack, Projector, Result, Volume};

#[derive(Debug, Parser)]
#[command(name = "optcalib", version, about = "Self-calibrating reconstruction for optical projection tomography")]
struct Cli {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; the OPTCALIB_THREADS variable is used when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a miscalibrated acquisition of the configured phantom.
    Simulate {
        /// Output directory (defaults to paths.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the geometry jointly with the volume.
    Calibrate {
        #[arg(long)]
        stack: PathBuf,
        /// Initial geometry (defaults to uniform angles, no tilt, no shift).
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Least-squares reconstruction for a fixed geometry.
    Reconstruct {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        geometry: Option<PathBuf>,
        /// Output volume payload.
        #[arg(long)]
        out: PathBuf,
    },
    /// Slice-wise filtered backprojection with the geometry's angles.
    Fbp {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        geometry: Option<PathBuf>,
        /// Estimate and remove a centre-of-rotation offset first.
        #[arg(long)]
        shift_correct: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, reconstruct and measure the artifact catalogue.
    Catalog {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure a reconstruction against the simulated ground truth.
    Report {
        /// Reconstruction (coefficients or image).
        #[arg(long)]
        volume: PathBuf,
        /// Ground-truth coefficients written by `simulate`.
        #[arg(long)]
        truth: PathBuf,
        /// Bead centres written by `simulate`.
        #[arg(long)]
        beads: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adjoint, gradient and fixed-point checks on a small problem.
    Selftest,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("OPTCALIB_THREADS") {
            Ok(v) => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("OPTCALIB_THREADS='{v}' is not a count")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("thread count must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_owned(),
        source,
    })
}

fn output_dir(out: &Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    create_dir(&dir)?;
    Ok(dir)
}

/// Geometry from a file, or the nominal one matching the stack.
fn initial_geometry(path: &Option<PathBuf>, stack: &ProjectionStack) -> Result<GeometryParams> {
    let g = match path {
        Some(p) => read_geometry(p)?.0,
        None => GeometryParams::uniform(stack.count),
    };
    if g.len() != stack.count {
        return Err(Error::Shape(format!("{} angles for {} projections", g.len(), stack.count)));
    }
    Ok(g)
}

/// Projector for the configured volume and the stack's detector.
fn stack_projector(cfg: &RunConfig, stack: &ProjectionStack) -> Result<Projector> {
    Ok(Projector::new(cfg.volume_grid()?, stack.detector, cfg.blob()?))
}

fn simulate(cfg: &RunConfig, out: &Option<PathBuf>) -> Result<()> {
    let dir = output_dir(out, cfg)?;
    let projector = cfg.projector()?;
    let phantom = cfg.phantom()?;
    let nominal = cfg.nominal_geometry();
    let truth = perturb_geometry(&nominal, &cfg.error_model(), &projector.detector())?;
    let b = simulate_measurements(&projector, &phantom.volume, &truth, cfg.errors.noise, cfg.seed)?;
    let pixel = projector.detector().spacing;
    write_stack(&dir.join("measurements.f32"), &b)?;
    write_geometry(&dir.join("nominal_geometry.json"), &nominal, pixel)?;
    write_geometry(&dir.join("true_geometry.json"), &truth, pixel)?;
    write_volume(
        &dir.join("phantom.f32"),
        &phantom.volume,
        VolumeContent::Coefficients,
        Some(cfg.blob_params()),
    )?;
    if let Some(radius) = phantom.bead_radius {
        write_ground_truth(
            &dir.join("ground_truth.json"),
            &GroundTruth {
                centers: phantom.centers,
                bead_radius: radius,
            },
        )?;
    }
    log::info!("wrote simulated acquisition to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryPoint {
    outer: usize,
    psi1_deg: f64,
    psi2_deg: f64,
    shift_px: [f64; 2],
    max_angle_change_rad: f64,
    max_shift_change_px: f64,
}

#[derive(Serialize)]
struct CalibrationSummary {
    outer_iterations: usize,
    converged: bool,
    line_search_failures: usize,
    coarse_factor: usize,
    final_cost: f64,
    psi1_deg: f64,
    psi2_deg: f64,
    trajectory: Vec<TrajectoryPoint>,
    timings: StageTimings,
}

fn cost_csv(report: &CalibrationReport) -> String {
    let mut csv = String::from("outer,stage,cost\n");
    for r in &report.costs {
        let stage = serde_json::to_value(r.stage).expect("stage serializes");
        let _ = writeln!(csv, "{},{},{:.9e}", r.outer, stage.as_str().unwrap_or(""), r.cost);
    }
    csv
}

fn calibrate_cmd(cfg: &RunConfig, stack: &Path, geometry: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<()> {
    let b = read_stack(stack)?;
    let g0 = initial_geometry(geometry, &b)?;
    let dir = output_dir(out, cfg)?;
    let projector = stack_projector(cfg, &b)?;
    let result = run_multiscale(&projector, &b, &g0, &cfg.calibration)?;
    let report = &result.report;
    let f = result.factor as f64;
    let summary = CalibrationSummary {
        outer_iterations: report.outer_iterations,
        converged: report.converged,
        line_search_failures: report.line_search_failures,
        coarse_factor: result.factor,
        final_cost: report.final_cost(),
        psi1_deg: result.geometry.psi1.to_degrees(),
        psi2_deg: result.geometry.psi2.to_degrees(),
        trajectory: report
            .trajectory
            .iter()
            .map(|s| TrajectoryPoint {
                outer: s.outer,
                psi1_deg: s.psi1.to_degrees(),
                psi2_deg: s.psi2.to_degrees(),
                shift_px: s.shift.map(|t| t * f),
                max_angle_change_rad: s.max_angle_change,
                max_shift_change_px: s.max_shift_change * f,
            })
            .collect(),
        timings: report.timings,
    };
    write_geometry(&dir.join("calibrated_geometry.json"), &result.geometry, b.detector.spacing)?;
    write_text(&dir.join("costs.csv"), &cost_csv(report))?;
    write_report(&dir.join("report.json"), &summary)?;
    write_volume(
        &dir.join("volume.f32"),
        &result.volume,
        VolumeContent::Coefficients,
        Some(projector.blob().params()),
    )?;
    println!(
        "calibrated in {} outer iterations (converged: {}), final cost {:.6e}, psi1 {:.4} deg, psi2 {:.4} deg",
        report.outer_iterations,
        report.converged,
        report.final_cost(),
        summary.psi1_deg,
        summary.psi2_deg
    );
    Ok(())
}

fn reconstruct_cmd(cfg: &RunConfig, stack: &Path, geometry: &Option<PathBuf>, out: &Path) -> Result<()> {
    let b = read_stack(stack)?;
    let g = initial_geometry(geometry, &b)?;
    let projector = stack_projector(cfg, &b)?;
    let sol = solve_volume(&projector, &b, &g, None, &cfg.solver)?;
    write_volume(out, &sol.volume, VolumeContent::Coefficients, Some(projector.blob().params()))?;
    println!(
        "{} iterations (converged: {}), final cost {:.6e}",
        sol.iterations,
        sol.converged,
        sol.final_cost()
    );
    Ok(())
}

fn fbp_cmd(cfg: &RunConfig, stack: &Path, geometry: &Option<PathBuf>, shift_correct: bool, out: &Path) -> Result<()> {
    let b = read_stack(stack)?;
    let g = initial_geometry(geometry, &b)?;
    let angles: Vec<f64> = g.phi.iter().map(|p| p.rem_euclid(std::f64::consts::TAU)).collect();
    let result = fbp_stack(&b, &angles, &cfg.volume_grid()?, shift_correct)?;
    write_volume(out, &result.volume, VolumeContent::Image, None)?;
    if shift_correct {
        println!("estimated centre-of-rotation offset {:.4} px", result.shift_px);
    }
    Ok(())
}

fn catalog_cmd(cfg: &RunConfig, out: &Option<PathBuf>) -> Result<()> {
    let dir = output_dir(out, cfg)?;
    let suite: Vec<_> = cfg.catalog.suite.iter().map(|i| (i.kind, i.magnitude)).collect();
    let entries = run_catalog(&cfg.scenario(), &suite, cfg.seed)?;
    let report = catalog_report(&entries);
    write_text(&dir.join("catalog.csv"), &report.csv)?;
    write_text(&dir.join("catalog.txt"), &report.table)?;
    print!("{}", report.table);
    Ok(())
}

/// Point samples of a volume file, rendering coefficients with their blob.
fn image_of(path: &Path) -> Result<Volume> {
    let (volume, header) = read_volume(path)?;
    match header.content {
        VolumeContent::Image => Ok(volume),
        VolumeContent::Coefficients => {
            let params = header.basis.ok_or_else(|| Error::Format {
                path: path.to_owned(),
                reason: "coefficient volume without a basis".into(),
            })?;
            Ok(render(&volume, &BlobProfile::new(params)?))
        }
    }
}

fn report_cmd(volume: &Path, truth: &Path, beads: &Path, out: &Option<PathBuf>) -> Result<()> {
    let recon = image_of(volume)?;
    let truth_img = image_of(truth)?;
    let gt = read_ground_truth(beads)?;
    let metrics = measure_image(&recon, &truth_img, None, &gt.centers, gt.bead_radius)?;
    let text = serde_json::to_string_pretty(&metrics)?;
    println!("{text}");
    if let Some(path) = out {
        write_report(path, &metrics)?;
    }
    Ok(())
}

fn selftest() -> Result<bool> {
    let mut ok = true;
    for check in optcalib::selftest::run()? {
        let status = if check.passed() { "PASS" } else { "FAIL" };
        ok &= check.passed();
        println!("{status} {}: {:.3e} (limit {:.1e})", check.name, check.value, check.threshold);
    }
    Ok(ok)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    configure_threads(cli.threads)?;
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate { out } => simulate(&cfg, out)?,
        Command::Calibrate { stack, geometry, out } => calibrate_cmd(&cfg, stack, geometry, out)?,
        Command::Reconstruct { stack, geometry, out } => reconstruct_cmd(&cfg, stack, geometry, out)?,
        Command::Fbp {
            stack,
            geometry,
            shift_correct,
            out,
        } => fbp_cmd(&cfg, stack, geometry, *shift_correct, out)?,
        Command::Catalog { out } => catalog_cmd(&cfg, out)?,
        Command::Report {
            volume,
            truth,
            beads,
            out,
        } => report_cmd(volume, truth, beads, out)?,
        Command::Selftest => {
            if !selftest()? {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("OPTCALIB_LOG")
        .init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
