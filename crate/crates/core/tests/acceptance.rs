use std::f64::consts::TAU;
use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use optcalib::calibration::{
    calibrate, param_gradient, run_multiscale, CalibConfig, CalibrationReport, FreeParams, OptimizerConfig,
    ShiftMode,
};
use optcalib::catalog::{
    catalog_report, default_suite, generate_case, measure, run_catalog, ArtifactCase, ArtifactKind,
    ArtifactMetrics, BeadScenario,
};
use optcalib::config::RunConfig;
use optcalib::fbp::{estimate_cor_shift_stack, fbp_slice, fbp_stack, Sinogram2D};
use optcalib::io::write_geometry;
use optcalib::metrics::render;
use optcalib::recon::{solve_volume, SolverConfig};
use optcalib::simulator::{make_bead_phantom, perturb_geometry, simulate_measurements};
use optcalib::projector::dot;
use optcalib::{
    BlobParams, BlobProfile, DetectorGrid, GeometryParams, ProjectionStack, Projector, Shift, Volume,
    VolumeGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The heavy checks share one CPU; running them one at a time keeps the
/// runtime measurements meaningful.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{verdict} {name}: {}", detail.as_ref());
    pass
}

fn finish(results: &[bool]) {
    assert!(results.iter().all(|&p| p), "see the FAIL lines above");
}

fn random_volume(grid: VolumeGrid, rng: &mut ChaCha8Rng) -> Volume {
    Volume::from_vec(grid, (0..grid.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_stack(det: DetectorGrid, count: usize, rng: &mut ChaCha8Rng) -> ProjectionStack {
    let n = det.pixels() * count;
    ProjectionStack::from_vec(det, count, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn projector_adjoint_identity() {
    let _guard = serial();
    let started = Instant::now();
    let scenario = BeadScenario::default();
    let projector = scenario.projector().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let phi: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..TAU)).collect();
        let g = GeometryParams::new(
            phi,
            rng.gen_range(-0.1..0.1),
            rng.gen_range(-0.1..0.1),
            Shift::Global([rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]),
        )
        .unwrap();
        let c = random_volume(projector.volume_grid(), &mut rng);
        let b = random_stack(projector.detector(), g.len(), &mut rng);
        let lhs = dot(&projector.forward(&c, &g).unwrap().data, &b.data);
        let rhs = dot(&c.data, &projector.adjoint(&b, &g).unwrap().data);
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    let elapsed = started.elapsed();
    finish(&[
        report("adjoint dot-product identity", worst < 1e-5, format!("worst relative error {worst:.2e} (limit 1e-5)")),
        report("adjoint runtime", elapsed < Duration::from_secs(60), format!("{elapsed:.1?} (limit 1 min)")),
    ]);
}

/// Fourth-order central difference of every detector image along one axis.
fn detector_derivative(img: &[f64], cols: usize, rows: usize, along_rows: bool, spacing: f64) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    let at = |r: usize, j: usize| img[r * cols + j];
    for r in 0..rows {
        for j in 0..cols {
            let (pos, len) = if along_rows { (r, rows) } else { (j, cols) };
            if pos < 2 || pos + 2 >= len {
                continue;
            }
            let f = |o: isize| {
                let p = (pos as isize + o) as usize;
                if along_rows {
                    at(p, j)
                } else {
                    at(r, p)
                }
            };
            out[r * cols + j] = (-f(2) + 8.0 * f(1) - 8.0 * f(-1) + f(-2)) / (12.0 * spacing);
        }
    }
    out
}

#[test]
fn geometry_gradient_matches_translation_oracle() {
    let _guard = serial();
    let started = Instant::now();
    // A fine detector keeps the image-space derivative accurate.
    let projector = Projector::new(
        VolumeGrid::cube(16, 1.0).unwrap(),
        DetectorGrid::square(192, 0.125).unwrap(),
        BlobProfile::new(BlobParams::default_for_spacing(1.0)).unwrap(),
    );
    let c = make_bead_phantom(projector.volume_grid(), 4, 1.5, 9).unwrap().volume;
    let nominal = GeometryParams::uniform(12);
    let mut truth = nominal.clone();
    truth.shift = Shift::Global([0.3, -0.2]);
    let b = projector.forward(&c, &truth).unwrap();
    let free = FreeParams {
        angles: false,
        psi1: false,
        psi2: false,
        shift: ShiftMode::Global,
    };
    let fd = param_gradient(&projector, &c, &nominal, &b, &free, &OptimizerConfig::default()).unwrap();
    let hc = projector.forward(&c, &nominal).unwrap();
    let det = projector.detector();
    let (cols, rows) = (det.cols(), det.rows());
    // Shifts are in pixels: a unit shift moves the image by one pixel.
    let mut oracle = [0.0; 2];
    for i in 0..hc.count {
        let residual: Vec<f64> = hc.projection(i).iter().zip(b.projection(i)).map(|(x, y)| x - y).collect();
        for (axis, along_rows) in [(0, false), (1, true)] {
            let d = detector_derivative(hc.projection(i), cols, rows, along_rows, 1.0);
            oracle[axis] -= dot(&residual, &d);
        }
    }
    let rel = (0..2).map(|k| (fd[k] - oracle[k]).abs() / oracle[k].abs()).fold(0.0, f64::max);

    let scenario = BeadScenario::default();
    let p = scenario.projector().unwrap();
    let phantom = make_bead_phantom(p.volume_grid(), scenario.beads, scenario.bead_radius, 1).unwrap();
    let cfg = RunConfig::default();
    let g_true = perturb_geometry(&cfg.nominal_geometry(), &cfg.error_model(), &p.detector()).unwrap();
    let b_true = p.forward(&phantom.volume, &g_true).unwrap();
    let all = FreeParams {
        shift: ShiftMode::PerProjection,
        ..FreeParams::default()
    };
    let grad = param_gradient(&p, &phantom.volume, &g_true, &b_true, &all, &OptimizerConfig::default()).unwrap();
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let limit = 1e-6 * b_true.norm_sq();
    let elapsed = started.elapsed();
    finish(&[
        report(
            "shift gradient against the translation derivative",
            rel < 1e-3,
            format!("relative error {rel:.2e} (limit 1e-3); fd {:.6e} {:.6e}, oracle {:.6e} {:.6e}", fd[0], fd[1], oracle[0], oracle[1]),
        ),
        report(
            "gradient vanishes at the generating geometry",
            norm < limit,
            format!("norm {norm:.2e} (limit {limit:.2e})"),
        ),
        report("gradient runtime", elapsed < Duration::from_secs(60), format!("{elapsed:.1?} (limit 1 min)")),
    ]);
}

/// The default miscalibrated bead acquisition and its calibration.
struct BeadRun {
    case: ArtifactCase,
    projector: Projector,
    blob: BlobProfile,
    config: CalibConfig,
    report: CalibrationReport,
    elapsed: Duration,
}

fn bead_calibration(outer: usize, tolerance: Option<f64>) -> BeadRun {
    let cfg = RunConfig::default();
    let scenario = cfg.scenario();
    let projector = cfg.projector().unwrap();
    let blob = cfg.blob().unwrap();
    let phantom = cfg.phantom().unwrap();
    let nominal = cfg.nominal_geometry();
    let truth = perturb_geometry(&nominal, &cfg.error_model(), &projector.detector()).unwrap();
    let b = simulate_measurements(&projector, &phantom.volume, &truth, cfg.errors.noise, cfg.seed).unwrap();
    let base = generate_case(&scenario, ArtifactKind::CorOffset, 0.0, cfg.seed).unwrap();
    assert_eq!(base.phantom.centers, phantom.centers);
    let case = ArtifactCase {
        truth,
        measurements: b,
        ..base
    };
    let mut config = CalibConfig {
        max_outer: outer,
        ..cfg.calibration
    };
    if let Some(tol) = tolerance {
        config.angle_tolerance = tol;
        config.shift_tolerance = tol;
    }
    let started = Instant::now();
    let report = calibrate(&projector, &case.measurements, &nominal, &config).unwrap();
    let elapsed = started.elapsed();
    BeadRun {
        case,
        projector,
        blob,
        config,
        report,
        elapsed,
    }
}

/// The calibration under the default settings with a runtime budget.
fn bead_run() -> &'static BeadRun {
    static RUN: OnceLock<BeadRun> = OnceLock::new();
    RUN.get_or_init(|| bead_calibration(BEAD_OUTER_ITERATIONS, None))
}

/// The calibration run to convergence.
fn converged_bead_run() -> &'static BeadRun {
    static RUN: OnceLock<BeadRun> = OnceLock::new();
    RUN.get_or_init(|| bead_calibration(CONVERGED_OUTER_ITERATIONS, Some(CONVERGED_TOLERANCE)))
}

const BEAD_OUTER_ITERATIONS: usize = 8;
const CONVERGED_OUTER_ITERATIONS: usize = 45;
const CONVERGED_TOLERANCE: f64 = 1e-7;

#[test]
fn calibration_cost_is_monotone_and_drops() {
    let _guard = serial();
    let run = bead_run();
    let costs: Vec<f64> = run.report.costs.iter().map(|r| r.cost).collect();
    let rises = costs.windows(2).filter(|w| w[1] > w[0]).count();
    let uncalibrated = solve_volume(
        &run.projector,
        &run.case.measurements,
        &run.case.nominal,
        None,
        &run.config.final_solver,
    )
    .unwrap()
    .final_cost();
    let ratio = run.report.final_cost() / uncalibrated;
    finish(&[
        report(
            "calibration cost non-increasing at every half-step",
            rises == 0,
            format!("{rises} increases over {} records", costs.len()),
        ),
        report(
            "calibrated cost below 20% of the uncalibrated reconstruction",
            ratio < 0.2,
            format!(
                "ratio {ratio:.3e} ({:.4e} vs {uncalibrated:.4e})",
                run.report.final_cost()
            ),
        ),
        report(
            "bead calibration runtime",
            run.elapsed < Duration::from_secs(600),
            format!("{:.1?} for {} outer iterations (limit 10 min)", run.elapsed, run.report.outer_iterations),
        ),
    ]);
}

/// Relative band around the clean baseline, with an absolute floor for
/// proxies that are zero there.
fn within_baseline(value: f64, baseline: f64, floor: f64) -> bool {
    (value - baseline).abs() <= (0.1 * baseline).max(floor)
}

fn describe(m: &ArtifactMetrics) -> String {
    format!(
        "rmse {:.4e}, dispersion {:.4}, doubling {:.4}",
        m.rmse, m.centroid_dispersion_px, m.doubling_score
    )
}

#[test]
fn calibration_beats_shift_correction_and_removes_artifacts() {
    let _guard = serial();
    let run = converged_bead_run();
    let case = &run.case;
    let grid = run.projector.volume_grid();
    let fbp = |correct| fbp_stack(&case.measurements, &case.nominal.phi, &grid, correct).unwrap().volume;
    let iterative = |g: &GeometryParams| {
        let sol = solve_volume(&run.projector, &case.measurements, g, None, &run.config.final_solver).unwrap();
        render(&sol.volume, &run.blob)
    };
    let plain = measure(case, &fbp(false)).unwrap();
    let shifted = measure(case, &fbp(true)).unwrap();
    let calibrated = measure(case, &render(&run.report.volume, &run.blob)).unwrap();
    let known = measure(case, &iterative(&case.truth)).unwrap();
    let nominal = measure(case, &iterative(&case.nominal)).unwrap();
    let _ = writeln!(
        std::io::stderr(),
        "  no correction: {}\n  shift correction: {}\n  calibrated: {}\n  known geometry: {}\n  iterative, nominal geometry: {}",
        describe(&plain),
        describe(&shifted),
        describe(&calibrated),
        describe(&known),
        describe(&nominal)
    );
    let improvement = nominal.rmse / calibrated.rmse;
    finish(&[
        report(
            "rmse ordering: no correction > shift correction > calibrated",
            plain.rmse > shifted.rmse && shifted.rmse > calibrated.rmse,
            format!("{:.4e} > {:.4e} > {:.4e}", plain.rmse, shifted.rmse, calibrated.rmse),
        ),
        report(
            "calibrated rmse within 1.5x of the known-geometry reconstruction",
            calibrated.rmse <= 1.5 * known.rmse,
            format!("ratio {:.2}", calibrated.rmse / known.rmse),
        ),
        report(
            "bead dispersion back to the clean baseline",
            within_baseline(calibrated.centroid_dispersion_px, known.centroid_dispersion_px, 1e-3),
            format!("{:.4} vs {:.4}", calibrated.centroid_dispersion_px, known.centroid_dispersion_px),
        ),
        report(
            "peak doubling back to the clean baseline",
            within_baseline(calibrated.doubling_score, known.doubling_score, 1e-3),
            format!("{:.4} vs {:.4}", calibrated.doubling_score, known.doubling_score),
        ),
        report(
            "calibration improves the iterative rmse at least fivefold",
            improvement >= 5.0,
            format!("{improvement:.1}x"),
        ),
    ]);
}

#[test]
fn helix_detector_tilt_is_recovered() {
    let _guard = serial();
    let started = Instant::now();
    let mut results = Vec::new();
    for psi2 in [-4.0, -2.0, 2.0, 4.0] {
        let cfg = RunConfig::helix(psi2);
        let projector = cfg.projector().unwrap();
        let phantom = cfg.phantom().unwrap();
        let nominal = cfg.nominal_geometry();
        let truth = perturb_geometry(&nominal, &cfg.error_model(), &projector.detector()).unwrap();
        let b = simulate_measurements(&projector, &phantom.volume, &truth, cfg.errors.noise, cfg.seed).unwrap();
        let calib = CalibConfig {
            final_solver: SolverConfig {
                max_iters: 1,
                ..Default::default()
            },
            ..cfg.calibration
        };
        let result = run_multiscale(&projector, &b, &nominal, &calib).unwrap();
        let estimate = result.geometry.psi2.to_degrees();
        results.push(report(
            &format!("helix detector tilt {psi2:+.0} deg"),
            (estimate - psi2).abs() < 0.2,
            format!("recovered {estimate:+.4} deg at {}x{} px", b.detector.cols() / result.factor, b.detector.rows() / result.factor),
        ));
    }
    let elapsed = started.elapsed();
    results.push(report("helix runtime", elapsed < Duration::from_secs(1800), format!("{elapsed:.1?} (limit 30 min)")));
    finish(&results);
}

fn is_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] > w[0])
}

#[test]
fn catalog_separates_tilts_and_grows_with_magnitude() {
    let _guard = serial();
    let scenario = BeadScenario::default();
    let entries = run_catalog(&scenario, &default_suite(), 1).unwrap();
    let slope = |kind| entries.iter().find(|e| e.kind == kind).unwrap().metrics.height_slope;
    let cor = slope(ArtifactKind::CorOffset);
    const MARGIN: f64 = 0.01;
    let mut results = Vec::new();
    for kind in [ArtifactKind::AxisTiltPsi1, ArtifactKind::DetectorTiltPsi2] {
        let s = slope(kind);
        results.push(report(
            &format!("{kind} height slope exceeds the centre-offset slope"),
            s > cor + MARGIN,
            format!("{s:.4} vs {cor:.4} (margin {MARGIN})"),
        ));
    }
    for (kind, unit) in [
        (ArtifactKind::CorOffset, 1.0),
        (ArtifactKind::AngleJitter, 0.1),
        (ArtifactKind::AxisTiltPsi1, 2.0),
        (ArtifactKind::DetectorTiltPsi2, 2.0),
        (ArtifactKind::Combined, 1.0),
    ] {
        let suite: Vec<_> = [1.0, 2.0, 4.0].iter().map(|m| (kind, m * unit)).collect();
        let metrics: Vec<_> = run_catalog(&scenario, &suite, 1).unwrap().into_iter().map(|e| e.metrics).collect();
        let rmse: Vec<f64> = metrics.iter().map(|m| m.rmse).collect();
        let spread: Vec<f64> = metrics.iter().map(|m| m.centroid_dispersion_px).collect();
        results.push(report(
            &format!("{kind} metrics grow with magnitude"),
            is_increasing(&rmse) && is_increasing(&spread),
            format!("rmse {rmse:.5?}, dispersion {spread:.4?}"),
        ));
    }
    finish(&results);
}

fn disk_sinogram(n: usize, cols: usize, r: f64, c: [f64; 2]) -> Sinogram2D {
    let angles: Vec<f64> = (0..n).map(|i| i as f64 * TAU / n as f64).collect();
    let mut data = Vec::with_capacity(n * cols);
    for &phi in &angles {
        let centre = c[0] * phi.cos() - c[1] * phi.sin();
        for j in 0..cols {
            let xi = j as f64 - (cols as f64 - 1.0) * 0.5 - centre;
            data.push(if xi.abs() < r { 2.0 * (r * r - xi * xi).sqrt() } else { 0.0 });
        }
    }
    Sinogram2D::new(data, angles, cols, 1.0).unwrap()
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn filtered_backprojection_sanity() {
    let _guard = serial();
    let n = 64;
    let (r, c) = (14.0, [5.0, -3.0]);
    let img = fbp_slice(&disk_sinogram(180, 96, r, c), n, n, 1.0, 0.0).unwrap();
    let coord = |i: usize| i as f64 - (n as f64 - 1.0) * 0.5;
    let truth: Vec<f64> = (0..n * n)
        .map(|k| {
            let (x, y) = (coord(k % n) - c[0], coord(k / n) - c[1]);
            f64::from(x * x + y * y < r * r)
        })
        .collect();
    let rho = correlation(&img, &truth);
    let case = generate_case(&BeadScenario::default(), ArtifactKind::CorOffset, 2.5, 1).unwrap();
    let est = estimate_cor_shift_stack(&case.measurements, &case.nominal.phi).unwrap();
    finish(&[
        report("disk reconstruction correlation", rho > 0.95, format!("{rho:.4} (limit 0.95)")),
        report(
            "centre-of-rotation estimate",
            (est - 2.5).abs() < 0.25,
            format!("{est:.3} px for an injected 2.5 px"),
        ),
    ]);
}

/// Simulates and calibrates a small bead case, returning the geometry file
/// bytes and the catalog CSV.
fn pipeline_outputs(seed: u64) -> (Vec<u8>, String) {
    let mut cfg = RunConfig {
        seed,
        projections: 24,
        ..RunConfig::default()
    };
    cfg.volume.dims = [16, 16, 16];
    cfg.volume.spacing = 4.0;
    cfg.detector.dims = [32, 32];
    cfg.detector.pixel_size = 2.0;
    cfg.calibration.max_outer = 2;
    let projector = cfg.projector().unwrap();
    let phantom = cfg.phantom().unwrap();
    let nominal = cfg.nominal_geometry();
    let truth = perturb_geometry(&nominal, &cfg.error_model(), &projector.detector()).unwrap();
    let b = simulate_measurements(&projector, &phantom.volume, &truth, 0.01, seed).unwrap();
    let report = calibrate(&projector, &b, &nominal, &cfg.calibration).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("geometry.json");
    write_geometry(&path, &report.geometry, projector.detector().spacing).unwrap();
    let csv = catalog_report(&run_catalog(&cfg.scenario(), &default_suite(), seed).unwrap()).csv;
    (std::fs::read(&path).unwrap(), csv)
}

#[test]
fn equal_seeds_reproduce_outputs_exactly() {
    let _guard = serial();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let (a, b, c) = pool.install(|| (pipeline_outputs(4), pipeline_outputs(4), pipeline_outputs(5)));
    finish(&[
        report("geometry file byte-identical for equal seeds", a.0 == b.0, format!("{} bytes", a.0.len())),
        report("catalog csv byte-identical for equal seeds", a.1 == b.1, format!("{} bytes", a.1.len())),
        report("different seeds give different outputs", a.0 != c.0 && a.1 != c.1, "compared seed 4 with seed 5"),
    ]);
}
