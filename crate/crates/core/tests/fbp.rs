use std::f64::consts::{FRAC_PI_2, TAU};

use optcalib::catalog::{generate_case, ArtifactKind, BeadScenario};
use optcalib::fbp::{estimate_cor_shift_stack, fbp_slice, fbp_stack, Sinogram2D};
use optcalib::metrics::{fov_mask, render};
use optcalib::recon::{solve_volume, SolverConfig};

fn uniform_angles(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * TAU / n as f64).collect()
}

fn disk_sinogram(n: usize, cols: usize, r: f64, c: [f64; 2]) -> Sinogram2D {
    let angles = uniform_angles(n);
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

fn coord(i: usize, n: usize) -> f64 {
    i as f64 - (n as f64 - 1.0) * 0.5
}

#[test]
fn disk_reconstruction_correlates_with_truth() {
    let n = 64;
    let (r, c) = (14.0, [5.0, -3.0]);
    let img = fbp_slice(&disk_sinogram(180, 96, r, c), n, n, 1.0, 0.0).unwrap();
    let truth: Vec<f64> = (0..n * n)
        .map(|k| {
            let (x, y) = (coord(k % n, n) - c[0], coord(k / n, n) - c[1]);
            f64::from(x * x + y * y < r * r)
        })
        .collect();
    let rho = correlation(&img, &truth);
    assert!(rho > 0.95, "correlation {rho}");
    let inside = img[(n / 2) * n + n / 2 + 5];
    assert!((inside - 1.0).abs() < 0.1, "interior value {inside}");
}

#[test]
fn reconstruction_is_linear() {
    let a = disk_sinogram(90, 64, 10.0, [4.0, 2.0]);
    let b = disk_sinogram(90, 64, 6.0, [-8.0, 1.0]);
    let mixed = Sinogram2D::new(
        a.data.iter().zip(&b.data).map(|(x, y)| 2.5 * x - y).collect(),
        a.angles.clone(),
        64,
        1.0,
    )
    .unwrap();
    let fa = fbp_slice(&a, 48, 48, 1.0, 0.0).unwrap();
    let fb = fbp_slice(&b, 48, 48, 1.0, 0.0).unwrap();
    let fm = fbp_slice(&mixed, 48, 48, 1.0, 0.0).unwrap();
    for ((m, x), y) in fm.iter().zip(&fa).zip(&fb) {
        assert!((m - (2.5 * x - y)).abs() < 1e-9);
    }
}

#[test]
fn quarter_turn_of_angles_rotates_the_image() {
    let (p, n) = (180, 48);
    let s = disk_sinogram(p, 64, 6.0, [9.0, -4.0]);
    let lag = p / 4;
    let turned = Sinogram2D::new(
        (0..p).flat_map(|k| s.row((k + lag) % p).to_vec()).collect(),
        s.angles.clone(),
        64,
        1.0,
    )
    .unwrap();
    assert!((s.angles[lag] - FRAC_PI_2).abs() < 1e-12);
    let f = fbp_slice(&s, n, n, 1.0, 0.0).unwrap();
    let g = fbp_slice(&turned, n, n, 1.0, 0.0).unwrap();
    let expected: Vec<f64> = (0..n * n)
        .map(|k| {
            let (ix, iy) = (k % n, k / n);
            f[(n - 1 - ix) * n + iy]
        })
        .collect();
    let rho = correlation(&g, &expected);
    assert!(rho > 0.99, "correlation {rho}");
}

#[test]
fn cor_offset_is_recovered_from_a_bead_stack() {
    let case = generate_case(&BeadScenario::default(), ArtifactKind::CorOffset, 2.5, 3).unwrap();
    let est = estimate_cor_shift_stack(&case.measurements, &case.nominal.phi).unwrap();
    assert!((est - 2.5).abs() < 0.25, "estimate {est}");
    let corrected = fbp_stack(&case.measurements, &case.nominal.phi, &case.scenario.volume_grid().unwrap(), true).unwrap();
    assert_eq!(corrected.shift_px, est);
}

#[test]
fn matches_iterative_reconstruction_at_the_true_geometry() {
    let scenario = BeadScenario::default();
    let case = generate_case(&scenario, ArtifactKind::CorOffset, 0.0, 2).unwrap();
    let projector = scenario.projector().unwrap();
    let cfg = SolverConfig {
        max_iters: 40,
        ..Default::default()
    };
    let iterative = solve_volume(&projector, &case.measurements, &case.nominal, None, &cfg).unwrap();
    let iterative = render(&iterative.volume, &scenario.blob().unwrap());
    let fbp = case.naive_reconstruction(false).unwrap();
    let mask = fov_mask(&fbp.grid);
    let pick = |v: &[f64]| v.iter().zip(&mask).filter(|(_, m)| **m).map(|(x, _)| *x).collect::<Vec<_>>();
    let rho = correlation(&pick(&fbp.data), &pick(&iterative.data));
    assert!(rho > 0.9, "correlation {rho}");
}
