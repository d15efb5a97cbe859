use optcalib::catalog::{
    catalog_report, default_suite, generate_case, measure, run_catalog, ArtifactKind, BeadScenario,
    CSV_HEADER,
};

#[test]
fn default_suite_has_four_populated_rows() {
    let entries = run_catalog(&BeadScenario::default(), &default_suite(), 1).unwrap();
    assert_eq!(entries.len(), 4);
    let kinds: Vec<_> = entries.iter().map(|e| e.kind).collect();
    assert_eq!(
        kinds,
        [
            ArtifactKind::CorOffset,
            ArtifactKind::AngleJitter,
            ArtifactKind::AxisTiltPsi1,
            ArtifactKind::DetectorTiltPsi2
        ]
    );
    for e in &entries {
        let m = &e.metrics;
        assert!(m.rmse > 0.0 && m.centroid_dispersion_px >= 0.0 && m.doubling_score >= 0.0);
        assert!(m.height_slope.is_finite() && m.radius_slope.is_finite());
    }
    let report = catalog_report(&entries);
    let lines: Vec<_> = report.csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[3].starts_with("axis_tilt_psi1,5.000000e0,"));
    assert_eq!(report.table.lines().count(), 5);
}

#[test]
fn repeated_runs_give_identical_csv() {
    let suite = [(ArtifactKind::AngleJitter, 0.5), (ArtifactKind::Combined, 2.0)];
    let a = catalog_report(&run_catalog(&BeadScenario::default(), &suite, 7).unwrap()).csv;
    let b = catalog_report(&run_catalog(&BeadScenario::default(), &suite, 7).unwrap()).csv;
    assert_eq!(a, b);
    let c = catalog_report(&run_catalog(&BeadScenario::default(), &suite, 8).unwrap()).csv;
    assert_ne!(a, c);
}

#[test]
fn axis_tilt_grows_with_height_and_cor_offset_does_not() {
    let s = BeadScenario::default();
    let slope = |kind, mag| {
        let case = generate_case(&s, kind, mag, 2).unwrap();
        measure(&case, &case.naive_reconstruction(false).unwrap()).unwrap().height_slope
    };
    let tilt = slope(ArtifactKind::AxisTiltPsi1, 6.0);
    let cor = slope(ArtifactKind::CorOffset, 2.5);
    assert!(tilt > 0.03, "tilt slope {tilt}");
    assert!(cor.abs() < 0.01, "cor slope {cor}");
}

#[test]
fn empty_suite_gives_header_only() {
    let entries = run_catalog(&BeadScenario::default(), &[], 1).unwrap();
    assert!(entries.is_empty());
    assert_eq!(catalog_report(&entries).csv, format!("{CSV_HEADER}\n"));
}
