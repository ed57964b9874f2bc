use rangeloc::geometry::{InputVector, RelativeState, SystemVariant};
use rangeloc::observability::{
    check_intuitive_conditions_b, det_mb, find_unobservable_configuration,
    numeric_observability_rank, presets, scan_observability_grid, SearchBounds, SearchOptions,
    DEFAULT_THRESHOLD,
};

fn found() -> (RelativeState, InputVector, f64) {
    let cfg =
        find_unobservable_configuration(1, &SearchBounds::default(), &SearchOptions::default())
            .expect("search should succeed");
    (cfg.state, cfg.input, cfg.measure)
}

#[test]
fn search_returns_an_unintuitive_singular_configuration() {
    let (x, u, measure) = found();
    assert!(measure < 1e-6);
    assert!(det_mb(&x, &u).abs() < 1e-6);
    let c = check_intuitive_conditions_b(&x, &u, 0.1);
    assert!(c.all(), "{c:?}");
    assert!(x.v1.norm() <= 2.0 && x.v2.norm() <= 2.0 && x.p.norm() <= 10.0);
    assert!(numeric_observability_rank(&x, &u, SystemVariant::B, 2).unwrap() < 7);
}

#[test]
fn search_is_deterministic() {
    let a = find_unobservable_configuration(4, &SearchBounds::default(), &SearchOptions::default());
    let b = find_unobservable_configuration(4, &SearchBounds::default(), &SearchOptions::default());
    assert_eq!(a, b);
}

#[test]
fn grid_around_unintuitive_case_is_mixed() {
    let (x, u, _) = found();
    let range = |c: f64| (c - 5.0, c + 5.0);
    let scan = scan_observability_grid(&x, &u, range(x.p.x), range(x.p.y), 101).unwrap();
    let frac = scan.unobservable_fraction(1e-3);
    assert!(scan.zero_crossing_fraction() > 0.0);
    assert!(
        frac < 0.5,
        "unobservable points should be the minority, got {frac}"
    );
}

#[test]
fn zero_set_of_unintuitive_case_has_no_area() {
    let (x, u, _) = found();
    let range = |c: f64| (c - 5.0, c + 5.0);
    let coarse = scan_observability_grid(&x, &u, range(x.p.x), range(x.p.y), 51).unwrap();
    let fine = scan_observability_grid(&x, &u, range(x.p.x), range(x.p.y), 401).unwrap();
    let (fc, ff) = (
        coarse.zero_crossing_fraction(),
        fine.zero_crossing_fraction(),
    );
    assert!(fc > 0.0);
    // a curve crosses a fraction of cells proportional to the cell size
    assert!(ff < 0.25 * fc, "coarse {fc}, fine {ff}");
}

#[test]
fn static_host_map_is_fully_unobservable() {
    let (x, u) = presets::host_static();
    let scan = scan_observability_grid(&x, &u, (-5.0, 5.0), (-5.0, 5.0), 41).unwrap();
    assert_eq!(scan.unobservable_fraction(DEFAULT_THRESHOLD), 1.0);
    let (x, u) = presets::parallel_velocities();
    let scan = scan_observability_grid(&x, &u, (-5.0, 5.0), (-5.0, 5.0), 41).unwrap();
    assert_eq!(scan.unobservable_fraction(DEFAULT_THRESHOLD), 1.0);
}

#[test]
fn host_acceleration_makes_maps_partially_observable() {
    for preset in [presets::host_static(), presets::parallel_velocities()] {
        let (x, u) = presets::with_host_acceleration(preset);
        let scan = scan_observability_grid(&x, &u, (-5.0, 5.0), (-5.0, 5.0), 41).unwrap();
        let frac = scan.unobservable_fraction(DEFAULT_THRESHOLD);
        assert!(frac > 0.0 && frac < 1.0, "fraction {frac}");
    }
}
