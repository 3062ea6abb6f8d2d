use ctvo_core::Polarity;
use ctvo_sim::io::{format_events, format_trajectory, parse_events, parse_trajectory, read_events, write_events};
use ctvo_sim::scenario::{presets, CameraConfig, LandmarkConfig};
use ctvo_sim::{generate_events, ScenarioConfig, SimError, TrajectoryKind};

fn single_landmark(trajectory: TrajectoryKind, point: [f64; 3], duration: f64) -> ScenarioConfig {
    ScenarioConfig {
        seed: 1,
        duration,
        trajectory,
        landmarks: LandmarkConfig { points: Some(vec![point]), ..Default::default() },
        camera: CameraConfig::default(),
        pixel_noise_sigma: 0.0,
        event_threshold_px: 1.0,
        outlier_track_fraction: 0.0,
        ground_truth_rate: 100.0,
        time_resolution: 1e-4,
    }
}

#[test]
fn stationary_camera_emits_nothing() {
    let mut cfg = presets::circle(3);
    cfg.trajectory = TrajectoryKind::Stationary;
    let out = generate_events(&cfg.build().unwrap()).unwrap();
    assert!(out.events.is_empty());
    assert_eq!(out.ground_truth.len(), 501);
}

#[test]
fn event_rate_follows_image_speed() {
    // Sideways motion past a point at fixed depth: u(t) = cx + f (X - v t) / Z,
    // so the image speed is f v / Z = 400 * 0.25 / 5 = 20 px/s.
    let cfg = single_landmark(TrajectoryKind::ConstantVelocity { velocity: [0.25, 0.0, 0.0], angular_velocity: [0.0; 3] }, [1.25, 0.0, 5.0], 5.0);
    let out = generate_events(&cfg.build().unwrap()).unwrap();
    let rate = out.events.len() as f64 / cfg.duration;
    assert!((rate - 20.0).abs() <= 1.0, "rate {rate}");
    for w in out.events.windows(2) {
        let dt = w[1].timestamp - w[0].timestamp;
        assert!((dt - 0.05).abs() < 1e-6, "gap {dt}");
        assert!(((w[1].pixel - w[0].pixel).norm() - 1.0).abs() < 1e-6);
    }
    // The image moves towards -u, the dominant axis.
    assert!(out.events.iter().all(|e| e.polarity == Polarity::Negative));
}

#[test]
fn same_seed_same_stream() {
    let cfg = presets::circle(11).build().unwrap();
    let a = generate_events(&cfg).unwrap();
    let b = generate_events(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(format_events(&a.events), format_events(&b.events));

    let other = presets::circle(12).build().unwrap();
    assert_ne!(generate_events(&other).unwrap().events, a.events);
}

#[test]
fn streams_are_sorted_and_inside_the_sensor() {
    let cfg = presets::figure_eight(2).build().unwrap();
    let out = generate_events(&cfg).unwrap();
    assert!(out.events.len() >= 50_000, "{} events", out.events.len());
    assert!(out.events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    let mut last = std::collections::BTreeMap::new();
    for e in &out.events {
        assert!(cfg.intrinsics.contains(&e.pixel));
        let id = e.track_id.unwrap();
        if let Some(prev) = last.insert(id, e.timestamp) {
            assert!(e.timestamp > prev);
        }
    }
}

#[test]
fn landmarks_stay_in_front() {
    for name in ["circle", "figure_eight", "decelerating_line", "ur5_sweep"] {
        let s = presets::by_name(name, 5).unwrap().build().unwrap();
        for i in 0..s.landmarks.len() {
            assert!(s.front_fraction(i) >= 0.9, "{name} landmark {i}");
        }
    }
}

#[test]
fn landmarks_behind_the_camera_give_an_empty_stream_error() {
    let cfg = single_landmark(TrajectoryKind::Stationary, [0.0, 0.0, -3.0], 1.0);
    assert!(matches!(generate_events(&cfg.build().unwrap()), Err(SimError::EmptyStream)));
}

#[test]
fn noise_has_the_configured_spread() {
    let mut cfg = presets::circle(4);
    cfg.pixel_noise_sigma = 0.0;
    let clean = generate_events(&cfg.build().unwrap()).unwrap();
    cfg.pixel_noise_sigma = 0.5;
    let noisy = generate_events(&cfg.build().unwrap()).unwrap();
    assert_eq!(clean.events.len(), noisy.events.len());
    let d: Vec<f64> = clean
        .events
        .iter()
        .zip(&noisy.events)
        .flat_map(|(a, b)| {
            assert_eq!(a.timestamp, b.timestamp);
            let r = b.pixel - a.pixel;
            [r.x, r.y]
        })
        .collect();
    let sd = (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt();
    assert!((sd - 0.5).abs() < 0.02, "sd {sd}");
}

#[test]
fn outlier_tracks_are_uniform_draws() {
    let mut cfg = presets::circle(9);
    cfg.outlier_track_fraction = 0.1;
    let out = generate_events(&cfg.build().unwrap()).unwrap();
    assert_eq!(out.outlier_tracks.len(), 3);
    for id in &out.outlier_tracks {
        let px: Vec<_> = out.events.iter().filter(|e| e.track_id == Some(*id)).map(|e| e.pixel).collect();
        let jumps = px.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>() / (px.len() - 1) as f64;
        assert!(jumps > 50.0, "track {id} mean jump {jumps}");
    }
}

#[test]
fn outliers_leave_inlier_pixels_alone() {
    let mut cfg = presets::circle(9);
    let clean = generate_events(&cfg.build().unwrap()).unwrap();
    cfg.outlier_track_fraction = 0.1;
    let dirty = generate_events(&cfg.build().unwrap()).unwrap();
    assert_eq!(clean.events.len(), dirty.events.len());
    let mut compared = 0;
    for (a, b) in clean.events.iter().zip(&dirty.events) {
        assert_eq!((a.timestamp, a.track_id), (b.timestamp, b.track_id));
        if !dirty.outlier_tracks.contains(&b.track_id.unwrap()) {
            assert_eq!(a.pixel, b.pixel);
            compared += 1;
        }
    }
    assert!(compared > clean.events.len() / 2);
}

#[test]
fn decelerating_stream_thins_out() {
    let cfg = presets::decelerating_line(7).build().unwrap();
    let out = generate_events(&cfg).unwrap();
    let first = out.events.iter().filter(|e| e.timestamp < 1.0).count();
    let last = out.events.iter().filter(|e| e.timestamp >= cfg.duration - 1.0).count();
    assert!(first as f64 > 5.0 * last as f64, "{first} vs {last}");
}

#[test]
fn event_file_round_trip() {
    let cfg = presets::circle(1).build().unwrap();
    let out = generate_events(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.txt");
    write_events(&path, &out.events).unwrap();
    assert_eq!(read_events(&path).unwrap(), out.events);

    let text = format_events(&out.events[..3]);
    let first = text.lines().next().unwrap();
    let cols: Vec<&str> = first.split(' ').collect();
    assert_eq!(cols.len(), 5);
    assert!(cols[0].split('.').nth(1).unwrap().len() >= 9);
}

#[test]
fn event_parser_reports_line_numbers() {
    let parsed = parse_events("# header\n0.1 10 20 1\n\n0.2 11 21 0 4\n").unwrap();
    assert_eq!(parsed.len(), 2);
    assert_eq!(parsed[0].track_id, None);
    assert_eq!(parsed[1].track_id, Some(4));
    assert_eq!(parsed[1].polarity, Polarity::Negative);

    match parse_events("0.1 10 20 1\n0.2 abc 20 1\n") {
        Err(SimError::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    assert!(parse_events("0.1 10 20 1 3 9\n").is_err());
}

#[test]
fn trajectory_file_round_trip() {
    let cfg = presets::figure_eight(1).build().unwrap();
    let gt = ctvo_sim::generate::sample_ground_truth(&cfg);
    let back = parse_trajectory(&format_trajectory(&gt)).unwrap();
    assert_eq!(back.len(), gt.len());
    for ((ta, a), (tb, b)) in gt.iter().zip(&back) {
        assert!((ta - tb).abs() < 1e-9);
        assert!(a.local_coordinates(b).unwrap().norm() < 1e-10);
    }
    assert!(parse_trajectory("0 1 2 3 0 0 0\n").is_err());
}

#[test]
fn scenario_toml_round_trip_and_field_errors() {
    let cfg = presets::ur5_sweep(21);
    assert_eq!(ScenarioConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);

    let base = "seed = 1\nduration = 2.0\n[trajectory]\nkind = \"circle\"\nradius = 0.5\nperiod = 2.0\n";
    assert!(ScenarioConfig::from_toml_str(base).is_ok());

    let err = ScenarioConfig::from_toml_str(&base.replace("duration = 2.0", "duration = -1.0")).unwrap_err();
    assert!(err.to_string().contains("duration"), "{err}");
    let err = ScenarioConfig::from_toml_str(&format!("pixel_noise_sigma = -0.1\n{base}")).unwrap_err();
    assert!(err.to_string().contains("pixel_noise_sigma"), "{err}");
    let err = ScenarioConfig::from_toml_str(&format!("frobnicate = 3\n{base}")).unwrap_err();
    assert!(err.to_string().contains("frobnicate"), "{err}");
    let err = ScenarioConfig::from_toml_str(&base.replace("radius = 0.5\n", "")).unwrap_err();
    assert!(err.to_string().contains("radius"), "{err}");
}
