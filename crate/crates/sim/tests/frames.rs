use std::collections::BTreeMap;

use ctvo_core::engine::SimAssistedInitializer;
use ctvo_sim::batch::{FrameObservation, MIN_FRAME_TRACKS};
use ctvo_sim::scenario::presets;
use ctvo_sim::{batch_events, frame_based_ba, generate_events, metrics_rpe_ate, Alignment, BaselineConfig, Batching, EventFrame, SimError, SimScenario};

fn oracle(s: &SimScenario) -> SimAssistedInitializer<f64> {
    let s = s.clone();
    SimAssistedInitializer::new(Box::new(move |t| s.pose(t)), 0.0, 0.0, 0)
}

/// Frames holding the exact projection of every visible landmark at `times`.
fn exact_frames(s: &SimScenario, times: &[f64]) -> Vec<EventFrame> {
    times
        .iter()
        .enumerate()
        .map(|(index, &t)| {
            let to_cam = s.pose(t).inverse();
            let observations: BTreeMap<u64, FrameObservation> = s
                .landmarks
                .iter()
                .enumerate()
                .filter_map(|(i, l)| {
                    let z = s.intrinsics.project_camera_point(&to_cam.transform_point(l)).ok()?;
                    s.intrinsics.contains(&z).then_some((i as u64, FrameObservation { pixel: z, count: 1, spread: 0.0 }))
                })
                .collect();
            EventFrame { index, start: t, end: t, timestamp: t, event_count: observations.len(), observations }
        })
        .collect()
}

#[test]
fn long_window_gives_one_frame() {
    let s = presets::circle(1).build().unwrap();
    let out = generate_events(&s).unwrap();
    let frames = batch_events(&out.events, Batching::FixedDuration(100.0));
    assert_eq!(frames.len(), 1);
    assert_eq!(frames[0].event_count, out.events.len());
    assert_eq!(frames[0].track_count(), 30);
}

#[test]
fn frames_average_their_events() {
    let s = presets::circle(2).build().unwrap();
    let out = generate_events(&s).unwrap();
    let frames = batch_events(&out.events, Batching::FixedDuration(0.1));
    assert_eq!(frames.iter().map(|f| f.event_count).sum::<usize>(), out.events.len());
    let f = &frames[3];
    let inside: Vec<_> = out.events.iter().filter(|e| e.timestamp >= f.start && e.timestamp < f.end).collect();
    assert_eq!(inside.len(), f.event_count);
    let mean_t = inside.iter().map(|e| e.timestamp).sum::<f64>() / inside.len() as f64;
    assert!((f.timestamp - mean_t).abs() < 1e-12);
    let (&id, obs) = f.observations.iter().next().unwrap();
    let px: Vec<_> = inside.iter().filter(|e| e.track_id == Some(id)).map(|e| e.pixel).collect();
    assert_eq!(obs.count, px.len());
    assert!((obs.pixel - px.iter().sum::<nalgebra::Vector2<f64>>() / px.len() as f64).norm() < 1e-9);
}

#[test]
fn deceleration_starves_trailing_fixed_duration_frames() {
    let s = presets::decelerating_line(7).build().unwrap();
    let out = generate_events(&s).unwrap();
    let frames = batch_events(&out.events, Batching::FixedDuration(0.1));
    let n = frames.len();
    assert!(frames[..5].iter().all(EventFrame::is_usable));
    let trailing = frames[n - 10..].iter().filter(|f| f.track_count() < MIN_FRAME_TRACKS).count();
    assert!(trailing >= 3, "{trailing} unusable trailing frames");
    assert!(!frames[n - 1].is_usable());
}

#[test]
fn fixed_count_frames_stretch_as_the_camera_slows() {
    let s = presets::decelerating_line(7).build().unwrap();
    let out = generate_events(&s).unwrap();
    let frames = batch_events(&out.events, Batching::FixedCount(300));
    let full: Vec<_> = frames.iter().filter(|f| f.event_count == 300).collect();
    let (early, late) = (full[0], full[full.len() - 1]);
    assert!(late.duration() > 2.0 * early.duration(), "{} vs {}", late.duration(), early.duration());
}

#[test]
fn baseline_recovers_exact_frames() {
    let s = presets::circle(3).build().unwrap();
    let times: Vec<f64> = (0..25).map(|k| 0.1 + 0.2 * k as f64).collect();
    let frames = exact_frames(&s, &times);
    let mut init = oracle(&s);
    let res = frame_based_ba(&frames, &s.intrinsics, &mut init, &BaselineConfig::default()).unwrap();
    assert_eq!(res.poses.len(), times.len());
    assert_eq!(res.unusable_frames, 0);
    let gt: Vec<_> = times.iter().map(|&t| (t, s.pose(t))).collect();
    let m = metrics_rpe_ate(&res.poses, &gt, Alignment::Se3, 0.2).unwrap();
    assert!(m.ate < 1e-6, "ate {}", m.ate);
    for (i, p) in &res.landmarks {
        assert!((p - s.landmarks[*i as usize]).norm() < 1e-5, "landmark {i}");
    }
}

#[test]
fn baseline_counts_unusable_frames() {
    let s = presets::circle(3).build().unwrap();
    let times: Vec<f64> = (0..12).map(|k| 0.1 + 0.2 * k as f64).collect();
    let mut frames = exact_frames(&s, &times);
    frames[4].observations = frames[4].observations.clone().into_iter().take(3).collect();
    frames.push(EventFrame { index: 12, start: 2.5, end: 2.6, timestamp: 2.55, event_count: 0, observations: BTreeMap::new() });
    let res = frame_based_ba(&frames, &s.intrinsics, &mut oracle(&s), &BaselineConfig::default()).unwrap();
    assert_eq!(res.unusable_frames, 2);
    assert_eq!(res.poses.len(), 11);
}

#[test]
fn one_usable_frame_is_an_error() {
    let s = presets::circle(3).build().unwrap();
    let mut frames = exact_frames(&s, &[0.5, 1.0]);
    frames[1].observations.clear();
    match frame_based_ba(&frames, &s.intrinsics, &mut oracle(&s), &BaselineConfig::default()) {
        Err(SimError::TooFewFrames { usable }) => assert_eq!(usable, 1),
        other => panic!("{other:?}"),
    }
}
