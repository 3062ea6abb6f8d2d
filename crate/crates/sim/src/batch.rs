//! Frame construction for the batching baseline.

use std::collections::BTreeMap;

use ctvo_core::Event;
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

/// Frames observing fewer distinct tracks than this are not used.
pub const MIN_FRAME_TRACKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Batching {
    /// Window length in seconds.
    FixedDuration(f64),
    /// Events per frame.
    FixedCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameObservation {
    /// Mean pixel of the track's events in the frame.
    pub pixel: Vector2<f64>,
    pub count: usize,
    /// RMS distance of the events from `pixel`.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventFrame {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    /// Mean event timestamp; the window midpoint when empty.
    pub timestamp: f64,
    pub event_count: usize,
    pub observations: BTreeMap<u64, FrameObservation>,
}

impl EventFrame {
    pub fn track_count(&self) -> usize {
        self.observations.len()
    }

    pub fn is_usable(&self) -> bool {
        self.track_count() >= MIN_FRAME_TRACKS
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// Mean of the per-track spreads; a motion-blur proxy.
    pub fn spread(&self) -> f64 {
        if self.observations.is_empty() {
            return 0.0;
        }
        self.observations.values().map(|o| o.spread).sum::<f64>() / self.observations.len() as f64
    }

    fn from_events(index: usize, start: f64, end: f64, events: &[Event]) -> Self {
        let mut groups: BTreeMap<u64, Vec<Vector2<f64>>> = BTreeMap::new();
        for e in events {
            if let Some(id) = e.track_id {
                groups.entry(id).or_default().push(e.pixel);
            }
        }
        let observations = groups
            .into_iter()
            .map(|(id, pixels)| {
                let n = pixels.len() as f64;
                let mean = pixels.iter().sum::<Vector2<f64>>() / n;
                let spread = (pixels.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / n).sqrt();
                (id, FrameObservation { pixel: mean, count: pixels.len(), spread })
            })
            .collect();
        let timestamp = if events.is_empty() {
            0.5 * (start + end)
        } else {
            events.iter().map(|e| e.timestamp).sum::<f64>() / events.len() as f64
        };
        Self { index, start, end, timestamp, event_count: events.len(), observations }
    }
}

/// Splits a time-sorted stream into frames. Empty windows are kept.
pub fn batch_events(stream: &[Event], batching: Batching) -> Vec<EventFrame> {
    let (Some(first), Some(last)) = (stream.first(), stream.last()) else {
        return Vec::new();
    };
    match batching {
        Batching::FixedDuration(dt) => {
            let t0 = first.timestamp;
            let n = (((last.timestamp - t0) / dt).floor() as usize + 1).max(1);
            let mut frames = Vec::with_capacity(n);
            let mut cursor = 0;
            for k in 0..n {
                let (start, end) = (t0 + k as f64 * dt, t0 + (k + 1) as f64 * dt);
                let begin = cursor;
                while cursor < stream.len() && (stream[cursor].timestamp < end || k + 1 == n) {
                    cursor += 1;
                }
                frames.push(EventFrame::from_events(k, start, end, &stream[begin..cursor]));
            }
            frames
        }
        Batching::FixedCount(count) => stream
            .chunks(count.max(1))
            .enumerate()
            .map(|(k, chunk)| {
                EventFrame::from_events(k, chunk[0].timestamp, chunk[chunk.len() - 1].timestamp, chunk)
            })
            .collect(),
    }
}
