//! Text formats: `timestamp x y polarity [track_id]` for events and
//! `timestamp tx ty tz qx qy qz qw` for trajectories.

use std::fmt::Write as _;
use std::path::Path;

use ctvo_core::lie::quaternion_from_xyzw;
use ctvo_core::{Event, Polarity, Pose};
use nalgebra::{Vector2, Vector3};

use crate::SimError;

pub fn format_events(events: &[Event]) -> String {
    let mut out = String::with_capacity(events.len() * 48);
    for e in events {
        let _ = write!(out, "{:.9} {} {} {}", e.timestamp, e.pixel.x, e.pixel.y, e.polarity.as_bit());
        if let Some(id) = e.track_id {
            let _ = write!(out, " {id}");
        }
        out.push('\n');
    }
    out
}

fn field<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T, SimError> {
    tok.and_then(|s| s.parse().ok()).ok_or_else(|| SimError::Parse { line, message: format!("bad or missing {what}") })
}

/// Blank lines and `#` comments are skipped.
pub fn parse_events(text: &str) -> Result<Vec<Event>, SimError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let n = i + 1;
        let mut tok = line.split_whitespace();
        let t: f64 = field(tok.next(), n, "timestamp")?;
        let x: f64 = field(tok.next(), n, "x")?;
        let y: f64 = field(tok.next(), n, "y")?;
        let polarity = tok
            .next()
            .and_then(Polarity::parse)
            .ok_or_else(|| SimError::Parse { line: n, message: "bad or missing polarity".into() })?;
        let track_id = match tok.next() {
            Some(s) => Some(field(Some(s), n, "track id")?),
            None => None,
        };
        if tok.next().is_some() {
            return Err(SimError::Parse { line: n, message: "trailing columns".into() });
        }
        if !t.is_finite() || !x.is_finite() || !y.is_finite() {
            return Err(SimError::Parse { line: n, message: "non-finite value".into() });
        }
        out.push(Event::new(t, Vector2::new(x, y), polarity, track_id));
    }
    Ok(out)
}

pub fn format_trajectory(poses: &[(f64, Pose)]) -> String {
    let mut out = String::with_capacity(poses.len() * 96);
    for (t, p) in poses {
        let q = p.quaternion();
        let tr = p.translation();
        let _ = writeln!(
            out,
            "{t:.9} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12} {:.12}",
            tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w
        );
    }
    out
}

pub fn parse_trajectory(text: &str) -> Result<Vec<(f64, Pose)>, SimError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let n = i + 1;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SimError::Parse { line: n, message: e.to_string() })?;
        if v.len() != 8 || v.iter().any(|x| !x.is_finite()) {
            return Err(SimError::Parse { line: n, message: format!("expected 8 finite columns, got {}", v.len()) });
        }
        let q = quaternion_from_xyzw(v[4], v[5], v[6], v[7]);
        out.push((v[0], Pose::from_quaternion(&q, Vector3::new(v[1], v[2], v[3]))));
    }
    Ok(out)
}

fn write(path: &Path, text: &str) -> Result<(), SimError> {
    std::fs::write(path, text).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, SimError> {
    std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))
}

pub fn write_events(path: &Path, events: &[Event]) -> Result<(), SimError> {
    write(path, &format_events(events))
}

pub fn read_events(path: &Path) -> Result<Vec<Event>, SimError> {
    parse_events(&read(path)?)
}

pub fn write_trajectory(path: &Path, poses: &[(f64, Pose)]) -> Result<(), SimError> {
    write(path, &format_trajectory(poses))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<(f64, Pose)>, SimError> {
    parse_trajectory(&read(path)?)
}
