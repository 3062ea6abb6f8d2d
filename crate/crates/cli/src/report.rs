//! Flat `key = value` run report.

use std::fmt::Write as _;
use std::path::Path;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Async,
    Baseline,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Async => "async",
            Self::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: RunMode,
    /// `ok` or `bootstrap_failed`.
    pub status: String,
    pub rpe: Option<f64>,
    pub ate: Option<f64>,
    pub path_length: Option<f64>,
    pub mean_reprojection_px: Option<f64>,
    pub knot_count: usize,
    pub event_count: usize,
    pub solve_count: usize,
    pub diverged_solves: usize,
    pub demoted_tracks: Vec<u64>,
    /// Baseline only.
    pub frame_count: Option<usize>,
    pub unusable_frames: Option<usize>,
    pub final_cost: f64,
    pub wall_time: f64,
    /// Cost after every accepted Gauss-Newton iteration, all solves in order.
    pub cost_trace: Vec<f64>,
}

impl RunReport {
    pub fn new(mode: RunMode) -> Self {
        Self {
            mode,
            status: "ok".into(),
            rpe: None,
            ate: None,
            path_length: None,
            mean_reprojection_px: None,
            knot_count: 0,
            event_count: 0,
            solve_count: 0,
            diverged_solves: 0,
            demoted_tracks: Vec::new(),
            frame_count: None,
            unusable_frames: None,
            final_cost: 0.0,
            wall_time: 0.0,
            cost_trace: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "status = {}", self.status);
        let opt = |s: &mut String, k: &str, v: Option<f64>| {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v}");
            }
        };
        opt(&mut s, "rpe", self.rpe);
        opt(&mut s, "ate", self.ate);
        opt(&mut s, "path_length", self.path_length);
        opt(&mut s, "mean_reprojection_px", self.mean_reprojection_px);
        let _ = writeln!(s, "knot_count = {}", self.knot_count);
        let _ = writeln!(s, "event_count = {}", self.event_count);
        let _ = writeln!(s, "solve_count = {}", self.solve_count);
        let _ = writeln!(s, "diverged_solves = {}", self.diverged_solves);
        let _ = writeln!(s, "demoted_tracks = {}", join(&self.demoted_tracks));
        if let Some(n) = self.frame_count {
            let _ = writeln!(s, "frame_count = {n}");
        }
        if let Some(n) = self.unusable_frames {
            let _ = writeln!(s, "unusable_frames = {n}");
        }
        let _ = writeln!(s, "final_cost = {}", self.final_cost);
        let _ = writeln!(s, "wall_time = {}", self.wall_time);
        let _ = writeln!(s, "cost_trace = {}", join(&self.cost_trace));
        s
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |k: &str| CliError::Report(format!("bad value for `{k}`"));
        let mut r = Self::new(RunMode::Async);
        let mut seen_mode = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| CliError::Report(format!("not `key = value`: {line}")))?;
            let (k, v) = (k.trim(), v.trim());
            let f = |v: &str| v.parse::<f64>().map_err(|_| bad(k));
            let u = |v: &str| v.parse::<usize>().map_err(|_| bad(k));
            match k {
                "mode" => {
                    r.mode = match v {
                        "async" => RunMode::Async,
                        "baseline" => RunMode::Baseline,
                        _ => return Err(bad(k)),
                    };
                    seen_mode = true;
                }
                "status" => r.status = v.to_string(),
                "rpe" => r.rpe = Some(f(v)?),
                "ate" => r.ate = Some(f(v)?),
                "path_length" => r.path_length = Some(f(v)?),
                "mean_reprojection_px" => r.mean_reprojection_px = Some(f(v)?),
                "knot_count" => r.knot_count = u(v)?,
                "event_count" => r.event_count = u(v)?,
                "solve_count" => r.solve_count = u(v)?,
                "diverged_solves" => r.diverged_solves = u(v)?,
                "demoted_tracks" => r.demoted_tracks = split(v).map_err(|_| bad(k))?,
                "frame_count" => r.frame_count = Some(u(v)?),
                "unusable_frames" => r.unusable_frames = Some(u(v)?),
                "final_cost" => r.final_cost = f(v)?,
                "wall_time" => r.wall_time = f(v)?,
                "cost_trace" => r.cost_trace = split(v).map_err(|_| bad(k))?,
                _ => return Err(CliError::Report(format!("unknown key `{k}`"))),
            }
        }
        if !seen_mode {
            return Err(CliError::Report("missing key `mode`".into()));
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_text()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, T::Err> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| x.trim().parse()).collect()
}
