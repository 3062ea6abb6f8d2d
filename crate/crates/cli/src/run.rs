//! The four commands as library functions.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ctvo_core::engine::{EngineError, Phase, PoseOracle};
use ctvo_core::{Estimator, EstimatorConfig, Event, Intrinsics, Pose};
use ctvo_sim::io::{read_events, read_trajectory, write_events, write_trajectory};
use ctvo_sim::metrics::{interpolate_discrete, metrics_rpe_ate, Alignment, DEFAULT_RPE_DELTA};
use ctvo_sim::{batch_events, frame_based_ba, generate_events, ScenarioConfig};

use crate::config::{BaselineRunConfig, InitializerConfig, RunConfig};
use crate::report::{RunMode, RunReport};
use crate::CliError;

pub const REPORT_FILE: &str = "report.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.txt";
pub const KNOTS_FILE: &str = "knots.txt";
pub const EVENTS_FILE: &str = "events.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.txt";
pub const OUTLIERS_FILE: &str = "outlier_tracks.txt";

type Truth = Arc<dyn Fn(f64) -> Pose + Send + Sync>;

/// Everything a run reads, whichever source it came from.
#[derive(Clone)]
pub struct InputData {
    pub events: Vec<Event>,
    pub ground_truth: Option<Vec<(f64, Pose)>>,
    pub truth: Option<Truth>,
    pub intrinsics: Intrinsics,
    pub path_length: Option<f64>,
    pub outlier_tracks: Vec<u64>,
}

impl InputData {
    pub fn from_scenario(cfg: &ScenarioConfig) -> Result<Self, CliError> {
        let scenario = cfg.build()?;
        let out = generate_events(&scenario)?;
        let trajectory = scenario.trajectory.clone();
        Ok(Self {
            events: out.events,
            ground_truth: Some(out.ground_truth),
            truth: Some(Arc::new(move |t| trajectory.pose(t))),
            intrinsics: scenario.intrinsics,
            path_length: Some(scenario.path_length()),
            outlier_tracks: out.outlier_tracks,
        })
    }

    /// Discrete ground truth doubles as the initializer's oracle.
    pub fn from_stream(events: Vec<Event>, ground_truth: Option<Vec<(f64, Pose)>>, intrinsics: Intrinsics) -> Self {
        let truth: Option<Truth> = ground_truth.clone().map(|gt| {
            Arc::new(move |t| interpolate_discrete(&gt, t).unwrap_or_else(Pose::identity)) as Truth
        });
        let path_length = ground_truth.as_ref().map(|gt| {
            gt.windows(2).map(|w| (w[1].1.translation() - w[0].1.translation()).norm()).sum()
        });
        Self { events, ground_truth, truth, intrinsics, path_length, outlier_tracks: Vec::new() }
    }

    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        if let Some(path) = &cfg.input.scenario {
            return Self::from_scenario(&ScenarioConfig::load(path)?);
        }
        let events = read_events(cfg.input.events.as_deref().expect("validated input"))?;
        let gt = cfg.input.ground_truth.as_deref().map(read_trajectory).transpose()?;
        let c = cfg.camera;
        let k = Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height)
            .map_err(|e| CliError::Config(format!("camera: {e}")))?;
        Ok(Self::from_stream(events, gt, k))
    }

    fn oracle(&self) -> Option<PoseOracle<f64>> {
        self.truth.clone().map(|f| Box::new(move |t| f(t)) as PoseOracle<f64>)
    }
}

/// Output of one estimator run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    /// Estimate at the ground-truth timestamps inside the estimated span
    /// (empty without ground truth).
    pub trajectory: Vec<(f64, Pose)>,
    pub knots: Vec<(f64, Pose)>,
}

impl RunOutput {
    pub fn write(&self, dir: &Path, ground_truth: Option<&[(f64, Pose)]>) -> Result<(), CliError> {
        create_dir(dir)?;
        self.report.write(&dir.join(REPORT_FILE))?;
        write_trajectory(&dir.join(TRAJECTORY_FILE), &self.trajectory)?;
        write_trajectory(&dir.join(KNOTS_FILE), &self.knots)?;
        if let Some(gt) = ground_truth {
            write_trajectory(&dir.join(GROUND_TRUTH_FILE), gt)?;
        }
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

/// Ground-truth timestamps inside the estimated span; nothing is scored on
/// extrapolated poses.
fn within(gt: &[(f64, Pose)], first: f64, last: f64) -> impl Iterator<Item = f64> + '_ {
    gt.iter().map(|(t, _)| *t).filter(move |t| (first..=last).contains(t))
}

fn score(report: &mut RunReport, estimate: &[(f64, Pose)], data: &InputData) -> Result<(), CliError> {
    if let Some(gt) = &data.ground_truth {
        let m = metrics_rpe_ate(estimate, gt, Alignment::Se3, DEFAULT_RPE_DELTA)?;
        report.rpe = Some(m.rpe);
        report.ate = Some(m.ate);
    }
    report.path_length = data.path_length;
    Ok(())
}

pub fn run_async(
    data: &InputData,
    engine_cfg: &EstimatorConfig,
    init: &InitializerConfig,
    seed: u64,
) -> Result<RunOutput, CliError> {
    let start = Instant::now();
    let mut report = RunReport::new(RunMode::Async);
    report.event_count = data.events.len();
    let mut engine = Estimator::new(engine_cfg.clone(), data.intrinsics, init.build(data.oracle(), seed)?)?;
    for e in &data.events {
        engine.ingest(*e).map_err(|err| match err {
            EngineError::UnsupportedInput(m) => CliError::UnsupportedInput(m),
            other => other.into(),
        })?;
    }
    if engine.phase() != Phase::Running {
        report.status = "bootstrap_failed".into();
        report.wall_time = start.elapsed().as_secs_f64();
        return Err(CliError::Bootstrap { report: Box::new(report) });
    }
    match engine.finalize() {
        Ok(_) => {}
        Err(EngineError::Diverged { best_cost }) => log::warn!("final solve diverged; kept best cost {best_cost}"),
        Err(e) => return Err(e.into()),
    }

    let snapshot = engine.snapshot();
    let (first, last) = snapshot.span().expect("running engine has knots");
    let trajectory = match &data.ground_truth {
        Some(gt) => within(gt, first, last)
            .map(|t| Ok((t, snapshot.interpolate(t)?.pose)))
            .collect::<Result<Vec<_>, ctvo_core::gp::GpError>>()
            .map_err(EngineError::from)?,
        None => Vec::new(),
    };
    let knots: Vec<_> = snapshot.knots().iter().map(|k| (k.timestamp, k.pose)).collect();
    score(&mut report, &trajectory, data)?;

    let stats = engine.stats().clone();
    report.mean_reprojection_px = Some(engine.mean_reprojection_error()?);
    report.knot_count = knots.len();
    report.solve_count = stats.solves;
    report.diverged_solves = stats.diverged_solves;
    report.demoted_tracks = stats.demoted_tracks.clone();
    report.final_cost = engine.last_cost();
    report.cost_trace = stats.cost_trace;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(RunOutput { report, trajectory, knots })
}

pub fn run_baseline(
    data: &InputData,
    baseline: &BaselineRunConfig,
    init: &InitializerConfig,
    seed: u64,
) -> Result<RunOutput, CliError> {
    let start = Instant::now();
    let mut report = RunReport::new(RunMode::Baseline);
    report.event_count = data.events.len();
    if data.events.iter().any(|e| e.track_id.is_none()) {
        return Err(CliError::UnsupportedInput("event without track id; feature tracking is not provided".into()));
    }
    let frames = batch_events(&data.events, baseline.batching);
    let mut initializer = init.build(data.oracle(), seed)?;
    let result = frame_based_ba(&frames, &data.intrinsics, initializer.as_mut(), &baseline.ba)?;

    let trajectory = match &data.ground_truth {
        Some(gt) => within(gt, result.poses[0].0, result.poses[result.poses.len() - 1].0)
            .map(|t| (t, interpolate_discrete(&result.poses, t).expect("at least two poses")))
            .collect(),
        None => Vec::new(),
    };
    score(&mut report, &trajectory, data)?;
    report.knot_count = result.poses.len();
    report.solve_count = result.solves;
    report.diverged_solves = result.diverged_solves;
    report.frame_count = Some(frames.len());
    report.unusable_frames = Some(result.unusable_frames);
    report.final_cost = result.final_cost;
    report.cost_trace = result.cost_trace;
    report.wall_time = start.elapsed().as_secs_f64();
    Ok(RunOutput { report, trajectory, knots: result.poses })
}

/// Generates a stream and writes the event, ground-truth and outlier files.
pub fn cmd_simulate(cfg: &ScenarioConfig, output_dir: &Path) -> Result<InputData, CliError> {
    let data = InputData::from_scenario(cfg)?;
    create_dir(output_dir)?;
    write_events(&output_dir.join(EVENTS_FILE), &data.events)?;
    write_trajectory(&output_dir.join(GROUND_TRUTH_FILE), data.ground_truth.as_deref().unwrap_or_default())?;
    if !data.outlier_tracks.is_empty() {
        let text: String = data.outlier_tracks.iter().map(|id| format!("{id}\n")).collect();
        std::fs::write(output_dir.join(OUTLIERS_FILE), text).map_err(|e| CliError::Io(e.to_string()))?;
    }
    Ok(data)
}

pub fn cmd_run_async(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let data = InputData::load(cfg)?;
    match run_async(&data, &cfg.engine, &cfg.initializer, cfg.seed) {
        Err(CliError::Bootstrap { report }) => {
            create_dir(&cfg.output_dir)?;
            report.write(&cfg.output_dir.join(REPORT_FILE))?;
            Err(CliError::Bootstrap { report })
        }
        Err(e) => Err(e),
        Ok(out) => {
            out.write(&cfg.output_dir, data.ground_truth.as_deref())?;
            Ok(out)
        }
    }
}

pub fn cmd_run_baseline(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let baseline = cfg.baseline.as_ref().ok_or_else(|| CliError::Config("missing [baseline] section".into()))?;
    let data = InputData::load(cfg)?;
    let out = run_baseline(&data, baseline, &cfg.initializer, cfg.seed)?;
    out.write(&cfg.output_dir, data.ground_truth.as_deref())?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub table: String,
    pub csv_files: Vec<PathBuf>,
    pub reports: [RunReport; 2],
}

/// Side-by-side metrics of two run directories plus one plot CSV per run
/// (`t,x_est,y_est,z_est,x_gt,y_gt,z_gt`, estimate aligned to ground truth).
pub fn cmd_compare(run_a: &Path, run_b: &Path, output_dir: &Path) -> Result<Comparison, CliError> {
    let load = |dir: &Path| -> Result<_, CliError> {
        let report = RunReport::read(&dir.join(REPORT_FILE))?;
        let est = read_trajectory(&dir.join(TRAJECTORY_FILE))?;
        let gt = read_trajectory(&dir.join(GROUND_TRUTH_FILE))?;
        Ok((report, est, gt))
    };
    let (ra, ea, ga) = load(run_a)?;
    let (rb, eb, gb) = load(run_b)?;
    let same = ga.len() == gb.len() && ga.iter().zip(&gb).all(|(a, b)| (a.0 - b.0).abs() < 1e-9);
    if !same || ga.is_empty() {
        return Err(CliError::Compare("runs were scored against different ground-truth time spans".into()));
    }

    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    let delta = |a: Option<f64>, b: Option<f64>| fmt(a.zip(b).map(|(a, b)| b - a));
    let mut table = format!("{:<10} {:>14} {:>14} {:>14}\n", "metric", ra.mode.as_str(), rb.mode.as_str(), "delta");
    for (name, a, b) in [("rpe [m]", ra.rpe, rb.rpe), ("ate [m]", ra.ate, rb.ate)] {
        table.push_str(&format!("{name:<10} {:>14} {:>14} {:>14}\n", fmt(a), fmt(b), delta(a, b)));
    }
    let counts = [("knots", ra.knot_count, rb.knot_count), ("solves", ra.solve_count, rb.solve_count)];
    for (name, a, b) in counts {
        table.push_str(&format!("{name:<10} {a:>14} {b:>14} {:>14}\n", b as i64 - a as i64));
    }

    create_dir(output_dir)?;
    let mut csv_files = Vec::new();
    for (label, est) in [("a", &ea), ("b", &eb)] {
        let m = metrics_rpe_ate(est, &ga, Alignment::Se3, DEFAULT_RPE_DELTA)?;
        let path = output_dir.join(format!("trajectory_{label}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| CliError::Io(e.to_string());
        w.write_record(["t", "x_est", "y_est", "z_est", "x_gt", "y_gt", "z_gt"]).map_err(io)?;
        for (t, g) in &ga {
            let p = interpolate_discrete(est, *t).map(|p| m.alignment.compose(&p)).unwrap_or_else(Pose::identity);
            let (e, g) = (p.translation(), g.translation());
            let row = [*t, e.x, e.y, e.z, g.x, g.y, g.z].map(|v| v.to_string());
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| CliError::Io(e.to_string()))?;
        csv_files.push(path);
    }
    std::fs::write(output_dir.join("comparison.txt"), &table).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(Comparison { table, csv_files, reports: [ra, rb] })
}
