//! Result files: `trials.csv` (one row per trial plus one aggregate row per
//! task and speed cap), `trace_<trial>.csv` per trial, `traj_<cam>.png` with
//! the pixel-space path of every trial, and `timing.csv` with wall-clock
//! times.
//!
//! `trials.csv` holds only values that are a function of the configuration
//! and seed, so two runs of the same scenario write identical bytes. Wall
//! clock goes to `timing.csv`.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::StereoFeature;
use crate::servo::TraceRow;
use crate::sim::{mean_std, Aggregate, ScenarioResult, TrialResult};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("png: {0}")]
    Image(#[from] image::ImageError),
    #[error("malformed report: {0}")]
    Malformed(String),
}

pub const TRIALS_HEADER: [&str; 18] = [
    "row",
    "task",
    "speed",
    "trial",
    "start",
    "seed",
    "converged",
    "failure",
    "final_error_px",
    "iterations",
    "reinitializations",
    "eap_error_m",
    "kinematic_error_m",
    "successes",
    "trials",
    "mean_error_px",
    "std_error_px",
    "ess_min",
];

/// One line of `trials.csv`. Trial rows leave the aggregate columns empty and
/// the other way round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialsRow {
    pub row: String,
    pub task: u8,
    pub speed: f64,
    pub trial: Option<usize>,
    pub start: Option<usize>,
    pub seed: Option<u64>,
    pub converged: Option<bool>,
    pub failure: Option<String>,
    pub final_error_px: Option<f64>,
    pub iterations: Option<usize>,
    pub reinitializations: Option<usize>,
    pub eap_error_m: Option<f64>,
    pub kinematic_error_m: Option<f64>,
    pub successes: Option<usize>,
    pub trials: Option<usize>,
    pub mean_error_px: Option<f64>,
    pub std_error_px: Option<f64>,
    pub ess_min: Option<f64>,
}

impl TrialsRow {
    fn trial(t: &TrialResult) -> Self {
        let ess_min = t
            .trace
            .iter()
            .flat_map(|r| r.ess.iter().copied())
            .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.min(e))));
        Self {
            row: "trial".into(),
            task: t.task,
            speed: t.speed,
            trial: Some(t.id),
            start: Some(t.start_index),
            seed: Some(t.seed),
            converged: Some(t.converged),
            failure: Some(t.failure.as_ref().map(|f| f.label()).unwrap_or_default()),
            final_error_px: Some(t.final_error),
            iterations: Some(t.iterations),
            reinitializations: Some(t.reinitializations),
            eap_error_m: Some(t.eap_error),
            kinematic_error_m: Some(t.kinematic_error),
            successes: None,
            trials: None,
            mean_error_px: None,
            std_error_px: None,
            ess_min,
        }
    }

    fn aggregate(a: &Aggregate) -> Self {
        Self {
            row: "aggregate".into(),
            task: a.task,
            speed: a.speed,
            trial: None,
            start: None,
            seed: None,
            converged: None,
            failure: None,
            final_error_px: None,
            iterations: None,
            reinitializations: None,
            eap_error_m: None,
            kinematic_error_m: None,
            successes: Some(a.successes),
            trials: Some(a.trials),
            mean_error_px: Some(a.mean_error),
            std_error_px: Some(a.std_error),
            ess_min: None,
        }
    }
}

/// Writes the trial rows followed by the aggregate rows. An empty result gives
/// just the header.
pub fn write_trials_csv<W: Write>(results: &ScenarioResult, out: W) -> Result<(), ReportError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRIALS_HEADER)?;
    for t in &results.trials {
        w.serialize(TrialsRow::trial(t))?;
    }
    for a in results.aggregates() {
        w.serialize(TrialsRow::aggregate(&a))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials_csv(path: impl AsRef<Path>) -> Result<Vec<TrialsRow>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != TRIALS_HEADER {
        return Err(ReportError::Malformed(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Recomputes the aggregate rows from the trial rows of a parsed `trials.csv`.
pub fn aggregates_from_rows(rows: &[TrialsRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(u8, f64)> = Vec::new();
    for r in rows.iter().filter(|r| r.row == "trial") {
        if !keys.iter().any(|k| k.0 == r.task && k.1 == r.speed) {
            keys.push((r.task, r.speed));
        }
    }
    keys.into_iter()
        .map(|(task, speed)| {
            let group: Vec<&TrialsRow> = rows
                .iter()
                .filter(|r| r.row == "trial" && r.task == task && r.speed == speed)
                .collect();
            let errors: Vec<f64> = group
                .iter()
                .filter(|r| r.converged == Some(true))
                .filter_map(|r| r.final_error_px)
                .collect();
            let (mean_error, std_error) = mean_std(&errors);
            Aggregate {
                task,
                speed,
                successes: errors.len(),
                trials: group.len(),
                mean_error,
                std_error,
            }
        })
        .collect()
}

pub const TRACE_HEADER: [&str; 30] = [
    "iteration",
    "u_l",
    "u_r",
    "v_l",
    "e_ul",
    "e_ur",
    "e_vl",
    "error_norm",
    "est_x",
    "est_y",
    "est_z",
    "true_x",
    "true_y",
    "true_z",
    "kin_x",
    "kin_y",
    "kin_z",
    "vel_x",
    "vel_y",
    "vel_z",
    "eap_left_x",
    "eap_left_y",
    "eap_left_z",
    "eap_left_rx",
    "eap_left_ry",
    "eap_left_rz",
    "ess",
    "evidence",
    "reinitialized",
    "est_error_m",
];

fn trace_record(row: &TraceRow) -> Vec<String> {
    let mut rec = vec![row.iteration.to_string()];
    let v = row.u_e.to_vector();
    rec.extend(v.iter().map(|x| x.to_string()));
    rec.extend(row.e.iter().map(|x| x.to_string()));
    rec.push(row.error_norm.to_string());
    rec.extend(row.estimate.iter().map(|x| x.to_string()));
    match row.true_position {
        Some(p) => rec.extend(p.iter().map(|x| x.to_string())),
        None => rec.extend(std::iter::repeat_n(String::new(), 3)),
    }
    rec.extend(row.kinematic_position.iter().map(|x| x.to_string()));
    rec.extend(row.velocity.iter().map(|x| x.to_string()));
    rec.extend(row.eap_left.position.iter().map(|x| x.to_string()));
    rec.extend(row.eap_left.orientation.iter().map(|x| x.to_string()));
    rec.push(row.ess.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(";"));
    rec.push(row.evidence.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(";"));
    rec.push(row.reinitialized.to_string());
    rec.push(
        row.true_position
            .map(|p| (row.estimate - p).norm().to_string())
            .unwrap_or_default(),
    );
    rec
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRow], out: W) -> Result<(), ReportError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for row in trace {
        w.write_record(trace_record(row))?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        put(img, x.round() as i64, y.round() as i64, c);
    }
}

fn feature_pixel(f: &StereoFeature, cam: usize) -> (f64, f64) {
    if cam == 0 {
        (f.u_l, f.v_l)
    } else {
        (f.u_r, f.v_l)
    }
}

/// Pixel-space path of the estimated feature of every trial in camera `cam`
/// (0 = left, 1 = right). The goal is a black cross; each path starts with a
/// small square.
pub fn trajectory_image(
    results: &ScenarioResult,
    goal: &StereoFeature,
    cam: usize,
    width: u32,
    height: u32,
) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (k, t) in results.trials.iter().enumerate() {
        let c = Rgb(PALETTE[k % PALETTE.len()]);
        let points: Vec<(f64, f64)> = t.trace.iter().map(|r| feature_pixel(&r.u_e, cam)).collect();
        if let Some(&(x, y)) = points.first() {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(&mut img, x.round() as i64 + dx, y.round() as i64 + dy, c);
                }
            }
        }
        for w in points.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
    }
    let (gx, gy) = feature_pixel(goal, cam);
    let black = Rgb([0, 0, 0]);
    line(&mut img, (gx - 4.0, gy), (gx + 4.0, gy), black);
    line(&mut img, (gx, gy - 4.0), (gx, gy + 4.0), black);
    img
}

/// Paths of everything [`emit_report`] wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub trials: PathBuf,
    pub traces: Vec<PathBuf>,
    pub trajectories: Vec<PathBuf>,
    pub timing: PathBuf,
}

/// Writes every report file into `dir`, creating it if needed.
pub fn emit_report(
    results: &ScenarioResult,
    goal: &StereoFeature,
    image_size: (u32, u32),
    dir: impl AsRef<Path>,
) -> Result<ReportFiles, ReportError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let trials = dir.join("trials.csv");
    write_trials_csv(results, io::BufWriter::new(File::create(&trials)?))?;

    let mut traces = Vec::new();
    for t in &results.trials {
        let path = dir.join(format!("trace_{}.csv", t.id));
        write_trace_csv(&t.trace, io::BufWriter::new(File::create(&path)?))?;
        traces.push(path);
    }

    let mut trajectories = Vec::new();
    for (cam, name) in ["left", "right"].iter().enumerate() {
        let path = dir.join(format!("traj_{name}.png"));
        trajectory_image(results, goal, cam, image_size.0, image_size.1).save(&path)?;
        trajectories.push(path);
    }

    let timing = dir.join("timing.csv");
    let mut w = csv::Writer::from_path(&timing)?;
    w.write_record(["trial", "wall_clock_s"])?;
    for t in &results.trials {
        w.write_record([t.id.to_string(), t.wall_clock.as_secs_f64().to_string()])?;
    }
    w.write_record(["total".to_string(), results.wall_clock().as_secs_f64().to_string()])?;
    w.flush()?;

    Ok(ReportFiles {
        trials,
        traces,
        trajectories,
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Pose;
    use crate::sim::Failure;
    use nalgebra::Vector3;
    use std::time::Duration;

    fn fake_trial(id: usize, speed: f64, converged: bool, error: f64) -> TrialResult {
        let row = TraceRow {
            iteration: 0,
            u_e: StereoFeature::new(130.0, 95.0, 140.0),
            e: Vector3::new(-5.0, -6.0, -5.0),
            error_norm: 9.27,
            eap_left: Pose::default(),
            eap_right: Pose::default(),
            estimate: Vector3::new(0.1, 0.2, 0.3),
            true_position: Some(Vector3::new(0.1, 0.2, 0.31)),
            kinematic_position: Vector3::new(0.1, 0.22, 0.3),
            velocity: Vector3::zeros(),
            ess: vec![55.5],
            evidence: vec![40.0],
            reinitialized: false,
        };
        TrialResult {
            task: 1,
            id,
            start_index: id % 10,
            speed,
            seed: 1000 + id as u64,
            converged,
            failure: (!converged).then_some(Failure::NotConverged),
            final_error: error,
            iterations: 12 + id,
            reinitializations: 0,
            eap_error: 0.004,
            kinematic_error: 0.02,
            trace: vec![row],
            wall_clock: Duration::from_millis(10),
        }
    }

    #[test]
    fn empty_results_give_header_only() {
        let mut buf = Vec::new();
        write_trials_csv(&ScenarioResult { trials: vec![] }, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("{}\n", TRIALS_HEADER.join(",")));
    }

    #[test]
    fn ten_trials_give_ten_rows_and_one_aggregate() {
        let trials = (0..10)
            .map(|i| fake_trial(i, 0.005, i != 3, 0.1 * i as f64 + 0.05))
            .collect();
        let results = ScenarioResult { trials };
        let mut buf = Vec::new();
        write_trials_csv(&results, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 12);
        assert_eq!(lines.iter().filter(|l| l.starts_with("trial,")).count(), 10);
        assert_eq!(lines.iter().filter(|l| l.starts_with("aggregate,")).count(), 1);
        assert!(lines[4].contains("NotConverged"));
    }

    #[test]
    fn parse_back_reconstructs_aggregate() {
        let trials = (0..10)
            .map(|i| fake_trial(i, 0.005, i % 4 != 0, 0.123456789 * (i as f64 + 1.0).sqrt()))
            .chain((10..20).map(|i| fake_trial(i, 0.02, true, 0.987654321 / (i as f64))))
            .collect();
        let results = ScenarioResult { trials };
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(
            &results,
            &StereoFeature::new(125.0, 89.0, 135.0),
            (320, 240),
            dir.path(),
        )
        .unwrap();
        assert_eq!(files.traces.len(), 20);
        let rows = read_trials_csv(&files.trials).unwrap();
        let rebuilt = aggregates_from_rows(&rows);
        let written: Vec<&TrialsRow> = rows.iter().filter(|r| r.row == "aggregate").collect();
        let expected = results.aggregates();
        assert_eq!(rebuilt.len(), 2);
        for ((a, b), w) in rebuilt.iter().zip(&expected).zip(written) {
            assert_eq!((a.task, a.successes, a.trials), (b.task, b.successes, b.trials));
            assert!((a.mean_error - b.mean_error).abs() < 1e-9);
            assert!((a.std_error - b.std_error).abs() < 1e-9);
            assert!((w.mean_error_px.unwrap() - b.mean_error).abs() < 1e-9);
            assert!((w.std_error_px.unwrap() - b.std_error).abs() < 1e-9);
        }
        assert!(files.trajectories.iter().all(|p| p.exists()));
    }

    #[test]
    fn trajectory_marks_goal() {
        let results = ScenarioResult {
            trials: vec![fake_trial(0, 0.005, true, 0.5)],
        };
        let img = trajectory_image(&results, &StereoFeature::new(125.0, 89.0, 135.0), 0, 320, 240);
        assert_eq!(img.get_pixel(125, 135), &Rgb([0, 0, 0]));
        assert_eq!(img.get_pixel(130, 140), &Rgb(PALETTE[0]));
        let right = trajectory_image(&results, &StereoFeature::new(125.0, 89.0, 135.0), 1, 320, 240);
        assert_eq!(right.get_pixel(89, 135), &Rgb([0, 0, 0]));
        assert_eq!(right.get_pixel(95, 140), &Rgb(PALETTE[0]));
    }
}
