use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use nalgebra::Vector3;

use servotrack::camera::StereoFeature;
use servotrack::config::Config;
use servotrack::filter::{StageTimings, Tracker, TrackerReport};
use servotrack::hog::compute_hog;
use servotrack::report::emit_report;
use servotrack::servo::{GroundTruth, Plant};
use servotrack::sim::{prepare_trial, run_task1, run_task2, ScenarioResult, Task, World};

#[derive(Parser)]
#[command(
    name = "servotrack",
    version,
    about = "End-effector tracking and stereo visual servoing on a simulated arm"
)]
struct Cli {
    /// Worker threads for parallel trials and particle scoring (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track the end-effector while the arm holds still for the settle frames
    /// and then follows a horizontal circle.
    Track {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Number of frames to track.
        #[arg(long, default_value_t = 60)]
        steps: usize,
        /// Write every particle and weight at every step to particles.csv.
        #[arg(long)]
        trace: bool,
        /// Write the HOG descriptors of the observed images to descriptors.csv.
        #[arg(long)]
        dump_descriptors: bool,
    },
    /// Run the reaching scenarios (1: plain, 2: clutter and pixel noise).
    Servo {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        task: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Starting points per speed cap.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Time the filter stages for several particle counts.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
        particles: Vec<usize>,
        /// HOG cell sizes to compare (default: the configured one).
        #[arg(long, value_delimiter = ',')]
        cell_sizes: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Timed filter steps per setting.
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Also write bench.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config, String> {
    let mut cfg = match path {
        Some(p) => Config::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Velocity of a horizontal circle of radius `r` traversed in `period` steps.
fn circle_velocity(step: usize, r: f64, period: usize, dt: f64) -> Vector3<f64> {
    let w = std::f64::consts::TAU / (period as f64 * dt);
    let phase = w * step as f64 * dt;
    Vector3::new(-phase.sin(), phase.cos(), 0.0) * r * w
}

fn new_tracker(
    world: &World,
    cfg: &Config,
    seed: u64,
) -> Result<(Tracker, servotrack::kinematics::JointConfig), String> {
    let q0 = world.reported_joints();
    let tracker = Tracker::new(&world.arm, &q0, world.views(), &world.scene, cfg.filter.clone(), seed)
        .map_err(|e| e.to_string())?;
    Ok((tracker, q0))
}

fn track_step(
    world: &mut World,
    tracker: &mut Tracker,
    q_prev: &mut servotrack::kinematics::JointConfig,
    motion_step: Option<usize>,
    dt: f64,
) -> Result<(Vec<servotrack::renderer::Image>, TrackerReport), String> {
    if let Some(step) = motion_step {
        world
            .move_cartesian(&circle_velocity(step, 0.03, 30, dt), dt)
            .map_err(|e| e.to_string())?;
    }
    let (images, q) = world.observe();
    let views = world.views().to_vec();
    let report = tracker
        .step(&world.arm, q_prev, &q, &images, &views, &world.scene)
        .map_err(|e| e.to_string())?;
    *q_prev = q;
    Ok((images, report))
}

fn run_track(
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    steps: usize,
    trace: bool,
    dump_descriptors: bool,
) -> Result<(), String> {
    let cfg = load_config(config, seed)?;
    let setup = prepare_trial(&cfg, Task::Reach, 0).map_err(|e| e.to_string())?;
    let mut world = setup.world;
    let (mut tracker, mut q_prev) = new_tracker(&world, &cfg, setup.filter_seed)?;
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let io = |e: std::io::Error| e.to_string();

    let mut track = csv::Writer::from_path(out.join("track.csv")).map_err(|e| e.to_string())?;
    track
        .write_record([
            "step",
            "est_x",
            "est_y",
            "est_z",
            "true_x",
            "true_y",
            "true_z",
            "kin_x",
            "kin_y",
            "kin_z",
            "est_error_m",
            "kin_error_m",
            "ess",
            "reinitialized",
        ])
        .map_err(|e| e.to_string())?;
    let mut particles = if trace {
        let mut w = BufWriter::new(File::create(out.join("particles.csv")).map_err(io)?);
        writeln!(w, "step,group,particle,x,y,z,rx,ry,rz,weight").map_err(io)?;
        Some(w)
    } else {
        None
    };
    let mut descriptors = if dump_descriptors {
        let mut w = BufWriter::new(File::create(out.join("descriptors.csv")).map_err(io)?);
        writeln!(w, "step,camera,block_y,block_x,values...").map_err(io)?;
        Some(w)
    } else {
        None
    };

    let (mut est_sum, mut kin_sum) = (0.0, 0.0);
    for step in 0..steps {
        let hold = cfg.servo.settle_iters;
        let motion = step.checked_sub(hold);
        let (images, report) = track_step(&mut world, &mut tracker, &mut q_prev, motion, cfg.servo.dt)?;
        let est = report.estimates[0].position;
        let truth = world.true_pose().position;
        let kin = servotrack::kinematics::forward_kinematics(&world.arm, &q_prev)
            .map_err(|e| e.to_string())?
            .translation;
        let (est_err, kin_err) = ((est - truth).norm(), (kin - truth).norm());
        est_sum += est_err;
        kin_sum += kin_err;
        let mut rec = vec![step.to_string()];
        for v in [est, truth, kin] {
            rec.extend(v.iter().map(|x| x.to_string()));
        }
        rec.push(est_err.to_string());
        rec.push(kin_err.to_string());
        rec.push(report.ess.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(";"));
        rec.push(report.reinitialized.to_string());
        track.write_record(&rec).map_err(|e| e.to_string())?;

        if let Some(w) = particles.as_mut() {
            for (g, set) in tracker.filters().iter().enumerate() {
                for (i, p) in set.particles.iter().enumerate() {
                    let (t, r) = (p.state.position, p.state.orientation);
                    writeln!(
                        w,
                        "{step},{g},{i},{},{},{},{},{},{},{}",
                        t.x, t.y, t.z, r.x, r.y, r.z, p.weight
                    )
                    .map_err(io)?;
                }
            }
        }
        if let Some(w) = descriptors.as_mut() {
            for (c, img) in images.iter().enumerate() {
                let d = compute_hog(img, &cfg.filter.hog).map_err(|e| e.to_string())?;
                let mut buf = Vec::new();
                d.write_csv(&mut buf).map_err(io)?;
                for line in String::from_utf8_lossy(&buf).lines() {
                    writeln!(w, "{step},{c},{line}").map_err(io)?;
                }
            }
        }
    }
    track.flush().map_err(io)?;
    if let Some(mut w) = particles {
        w.flush().map_err(io)?;
    }
    if let Some(mut w) = descriptors {
        w.flush().map_err(io)?;
    }
    let n = steps.max(1) as f64;
    println!(
        "tracked {steps} frames: mean position error {:.1} mm (reported kinematics {:.1} mm), {} reinitializations",
        est_sum / n * 1e3,
        kin_sum / n * 1e3,
        tracker.reinitializations()
    );
    println!("wrote {}", out.join("track.csv").display());
    Ok(())
}

fn summarize(results: &ScenarioResult) {
    for a in results.aggregates() {
        println!(
            "task {} speed {} m/s: {}/{} converged, final error {:.3} ± {:.3} px",
            a.task, a.speed, a.successes, a.trials, a.mean_error, a.std_error
        );
    }
    let failures: Vec<String> = results
        .trials
        .iter()
        .filter_map(|t| t.failure.as_ref().map(|f| format!("trial {}: {}", t.id, f.label())))
        .collect();
    for f in failures {
        println!("  {f}");
    }
    let measured: Vec<(f64, f64)> = results
        .trials
        .iter()
        .filter(|t| t.eap_error.is_finite() && t.kinematic_error.is_finite())
        .map(|t| (t.eap_error, t.kinematic_error))
        .collect();
    if !measured.is_empty() {
        let wins = measured.iter().filter(|(e, k)| e < k).count();
        let mut gains: Vec<f64> = measured.iter().map(|(e, k)| 1.0 - e / k).collect();
        gains.sort_by(f64::total_cmp);
        println!(
            "3D estimate beats reported kinematics in {wins}/{} trials, median error reduction {:.0}%",
            measured.len(),
            gains[gains.len() / 2] * 100.0
        );
    }
    println!("wall clock {:.1} s", results.wall_clock().as_secs_f64());
}

fn run_servo(
    task: u8,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    trials: Option<usize>,
) -> Result<(), String> {
    let mut cfg = load_config(config, seed)?;
    if let Some(n) = trials {
        cfg.scenario.trials = n;
    }
    let results = match task {
        1 => run_task1(&cfg),
        _ => run_task2(&cfg),
    }
    .map_err(|e| e.to_string())?;
    let g = cfg.scenario.goal;
    let size = (
        cfg.cameras.intrinsics.width as u32,
        cfg.cameras.intrinsics.height as u32,
    );
    emit_report(&results, &StereoFeature::new(g[0], g[1], g[2]), size, out).map_err(|e| e.to_string())?;
    summarize(&results);
    println!("wrote {}", out.display());
    Ok(())
}

fn run_bench(
    particles: &[usize],
    cell_sizes: &[usize],
    config: Option<&Path>,
    seed: Option<u64>,
    steps: usize,
    out: Option<&Path>,
) -> Result<(), String> {
    let base = load_config(config, seed)?;
    let cells = if cell_sizes.is_empty() {
        vec![base.filter.hog.cell_size]
    } else {
        cell_sizes.to_vec()
    };
    let mut rows = Vec::new();
    println!(
        "{:>5} {:>9} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "cell", "particles", "predict", "render", "hog", "weight", "resample", "total_ms", "error_mm"
    );
    for &cell in &cells {
        for &n in particles {
            let mut cfg = base.clone();
            cfg.filter.n_particles = n;
            cfg.filter.hog.cell_size = cell;
            cfg.validate().map_err(|e| e.to_string())?;
            let setup = prepare_trial(&cfg, Task::Reach, 0).map_err(|e| e.to_string())?;
            let mut world = setup.world;
            let (mut tracker, mut q_prev) = new_tracker(&world, &cfg, setup.filter_seed)?;
            let mut timings = StageTimings::default();
            let mut error = 0.0;
            for step in 0..steps {
                let (_, report) = track_step(&mut world, &mut tracker, &mut q_prev, Some(step), cfg.servo.dt)?;
                timings.accumulate(&report.timings);
                error += (report.estimates[0].position - world.true_pose().position).norm();
            }
            let k = steps.max(1) as f64;
            let per = [
                timings.predict,
                timings.render,
                timings.hog,
                timings.weight,
                timings.resample,
                timings.total(),
            ]
            .map(|d| ms(d) / k);
            let err_mm = error / k * 1e3;
            println!(
                "{cell:>5} {n:>9} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.1}",
                per[0], per[1], per[2], per[3], per[4], per[5], err_mm
            );
            rows.push((cell, n, per, err_mm));
        }
    }
    println!("times are milliseconds per filter step (all cameras)");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        let mut w = csv::Writer::from_path(dir.join("bench.csv")).map_err(|e| e.to_string())?;
        w.write_record([
            "cell_size",
            "particles",
            "predict_ms",
            "render_ms",
            "hog_ms",
            "weight_ms",
            "resample_ms",
            "total_ms",
            "error_mm",
        ])
        .map_err(|e| e.to_string())?;
        for (cell, n, per, err) in rows {
            let mut rec = vec![cell.to_string(), n.to_string()];
            rec.extend(per.iter().map(|v| v.to_string()));
            rec.push(err.to_string());
            w.write_record(&rec).map_err(|e| e.to_string())?;
        }
        w.flush().map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let outcome = match &cli.command {
        Command::Track {
            config,
            seed,
            out,
            steps,
            trace,
            dump_descriptors,
        } => run_track(config.as_deref(), *seed, out, *steps, *trace, *dump_descriptors),
        Command::Servo {
            task,
            config,
            seed,
            out,
            trials,
        } => run_servo(*task, config.as_deref(), *seed, out, *trials),
        Command::Bench {
            particles,
            cell_sizes,
            config,
            seed,
            steps,
            out,
        } => run_bench(particles, cell_sizes, config.as_deref(), *seed, *steps, out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
