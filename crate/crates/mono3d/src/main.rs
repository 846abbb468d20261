//! Command-line front end: synthetic data generation, box fitting,
//! evaluation, gradient checking and a toy end-to-end training loop.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mono3d::detection::{run_pipeline, Candidate, PipelineConfig};
use mono3d::diffopt::regressor::{end_to_end_grad, end_to_end_loss};
use mono3d::diffopt::toy::{identity_regressor, make_toy_scenes, train, TrainConfig};
use mono3d::fitting::SolveOptions;
use mono3d::kitti::{
    emit_calib, emit_labels, emit_predictions, read_calib, read_labels, read_predictions, Label,
};
use mono3d::metrics::{
    average_localization_precision, average_orientation_similarity, average_precision,
    EvalCriterion, EvalDetection, EvalGroundTruth, Frame, Interpolation,
};
use mono3d::synth::{generate_scene, SynthConfig};

#[derive(Parser)]
#[command(name = "mono3d", version, about = "Monocular 3D box fitting toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Criterion {
    /// Axis-aligned 2D IoU.
    #[value(name = "2d")]
    TwoD,
    /// Bird's-eye-view IoU.
    Bev,
    /// Volumetric 3D IoU.
    #[value(name = "3d")]
    ThreeD,
    /// 2D IoU plus a 3D center-distance bound.
    Alp,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes: labels, calibration and raw predictions.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of scenes to generate.
        #[arg(long, default_value_t = 10)]
        scenes: u64,
        /// Perturb the regression targets with realistic noise.
        #[arg(long)]
        noisy: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit 3D boxes to raw predictions and write KITTI-style detections.
    Fit {
        /// Directory of raw prediction files.
        #[arg(long)]
        preds: PathBuf,
        /// Calibration file with the P2 projection.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        score_thresh: f64,
        #[arg(long, default_value_t = 0.3)]
        nms_thresh: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate detections against ground-truth labels.
    Eval {
        /// Directory of detection label files (16 fields, with scores).
        #[arg(long)]
        dets: PathBuf,
        /// Directory of ground-truth label files.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value_t = Criterion::ThreeD)]
        criterion: Criterion,
        #[arg(long, default_value_t = 0.7)]
        iou_thresh: f64,
        /// Center-distance bound for the alp criterion, meters.
        #[arg(long, default_value_t = 1.0)]
        alp_dist: f64,
        /// Use 40 recall points instead of the classic 11.
        #[arg(long)]
        forty_point: bool,
    },
    /// Verify the end-to-end gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        scenes: usize,
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Train the toy regressor end to end on the 3D-IoU loss.
    TrainToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        scenes: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Synth {
            seed,
            scenes,
            noisy,
            out_dir,
        } => cmd_synth(seed, scenes, noisy, &out_dir),
        Command::Fit {
            preds,
            calib,
            score_thresh,
            nms_thresh,
            out_dir,
        } => cmd_fit(&preds, &calib, score_thresh, nms_thresh, &out_dir),
        Command::Eval {
            dets,
            labels,
            criterion,
            iou_thresh,
            alp_dist,
            forty_point,
        } => cmd_eval(&dets, &labels, criterion, iou_thresh, alp_dist, forty_point),
        Command::Gradcheck { seed, scenes, tol } => cmd_gradcheck(seed, scenes, tol),
        Command::TrainToy {
            seed,
            scenes,
            steps,
        } => cmd_train_toy(seed, scenes, steps),
    }
}

fn cmd_synth(
    seed: u64,
    scenes: u64,
    noisy: bool,
    out_dir: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let config = SynthConfig {
        noisy,
        ..SynthConfig::default()
    };
    let labels_dir = out_dir.join("labels");
    let preds_dir = out_dir.join("preds");
    std::fs::create_dir_all(&labels_dir)?;
    std::fs::create_dir_all(&preds_dir)?;
    std::fs::write(out_dir.join("calib.txt"), emit_calib(&config.camera))?;
    for s in 0..scenes {
        let scene = generate_scene(&config, seed, s)?;
        std::fs::write(
            labels_dir.join(format!("{s:06}.txt")),
            emit_labels(&scene.labels()),
        )?;
        std::fs::write(
            preds_dir.join(format!("{s:06}.txt")),
            emit_predictions(&scene.predictions()),
        )?;
    }
    println!("wrote {scenes} scenes to {}", out_dir.display());
    Ok(())
}

/// Lists the `.txt` files of a directory in name order.
fn txt_files(dir: &Path) -> Result<Vec<PathBuf>, std::io::Error> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_fit(
    preds: &Path,
    calib: &Path,
    score_thresh: f64,
    nms_thresh: f64,
    out_dir: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    let camera = read_calib(calib)?;
    std::fs::create_dir_all(out_dir)?;
    let config = PipelineConfig {
        score_threshold: score_thresh,
        nms_threshold: nms_thresh,
        ..PipelineConfig::default()
    };
    let mut total = 0usize;
    let mut failures = 0usize;
    for file in txt_files(preds)? {
        let raw = read_predictions(&file)?;
        let candidates: Vec<Candidate> = raw
            .iter()
            .map(|p| Candidate::from_targets(p.class.clone(), p.score, p.to_target_vector(camera)))
            .collect();
        let report = run_pipeline(candidates, &config);
        failures += report.failures.len();
        let labels: Vec<Label> = report
            .detections
            .iter()
            .map(|d| Label {
                class: d.candidate.class.clone(),
                truncation: 0.0,
                occlusion: 0,
                alpha: d.fit.box3d.observation_angle(),
                box2d: d.candidate.box2d,
                box3d: d.fit.box3d,
                score: Some(d.candidate.score),
            })
            .collect();
        total += labels.len();
        let name = file.file_name().expect("listing returned a file");
        std::fs::write(out_dir.join(name), emit_labels(&labels))?;
    }
    println!("fitted {total} detections ({failures} fit failures)");
    Ok(())
}

fn cmd_eval(
    dets: &Path,
    labels: &Path,
    criterion: Criterion,
    iou_thresh: f64,
    alp_dist: f64,
    forty_point: bool,
) -> Result<(), Box<dyn std::error::Error>> {
    let interp = if forty_point {
        Interpolation::FortyPoint
    } else {
        Interpolation::ElevenPoint
    };
    let mut frames = Vec::new();
    for gt_file in txt_files(labels)? {
        let name = gt_file.file_name().expect("listing returned a file");
        let gt = read_labels(&gt_file)?;
        let det_path = dets.join(name);
        let det = if det_path.exists() {
            read_labels(&det_path)?
        } else {
            Vec::new()
        };
        frames.push(Frame {
            detections: det
                .iter()
                .map(|l| EvalDetection {
                    score: l.score.unwrap_or(1.0),
                    box2d: l.box2d,
                    box3d: l.box3d,
                })
                .collect(),
            ground_truth: gt
                .iter()
                .map(|l| EvalGroundTruth {
                    box2d: l.box2d,
                    box3d: l.box3d,
                    ignore: l.class == "DontCare",
                })
                .collect(),
        });
    }
    match criterion {
        Criterion::TwoD => {
            let pr = average_precision(&frames, &EvalCriterion::iou_2d(iou_thresh), interp);
            let aos = average_orientation_similarity(&frames, iou_thresh, interp);
            println!("AP(2d)@{iou_thresh:.2}: {:.4}", pr.ap);
            println!("AOS@{iou_thresh:.2}: {:.4}", aos.ap);
        }
        Criterion::Bev => {
            let pr = average_precision(&frames, &EvalCriterion::iou_bev(iou_thresh), interp);
            println!("AP(bev)@{iou_thresh:.2}: {:.4}", pr.ap);
        }
        Criterion::ThreeD => {
            let pr = average_precision(&frames, &EvalCriterion::iou_3d(iou_thresh), interp);
            println!("AP(3d)@{iou_thresh:.2}: {:.4}", pr.ap);
        }
        Criterion::Alp => {
            let pr = average_localization_precision(&frames, iou_thresh, alp_dist, interp);
            println!("ALP@{iou_thresh:.2}/{alp_dist:.1}m: {:.4}", pr.ap);
        }
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, scenes: usize, tol: f64) -> Result<(), Box<dyn std::error::Error>> {
    let scenes = make_toy_scenes(scenes, seed, 0.0, 1.0)?;
    let reg = identity_regressor();
    let opts = SolveOptions::high_accuracy();
    let analytic = end_to_end_grad(&reg, &scenes, &opts)?;
    println!("loss: {:.6} ({} fits skipped)", analytic.loss, analytic.skipped);

    // Error reported relative to the norm of the sampled gradient, so
    // components at the finite-difference noise floor do not dominate.
    let h = 1e-6;
    let mut diff_sq = 0.0f64;
    let mut norm_sq = 0.0f64;
    let mut checked = 0usize;
    for k in (0..reg.num_params()).step_by(37) {
        let mut plus = reg.clone();
        plus.params_mut()[k] += h;
        let mut minus = reg.clone();
        minus.params_mut()[k] -= h;
        let fd =
            (end_to_end_loss(&plus, &scenes, &opts)? - end_to_end_loss(&minus, &scenes, &opts)?)
                / (2.0 * h);
        let diff = analytic.grad[k] - fd;
        if diff.abs() > tol * fd.abs().max(1e-3) {
            println!("  param {k}: analytic {:+.6e} fd {fd:+.6e}", analytic.grad[k]);
        }
        diff_sq += diff * diff;
        norm_sq += fd * fd;
        checked += 1;
    }
    let rel = (diff_sq / norm_sq.max(1e-300)).sqrt();
    println!("checked {checked} parameters, relative gradient error {rel:.2e}");
    if rel > tol {
        return Err(format!("gradient check failed: {rel:.2e} > {tol:.2e}").into());
    }
    println!("gradient check passed (tol {tol:.2e})");
    Ok(())
}

fn cmd_train_toy(seed: u64, scenes: usize, steps: usize) -> Result<(), Box<dyn std::error::Error>> {
    let scenes = make_toy_scenes(scenes, seed, 3.0, 0.0)?;
    let mut reg = identity_regressor();
    let report = train(
        &mut reg,
        &scenes,
        &SolveOptions::default(),
        &TrainConfig {
            steps,
            ..TrainConfig::default()
        },
    )?;
    for (i, loss) in report.losses.iter().enumerate() {
        println!("step {i:3}: loss {loss:.6}");
    }
    println!(
        "relative reduction: {:.1}% over {} accepted steps ({} fits skipped)",
        100.0 * report.relative_reduction(),
        report.losses.len() - 1,
        report.skipped_fits
    );
    Ok(())
}
