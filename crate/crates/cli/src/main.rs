//! `pseudofuse` command-line driver.
//!
//! Every subcommand builds a synthetic scene from the config and seed,
//! runs the pipeline up to its stage and writes artifacts into `--out`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pseudofuse::caaf::{write_boxes, RoI};
use pseudofuse::calib::{project_points, rasterize_depth, PixelDepthSample, SparseDepthMap};
use pseudofuse::cloud::{build_pseudo_cloud, write_points};
use pseudofuse::config::PipelineConfig;
use pseudofuse::depth::{complete_depth, depth_loss, write_depth_pgm, DenseDepthMap};
use pseudofuse::pipeline::gradsuite::{gradient_suite, model_gradient_check};
use pseudofuse::pipeline::{overfit_test, run_pipeline};
use pseudofuse::scene::{generate_scene, SyntheticScene};
use pseudofuse::tensor::save_checkpoint;
use pseudofuse::{Stage, StageContext, StageError};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Stage(#[from] StageError),

    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{0}")]
    Check(String),
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "pseudofuse", version, about = "Pseudo-point LiDAR/camera fusion on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML pipeline config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a scene and export its point cloud, image, depth and boxes.
    GenScene(Common),
    /// Project the LiDAR cloud into a sparse depth map.
    Project(Common),
    /// Complete the sparse depth map.
    Complete(Common),
    /// Lift the completed depth to a pseudo point cloud.
    Pseudo(Common),
    /// Run every stage once and write metrics, proposals and refined boxes.
    Pipeline(Common),
    /// Overfit the model on one scene.
    Overfit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        draws: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Also check the full model, sampling this many elements per parameter.
        #[arg(long)]
        model: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(c: &Common) -> CliResult<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p).stage(Stage::Config)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate().stage(Stage::Config)?;
    Ok(cfg)
}

fn setup(c: &Common) -> CliResult<(PipelineConfig, SyntheticScene)> {
    let cfg = load_config(c)?;
    let scene = generate_scene(&cfg.scene, cfg.seed).stage(Stage::Scene)?;
    fs::create_dir_all(&c.out).map_err(|source| CliError::Io {
        path: c.out.clone(),
        source,
    })?;
    Ok((cfg, scene))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| pseudofuse::Error::Format(e.to_string()))
        .stage(Stage::Loss)?;
    write_text(path, &(text + "\n"))
}

fn sparse_depth(scene: &SyntheticScene) -> CliResult<SparseDepthMap> {
    let samples: Vec<PixelDepthSample> = project_points(&scene.raw_cloud, &scene.calib)
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    Ok(rasterize_depth(&samples, scene.calib.width(), scene.calib.height()).stage(Stage::Project)?)
}

fn dense_depth(scene: &SyntheticScene, sparse: &SparseDepthMap) -> CliResult<DenseDepthMap> {
    Ok(complete_depth(&scene.image, sparse).stage(Stage::Complete)?)
}

fn write_sparse(out: &Path, sparse: &SparseDepthMap) -> CliResult<()> {
    sparse.write_raw(create(&out.join("sparse_depth.bin"))?).stage(Stage::Project)?;
    let cells: Vec<f64> = sparse.cells().iter().map(|&d| if d > 0.0 { d } else { 0.0 }).collect();
    write_depth_pgm(create(&out.join("sparse_depth.pgm"))?, sparse.width(), sparse.height(), &cells).stage(Stage::Project)?;
    Ok(())
}

fn write_dense(out: &Path, dense: &DenseDepthMap) -> CliResult<()> {
    dense.write_raw(create(&out.join("dense_depth.bin"))?).stage(Stage::Complete)?;
    write_depth_pgm(create(&out.join("dense_depth.pgm"))?, dense.width(), dense.height(), dense.cells())
        .stage(Stage::Complete)?;
    Ok(())
}

#[derive(Serialize)]
struct DepthSummary {
    sparse_valid: usize,
    pixels: usize,
    mae: Option<f64>,
}

#[derive(Serialize)]
struct OverfitSummary {
    steps: usize,
    initial_total: f64,
    final_total: f64,
    ratio: f64,
    gt_confidence: Vec<f64>,
}

#[derive(Serialize)]
struct GradcheckSummary {
    tolerance: f64,
    ops: Vec<pseudofuse::pipeline::gradsuite::OpCheck>,
    model: Option<pseudofuse::tensor::GradCheckReport>,
    passed: bool,
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenScene(c) => {
            let (_, scene) = setup(&c)?;
            scene.export(&c.out).stage(Stage::Scene)?;
            println!(
                "{} boxes, {} lidar points -> {}",
                scene.boxes.len(),
                scene.raw_cloud.len(),
                c.out.display()
            );
        }
        Command::Project(c) => {
            let (_, scene) = setup(&c)?;
            let sparse = sparse_depth(&scene)?;
            write_sparse(&c.out, &sparse)?;
            println!("{} valid depth pixels", sparse.valid_count());
        }
        Command::Complete(c) => {
            let (_, scene) = setup(&c)?;
            let sparse = sparse_depth(&scene)?;
            let dense = dense_depth(&scene, &sparse)?;
            let mae = match &scene.gt_depth {
                Some(gt) => Some(depth_loss(&dense, gt, &vec![true; gt.cells().len()]).stage(Stage::Complete)?),
                None => None,
            };
            write_sparse(&c.out, &sparse)?;
            write_dense(&c.out, &dense)?;
            let summary = DepthSummary {
                sparse_valid: sparse.valid_count(),
                pixels: dense.cells().len(),
                mae,
            };
            write_json(&c.out.join("depth.json"), &summary)?;
            match mae {
                Some(m) => println!("depth MAE {m:.4} m"),
                None => println!("no ground-truth depth"),
            }
        }
        Command::Pseudo(c) => {
            let (cfg, scene) = setup(&c)?;
            let sparse = sparse_depth(&scene)?;
            let dense = dense_depth(&scene, &sparse)?;
            let cloud = build_pseudo_cloud(&scene.image, &dense, &scene.calib, cfg.stride).stage(Stage::Pseudo)?;
            write_points(create(&c.out.join("pseudo_points.bin"))?, &cloud.to_matrix()).stage(Stage::Pseudo)?;
            println!("{} pseudo points", cloud.len());
        }
        Command::Pipeline(c) => {
            let (cfg, scene) = setup(&c)?;
            let run = run_pipeline(&cfg, &scene)?;
            let rec = &run.record;
            write_text(&c.out.join("metrics.json"), &(rec.to_json().stage(Stage::Loss)? + "\n"))?;
            write_text(&c.out.join("timings.json"), &(run.timings_json().stage(Stage::Loss)? + "\n"))?;
            write_boxes(create(&c.out.join("proposals.txt"))?, &rec.proposals).stage(Stage::Proposals)?;
            let refined: Vec<RoI> = rec
                .refined
                .iter()
                .map(|b| RoI {
                    score: b.confidence,
                    ..b.roi
                })
                .collect();
            write_boxes(create(&c.out.join("refined.txt"))?, &refined).stage(Stage::Refine)?;
            println!("total loss {:.6}, {} proposals", rec.loss.total, rec.proposals.len());
        }
        Command::Overfit { common: c, steps } => {
            let (cfg, scene) = setup(&c)?;
            let steps = steps.unwrap_or(cfg.steps);
            let (report, model) = overfit_test(&cfg, &scene, steps)?;
            write_text(&c.out.join("loss.csv"), &report.to_csv())?;
            save_checkpoint(&model.store, create(&c.out.join("params.ckpt"))?).stage(Stage::Backward)?;
            let summary = OverfitSummary {
                steps,
                initial_total: report.initial_total(),
                final_total: report.final_total(),
                ratio: report.final_total() / report.initial_total(),
                gt_confidence: report.gt_confidence.clone(),
            };
            write_json(&c.out.join("overfit.json"), &summary)?;
            println!(
                "loss {:.6} -> {:.6} ({:.1}%), min confidence {:.4}",
                summary.initial_total,
                summary.final_total,
                100.0 * summary.ratio,
                report.min_gt_confidence()
            );
        }
        Command::Gradcheck {
            common: c,
            draws,
            tolerance,
            model,
        } => {
            let (cfg, scene) = setup(&c)?;
            let ops = gradient_suite(draws, cfg.seed).stage(Stage::Backward)?;
            let model = match model {
                Some(n) => Some(model_gradient_check(&cfg, &scene, n)?),
                None => None,
            };
            let passed = ops.iter().all(|o| o.passes(tolerance)) && model.as_ref().is_none_or(|m| m.passes(tolerance));
            for o in &ops {
                println!("{:<16} {:>6} checked  max rel {:.3e}", o.name, o.checked, o.max_rel_error);
            }
            if let Some(m) = &model {
                println!("{:<16} {:>6} checked  max rel {:.3e}", "model", m.checked, m.max_rel_error);
            }
            write_json(
                &c.out.join("gradcheck.json"),
                &GradcheckSummary {
                    tolerance,
                    ops,
                    model,
                    passed,
                },
            )?;
            if !passed {
                return Err(CliError::Check(format!("gradient check exceeded tolerance {tolerance}")));
            }
        }
    }
    Ok(())
}
