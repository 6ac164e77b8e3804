use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use stereo3d::anchors::{compute_priors, AnchorPriors};
use stereo3d::disparity::{block_match, luminance, save_disparity_png, BlockMatchParams};
use stereo3d::evaluation::{evaluate_all, format_report, IouKind};
use stereo3d::kitti::{parse_detections, parse_labels, write_detections, KittiDataset, ObjectAnnotation};
use stereo3d::model::{random_archive, DetectOptions, Model, ModelConfig, Transform};
use stereo3d::stereo::bench_cost_volumes;
use stereo3d::weights::WeightArchive;
use stereo3d::{selftest, synthetic, Error, Result};

#[derive(Parser)]
#[command(name = "stereo3d", version, about = "Stereo 3D detection inference and data tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-anchor depth and orientation priors from a labelled split.
    Priors {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// model configuration (JSON); defaults are used otherwise
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        pos_iou: f64,
        #[arg(long, default_value_t = 0.4)]
        neg_iou: f64,
    },
    /// Run detection on every frame and write KITTI result files.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long, default_value_t = 0.75)]
        score: f64,
        #[arg(long, default_value_t = 0.4)]
        nms: f64,
        /// also run the disparity decoder
        #[arg(long)]
        emit_disparity: bool,
        /// restrict to the ids listed in this file
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Block-matching disparity maps as 16-bit PNG (value / 256, 0 = invalid).
    GenDisparity {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 96)]
        search_range: usize,
    },
    /// Time correlation against concatenation cost-volume construction.
    Bench {
        /// BxCxHxW
        #[arg(long, default_value = "1x64x72x320")]
        shape: String,
        #[arg(long, default_value_t = 96)]
        max_disp: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long)]
        json: bool,
        /// worker threads (single-threaded when omitted)
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Average precision of detection files against label files.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        det: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, default_value = "3d")]
        kind: IouKind,
        #[arg(long, default_value_t = 40)]
        points: usize,
    },
    /// Oracle and invariant checks on synthetic data.
    Selftest,
    /// Write a seeded random weight archive for the default model.
    InitWeights {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset in the KITTI object layout.
    InitData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = synthetic::KITTI_WIDTH)]
        width: u32,
        #[arg(long, default_value_t = synthetic::KITTI_HEIGHT)]
        height: u32,
    },
}

fn load_config(path: Option<&Path>) -> Result<ModelConfig> {
    let cfg = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => ModelConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn frame_ids(ds: &KittiDataset, split: Option<&Path>) -> Result<Vec<String>> {
    match split {
        Some(p) => KittiDataset::read_split(p),
        None => ds.frame_ids(),
    }
}

fn parse_shape(s: &str) -> Result<[usize; 4]> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidInput(format!("shape {s:?}: {e}")))?;
    dims.try_into()
        .map_err(|_| Error::InvalidInput(format!("shape {s:?} must have four dimensions")))
}

fn read_dir_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut files: Vec<(String, PathBuf)> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p.clone())))
        .collect();
    files.sort();
    Ok(files)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Priors {
            data,
            split,
            out,
            config,
            pos_iou,
            neg_iou,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = KittiDataset::new(data);
            let mut frames: Vec<Vec<ObjectAnnotation>> = Vec::new();
            for id in KittiDataset::read_split(&split)? {
                let (w, h) = ds.image_size(&id)?;
                let t = Transform::new(w as usize, h as usize, &cfg)?;
                let objs = ds
                    .labels(&id)?
                    .into_iter()
                    .map(|o| ObjectAnnotation {
                        box2d: t.forward_box(&o.box2d),
                        ..o
                    })
                    .collect();
                frames.push(objs);
            }
            let anchors = stereo3d::anchors::generate_grid(cfg.input_w, cfg.input_h, &cfg.anchor_shapes)?;
            let priors = compute_priors(frames.iter().map(Vec::as_slice), &anchors, &cfg.classes, pos_iou, neg_iou)?;
            std::fs::write(&out, priors.to_json()?)?;
            info!("priors from {} frames written to {}", frames.len(), out.display());
        }
        Command::Infer {
            data,
            weights,
            priors,
            score,
            nms,
            emit_disparity,
            split,
            out,
        } => {
            let model = Model::from_archive(WeightArchive::load(&weights)?)?;
            let priors = AnchorPriors::from_json(&std::fs::read_to_string(&priors)?)?;
            let opts = DetectOptions {
                score_threshold: score,
                nms_threshold: nms,
                emit_disparity,
            };
            let ds = KittiDataset::new(data);
            std::fs::create_dir_all(&out)?;
            for id in frame_ids(&ds, split.as_deref())? {
                let (left, right) = ds.image_pair(&id)?;
                let calib = ds.calibration(&id)?;
                let report = model.detect(&left, &right, &calib, &priors, &opts)?;
                for d in &report.detections {
                    let finite = d.location.iter().all(|v| v.is_finite()) && d.score.is_finite();
                    if !finite {
                        return Err(Error::NonFinite(format!("detection in frame {id}")));
                    }
                }
                std::fs::write(out.join(format!("{id}.txt")), write_detections(&report.detections)?)?;
                info!("{id}: {} detections", report.detections.len());
            }
        }
        Command::GenDisparity {
            data,
            out,
            split,
            search_range,
        } => {
            let ds = KittiDataset::new(data);
            let params = BlockMatchParams {
                search_range,
                ..BlockMatchParams::default()
            };
            std::fs::create_dir_all(&out)?;
            for id in frame_ids(&ds, split.as_deref())? {
                let (left, right) = ds.image_pair(&id)?;
                let (w, h) = left.dimensions();
                let map = block_match(&luminance(&left), &luminance(&right), w as usize, h as usize, &params)?;
                save_disparity_png(&map, &out.join(format!("{id}.png")))?;
                info!("{id}: {} valid pixels", map.valid_count());
            }
        }
        Command::Bench {
            shape,
            max_disp,
            reps,
            json,
            threads,
        } => {
            let report = bench_cost_volumes(parse_shape(&shape)?, max_disp, reps, threads)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::Evaluate {
            gt,
            det,
            iou,
            kind,
            points,
        } => {
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for (id, path) in read_dir_files(&gt)? {
                gts.push(parse_labels(&std::fs::read_to_string(&path)?)?);
                let d = det.join(format!("{id}.txt"));
                dets.push(if d.exists() {
                    parse_detections(&std::fs::read_to_string(&d)?)?
                } else {
                    Vec::new()
                });
            }
            let rows = evaluate_all(&gts, &dets, kind, iou, points)?;
            print!("{}", format_report(&rows));
        }
        Command::Selftest => {
            let checks = selftest::run();
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Invariant(format!("{failed} self-test check(s) failed")));
            }
        }
        Command::InitWeights { seed, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let archive = random_archive(&cfg, seed)?;
            archive.save(&out)?;
            info!("{} tensors written to {}", archive.len(), out.display());
        }
        Command::InitData {
            out,
            frames,
            seed,
            width,
            height,
        } => {
            let ids = synthetic::write_dataset(&out, frames, seed, width, height)?;
            info!("{} frames written to {}", ids.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
