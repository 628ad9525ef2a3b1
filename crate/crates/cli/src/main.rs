use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use distillcorr::domain::Keypoint;
use distillcorr::features::{CacheKey, FeatureCache, Teachers};
use distillcorr::geom3d::manifest::convert_co3d;
use distillcorr::pairing::EmbeddingIndex;
use distillcorr::pipeline::config::DataKind;
use distillcorr::pipeline::data::load_images;
use distillcorr::pipeline::{
    predict_video, run_3d_finetune, run_bench, run_distillation, run_eval, run_supervised_finetune, write_json, RunDir, RunOptions, TrainConfig,
    TrainingCheckpoint,
};
use distillcorr::{features, Error};
use log::info;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "distillcorr", version, about = "Distilled dense features for semantic correspondence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file; built-in defaults when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set loss.tau=0.02`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory: config.resolved, checkpoints/, reports/, overlays/.
    #[arg(long, default_value = "runs/latest")]
    run_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Extract fused teacher features for the configured images into a cache.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Cache directory (default: $DISTILLCORR_CACHE, else <run-dir>/features).
        #[arg(long)]
        feature_cache: Option<PathBuf>,
    },
    /// Build the image-embedding retrieval index.
    BuildIndex {
        #[command(flatten)]
        common: Common,
        /// JSON-lines image manifest; overrides data.kind / data.path.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Index directory (default: <run-dir>/index).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multi-teacher distillation into the LoRA student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        feature_cache: Option<PathBuf>,
    },
    /// Unsupervised fine-tuning on multi-view reprojection correspondences.
    Finetune3d {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Supervised fine-tuning on annotated keypoint pairs.
    FinetuneSup {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// PCK evaluation with overlays.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Track query points through a directory of video frames.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Directory of frames, processed in file-name order.
        #[arg(long)]
        video: PathBuf,
        /// JSON list of `{"x": .., "y": ..}` points on the first frame.
        #[arg(long)]
        points: PathBuf,
    },
    /// Throughput of the student and the teachers.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Convert CO3D frame annotations into a multi-view manifest.
    ConvertMultiview {
        #[command(flatten)]
        common: Common,
        /// `frame_annotations.jgz` (or plain JSON).
        #[arg(long)]
        annotations: PathBuf,
        /// Root that annotation paths are relative to.
        #[arg(long)]
        dataset_root: PathBuf,
        /// Output manifest (JSON lines).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        category: Option<String>,
    },
}

#[derive(Args, Clone, Default)]
struct TrainFlags {
    /// Continue from the stage's latest checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn resolve(common: &Common) -> Result<TrainConfig, Failure> {
    TrainConfig::resolve(common.config.as_deref(), &common.overrides).map_err(|e| Failure::Usage(e.to_string()))
}

fn opts(common: &Common, train: &TrainFlags, cache: Option<PathBuf>) -> RunOptions {
    RunOptions { run_dir: common.run_dir.clone(), resume: train.resume, stop_after_epoch: None, feature_cache: cache }
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn summarize(ck: &TrainingCheckpoint) {
    if let Some(last) = ck.history.last() {
        print_json(last);
    }
}

#[derive(Serialize)]
struct ExtractEntry {
    image_id: String,
    key: String,
    grid: (usize, usize),
    dim: usize,
}

fn extract(cfg: &TrainConfig, run_dir: &Path, flag: Option<&Path>) -> Result<usize, Failure> {
    let run = RunDir::prepare(run_dir, cfg)?;
    let cache = match FeatureCache::resolve(flag)? {
        Some(c) => c,
        None => FeatureCache::new(run.root().join("features"))?,
    };
    let teachers = Teachers::load(&cfg.vit, &cfg.diffusion)?;
    let mut entries = Vec::new();
    for img in load_images(&cfg.data, cfg.seed)? {
        let fm = teachers.fused_cached(&img, &cache)?;
        let key = CacheKey::fused(img.id(), &cfg.vit, &cfg.diffusion);
        entries.push(ExtractEntry { image_id: img.id().to_string(), key: key.as_str().to_string(), grid: fm.grid(), dim: fm.dim() });
    }
    run.write_json("extract.json", &entries)?;
    info!("cached {} fused feature maps in {}", entries.len(), cache.dir().display());
    Ok(entries.len())
}

fn read_points(path: &Path) -> Result<Vec<Keypoint>, Failure> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&text).map_err(|e| Error::parse(path.display().to_string(), e))?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Extract { common, feature_cache } => {
            let cfg = resolve(&common)?;
            let n = extract(&cfg, &common.run_dir, feature_cache.as_deref())?;
            println!("extracted {n} feature maps");
        }
        Command::BuildIndex { common, dataset, out } => {
            let mut cfg = resolve(&common)?;
            if let Some(d) = dataset {
                cfg.data.kind = DataKind::Images;
                cfg.data.path = Some(d);
            }
            let run = RunDir::prepare(&common.run_dir, &cfg)?;
            let images = load_images(&cfg.data, cfg.seed)?;
            let backend = features::load_vit(&cfg.vit)?;
            let index = EmbeddingIndex::build(&images, backend.as_ref(), &cfg.vit)?;
            let out = out.unwrap_or_else(|| run.root().join("index"));
            index.save(&out)?;
            println!("indexed {} images into {}", index.len(), out.display());
        }
        Command::Distill { common, train, feature_cache } => {
            let cfg = resolve(&common)?;
            summarize(&run_distillation(&cfg, &opts(&common, &train, feature_cache))?);
        }
        Command::Finetune3d { common, train } => {
            let cfg = resolve(&common)?;
            summarize(&run_3d_finetune(&cfg, &opts(&common, &train, None))?);
        }
        Command::FinetuneSup { common, train } => {
            let cfg = resolve(&common)?;
            summarize(&run_supervised_finetune(&cfg, &opts(&common, &train, None))?);
        }
        Command::Eval { common } => {
            let cfg = resolve(&common)?;
            print_json(&run_eval(&cfg, &common.run_dir)?.results);
        }
        Command::Predict { common, video, points } => {
            let cfg = resolve(&common)?;
            let points = read_points(&points)?;
            let out = predict_video(&cfg, &video, &points, &common.run_dir)?;
            println!("tracked {} points through {} frames", points.len(), out.frames.len());
        }
        Command::Bench { common } => {
            let cfg = resolve(&common)?;
            print_json(&run_bench(&cfg, &common.run_dir)?);
        }
        Command::ConvertMultiview { common, annotations, dataset_root, out, category } => {
            let cfg = resolve(&common)?;
            let run = RunDir::prepare(&common.run_dir, &cfg)?;
            let n = convert_co3d(&annotations, &dataset_root, &out, category.as_deref())?;
            write_json(&run.reports().join("convert_multiview.json"), &serde_json::json!({ "frames": n, "manifest": out }))?;
            println!("wrote {n} frames to {}", out.display());
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
