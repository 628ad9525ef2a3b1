//! Keypoint-transfer evaluation, video tracking and throughput benchmarks.

use std::collections::BTreeMap;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{FeatureSource, TrainConfig};
use super::data::{load_pairs, synthetic_images, video_frames};
use super::{load_student, RunDir};
use crate::domain::{CorrespondencePair, FeatureMap, Image, Keypoint};
use crate::error::{Error, Result};
use crate::eval::overlay::{render_overlay, render_points};
use crate::eval::{
    aggregate_hits, match_keypoints, pck_hits, throughput_benchmark, track_keypoints, BenchReport, MatchConfig, PckAggregation,
    PckConfig, PckReference, PckTarget, PoseChoice,
};
use crate::eval::bench::BenchTarget;
use crate::features::{extract_vit, Teachers};

pub type Extractor<'a> = dyn Fn(&Image) -> Result<FeatureMap> + 'a;

/// Predicted target keypoints for every annotated source keypoint of a pair.
pub fn predict_pair(extract: &Extractor<'_>, pair: &CorrespondencePair, cfg: &MatchConfig) -> Result<(Vec<Keypoint>, PoseChoice)> {
    let fs = extract(&pair.source)?.l2_normalize()?;
    let ft = extract(&pair.target)?.l2_normalize()?;
    let flipped = if cfg.use_pose_align { Some(extract(&pair.source.flip_horizontal())?.l2_normalize()?) } else { None };
    let sources: Vec<Keypoint> = pair.keypoints.iter().map(|(s, _)| s.clone()).collect();
    match_keypoints(&fs, flipped.as_ref(), &ft, &sources, cfg)
}

fn pck_target(pair: &CorrespondencePair) -> PckTarget {
    PckTarget { image_size: pair.target.size(), bbox: pair.target_bbox, class: pair.target.category().map(str::to_string) }
}

struct Flat {
    predictions: Vec<Keypoint>,
    truth: Vec<Keypoint>,
    targets: Vec<PckTarget>,
}

fn flatten(pairs: &[CorrespondencePair], predictions: &[Vec<Keypoint>]) -> Flat {
    let mut f = Flat { predictions: Vec::new(), truth: Vec::new(), targets: Vec::new() };
    for (pair, preds) in pairs.iter().zip(predictions) {
        let t = pck_target(pair);
        for ((_, gt), p) in pair.keypoints.iter().zip(preds) {
            f.predictions.push(p.clone());
            f.truth.push(gt.clone());
            f.targets.push(t.clone());
        }
    }
    f
}

/// PCK@alpha of the given feature extractor over `pairs`.
pub fn pairs_pck(
    extract: &Extractor<'_>,
    pairs: &[CorrespondencePair],
    matching: &MatchConfig,
    alpha: f64,
    reference: PckReference,
    aggregation: PckAggregation,
) -> Result<f64> {
    let preds = pairs.iter().map(|p| predict_pair(extract, p, matching).map(|r| r.0)).collect::<Result<Vec<_>>>()?;
    let flat = flatten(pairs, &preds);
    let hits = pck_hits(&flat.predictions, &flat.truth, &flat.targets, &PckConfig { alpha, reference, aggregation })?;
    aggregate_hits(&hits, &flat.targets, aggregation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaResult {
    pub alpha: f64,
    pub pck_per_point: f64,
    pub pck_per_class: f64,
    /// Per-point PCK within each class; unlabelled points are under `""`.
    pub classes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub features: FeatureSource,
    pub reference: PckReference,
    pub pose_align: bool,
    pub pairs: usize,
    pub points: usize,
    pub flipped_pairs: usize,
    pub results: Vec<AlphaResult>,
}

impl EvalReport {
    /// Result for `alpha`, if it was evaluated.
    pub fn at(&self, alpha: f64) -> Option<&AlphaResult> {
        self.results.iter().find(|r| r.alpha == alpha)
    }
}

fn make_extractor<'a>(cfg: &TrainConfig, student: &'a Option<crate::student::StudentModel>, teachers: &'a Option<Teachers>) -> Box<Extractor<'a>> {
    match cfg.eval.features {
        FeatureSource::Student => {
            let s = student.as_ref().expect("student loaded");
            Box::new(move |img: &Image| s.extract(img))
        }
        FeatureSource::Teacher => {
            let t = teachers.as_ref().expect("teachers loaded");
            Box::new(move |img: &Image| t.fused(img))
        }
    }
}

/// Evaluates keypoint transfer on the configured pairs. Writes
/// `reports/eval.json` and, when enabled, overlays.
pub fn run_eval(cfg: &TrainConfig, run_dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let run = RunDir::prepare(run_dir, cfg)?;
    let pairs: Vec<CorrespondencePair> = load_pairs(&cfg.data, cfg.seed)?.into_iter().filter(|p| !p.keypoints.is_empty()).collect();
    if pairs.is_empty() {
        return Err(Error::EmptyCorrespondences);
    }
    let student = match cfg.eval.features {
        FeatureSource::Student => Some(load_student(cfg)?),
        FeatureSource::Teacher => None,
    };
    let teachers = match cfg.eval.features {
        FeatureSource::Teacher => Some(Teachers::load(&cfg.vit, &cfg.diffusion)?),
        FeatureSource::Student => None,
    };
    let extract = make_extractor(cfg, &student, &teachers);
    let mut predictions = Vec::with_capacity(pairs.len());
    let mut flipped_pairs = 0;
    for pair in &pairs {
        let (preds, choice) = predict_pair(extract.as_ref(), pair, &cfg.matching)?;
        flipped_pairs += usize::from(choice == PoseChoice::Flipped);
        predictions.push(preds);
    }
    let flat = flatten(&pairs, &predictions);
    let mut results = Vec::with_capacity(cfg.eval.alphas.len());
    for &alpha in &cfg.eval.alphas {
        let pc = PckConfig { alpha, reference: cfg.eval.reference, aggregation: PckAggregation::PerPoint };
        let hits = pck_hits(&flat.predictions, &flat.truth, &flat.targets, &pc)?;
        let mut by_class: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (h, t) in hits.iter().zip(&flat.targets) {
            let e = by_class.entry(t.class.clone().unwrap_or_default()).or_default();
            e.0 += usize::from(*h);
            e.1 += 1;
        }
        results.push(AlphaResult {
            alpha,
            pck_per_point: aggregate_hits(&hits, &flat.targets, PckAggregation::PerPoint)?,
            pck_per_class: aggregate_hits(&hits, &flat.targets, PckAggregation::PerClass)?,
            classes: by_class.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect(),
        });
    }
    if cfg.eval.overlays {
        let pc = PckConfig { alpha: cfg.eval.alphas[0], reference: cfg.eval.reference, aggregation: PckAggregation::PerPoint };
        for (i, (pair, preds)) in pairs.iter().zip(&predictions).enumerate().take(cfg.eval.max_overlays) {
            let truth: Vec<Keypoint> = pair.keypoints.iter().map(|(_, t)| t.clone()).collect();
            let targets = vec![pck_target(pair); truth.len()];
            let correct: Vec<Option<bool>> = pck_hits(preds, &truth, &targets, &pc)?.into_iter().map(Some).collect();
            let sources: Vec<Keypoint> = pair.keypoints.iter().map(|(s, _)| s.clone()).collect();
            let path = run.overlays().join(format!("pair_{i:04}.png"));
            render_overlay(&pair.source, &pair.target, &sources, preds, &correct).save(&path).map_err(|e| Error::parse(path.display().to_string(), e))?;
        }
    }
    let report = EvalReport {
        config_fingerprint: cfg.fingerprint(),
        features: cfg.eval.features,
        reference: cfg.eval.reference,
        pose_align: cfg.matching.use_pose_align,
        pairs: pairs.len(),
        points: flat.truth.len(),
        flipped_pairs,
        results,
    };
    info!("eval: {:?}", report.results);
    run.write_json("eval.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramePrediction {
    pub frame: usize,
    pub image_id: String,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPrediction {
    pub config_fingerprint: String,
    pub frames: Vec<FramePrediction>,
}

/// Tracks `points` (given on frame 0) through every frame in `frames_dir`.
/// Writes `reports/predictions.json` and one overlay per frame.
pub fn predict_video(cfg: &TrainConfig, frames_dir: &Path, points: &[Keypoint], run_dir: &Path) -> Result<VideoPrediction> {
    cfg.validate()?;
    let frames = video_frames(frames_dir)?;
    predict_frames(cfg, &frames, points, run_dir)
}

pub fn predict_frames(cfg: &TrainConfig, frames: &[Image], points: &[Keypoint], run_dir: &Path) -> Result<VideoPrediction> {
    if frames.is_empty() {
        return Err(Error::EmptyList("video frames"));
    }
    if points.is_empty() {
        return Err(Error::EmptyList("query points"));
    }
    for p in points {
        if !p.in_image(frames[0].size()) {
            let (h, w) = frames[0].size();
            return Err(Error::OutOfBounds { x: p.x, y: p.y, width: w, height: h });
        }
    }
    let run = RunDir::prepare(run_dir, cfg)?;
    let student = if cfg.eval.features == FeatureSource::Student { Some(load_student(cfg)?) } else { None };
    let teachers = if cfg.eval.features == FeatureSource::Teacher { Some(Teachers::load(&cfg.vit, &cfg.diffusion)?) } else { None };
    let extract = make_extractor(cfg, &student, &teachers);
    let maps = frames.iter().map(|f| extract(f)?.l2_normalize()).collect::<Result<Vec<_>>>()?;
    let tracks = track_keypoints(&maps, points, &cfg.matching)?;
    let out = VideoPrediction {
        config_fingerprint: cfg.fingerprint(),
        frames: frames.iter().zip(tracks).enumerate().map(|(i, (f, k))| FramePrediction { frame: i, image_id: f.id().to_string(), keypoints: k }).collect(),
    };
    if cfg.eval.overlays {
        for (f, p) in frames.iter().zip(&out.frames) {
            let path = run.overlays().join(format!("frame_{:05}.png", p.frame));
            render_points(f, &p.keypoints).save(&path).map_err(|e| Error::parse(path.display().to_string(), e))?;
        }
    }
    run.write_json("predictions.json", &out)?;
    Ok(out)
}

/// Student (batched) and teacher throughput on synthetic inputs. Writes
/// `reports/bench.json`.
pub fn run_bench(cfg: &TrainConfig, run_dir: &Path) -> Result<Vec<BenchReport>> {
    cfg.validate()?;
    let run = RunDir::prepare(run_dir, cfg)?;
    let b = &cfg.bench;
    let student = load_student(cfg)?;
    let teachers = Teachers::load(&cfg.vit, &cfg.diffusion)?;
    let images = |size: [usize; 2]| synthetic_images(b.images, (size[0], size[1]), cfg.seed);
    let mut reports = Vec::new();

    let s_imgs = images(cfg.vit.input_size);
    let mut target = BenchTarget {
        model: format!("student:{}", student.backbone_id),
        input_size: cfg.vit.input_size,
        param_count: student.backbone.param_count() + student.trainable_param_count(),
        run: Box::new(|batch: &[Image]| student.extract_batch(batch).map(drop)),
    };
    reports.push(throughput_benchmark(&mut target, &s_imgs, b.batch_size, &cfg.device, b.warmup, b.repetitions)?);

    let mut target = BenchTarget {
        model: format!("teacher:{}", teachers.vit.backend_id()),
        input_size: cfg.vit.input_size,
        param_count: teachers.vit.param_count(),
        run: Box::new(|batch: &[Image]| batch.iter().try_for_each(|i| extract_vit(teachers.vit.as_ref(), i, &cfg.vit).map(drop))),
    };
    reports.push(throughput_benchmark(&mut target, &s_imgs, 1, &cfg.device, b.warmup, b.repetitions)?);

    let d_imgs = images(cfg.diffusion.input_size);
    let mut target = BenchTarget {
        model: format!("teacher:{}", teachers.diffusion.backend_id()),
        input_size: cfg.diffusion.input_size,
        param_count: teachers.diffusion.param_count(),
        run: Box::new(|batch: &[Image]| batch.iter().try_for_each(|i| teachers.diffusion_features(i).map(drop))),
    };
    reports.push(throughput_benchmark(&mut target, &d_imgs, 1, &cfg.device, b.warmup, b.repetitions)?);

    let mut target = BenchTarget {
        model: "teacher:fused".into(),
        input_size: cfg.vit.input_size,
        param_count: teachers.param_count(),
        run: Box::new(|batch: &[Image]| batch.iter().try_for_each(|i| teachers.fused(i).map(drop))),
    };
    reports.push(throughput_benchmark(&mut target, &s_imgs, 1, &cfg.device, b.warmup, b.repetitions)?);
    run.write_json("bench.json", &reports)?;
    Ok(reports)
}
