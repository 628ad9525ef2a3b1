//! The three training loops. Each epoch draws from its own RNG stream
//! (seed, stage, epoch), so resuming at an epoch boundary replays the same
//! samples and dropout masks as an uninterrupted run.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::{load_images, load_multiview, load_pairs};
use super::evaluate::pairs_pck;
use super::optim::{step_lr, AdamW, AdamWState};
use super::{load_student, write_json, RunDir};
use crate::domain::{image_to_cell, image_to_grid, CorrespondencePair, FeatureMap, Image, SimilarityMap};
use crate::error::{Error, Result};
use crate::eval::{hard_argmax, match_keypoint, MatchConfig, PckAggregation};
use crate::features::{FeatureCache, Teachers};
use crate::geom3d::{build_3d_samples, CameraView, Geom3DConfig, Geom3DSample};
use crate::objectives::{distill_loss_raw, finetune_loss_raw, gaussian_targets, similarity_map, RawSimilarity};
use crate::pairing::{EmbeddingIndex, PairKind, PairSampler, PairingDataset};
use crate::student::{StudentCheckpoint, StudentGrads, StudentModel};
use crate::util::rng_from;

pub const TRAINING_CHECKPOINT_VERSION: u32 = 1;
const MAX_REJECTIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Distill,
    Finetune3d,
    Supervised,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Distill => "distill",
            Stage::Finetune3d => "finetune3d",
            Stage::Supervised => "supervised",
        }
    }
}

/// Per-epoch log line. Epoch 0 is the state before any update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub updates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_loss: Option<f64>,
    /// Fraction of probe source cells whose student argmax equals the teacher's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_agreement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_pck: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dropout: Option<f64>,
    pub skipped_pairs: usize,
}

impl EpochRecord {
    fn new(epoch: usize, lr: f64) -> Self {
        Self { epoch, lr, updates: 0, train_loss: None, probe_loss: None, probe_agreement: None, eval_pck: None, head_dropout: None, skipped_pairs: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCheckpoint {
    pub schema_version: u32,
    pub stage: Stage,
    pub epochs_completed: usize,
    pub config_fingerprint: String,
    pub student: StudentCheckpoint,
    pub optimizer: AdamWState,
    pub history: Vec<EpochRecord>,
    /// Mean batch loss of every optimizer step so far.
    pub step_losses: Vec<f64>,
}

impl TrainingCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::parse("checkpoint", e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        std::io::Write::write_all(&mut tmp, &bytes).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_slice(&bytes).map_err(|e| Error::parse(path.display().to_string(), e))?;
        if ck.schema_version != TRAINING_CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!("training checkpoint version {}", ck.schema_version)));
        }
        Ok(ck)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub run_dir: PathBuf,
    /// Continue from `checkpoints/<stage>-latest.json` when present.
    pub resume: bool,
    /// Stop once this many epochs are complete (simulated interruption).
    pub stop_after_epoch: Option<usize>,
    /// Teacher feature cache; `$DISTILLCORR_CACHE` when absent.
    pub feature_cache: Option<PathBuf>,
}

pub fn latest_path(run: &RunDir, stage: Stage) -> PathBuf {
    run.checkpoints().join(format!("{}-latest.json", stage.name()))
}

struct Trainer {
    stage: Stage,
    student: StudentModel,
    opt: AdamW,
    adapters: bool,
    head: bool,
    history: Vec<EpochRecord>,
    step_losses: Vec<f64>,
    epochs_completed: usize,
    fingerprint: String,
}

impl Trainer {
    fn start(stage: Stage, cfg: &TrainConfig, run: &RunDir, opts: &RunOptions, student: impl FnOnce() -> Result<StudentModel>, adapters: bool, head: bool) -> Result<Self> {
        let fingerprint = cfg.fingerprint();
        let latest = latest_path(run, stage);
        if opts.resume && latest.exists() {
            let ck = TrainingCheckpoint::load(&latest)?;
            if ck.stage != stage || ck.config_fingerprint != fingerprint {
                return Err(Error::CheckpointMismatch(format!("{} was written by a different stage or config", latest.display())));
            }
            info!("resuming {} after epoch {}", stage.name(), ck.epochs_completed);
            return Ok(Self {
                stage,
                student: ck.student.to_model()?,
                opt: AdamW::restore(&cfg.optimizer, &ck.optimizer)?,
                adapters,
                head,
                history: ck.history,
                step_losses: ck.step_losses,
                epochs_completed: ck.epochs_completed,
                fingerprint,
            });
        }
        let mut student = student()?;
        let shapes: Vec<(usize, usize)> = student.trainable_tensors_mut(adapters, head).iter().map(|t| t.dim()).collect();
        if shapes.is_empty() {
            return Err(Error::ConfigInvalid(format!("{} has nothing to train", stage.name())));
        }
        Ok(Self { stage, student, opt: AdamW::new(&cfg.optimizer, &shapes), adapters, head, history: Vec::new(), step_losses: Vec::new(), epochs_completed: 0, fingerprint })
    }

    fn apply(&mut self, grads: &StudentGrads, lr: f64) -> Result<()> {
        let g = grads.tensors(self.adapters, self.head);
        let p = self.student.trainable_tensors_mut(self.adapters, self.head);
        self.opt.step(p, &g, lr)
    }

    fn checkpoint(&self) -> TrainingCheckpoint {
        TrainingCheckpoint {
            schema_version: TRAINING_CHECKPOINT_VERSION,
            stage: self.stage,
            epochs_completed: self.epochs_completed,
            config_fingerprint: self.fingerprint.clone(),
            student: StudentCheckpoint::from_model(&self.student),
            optimizer: self.opt.state(),
            history: self.history.clone(),
            step_losses: self.step_losses.clone(),
        }
    }

    fn end_epoch(&mut self, run: &RunDir, record: EpochRecord) -> Result<()> {
        info!("{} epoch {}: {:?}", self.stage.name(), record.epoch, record);
        self.history.push(record);
        self.epochs_completed += 1;
        let ck = self.checkpoint();
        ck.save(&run.checkpoints().join(format!("{}-epoch{:03}.json", self.stage.name(), self.epochs_completed)))?;
        ck.save(&latest_path(run, self.stage))
    }

    fn finish(self, run: &RunDir) -> Result<TrainingCheckpoint> {
        let ck = self.checkpoint();
        ck.student.save(&run.checkpoints().join(format!("{}-student.json", self.stage.name())))?;
        write_json(&run.reports().join(format!("{}_history.json", self.stage.name())), &(&ck.history, &ck.step_losses))?;
        Ok(ck)
    }

    fn epoch_range(&self, epochs: usize, opts: &RunOptions) -> std::ops::Range<usize> {
        let end = opts.stop_after_epoch.map_or(epochs, |s| s.min(epochs));
        self.epochs_completed..end.max(self.epochs_completed)
    }
}

fn epoch_rng(cfg: &TrainConfig, stage: Stage, epoch: usize) -> ChaCha8Rng {
    rng_from(&[stage.name(), &cfg.seed.to_string(), "epoch", &epoch.to_string()])
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Eval-mode raw student rows.
fn student_rows(student: &StudentModel, image: &Image) -> Result<Array2<f64>> {
    Ok(student.forward_traced(image, None)?.0)
}

struct DistillData {
    images: Vec<Image>,
    position: HashMap<String, usize>,
    teacher: Vec<FeatureMap>,
    sampler: PairSampler,
    withheld: BTreeSet<(String, String)>,
    probe: Vec<(usize, usize)>,
}

fn distill_data(cfg: &TrainConfig, run: &RunDir, opts: &RunOptions) -> Result<DistillData> {
    let images = load_images(&cfg.data, cfg.seed)?;
    write_json(&run.reports().join("distill_images.json"), &images.iter().map(|i| i.id()).collect::<Vec<_>>())?;
    let teachers = Teachers::load(&cfg.vit, &cfg.diffusion)?;
    let cache = FeatureCache::resolve(opts.feature_cache.as_deref())?;
    let teacher = images
        .iter()
        .map(|i| match &cache {
            Some(c) => teachers.fused_cached(i, c),
            None => teachers.fused(i),
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(t) = teacher.first() {
        if t.grid() != cfg.vit.grid() {
            return Err(Error::GridMismatch { left: t.grid(), right: cfg.vit.grid() });
        }
    }
    let index = match cfg.pairing.kind {
        PairKind::Retrieval => Some(EmbeddingIndex::build(&images, teachers.vit.as_ref(), &cfg.vit)?),
        _ => None,
    };
    let dataset = PairingDataset::from_images(&images);
    let sampler = PairSampler::new(&cfg.pairing, &dataset, index.as_ref())?;
    let mut all: Vec<(String, String)> =
        dataset.ids.iter().flat_map(|id| sampler.partners(id).unwrap_or_default().iter().map(move |p| (id.clone(), p.clone()))).collect();
    all.shuffle(&mut rng_from(&["probe", &cfg.seed.to_string()]));
    let n_withheld = if cfg.distill.probe_fraction > 0.0 { ((all.len() as f64 * cfg.distill.probe_fraction).ceil() as usize).min(all.len().saturating_sub(1)) } else { 0 };
    let withheld: BTreeSet<(String, String)> = all[..n_withheld].iter().cloned().collect();
    let position: HashMap<String, usize> = images.iter().enumerate().map(|(i, im)| (im.id().to_string(), i)).collect();
    let probe = all[..n_withheld.min(cfg.distill.probe_max_pairs)].iter().map(|(a, b)| (position[a], position[b])).collect();
    Ok(DistillData { images, position, teacher, sampler, withheld, probe })
}

/// Mean distillation loss and teacher-argmax agreement over probe pairs.
fn probe_metrics(student: &StudentModel, data: &DistillData, tau: f64) -> Result<(Option<f64>, Option<f64>)> {
    if data.probe.is_empty() {
        return Ok((None, None));
    }
    let mut rows: HashMap<usize, Array2<f64>> = HashMap::new();
    for &(a, b) in &data.probe {
        for i in [a, b] {
            if let std::collections::hash_map::Entry::Vacant(e) = rows.entry(i) {
                e.insert(student_rows(student, &data.images[i])?);
            }
        }
    }
    let (mut losses, mut agree, mut total) = (Vec::new(), 0usize, 0usize);
    for &(a, b) in &data.probe {
        let t = similarity_map(&data.teacher[a], &data.teacher[b])?;
        let (loss, _, _) = distill_loss_raw(&t, &rows[&a], &rows[&b], tau)?;
        losses.push(loss);
        let s = RawSimilarity::new(&rows[&a], &rows[&b])?.matrix();
        for (tr, sr) in t.data.rows().into_iter().zip(s.rows()) {
            let am = |r: ndarray::ArrayView1<f64>| hard_argmax(&r.to_owned().insert_axis(ndarray::Axis(0)));
            agree += usize::from(am(tr) == am(sr));
            total += 1;
        }
    }
    Ok((mean(&losses), Some(agree as f64 / total as f64)))
}

fn sample_training_pair(data: &DistillData, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    for _ in 0..MAX_REJECTIONS {
        let pair = data.sampler.sample(rng);
        if !data.withheld.contains(&pair) {
            return Ok((data.position[&pair.0], data.position[&pair.1]));
        }
    }
    Err(Error::StrategyUnavailable("every sampled pair is withheld for probing".into()))
}

/// Multi-teacher distillation into the LoRA adapters.
pub fn run_distillation(cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainingCheckpoint> {
    cfg.validate()?;
    let run = RunDir::prepare(&opts.run_dir, cfg)?;
    let data = distill_data(cfg, &run, opts)?;
    let mut tr = Trainer::start(Stage::Distill, cfg, &run, opts, || load_student(cfg), true, false)?;
    let tau = cfg.loss.tau;
    if tr.history.is_empty() {
        let (probe_loss, probe_agreement) = probe_metrics(&tr.student, &data, tau)?;
        tr.history.push(EpochRecord { probe_loss, probe_agreement, ..EpochRecord::new(0, cfg.optimizer.lr) });
    }
    let steps = cfg.distill.steps_per_epoch.unwrap_or_else(|| data.images.len().div_ceil(cfg.distill.batch_size)).max(1);
    for epoch in tr.epoch_range(cfg.distill.epochs, opts) {
        let lr = step_lr(cfg.optimizer.lr, &cfg.scheduler, epoch);
        let mut rng = epoch_rng(cfg, Stage::Distill, epoch);
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mut grads: Option<StudentGrads> = None;
            let mut batch_loss = 0.0;
            for _ in 0..cfg.distill.batch_size {
                let (a, b) = sample_training_pair(&data, &mut rng)?;
                let (xa, _, ta) = tr.student.forward_traced(&data.images[a], Some(&mut rng))?;
                let (xb, _, tb) = tr.student.forward_traced(&data.images[b], Some(&mut rng))?;
                let teacher: SimilarityMap = similarity_map(&data.teacher[a], &data.teacher[b])?;
                let (loss, da, db) = distill_loss_raw(&teacher, &xa, &xb, tau)?;
                let mut g = tr.student.backward(&ta, &da);
                g.add(&tr.student.backward(&tb, &db));
                batch_loss += loss;
                match &mut grads {
                    Some(acc) => acc.add(&g),
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.expect("batch size >= 1");
            let scale = 1.0 / cfg.distill.batch_size as f64;
            grads.scale(scale);
            tr.apply(&grads, lr)?;
            losses.push(batch_loss * scale);
        }
        tr.step_losses.extend(&losses);
        let (probe_loss, probe_agreement) = probe_metrics(&tr.student, &data, tau)?;
        let rec = EpochRecord { updates: steps, train_loss: mean(&losses), probe_loss, probe_agreement, ..EpochRecord::new(epoch + 1, lr) };
        tr.end_epoch(&run, rec)?;
    }
    tr.finish(&run)
}

/// Training and held-out frame subsequences: frame `i` is held out when
/// `i % every == every - 1`.
pub fn split_frames(seq: &[CameraView], every: usize) -> (Vec<CameraView>, Vec<CameraView>) {
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, v) in seq.iter().enumerate() {
        if i % every == every - 1 {
            held.push(v.clone());
        } else {
            train.push(v.clone());
        }
    }
    (train, held)
}

/// Fraction of sampled points whose hard match lands within
/// `alpha * max(grid h, grid w)` cells of the reprojected target.
pub fn grid_pck(student: &StudentModel, samples: &[Geom3DSample], alpha: f64) -> Result<Option<f64>> {
    let hard = MatchConfig { use_window_soft_argmax: false, use_pose_align: false, ..MatchConfig::default() };
    let (mut hit, mut total) = (0usize, 0usize);
    for s in samples {
        let fs = student.extract(&s.source)?.l2_normalize()?;
        let ft = student.extract(&s.target)?.l2_normalize()?;
        let (gh, gw) = ft.grid();
        let radius = alpha * gh.max(gw) as f64;
        for (p, &(ty, tx)) in s.source_pixels.iter().zip(&s.target_points) {
            let q = match_keypoint(&fs, &ft, p, &hard)?;
            let (qy, qx) = ft.image_to_grid(q.x, q.y);
            hit += usize::from((qy - ty).hypot(qx - tx) <= radius);
            total += 1;
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

fn stage_geom3d(cfg: &TrainConfig) -> Geom3DConfig {
    Geom3DConfig { points_per_pair: cfg.loss.points_per_pair, kernel_size: cfg.loss.kernel_size, ..cfg.geom3d.clone() }
}

/// Held-out 3D samples used to score fine-tuning.
pub fn heldout_3d_samples(cfg: &TrainConfig, sequences: &[Vec<CameraView>], grid: (usize, usize)) -> Result<Vec<Geom3DSample>> {
    let geom = stage_geom3d(cfg);
    let mut rng = rng_from(&["3d-eval", &cfg.seed.to_string()]);
    let held: Vec<Vec<CameraView>> = sequences.iter().map(|s| split_frames(s, cfg.finetune3d.holdout_every).1).filter(|s| s.len() >= 2).collect();
    let mut out = Vec::new();
    if held.is_empty() {
        return Ok(out);
    }
    let per_seq = cfg.finetune3d.eval_pairs.div_ceil(held.len());
    for seq in &held {
        out.extend(build_3d_samples(seq, &geom, grid, per_seq, &mut rng)?.samples);
    }
    out.truncate(cfg.finetune3d.eval_pairs);
    Ok(out)
}

/// Unsupervised fine-tuning of the adapters on reprojected correspondences.
pub fn run_3d_finetune(cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainingCheckpoint> {
    cfg.validate()?;
    if cfg.checkpoint.is_none() {
        return Err(Error::ConfigInvalid("3D fine-tuning needs a starting checkpoint (set `checkpoint`)".into()));
    }
    let run = RunDir::prepare(&opts.run_dir, cfg)?;
    let sequences = load_multiview(&cfg.data)?;
    let train: Vec<Vec<CameraView>> = sequences.iter().map(|s| split_frames(s, cfg.finetune3d.holdout_every).0).filter(|s| s.len() >= 2).collect();
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let geom = stage_geom3d(cfg);
    let alpha = cfg.finetune3d.eval_alpha;
    let mut tr = Trainer::start(Stage::Finetune3d, cfg, &run, opts, || load_student(cfg), true, false)?;
    let grid = tr.student.vit_cfg.grid();
    let held = heldout_3d_samples(cfg, &sequences, grid)?;
    if tr.history.is_empty() {
        tr.history.push(EpochRecord { eval_pck: grid_pck(&tr.student, &held, alpha)?, ..EpochRecord::new(0, cfg.optimizer.lr) });
    }
    for epoch in tr.epoch_range(cfg.finetune3d.epochs, opts) {
        let lr = step_lr(cfg.optimizer.lr, &cfg.scheduler, epoch);
        let mut rng = epoch_rng(cfg, Stage::Finetune3d, epoch);
        let mut rec = EpochRecord::new(epoch + 1, lr);
        let mut losses = Vec::new();
        for _ in 0..cfg.finetune3d.steps_per_epoch {
            let mut grads: Option<StudentGrads> = None;
            let (mut used, mut batch_loss) = (0usize, 0.0);
            for _ in 0..cfg.finetune3d.batch_size {
                let seq = &train[rng.random_range(0..train.len())];
                let batch = build_3d_samples(seq, &geom, grid, 1, &mut rng)?;
                rec.skipped_pairs += batch.skipped.len();
                let Some(s) = batch.samples.first() else { continue };
                let (xs, gs, ts) = tr.student.forward_traced(&s.source, Some(&mut rng))?;
                let (xt, gt, tt) = tr.student.forward_traced(&s.target, Some(&mut rng))?;
                let (loss, ds, dt) = finetune_loss_raw(&xs, gs, &xt, gt, &s.targets, cfg.loss.tau)?;
                let mut g = tr.student.backward(&ts, &ds);
                g.add(&tr.student.backward(&tt, &dt));
                batch_loss += loss;
                used += 1;
                match &mut grads {
                    Some(acc) => acc.add(&g),
                    None => grads = Some(g),
                }
            }
            if let Some(mut g) = grads {
                g.scale(1.0 / used as f64);
                tr.apply(&g, lr)?;
                losses.push(batch_loss / used as f64);
                rec.updates += 1;
            }
        }
        if rec.updates == 0 {
            warn!("3D fine-tune epoch {}: all {} sampled frame pairs lacked mutual visibility; no update", epoch + 1, rec.skipped_pairs);
        }
        tr.step_losses.extend(&losses);
        rec.train_loss = mean(&losses);
        rec.eval_pck = grid_pck(&tr.student, &held, alpha)?;
        tr.end_epoch(&run, rec)?;
    }
    tr.finish(&run)
}

/// Grid-space source points and Gaussian targets for annotated keypoints.
pub fn annotated_targets(pair: &CorrespondencePair, grid: (usize, usize), kernel: usize) -> Result<crate::objectives::CorrespondenceMap> {
    let mut src = Vec::with_capacity(pair.keypoints.len());
    let mut cells = Vec::with_capacity(pair.keypoints.len());
    for (s, t) in &pair.keypoints {
        src.push(image_to_grid(s.x, s.y, pair.source.size(), grid));
        let (r, c) = image_to_cell(t.x, t.y, pair.target.size(), grid);
        cells.push((r as i64, c as i64));
    }
    gaussian_targets(&cells, kernel, grid)?.with_source_points(src)
}

/// Linear dropout schedule from `start` (first epoch) to `end` (last epoch).
pub fn head_dropout(cfg: &TrainConfig, epoch: usize) -> f64 {
    let (a, b) = (cfg.student.head_dropout_start, cfg.student.head_dropout_end);
    if cfg.supervised.epochs <= 1 {
        return a;
    }
    a + (b - a) * epoch as f64 / (cfg.supervised.epochs - 1) as f64
}

/// PCK of the current student on the training pairs (eval mode).
pub fn train_pck(student: &StudentModel, pairs: &[CorrespondencePair], cfg: &TrainConfig) -> Result<f64> {
    let extract = |img: &Image| student.extract(img);
    pairs_pck(&extract, pairs, &cfg.matching, cfg.eval.alphas[0], cfg.eval.reference, PckAggregation::PerPoint)
}

/// Supervised fine-tuning with an identity-initialized head.
pub fn run_supervised_finetune(cfg: &TrainConfig, opts: &RunOptions) -> Result<TrainingCheckpoint> {
    cfg.validate()?;
    let run = RunDir::prepare(&opts.run_dir, cfg)?;
    let pairs = load_pairs(&cfg.data, cfg.seed)?;
    if pairs.iter().all(|p| p.keypoints.is_empty()) {
        return Err(Error::EmptyCorrespondences);
    }
    let init = || {
        let mut s = load_student(cfg)?;
        if s.head.is_none() {
            s.attach_head(cfg.student.head_width.unwrap_or(cfg.vit.feature_dim), cfg.student.head_dropout_start, cfg.seed)?;
        }
        Ok(s)
    };
    let mut tr = Trainer::start(Stage::Supervised, cfg, &run, opts, init, cfg.supervised.train_adapters, true)?;
    let grid = tr.student.vit_cfg.grid();
    let targets = pairs.iter().map(|p| (!p.keypoints.is_empty()).then(|| annotated_targets(p, grid, cfg.loss.kernel_size)).transpose()).collect::<Result<Vec<_>>>()?;
    if tr.history.is_empty() {
        tr.history.push(EpochRecord { eval_pck: Some(train_pck(&tr.student, &pairs, cfg)?), ..EpochRecord::new(0, cfg.optimizer.lr) });
    }
    for epoch in tr.epoch_range(cfg.supervised.epochs, opts) {
        let lr = step_lr(cfg.optimizer.lr, &cfg.scheduler, epoch);
        let dropout = head_dropout(cfg, epoch);
        tr.student.set_head_dropout(dropout);
        let mut rng = epoch_rng(cfg, Stage::Supervised, epoch);
        let mut order: Vec<usize> = (0..pairs.len()).filter(|i| targets[*i].is_some()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.supervised.batch_size) {
            let mut grads: Option<StudentGrads> = None;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let g_map = targets[i].as_ref().expect("filtered");
                let (xs, gs, ts) = tr.student.forward_traced(&pairs[i].source, Some(&mut rng))?;
                let (xt, gt, tt) = tr.student.forward_traced(&pairs[i].target, Some(&mut rng))?;
                let (loss, ds, dt) = finetune_loss_raw(&xs, gs, &xt, gt, g_map, cfg.loss.tau)?;
                let mut g = tr.student.backward(&ts, &ds);
                g.add(&tr.student.backward(&tt, &dt));
                batch_loss += loss;
                match &mut grads {
                    Some(acc) => acc.add(&g),
                    None => grads = Some(g),
                }
            }
            let mut g = grads.expect("non-empty chunk");
            g.scale(1.0 / chunk.len() as f64);
            tr.apply(&g, lr)?;
            losses.push(batch_loss / chunk.len() as f64);
        }
        tr.step_losses.extend(&losses);
        let rec = EpochRecord {
            updates: losses.len(),
            train_loss: mean(&losses),
            eval_pck: Some(train_pck(&tr.student, &pairs, cfg)?),
            head_dropout: Some(dropout),
            ..EpochRecord::new(epoch + 1, lr)
        };
        tr.end_epoch(&run, rec)?;
    }
    tr.finish(&run)
}
