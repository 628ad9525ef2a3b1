use std::fs;
use std::path::Path;

use distillcorr::domain::{BoundingBox, CorrespondencePair, Image, Keypoint};
use distillcorr::error::Error;
use distillcorr::eval::{PckAggregation, PckReference};
use distillcorr::pipeline::data::synthetic_images;
use distillcorr::pipeline::evaluate::{pairs_pck, predict_frames, VideoPrediction};
use distillcorr::pipeline::train::{head_dropout, latest_path};
use distillcorr::pipeline::{
    run_3d_finetune, run_bench, run_distillation, run_eval, run_supervised_finetune, RunDir, RunOptions, Stage, TrainConfig, TrainingCheckpoint,
    RESOLVED_CONFIG,
};
use distillcorr::student::StudentModel;
use distillcorr::util::rng_from;
use ndarray::Array3;
use rand::Rng;

fn small_distill() -> TrainConfig {
    let mut cfg = TrainConfig::mock();
    cfg.data.count = 12;
    cfg.distill.epochs = 3;
    cfg.distill.steps_per_epoch = Some(4);
    cfg.distill.batch_size = 2;
    cfg.optimizer.lr = 1e-3;
    cfg
}

fn opts(dir: &Path) -> RunOptions {
    RunOptions { run_dir: dir.to_path_buf(), ..Default::default() }
}

#[test]
fn interrupted_distillation_resumes_to_the_same_state() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_distill();
    let full = run_distillation(&cfg, &opts(&tmp.path().join("full"))).unwrap();

    let dir = tmp.path().join("split");
    let partial = run_distillation(&cfg, &RunOptions { stop_after_epoch: Some(1), ..opts(&dir) }).unwrap();
    assert_eq!(partial.epochs_completed, 1);
    let run = RunDir::prepare(&dir, &cfg).unwrap();
    assert!(latest_path(&run, Stage::Distill).exists());
    let resumed = run_distillation(&cfg, &RunOptions { resume: true, ..opts(&dir) }).unwrap();

    assert_eq!(resumed.epochs_completed, full.epochs_completed);
    assert_eq!(resumed.step_losses.len(), full.step_losses.len());
    for (a, b) in resumed.step_losses.iter().zip(&full.step_losses) {
        assert!((a - b).abs() <= 1e-4 * b.abs(), "{a} vs {b}");
    }
    for (a, b) in resumed.history.iter().zip(&full.history) {
        assert_eq!(a.epoch, b.epoch);
        let (pa, pb) = (a.probe_loss.unwrap(), b.probe_loss.unwrap());
        assert!((pa - pb).abs() <= 1e-4 * pb.abs());
    }
}

#[test]
fn resume_rejects_a_changed_config() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_distill();
    run_distillation(&cfg, &RunOptions { stop_after_epoch: Some(1), ..opts(tmp.path()) }).unwrap();
    cfg.optimizer.lr = 5e-4;
    let err = run_distillation(&cfg, &RunOptions { resume: true, ..opts(tmp.path()) }).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)), "{err}");
}

#[test]
fn distillation_is_reproducible_and_logs_epoch_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_distill();
    let a = run_distillation(&cfg, &opts(&tmp.path().join("a"))).unwrap();
    let b = run_distillation(&cfg, &opts(&tmp.path().join("b"))).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());

    let first = &a.history[0];
    assert_eq!((first.epoch, first.updates), (0, 0));
    assert!(first.probe_loss.is_some() && first.train_loss.is_none());
    assert_eq!(a.history.len(), cfg.distill.epochs + 1);
    assert_eq!(a.step_losses.len(), 12);
    // only adapters train during distillation
    assert!(a.student.head.is_none());

    let run = tmp.path().join("a");
    for f in [RESOLVED_CONFIG, "checkpoints/distill-student.json", "checkpoints/distill-epoch003.json", "reports/distill_history.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let saved = TrainConfig::resolve(Some(&run.join(RESOLVED_CONFIG)), &[]).unwrap();
    assert_eq!(saved, cfg);
    let latest = TrainingCheckpoint::load(&run.join("checkpoints/distill-latest.json")).unwrap();
    assert_eq!(latest, a);
}

#[test]
fn finetune3d_needs_a_starting_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let err = run_3d_finetune(&TrainConfig::mock(), &opts(tmp.path())).unwrap_err();
    assert!(matches!(err, Error::ConfigInvalid(_)), "{err}");
}

#[test]
fn supervised_dropout_runs_from_start_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::mock();
    cfg.data.count = 2;
    cfg.supervised.epochs = 3;
    cfg.student.head_dropout_start = 0.05;
    cfg.student.head_dropout_end = 0.1;
    assert_eq!(head_dropout(&cfg, 0), 0.05);
    assert!((head_dropout(&cfg, 2) - 0.1).abs() < 1e-15);
    let ck = run_supervised_finetune(&cfg, &opts(tmp.path())).unwrap();
    let d: Vec<f64> = ck.history[1..].iter().map(|h| h.head_dropout.unwrap()).collect();
    assert_eq!(d.len(), 3);
    assert_eq!(d[0], 0.05);
    assert!((d[2] - 0.1).abs() < 1e-15 && d[1] > d[0] && d[2] > d[1]);
    assert!(ck.history.iter().all(|h| h.eval_pck.is_some()));
    assert!(ck.student.head.is_some());
}

#[test]
fn identical_images_match_perfectly() {
    let cfg = TrainConfig::mock();
    let student = StudentModel::inject_lora(&cfg.vit, 4, 0.0, 0).unwrap();
    let extract = |img: &Image| student.extract(img);
    // noise images keep every cell distinct; points sit on cell centres
    let mut rng = rng_from(&["identity-pairs"]);
    let pairs: Vec<CorrespondencePair> = (0..4)
        .map(|i| {
            let px = Array3::from_shape_fn((64, 64, 3), |_| rng.random_range(0.0f32..1.0));
            let img = Image::new(px, format!("noise{i}"), None).unwrap();
            let kps = [(0, 0), (2, 5), (4, 4), (7, 1), (6, 7)]
                .iter()
                .map(|&(r, c)| {
                    let (x, y) = (c as f64 * 8.0 + 3.5, r as f64 * 8.0 + 3.5);
                    (Keypoint::new(x, y), Keypoint::new(x, y))
                })
                .collect();
            let bbox = BoundingBox::new(0.0, 0.0, 63.0, 63.0).unwrap();
            CorrespondencePair::new(img.clone(), img, kps, Some(bbox)).unwrap()
        })
        .collect();
    for reference in [PckReference::Img, PckReference::Bbox] {
        let v = pairs_pck(&extract, &pairs, &cfg.matching, 0.1, reference, PckAggregation::PerPoint).unwrap();
        assert_eq!(v, 1.0);
    }
}

#[test]
fn eval_report_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::mock();
    cfg.data.count = 3;
    cfg.eval.alphas = vec![0.05, 0.1];
    let a = run_eval(&cfg, &tmp.path().join("a")).unwrap();
    run_eval(&cfg, &tmp.path().join("b")).unwrap();
    let read = |d: &str| fs::read(tmp.path().join(d).join("reports/eval.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_eq!(a.pairs, 3);
    assert!(a.at(0.05).unwrap().pck_per_point <= a.at(0.1).unwrap().pck_per_point);
    assert!(tmp.path().join("a/overlays/pair_0000.png").exists());

    // the persisted config reproduces the report
    let again = TrainConfig::resolve(Some(&tmp.path().join("a").join(RESOLVED_CONFIG)), &[]).unwrap();
    run_eval(&again, &tmp.path().join("c")).unwrap();
    assert_eq!(read("a"), read("c"));
}

#[test]
fn shipped_mock_config_matches_the_builtin() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mock.toml");
    assert_eq!(TrainConfig::resolve(Some(&path), &[]).unwrap(), TrainConfig::mock());
}

#[test]
fn frame_predictions_follow_the_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::mock();
    let frames = synthetic_images(3, (64, 64), 5);
    let points = vec![Keypoint::labeled(10.0, 12.0, "a"), Keypoint::new(40.0, 30.0)];
    let out = predict_frames(&cfg, &frames, &points, tmp.path()).unwrap();
    assert_eq!(out.frames.len(), 3);
    assert!(out.frames.iter().all(|f| f.keypoints.len() == 2));
    assert_eq!(out.frames[0].keypoints[0].label.as_deref(), Some("a"));
    let saved: VideoPrediction = serde_json::from_slice(&fs::read(tmp.path().join("reports/predictions.json")).unwrap()).unwrap();
    assert_eq!(saved, out);
    assert!(tmp.path().join("overlays/frame_00002.png").exists());

    let err = predict_frames(&cfg, &frames, &[Keypoint::new(80.0, 1.0)], tmp.path()).unwrap_err();
    assert!(matches!(err, Error::OutOfBounds { .. }));
}

#[test]
fn bench_reports_every_model() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig::mock();
    cfg.bench.images = 2;
    cfg.bench.warmup = 0;
    let reports = run_bench(&cfg, tmp.path()).unwrap();
    assert!(reports.len() >= 2);
    assert!(tmp.path().join("reports/bench.json").exists());
}
