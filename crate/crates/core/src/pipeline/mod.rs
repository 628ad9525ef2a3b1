//! Configuration, dataset adapters, training loops, evaluation and the run
//! directory they write to.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod optim;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::student::{StudentCheckpoint, StudentModel};
pub use config::TrainConfig;
pub use evaluate::{predict_video, run_bench, run_eval, EvalReport};
pub use train::{run_3d_finetune, run_distillation, run_supervised_finetune, RunOptions, Stage, TrainingCheckpoint};

pub const RESOLVED_CONFIG: &str = "config.resolved";

/// `{config.resolved, checkpoints/, reports/, overlays/}` under one root.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the layout and persists the resolved config.
    pub fn prepare(root: &Path, cfg: &TrainConfig) -> Result<Self> {
        let dir = Self { root: root.to_path_buf() };
        for d in [dir.root.clone(), dir.checkpoints(), dir.reports(), dir.overlays()] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        cfg.save(&dir.root.join(RESOLVED_CONFIG))?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn overlays(&self) -> PathBuf {
        self.root.join("overlays")
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.reports().join(name);
        write_json(&path, value)?;
        Ok(path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::parse("report", e))?;
    text.push(b'\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Student from `cfg.checkpoint` (a student or training checkpoint), or a
/// freshly injected one.
pub fn load_student(cfg: &TrainConfig) -> Result<StudentModel> {
    match &cfg.checkpoint {
        Some(path) => load_student_file(path),
        None => StudentModel::inject_lora(&cfg.vit, cfg.student.rank, cfg.student.lora_dropout, cfg.seed),
    }
}

pub fn load_student_file(path: &Path) -> Result<StudentModel> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let student: StudentCheckpoint = if value.get("stage").is_some() {
        serde_json::from_value::<TrainingCheckpoint>(value).map_err(|e| Error::parse(path.display().to_string(), e))?.student
    } else {
        serde_json::from_value(value).map_err(|e| Error::parse(path.display().to_string(), e))?
    };
    student.to_model()
}
