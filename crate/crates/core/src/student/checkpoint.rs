//! JSON serialisation of the trainable student state.
//!
//! Only adapters and the head are stored; the frozen backbone is rebuilt from
//! its config and checked against the recorded fingerprint on load.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{LinearHead, StudentModel};
use crate::error::{Error, Result};
use crate::features::ViTBackendConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Array2<f64>> for Matrix {
    fn from(m: &Array2<f64>) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), data: m.iter().copied().collect() }
    }
}

impl Matrix {
    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::CheckpointMismatch(format!("matrix shape: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterState {
    pub query_a: Matrix,
    pub query_b: Matrix,
    pub value_a: Matrix,
    pub value_b: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadState {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentCheckpoint {
    pub schema_version: u32,
    pub backbone_id: String,
    pub backbone_fingerprint: String,
    pub vit: ViTBackendConfig,
    pub rank: usize,
    pub lora_dropout: f64,
    pub adapters: Vec<AdapterState>,
    pub head: Option<HeadState>,
}

impl StudentCheckpoint {
    pub fn from_model(model: &StudentModel) -> Self {
        Self {
            schema_version: CHECKPOINT_VERSION,
            backbone_id: model.backbone_id.clone(),
            backbone_fingerprint: model.backbone_fingerprint(),
            vit: model.vit_cfg.clone(),
            rank: model.rank,
            lora_dropout: model.lora_dropout,
            adapters: model
                .adapters
                .iter()
                .map(|a| AdapterState {
                    query_a: (&a.query.a).into(),
                    query_b: (&a.query.b).into(),
                    value_a: (&a.value.a).into(),
                    value_b: (&a.value.b).into(),
                })
                .collect(),
            head: model.head.as_ref().map(|h| HeadState {
                w1: (&h.w1).into(),
                b1: (&h.b1).into(),
                w2: (&h.w2).into(),
                b2: (&h.b2).into(),
                dropout_rate: h.dropout_rate,
            }),
        }
    }

    /// Rebuilds the model, refusing a checkpoint whose backbone weights differ.
    pub fn to_model(&self) -> Result<StudentModel> {
        if self.schema_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointMismatch(format!("schema version {}", self.schema_version)));
        }
        let mut model = StudentModel::inject_lora(&self.vit, self.rank, self.lora_dropout, 0)?;
        if model.backbone_fingerprint() != self.backbone_fingerprint {
            return Err(Error::CheckpointMismatch("backbone fingerprint differs".into()));
        }
        if model.adapters.len() != self.adapters.len() {
            return Err(Error::CheckpointMismatch(format!("{} adapter blocks vs {}", self.adapters.len(), model.adapters.len())));
        }
        for (slot, state) in model.adapters.iter_mut().zip(&self.adapters) {
            assign(&mut slot.query.a, &state.query_a)?;
            assign(&mut slot.query.b, &state.query_b)?;
            assign(&mut slot.value.a, &state.value_a)?;
            assign(&mut slot.value.b, &state.value_b)?;
        }
        model.head = match &self.head {
            Some(h) => Some(LinearHead {
                w1: h.w1.to_array()?,
                b1: h.b1.to_array()?,
                w2: h.w2.to_array()?,
                b2: h.b2.to_array()?,
                dropout_rate: h.dropout_rate,
            }),
            None => None,
        };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec(self).map_err(|e| Error::parse("checkpoint", e))?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        std::io::Write::write_all(&mut tmp, &text).map_err(|e| Error::io(path, e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }
}

fn assign(slot: &mut Array2<f64>, state: &Matrix) -> Result<()> {
    let m = state.to_array()?;
    if m.dim() != slot.dim() {
        return Err(Error::CheckpointMismatch(format!("tensor shape {:?} vs {:?}", m.dim(), slot.dim())));
    }
    *slot = m;
    Ok(())
}

impl StudentModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        StudentCheckpoint::from_model(self).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        StudentCheckpoint::load(path)?.to_model()
    }
}
