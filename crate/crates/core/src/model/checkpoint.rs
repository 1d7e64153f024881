//! Self-describing JSON checkpoints. Tensors are stored as base64 little-endian
//! f32 so a round trip is bit-exact.

use std::collections::HashMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::layers::{freeze_norms, TensorRole};
use super::net::{Network, StudentNet, TeacherNet};
use super::spec::EncoderSpec;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetKind {
    Teacher,
    Student,
    McDropout,
    Pfe,
}

impl NetKind {
    pub fn has_variance_head(&self) -> bool {
        matches!(self, NetKind::Student | NetKind::Pfe)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: NetKind,
    pub spec: EncoderSpec,
    /// Optimizer steps taken when the checkpoint was written.
    pub step: usize,
    pub epoch: usize,
    pub config_hash: String,
    pub norms_frozen: bool,
    pub tensors: Vec<TensorRecord>,
}

fn encode_f32(data: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f32(text: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("bad tensor encoding: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint("tensor byte length is not a multiple of 4".into()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn records<N: Network>(net: &N) -> Vec<TensorRecord> {
    let mut out = Vec::new();
    net.visit_tensors(&mut |name, shape, data, _| {
        out.push(TensorRecord {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: encode_f32(data),
        })
    });
    out
}

fn fill<N: Network>(net: &mut N, tensors: &[TensorRecord]) -> Result<()> {
    let mut by_name: HashMap<&str, &TensorRecord> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut err = None;
    net.visit_tensors_mut(&mut |name, shape, data, _role: TensorRole| {
        if err.is_some() {
            return;
        }
        let Some(rec) = by_name.remove(name) else {
            err = Some(Error::Architecture(format!("checkpoint lacks tensor {name}")));
            return;
        };
        if rec.shape != shape {
            err = Some(Error::Architecture(format!(
                "tensor {name}: checkpoint shape {:?}, network shape {shape:?}",
                rec.shape
            )));
            return;
        }
        match decode_f32(&rec.data) {
            Ok(values) if values.len() == data.len() => data.copy_from_slice(&values),
            Ok(values) => {
                err = Some(Error::Checkpoint(format!(
                    "tensor {name}: {} values for {} slots",
                    values.len(),
                    data.len()
                )))
            }
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::Architecture(format!("unexpected tensor {name} in checkpoint")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_teacher(net: &TeacherNet, kind: NetKind, step: usize, epoch: usize, config_hash: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind,
            spec: net.spec().clone(),
            step,
            epoch,
            config_hash: config_hash.to_string(),
            norms_frozen: net.extractor().norms_frozen(),
            tensors: records(net),
        }
    }

    pub fn from_student(net: &StudentNet, kind: NetKind, step: usize, epoch: usize, config_hash: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            kind,
            spec: net.spec().clone(),
            step,
            epoch,
            config_hash: config_hash.to_string(),
            norms_frozen: net.extractor().norms_frozen(),
            tensors: records(net),
        }
    }

    fn check_version(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        Ok(())
    }

    pub fn to_teacher(&self) -> Result<TeacherNet> {
        self.check_version()?;
        if self.kind.has_variance_head() {
            return Err(Error::Architecture(format!(
                "{:?} checkpoint holds a student network",
                self.kind
            )));
        }
        let mut net = TeacherNet::new(&self.spec, 0)?;
        fill(&mut net, &self.tensors)?;
        if self.norms_frozen {
            freeze_norms(&mut net.extractor.layers);
        }
        Ok(net)
    }

    pub fn to_student(&self) -> Result<StudentNet> {
        self.check_version()?;
        if !self.kind.has_variance_head() {
            return Err(Error::Architecture(format!(
                "{:?} checkpoint has no variance head",
                self.kind
            )));
        }
        let teacher = TeacherNet::new(&self.spec, 0)?;
        let mut net = StudentNet::from_teacher(&teacher, 0);
        fill(&mut net, &self.tensors)?;
        if self.norms_frozen {
            freeze_norms(&mut net.extractor.layers);
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self =
            serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ckpt.check_version()?;
        Ok(ckpt)
    }

    /// Refuses checkpoints written under a different configuration.
    pub fn expect_config(&self, config_hash: &str) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::HashMismatch {
                expected: config_hash.to_string(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}
