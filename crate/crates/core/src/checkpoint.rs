//! Self-describing model checkpoints: a JSON header line followed by
//! little-endian f64 blocks for parameters, best parameters and Adam moments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hashing::sha256_hex;
use crate::model::{ModelConfig, ModelError, Student, Teacher, TeacherAttention};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngState;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8] = b"CMLMCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Student,
    Teacher { attention: TeacherAttention },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub params: ParamStore,
    /// Parameters of the best dev evaluation so far, when tracked separately.
    pub best_params: Option<ParamStore>,
    pub optimizer: Option<Adam>,
    pub train_config: Value,
    pub train_state: Value,
    pub rng: BTreeMap<String, RngState>,
    /// Content hashes of the artifacts this model was trained from.
    pub hashes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model_kind: ModelKind,
    model: ModelConfig,
    params: Vec<ParamEntry>,
    has_best_params: bool,
    optimizer: Option<OptimizerHeader>,
    train_config: Value,
    train_state: Value,
    rng: BTreeMap<String, RngState>,
    hashes: BTreeMap<String, String>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn student(student: &Student) -> Self {
        Self::bare(
            ModelKind::Student,
            student.config().clone(),
            student.params.clone(),
        )
    }

    pub fn teacher(teacher: &Teacher) -> Self {
        Self::bare(
            ModelKind::Teacher {
                attention: teacher.attention(),
            },
            teacher.config().clone(),
            teacher.params.clone(),
        )
    }

    fn bare(kind: ModelKind, model: ModelConfig, params: ParamStore) -> Self {
        Checkpoint {
            kind,
            model,
            params,
            best_params: None,
            optimizer: None,
            train_config: Value::Null,
            train_state: Value::Null,
            rng: BTreeMap::new(),
            hashes: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: CHECKPOINT_VERSION,
            model_kind: self.kind,
            model: self.model.clone(),
            params: self
                .params
                .iter()
                .map(|(_, p)| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                })
                .collect(),
            has_best_params: self.best_params.is_some(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                config: a.config,
                step: a.step,
            }),
            train_config: self.train_config.clone(),
            train_state: self.train_state.clone(),
            rng: self.rng.clone(),
            hashes: self.hashes.clone(),
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header).expect("checkpoint header serializes"));
        out.push(b'\n');
        for (_, p) in self.params.iter() {
            push_f64s(&mut out, p.value.data());
        }
        if let Some(best) = &self.best_params {
            for (_, p) in best.iter() {
                push_f64s(&mut out, p.value.data());
            }
        }
        if let Some(adam) = &self.optimizer {
            for m in adam.m.iter().chain(&adam.v) {
                push_f64s(&mut out, m);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| bad("not a checkpoint file".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing header".into()))?;
        let header: Header =
            serde_json::from_slice(&rest[..nl]).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                header.version
            )));
        }
        let mut body = rest[nl + 1..].chunks_exact(8);
        let expected: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        let blocks =
            1 + usize::from(header.has_best_params) + 2 * usize::from(header.optimizer.is_some());
        if rest.len() - nl - 1 != 8 * expected * blocks {
            return Err(bad(format!(
                "expected {} data bytes, found {}",
                8 * expected * blocks,
                rest.len() - nl - 1
            )));
        }
        let mut take = |n: usize| -> Vec<f64> {
            (&mut body)
                .take(n)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let read_store = |take: &mut dyn FnMut(usize) -> Vec<f64>| -> Result<ParamStore> {
            let mut store = ParamStore::new();
            for e in &header.params {
                let n = e.shape.iter().product();
                store.insert(&e.name, Tensor::new(e.shape.clone(), take(n))?)?;
            }
            Ok(store)
        };
        let params = read_store(&mut take)?;
        let best_params = if header.has_best_params {
            Some(read_store(&mut take)?)
        } else {
            None
        };
        let optimizer = header.optimizer.as_ref().map(|o| {
            let sizes: Vec<usize> = header
                .params
                .iter()
                .map(|p| p.shape.iter().product())
                .collect();
            let m = sizes.iter().map(|&n| take(n)).collect();
            let v = sizes.iter().map(|&n| take(n)).collect();
            Adam {
                config: o.config,
                step: o.step,
                m,
                v,
            }
        });
        Ok(Checkpoint {
            kind: header.model_kind,
            model: header.model,
            params,
            best_params,
            optimizer,
            train_config: header.train_config,
            train_state: header.train_state,
            rng: header.rng,
            hashes: header.hashes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Fails with the list of differing fields unless the stored architecture
    /// equals `expected`.
    pub fn check_model(&self, expected: &ModelConfig) -> Result<()> {
        let diff = self.model.diff(expected);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(ModelError::ConfigMismatch(diff).into())
        }
    }

    pub fn into_student(self) -> Result<Student> {
        if self.kind != ModelKind::Student {
            return Err(Error::Integrity(
                "checkpoint does not hold a student".into(),
            ));
        }
        Ok(Student::from_params(self.model, self.params)?)
    }

    pub fn into_teacher(self) -> Result<Teacher> {
        match self.kind {
            ModelKind::Teacher { attention } => {
                Ok(Teacher::from_params(self.model, attention, self.params)?)
            }
            ModelKind::Student => Err(Error::Integrity(
                "checkpoint does not hold a teacher".into(),
            )),
        }
    }
}
