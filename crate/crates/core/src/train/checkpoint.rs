//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "TTDYNCK1"
//! version   u32
//! manifest  u64 length, then UTF-8 JSON (configs, grid, progress, tensor list)
//! tensors   per tensor: u32 ndim, ndim x u64 shape, f64 data
//! ```
//!
//! Tensors appear in the order listed in the manifest: model parameters, then
//! optimizer first moments (`adam.m.*`) and second moments (`adam.v.*`) when
//! present. TT cores keep their four axes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::Adam;
use super::{StageReport, TrainConfig};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::seqmodel::{ModelConfig, Params, SeqModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TTDYNCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where training stood when the checkpoint was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: usize,
    /// Optimizer steps completed in `stage`.
    pub step: usize,
    pub stage_complete: bool,
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub pre_transition_loss: Option<f64>,
    pub completed: Vec<StageReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SeqModel,
    pub train: Option<TrainConfig>,
    pub progress: Option<Progress>,
    pub optimizer: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    model: ModelConfig,
    grid: GridSpec,
    train: Option<TrainConfig>,
    progress: Option<Progress>,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn of_model(model: &SeqModel) -> Self {
        Checkpoint {
            model: model.clone(),
            train: None,
            progress: None,
            optimizer: None,
        }
    }

    fn sections(&self) -> Vec<(String, &Params)> {
        let mut out = vec![(String::new(), &self.model.params)];
        if let Some(opt) = &self.optimizer {
            out.push(("adam.m.".into(), &opt.m));
            out.push(("adam.v.".into(), &opt.v));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        for (prefix, params) in self.sections() {
            for t in params.tensors() {
                blob.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
                for &s in &t.shape {
                    blob.extend_from_slice(&(s as u64).to_le_bytes());
                }
                for v in t.data {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                entries.push(TensorEntry {
                    name: format!("{prefix}{}", t.name),
                    shape: t.shape,
                });
            }
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            model: self.model.config.clone(),
            grid: self.model.grid.clone(),
            train: self.train.clone(),
            progress: self.progress.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(&bad)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32().map_err(&bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u64().map_err(&bad)? as usize;
        let manifest: Manifest = serde_json::from_slice(r.take(len).map_err(&bad)?)
            .map_err(|e| bad(format!("manifest: {e}")))?;

        let model = SeqModel::skeleton(manifest.model, manifest.grid)?;
        let mut optimizer = manifest.optimizer_step.map(|step| {
            let mut o = Adam::new(&model.params);
            o.step = step;
            o
        });
        let mut model = model;
        let mut entries = manifest.tensors.iter();
        {
            let mut targets: Vec<(String, &mut Params)> = vec![(String::new(), &mut model.params)];
            if let Some(o) = optimizer.as_mut() {
                targets.push(("adam.m.".into(), &mut o.m));
                targets.push(("adam.v.".into(), &mut o.v));
            }
            for (prefix, params) in targets {
                let expected: Vec<(String, Vec<usize>)> =
                    params.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
                for ((name, shape), dst) in expected.into_iter().zip(params.tensors_mut()) {
                    let full = format!("{prefix}{name}");
                    let entry = entries
                        .next()
                        .ok_or_else(|| bad(format!("manifest is missing tensor {full}")))?;
                    if entry.name != full || entry.shape != shape {
                        return Err(bad(format!(
                            "tensor {} {:?} does not match expected {full} {shape:?}",
                            entry.name, entry.shape
                        )));
                    }
                    let ndim = r.u32().map_err(&bad)? as usize;
                    let stored: Vec<usize> = (0..ndim)
                        .map(|_| r.u64().map(|v| v as usize))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(&bad)?;
                    if stored != shape {
                        return Err(bad(format!("tensor {full}: stored shape {stored:?}, expected {shape:?}")));
                    }
                    let raw = r.take(dst.len() * 8).map_err(&bad)?;
                    for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                        *v = f64::from_le_bytes(chunk.try_into().unwrap());
                    }
                }
            }
        }
        if entries.next().is_some() {
            return Err(bad("manifest lists unexpected extra tensors".into()));
        }
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            model,
            train: manifest.train,
            progress: manifest.progress,
            optimizer,
        })
    }

    /// Writes through a temporary file and renames, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp: PathBuf = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
