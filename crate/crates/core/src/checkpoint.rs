//! Binary checkpoints: configuration, named parameters and optimizer state,
//! guarded by a version tag and a CRC-32 trailer.
//!
//! Layout (little endian): magic `MOVADCKP`, `u32` version, length-prefixed
//! JSON header, parameter records, optional momentum records, optional
//! carried recurrent state, `u32` CRC of all preceding bytes.

use std::io::Write;
use std::path::Path;

use movad_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::head::RecurrentState;
use crate::model::Movad;
use crate::train::{Sgd, Trainer};

pub const MAGIC: &[u8; 8] = b"MOVADCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    weights: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub weights: Option<[f64; 2]>,
    pub params: Vec<(String, Tensor)>,
    pub velocity: Option<Vec<Tensor>>,
    pub carried: Option<RecurrentState>,
}

impl Checkpoint {
    pub fn from_model(model: &Movad) -> Self {
        Self {
            model: model.config().clone(),
            train: None,
            step: 0,
            weights: None,
            params: model.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            velocity: None,
            carried: None,
        }
    }

    pub fn from_trainer(trainer: &Trainer) -> Self {
        Self {
            train: Some(trainer.config.clone()),
            step: trainer.step,
            weights: Some(trainer.weights),
            velocity: Some(trainer.optimizer.velocity.clone()),
            carried: trainer.carried.clone(),
            ..Self::from_model(&trainer.model)
        }
    }

    /// Rebuilds the model, failing if `expected` is given and differs from
    /// the stored configuration.
    pub fn to_model(&self, expected: Option<&ModelConfig>) -> Result<Movad> {
        if let Some(cfg) = expected {
            if cfg != &self.model {
                return Err(Error::Config(config_diff(cfg, &self.model)));
            }
        }
        let mut model = Movad::new(&self.model)?;
        if model.params.len() != self.params.len() {
            return Err(Error::Serde(format!(
                "checkpoint holds {} tensors, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::Serde(format!("unknown parameter {name}")))?;
            model.params.set(id, value.clone()).map_err(Error::Serde)?;
        }
        Ok(model)
    }

    /// Restores a trainer so that training continues exactly where it stopped.
    pub fn to_trainer(&self) -> Result<Trainer> {
        let model = self.to_model(None)?;
        let config = self
            .train
            .clone()
            .ok_or_else(|| Error::Serde("checkpoint has no training state".into()))?;
        let mut optimizer = Sgd::new(&model.params, config.learning_rate, config.momentum);
        if let Some(v) = &self.velocity {
            optimizer.velocity = v.clone();
        }
        Ok(Trainer {
            model,
            optimizer,
            weights: self.weights.unwrap_or([0.5, 0.5]),
            config,
            step: self.step,
            carried: self.carried.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            weights: self.weights,
        })?;
        put_bytes(&mut out, &header);
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in &self.params {
            put_bytes(&mut out, name.as_bytes());
            put_tensor(&mut out, t);
        }
        match &self.velocity {
            Some(v) => {
                out.push(1);
                put_u64(&mut out, v.len() as u64);
                v.iter().for_each(|t| put_tensor(&mut out, t));
            }
            None => out.push(0),
        }
        match &self.carried {
            Some(s) => {
                out.push(1);
                put_u64(&mut out, s.layers.len() as u64);
                for (h, c) in &s.layers {
                    put_tensor(&mut out, h);
                    put_tensor(&mut out, c);
                }
            }
            None => out.push(0),
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err("not a checkpoint file".into());
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("version:{version}"));
        }
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return Err("checksum mismatch (corrupt file)".into());
        }
        let header: Header = serde_json::from_slice(r.bytes()?).map_err(|e| e.to_string())?;
        let n = r.u64()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec()).map_err(|e| e.to_string())?;
            params.push((name, r.tensor()?));
        }
        let velocity = match r.u8()? {
            0 => None,
            _ => {
                let n = r.u64()? as usize;
                Some((0..n).map(|_| r.tensor()).collect::<std::result::Result<_, _>>()?)
            }
        };
        let carried = match r.u8()? {
            0 => None,
            _ => {
                let n = r.u64()? as usize;
                let layers = (0..n)
                    .map(|_| Ok((r.tensor()?, r.tensor()?)))
                    .collect::<std::result::Result<_, String>>()?;
                Some(RecurrentState { layers })
            }
        };
        if r.pos != body.len() {
            return Err("trailing bytes after checkpoint body".into());
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            step: header.step,
            weights: header.weights,
            params,
            velocity,
            carried,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|reason| match reason.strip_prefix("version:") {
            Some(v) => Error::Version {
                found: v.parse().unwrap_or(0),
                expected: VERSION,
            },
            None => Error::Checkpoint {
                path: path.to_path_buf(),
                reason,
            },
        })
    }
}

fn config_diff(expected: &ModelConfig, stored: &ModelConfig) -> String {
    let (a, b) = (&expected.stmm, &stored.stmm);
    if a.nf != b.nf {
        return format!("checkpoint was trained with nf = {}, configuration asks for nf = {}", b.nf, a.nf);
    }
    if expected.head.lstm_cells != stored.head.lstm_cells {
        return format!(
            "checkpoint has {} LSTM cells, configuration asks for {}",
            stored.head.lstm_cells, expected.head.lstm_cells
        );
    }
    "checkpoint model configuration differs from the requested one".into()
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    Checkpoint::from_trainer(trainer).save(path)
}

/// Loads the model stored at `path`, checking it against `expected` if given.
pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<Movad> {
    Checkpoint::load(path)?.to_model(expected)
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    put_u64(out, t.shape().len() as u64);
    t.shape().iter().for_each(|&d| put_u64(out, d as u64));
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> std::result::Result<&'a [u8], String> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> std::result::Result<Tensor, String> {
        let ndim = self.u64()? as usize;
        if ndim > 8 {
            return Err(format!("tensor rank {ndim} is implausible"));
        }
        let shape: Vec<usize> = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
        let raw = self.take(numel.checked_mul(8).ok_or("tensor too large")?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| e.to_string())
    }
}
