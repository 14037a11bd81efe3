//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DSFC" | version: u32 | params section | state section
//! section := count: u64, then per entry
//!            name_len: u64 | name (UTF-8) | rank: u64 | dims: u64 * rank | data: f64 * prod(dims)
//! ```
//!
//! The state section carries the optimizer moments and the batch-norm
//! running statistics, framed exactly like parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::autodiff::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"DSFC";
pub const VERSION: u32 = 1;

// Guards against absurd allocations when reading a corrupt header.
const MAX_NAME: u64 = 1 << 16;
const MAX_RANK: u64 = 8;
const MAX_VALUES: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self { name: name.into(), shape, data }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub params: Vec<Entry>,
    pub state: Vec<Entry>,
}

impl Checkpoint {
    /// Snapshot of the model's parameters, batch-norm moments and, if
    /// given, the optimizer state.
    pub fn capture(model: &Model, adam: Option<&AdamState>) -> Self {
        let params = model
            .params
            .params()
            .iter()
            .map(|p| Entry::new(p.name.clone(), p.shape.clone(), p.data.clone()))
            .collect();
        let mut state = Vec::new();
        for (i, bn) in model.bn.iter().enumerate() {
            let c = bn.channels();
            state.push(Entry::new(format!("bn.{i}.mean"), vec![c], bn.running_mean.clone()));
            state.push(Entry::new(format!("bn.{i}.var"), vec![c], bn.running_var.clone()));
            state.push(Entry::new(format!("bn.{i}.initialized"), vec![1], vec![f64::from(u8::from(bn.initialized))]));
        }
        if let Some(adam) = adam {
            let c = adam.config;
            // Step counts stay far below 2^53, so f64 holds them exactly.
            state.push(Entry::new("adam.step", vec![1], vec![adam.step as f64]));
            state.push(Entry::new("adam.config", vec![4], vec![c.lr, c.beta1, c.beta2, c.eps]));
            for (p, (m, v)) in model.params.params().iter().zip(adam.m.iter().zip(&adam.v)) {
                state.push(Entry::new(format!("adam.m.{}", p.name), vec![m.len()], m.clone()));
                state.push(Entry::new(format!("adam.v.{}", p.name), vec![v.len()], v.clone()));
            }
        }
        Self { params, state }
    }

    fn state_entry(&self, name: &str) -> Option<&Entry> {
        self.state.iter().find(|e| e.name == name)
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.state_entry("adam.step").is_some()
    }

    /// Copies every parameter and batch-norm moment into `model`, which must
    /// have been built from the same configuration.
    pub fn restore(&self, model: &mut Model) -> Result<()> {
        if self.params.len() != model.params.len() {
            return Err(Error::Consistency(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for entry in &self.params {
            let id = model
                .params
                .find(&entry.name)
                .ok_or_else(|| Error::Consistency(format!("model has no parameter {}", entry.name)))?;
            if model.params.get(id).shape != entry.shape {
                return Err(Error::Consistency(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    entry.name,
                    entry.shape,
                    model.params.get(id).shape
                )));
            }
            model.params.set(id, &entry.data)?;
        }
        for (i, bn) in model.bn.iter_mut().enumerate() {
            let get = |suffix: &str| {
                self.state_entry(&format!("bn.{i}.{suffix}"))
                    .ok_or_else(|| Error::Consistency(format!("checkpoint lacks bn.{i}.{suffix}")))
            };
            let (mean, var, init) = (get("mean")?, get("var")?, get("initialized")?);
            if mean.data.len() != bn.channels() || var.data.len() != bn.channels() || init.data.len() != 1 {
                return Err(Error::Consistency(format!("batch-norm layer {i} has the wrong width")));
            }
            bn.running_mean.clone_from(&mean.data);
            bn.running_var.clone_from(&var.data);
            bn.initialized = init.data[0] != 0.0;
        }
        Ok(())
    }

    /// Rebuilds the optimizer state saved alongside `model`'s parameters.
    pub fn optimizer_state(&self, model: &Model) -> Result<Option<AdamState>> {
        let Some(step) = self.state_entry("adam.step") else {
            return Ok(None);
        };
        let cfg = self
            .state_entry("adam.config")
            .filter(|e| e.data.len() == 4)
            .ok_or_else(|| Error::Consistency("checkpoint lacks the optimizer settings".into()))?;
        let config = AdamConfig { lr: cfg.data[0], beta1: cfg.data[1], beta2: cfg.data[2], eps: cfg.data[3] };
        let mut adam = AdamState::new(&model.params, config);
        adam.step = step.data.first().copied().unwrap_or(0.0) as u64;
        for (i, p) in model.params.params().iter().enumerate() {
            for (prefix, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let e = self
                    .state_entry(&format!("adam.{prefix}.{}", p.name))
                    .ok_or_else(|| Error::Consistency(format!("checkpoint lacks adam.{prefix}.{}", p.name)))?;
                if e.data.len() != slot.len() {
                    return Err(Error::Consistency(format!("adam.{prefix}.{} has the wrong length", p.name)));
                }
                slot.clone_from(&e.data);
            }
        }
        Ok(Some(adam))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_section(&mut w, &self.params)?;
        write_section(&mut w, &self.state)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut v = [0u8; 4];
        read_exact(&mut r, &mut v)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let params = read_section(&mut r)?;
        let state = read_section(&mut r)?;
        Ok(Self { params, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_section(w: &mut impl Write, entries: &[Entry]) -> Result<()> {
    w.write_all(&(entries.len() as u64).to_le_bytes())?;
    for e in entries {
        w.write_all(&(e.name.len() as u64).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&(e.shape.len() as u64).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in &e.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
        _ => Error::Io(e),
    })
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_section(r: &mut impl Read) -> Result<Vec<Entry>> {
    let count = read_u64(r)?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = read_u64(r)?;
        if len > MAX_NAME {
            return Err(Error::Format(format!("entry name of {len} bytes")));
        }
        let mut name = vec![0u8; len as usize];
        read_exact(r, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
        let rank = read_u64(r)?;
        if rank > MAX_RANK {
            return Err(Error::Format(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut total: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(r)?;
            total = total.checked_mul(d).filter(|&t| t <= MAX_VALUES).ok_or_else(|| Error::Format(format!("{name}: too many values")))?;
            shape.push(d as usize);
        }
        let mut raw = vec![0u8; total as usize * 8];
        read_exact(r, &mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        entries.push(Entry { name, shape, data });
    }
    Ok(entries)
}
