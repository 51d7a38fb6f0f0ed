//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "SPDN"  u32 version
//! u32 config length, config text (UTF-8)
//! u32 tensor count, then per tensor:
//!     u16 name length, name, u8 dtype, u8 ndim (= 4), 4 × u32 dims, payload
//! u8 has_state, then if set:
//!     u32 epoch, f64 best_loss
//!     u64 adam t, f64 beta1, f64 beta2, f64 eps, u32 moment count, (m, v) tensors without names
//!     f64 lr, f64 factor, u32 patience, f64 min_delta, f64 best, u32 bad_epochs
//! u32 CRC-32 of every byte between the version field and the CRC
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Module;
use crate::model::SpeedNet;
use crate::tensor::{DType, Real, Shape4, Tensor4};
use crate::training::{Adam, AdamConfig, PlateauScheduler, RunConfig};

pub const MAGIC: &[u8; 4] = b"SPDN";
pub const VERSION: u32 = 1;

/// Optimizer and loop state needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    /// Completed epochs.
    pub epoch: usize,
    pub best_loss: f64,
    pub adam: Adam<T>,
    pub scheduler: PlateauScheduler,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor4<T>)>,
    pub state: Option<TrainState<T>>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, t: &Tensor4<T>) {
    out.push(T::DTYPE as u8);
    out.push(4);
    for d in t.shape().dims() {
        put_u32(out, d as u32);
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serializes `model` (and optionally the training state) with `config_text`.
pub fn encode<T: Real>(config_text: &str, model: &SpeedNet<T>, state: Option<&TrainState<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, config_text.len() as u32);
    out.extend_from_slice(config_text.as_bytes());

    let mut named = Vec::new();
    model.visit("", &mut |name, slot| named.push((name.to_string(), slot.tensor().clone())));
    put_u32(&mut out, named.len() as u32);
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t);
    }

    match state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            put_u32(&mut out, s.epoch as u32);
            put_f64(&mut out, s.best_loss);
            out.extend_from_slice(&s.adam.t.to_le_bytes());
            put_f64(&mut out, s.adam.config.beta1);
            put_f64(&mut out, s.adam.config.beta2);
            put_f64(&mut out, s.adam.config.eps);
            put_u32(&mut out, s.adam.moments.len() as u32);
            for (m, v) in &s.adam.moments {
                put_tensor(&mut out, m);
                put_tensor(&mut out, v);
            }
            let sc = &s.scheduler;
            put_f64(&mut out, sc.lr);
            put_f64(&mut out, sc.factor);
            put_u32(&mut out, sc.patience as u32);
            put_f64(&mut out, sc.min_delta);
            put_f64(&mut out, sc.best);
            put_u32(&mut out, sc.bad_epochs as u32);
        }
    }
    let crc = crc32fast::hash(&out[8..]);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8".into()))
    }

    fn tensor<T: Real>(&mut self) -> Result<Tensor4<T>> {
        let code = self.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Format(format!("stored dtype {dtype:?}, expected {:?}", T::DTYPE)));
        }
        let ndim = self.u8()?;
        if ndim != 4 {
            return Err(Error::Format(format!("expected rank 4, found {ndim}")));
        }
        let mut d = [0usize; 4];
        for v in &mut d {
            *v = self.u32()? as usize;
        }
        let shape = Shape4::new(d[0], d[1], d[2], d[3]);
        let size = dtype.size();
        let payload = self.take(shape.len() * size)?;
        Tensor4::from_vec(shape, payload.chunks_exact(size).map(T::read_le).collect())
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Format("truncated".into()));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[8..body_end]);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }
    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 8,
    };
    let n = r.u32()? as usize;
    let config_text = r.string(n)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = r.string(len)?;
        tensors.push((name, r.tensor()?));
    }
    let state = match r.u8()? {
        0 => None,
        1 => {
            let epoch = r.u32()? as usize;
            let best_loss = r.f64()?;
            let t = r.u64()?;
            let config = AdamConfig {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let k = r.u32()? as usize;
            let mut moments = Vec::with_capacity(k);
            for _ in 0..k {
                let m = r.tensor()?;
                let v = r.tensor()?;
                moments.push((m, v));
            }
            let scheduler = PlateauScheduler {
                lr: r.f64()?,
                factor: r.f64()?,
                patience: r.u32()? as usize,
                min_delta: r.f64()?,
                best: r.f64()?,
                bad_epochs: r.u32()? as usize,
            };
            Some(TrainState {
                epoch,
                best_loss,
                adam: Adam { config, t, moments },
                scheduler,
            })
        }
        other => return Err(Error::Format(format!("bad state flag {other}"))),
    };
    if r.pos != body_end {
        return Err(Error::Format(format!("{} trailing bytes", body_end - r.pos)));
    }
    Ok(Checkpoint {
        config_text,
        tensors,
        state,
    })
}

pub fn save_checkpoint<T: Real>(
    path: &Path,
    config_text: &str,
    model: &SpeedNet<T>,
    state: Option<&TrainState<T>>,
) -> Result<()> {
    fs::write(path, encode(config_text, model, state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl<T: Real> Checkpoint<T> {
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::parse_text(&self.config_text)
    }

    /// Rebuilds the network described by the stored config and loads every tensor.
    pub fn model(&self) -> Result<SpeedNet<T>> {
        let cfg = self.run_config()?;
        let mut model = SpeedNet::new(cfg.model)?;
        let mut expected = 0;
        model.visit("", &mut |_, _| expected += 1);
        if expected != self.tensors.len() {
            return Err(Error::Format(format!(
                "config describes {expected} tensors, file holds {}",
                self.tensors.len()
            )));
        }
        let mut i = 0;
        let mut problem = None;
        model.visit_mut("", &mut |name, mut slot| {
            let (stored_name, t) = &self.tensors[i];
            i += 1;
            if problem.is_some() {
                return;
            }
            let dst = slot.tensor_mut();
            if stored_name != name || dst.shape() != t.shape() {
                problem = Some(format!(
                    "tensor {} is '{stored_name}' {}, expected '{name}' {}",
                    i - 1,
                    t.shape(),
                    dst.shape()
                ));
                return;
            }
            *dst = t.clone();
        });
        match problem {
            Some(p) => Err(Error::Format(p)),
            None => Ok(model),
        }
    }
}

/// Exact size in bytes of a weights-only checkpoint for `model`.
pub fn model_file_size<T: Real>(model: &SpeedNet<T>) -> usize {
    let cfg = RunConfig {
        model: model.config.clone(),
        ..RunConfig::default()
    };
    encode(&cfg.to_text(), model, None).len()
}
