//! Binary training checkpoints.
//!
//! Layout (little endian): `"CMEB"`, `u32` version, config hash, step,
//! aborted-step count, model config (TOML text), energy / generator /
//! inference parameter tensors, the three optimizer states, training RNG
//! position, batch iterator position, and a trailing SHA-256 of everything
//! before it. Strings are `u32` length + bytes; tensors are `u32` rank,
//! `u64` dims, then `f64` values.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::datasets::IteratorState;
use crate::error::{Error, Result};
use crate::learning::{AdamState, TrainState};
use crate::models::{ModelConfig, ModelTriple, Parameters};
use crate::rng::{RngState, RngStream};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CMEB";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn tensors(&mut self, ts: &[&Tensor]) {
        self.u32(ts.len() as u32);
        ts.iter().for_each(|t| self.tensor(t));
    }
    fn adam(&mut self, a: &AdamState) {
        self.u64(a.step);
        self.tensors(&a.m.iter().collect::<Vec<_>>());
        self.tensors(&a.v.iter().collect::<Vec<_>>());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or malformed {what}"))
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn u128(&mut self, what: &str) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16, what)?.try_into().expect("16 bytes")))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| corrupt(what))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32("tensor rank")? as usize;
        if rank > 8 {
            return Err(corrupt("tensor rank"));
        }
        let shape = (0..rank)
            .map(|_| self.u64("tensor shape").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor shape"))?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor"))?, "tensor data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data)
    }
    fn tensors(&mut self) -> Result<Vec<Tensor>> {
        let n = self.u32("tensor count")? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
    fn adam(&mut self) -> Result<AdamState> {
        Ok(AdamState {
            step: self.u64("optimizer step")?,
            m: self.tensors()?,
            v: self.tensors()?,
        })
    }
}

pub fn to_bytes(state: &TrainState, config_hash: &str) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(config_hash);
    w.u64(state.step);
    w.u64(state.aborted);
    let cfg = toml::to_string(&state.models.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.str(&cfg);
    w.tensors(&state.models.energy.tensors());
    w.tensors(&state.models.generator.tensors());
    w.tensors(&state.models.inference.tensors());
    w.adam(&state.energy_opt);
    w.adam(&state.generator_opt);
    w.adam(&state.inference_opt);
    let rng = state.rng.state();
    w.u64(rng.seed);
    w.u64(rng.stream);
    w.u128(rng.counter);
    w.u64(state.batches.epoch);
    w.u64(state.batches.cursor);
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    Ok(w.0)
}

fn fill(dst: Vec<&mut Tensor>, src: Vec<Tensor>, group: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "{group}: {} tensors stored, model has {}",
            src.len(),
            dst.len()
        )));
    }
    for (k, (d, s)) in dst.into_iter().zip(src).enumerate() {
        if d.shape() != s.shape() {
            return Err(Error::Checkpoint(format!(
                "{group} tensor {k}: stored shape {:?}, model expects {:?}",
                s.shape(),
                d.shape()
            )));
        }
        *d = s;
    }
    Ok(())
}

/// Parses a checkpoint. When `expected` is given the stored model must have
/// the same parameter shapes.
pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(TrainState, String)> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let hash = r.str("config hash")?;
    let step = r.u64("step")?;
    let aborted = r.u64("aborted count")?;
    let cfg_text = r.str("model config")?;
    let stored: ModelConfig = toml::from_str(&cfg_text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let config = expected.unwrap_or(&stored);
    // Initialization values are overwritten below; only the shapes matter.
    let mut models = ModelTriple::init(config, &RngStream::new(0, "checkpoint"))?;
    models.config = config.clone();
    fill(models.energy.tensors_mut(), r.tensors()?, "energy")?;
    fill(models.generator.tensors_mut(), r.tensors()?, "generator")?;
    fill(models.inference.tensors_mut(), r.tensors()?, "inference")?;
    let energy_opt = r.adam()?;
    let generator_opt = r.adam()?;
    let inference_opt = r.adam()?;
    for (opt, params, group) in [
        (&energy_opt, models.energy.tensors(), "energy optimizer"),
        (&generator_opt, models.generator.tensors(), "generator optimizer"),
        (&inference_opt, models.inference.tensors(), "inference optimizer"),
    ] {
        let ok = opt.m.len() == params.len()
            && opt.v.len() == params.len()
            && params
                .iter()
                .zip(opt.m.iter().zip(&opt.v))
                .all(|(p, (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
        if !ok {
            return Err(Error::Checkpoint(format!("{group}: moment shapes disagree with the model")));
        }
    }
    let rng = RngStream::restore(RngState {
        seed: r.u64("rng seed")?,
        stream: r.u64("rng stream")?,
        counter: r.u128("rng counter")?,
    });
    let batches = IteratorState {
        epoch: r.u64("iterator epoch")?,
        cursor: r.u64("iterator cursor")?,
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((
        TrainState {
            step,
            models,
            energy_opt,
            generator_opt,
            inference_opt,
            rng,
            batches,
            aborted,
        },
        hash,
    ))
}

pub fn save(path: &Path, state: &TrainState, config_hash: &str) -> Result<()> {
    let bytes = to_bytes(state, config_hash)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<(TrainState, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected)
}
