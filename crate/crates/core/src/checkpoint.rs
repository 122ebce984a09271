//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MSNCKPT\0"  u32 version
//! 6 × u32       layers, hidden_dim, mlp_dim, heads, patch_size, max_grid
//! u32 count, then per entry: u16 name length, name bytes, u64 value
//! u32 count, then per tensor: u16 name length, name bytes, u32 ndim,
//!               ndim × u64 dims, product(dims) × f32
//! ```
//!
//! Tensor names carry the prefixes `anchor.`, `target.`, `bank.`, `opt.m.` and
//! `opt.v.`. Values are stored as `f32`, so `f32` states round-trip bit-exactly.

use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::encoder::{EncoderParams, Parameters, ViTConfig};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::objective::PrototypeBank;
use crate::trainer::{AdamMoments, Schedule, TrainState};

pub const MAGIC: &[u8; 8] = b"MSNCKPT\0";
pub const VERSION: u32 = 1;

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &ndarray::ArrayViewD<'_, T>) {
    put_name(out, name);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.iter() {
        out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
}

/// Serializes a training state.
pub fn to_bytes<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let c = state.anchor.config;
    for v in [c.layers, c.hidden_dim, c.mlp_dim, c.heads, c.patch_size, c.max_grid] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let meta: [(&str, u64); 6] = [
        ("step", state.step),
        ("total_steps", state.schedule.total_steps),
        ("warmup_steps", state.schedule.warmup_steps),
        ("seed", state.seed),
        ("tau_anchor", state.bank.tau_anchor.to_f64_lossy().to_bits()),
        ("tau_target", state.bank.tau_target.to_f64_lossy().to_bits()),
    ];
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (name, v) in meta {
        put_name(&mut out, name);
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut tensors = Vec::new();
    for (n, t) in state.anchor.tensors() {
        tensors.push((format!("anchor.{n}"), t));
    }
    for (n, t) in state.target.tensors() {
        tensors.push((format!("target.{n}"), t));
    }
    for (n, t) in state.bank.tensors() {
        tensors.push((format!("bank.{n}"), t));
    }
    for (n, t) in state.moments.names.iter().zip(&state.moments.m) {
        tensors.push((format!("opt.m.{n}"), t.view()));
    }
    for (n, t) in state.moments.names.iter().zip(&state.moments.v) {
        tensors.push((format!("opt.v.{n}"), t.view()));
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        put_tensor(&mut out, name, t);
    }
    out
}

pub fn save<T: Scalar>(path: &Path, state: &TrainState<T>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&to_bytes(state)).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }
}

/// Parses a training state written by [`to_bytes`].
pub fn from_bytes(buf: &[u8]) -> Result<TrainState<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut f = [0usize; 6];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = ViTConfig {
        layers: f[0],
        hidden_dim: f[1],
        mlp_dim: f[2],
        heads: f[3],
        patch_size: f[4],
        max_grid: f[5],
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid encoder config: {e}")))?;
    let mut meta = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.name()?;
        meta.insert(name, r.u64()?);
    }
    let get = |k: &str| {
        meta.get(k)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing meta entry {k}")))
    };
    let mut tensors: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
    let mut order = Vec::new();
    for _ in 0..r.u32()? {
        let name = r.name()?;
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        order.push(name.clone());
        tensors.insert(name, arr);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }

    let mut anchor = EncoderParams::<f32>::init(config, &mut crate::rng::stream(0, "checkpoint-shape"))?;
    let mut target = anchor.clone();
    fill(&mut tensors, anchor.tensors_mut(), "anchor")?;
    fill(&mut tensors, target.tensors_mut(), "target")?;
    let q = tensors
        .remove("bank.prototypes")
        .ok_or_else(|| Error::Checkpoint("missing tensor bank.prototypes".into()))?
        .into_dimensionality()
        .map_err(|_| Error::Checkpoint("bank.prototypes must be 2-d".into()))?;
    let bank = PrototypeBank::new(
        q,
        f64::from_bits(get("tau_anchor")?) as f32,
        f64::from_bits(get("tau_target")?) as f32,
    )?;

    let mut names = Vec::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for full in &order {
        if let Some(n) = full.strip_prefix("opt.m.") {
            let vk = format!("opt.v.{n}");
            names.push(n.to_string());
            m.push(tensors.remove(full).unwrap());
            v.push(
                tensors
                    .remove(&vk)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {vk}")))?,
            );
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    let state = TrainState {
        anchor,
        target,
        bank,
        moments: AdamMoments { names, m, v },
        step: get("step")?,
        schedule: Schedule {
            total_steps: get("total_steps")?,
            warmup_steps: get("warmup_steps")?,
        },
        seed: get("seed")?,
    };
    let expected: Vec<String> = state.learnable().into_iter().map(|(n, _)| n).collect();
    if state.moments.names != expected {
        return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
    }
    Ok(state)
}

fn fill(
    tensors: &mut BTreeMap<String, ArrayD<f32>>,
    params: Vec<(String, ndarray::ArrayViewMutD<'_, f32>)>,
    prefix: &str,
) -> Result<()> {
    for (n, mut t) in params {
        let key = format!("{prefix}.{n}");
        let src = tensors
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {:?}, expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.assign(&src);
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState<f32>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
