//! Checkpoint persistence.
//!
//! Binary layout: 8-byte magic "SNNCKPT1", version u32 LE, tensor count
//! u32 LE; per tensor: name length u16 LE + UTF-8 name, rank u8, dims u32 LE
//! each, dtype tag u8 (0 = f32, 1 = u8), payload little-endian row-major.
//!
//! Alongside the model parameters a file carries bookkeeping entries under
//! reserved name prefixes: `meta.epoch` and `optim.step` (u8[8], u64 LE),
//! `meta.fingerprint` (u8[32]), and `optim.<param>.momentum` (f32).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{ParamId, ParamStore};
use crate::optim::Sgd;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SNNCKPT1";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub fingerprint: [u8; 32],
}

/// Parsed checkpoint, classified by name prefix but not yet applied
/// anywhere.
#[derive(Debug)]
pub struct LoadedCheckpoint<F: Scalar> {
    pub params: HashMap<String, Tensor<F>>,
    pub momenta: HashMap<String, Tensor<F>>,
    pub optim_step: u64,
    pub meta: CheckpointMeta,
}

struct Writer {
    buf: Vec<u8>,
    count: u32,
}

impl Writer {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes()); // count patched at finish
        Writer { buf, count: 0 }
    }

    fn header(&mut self, name: &str, dims: &[usize], dtype: u8) -> Result<()> {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name too long: {name}")));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank {} too large", dims.len())));
        }
        self.buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(nb);
        self.buf.push(dims.len() as u8);
        for &d in dims {
            if d > u32::MAX as usize {
                return Err(Error::Format(format!("dimension {d} too large")));
            }
            self.buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        self.buf.push(dtype);
        self.count += 1;
        Ok(())
    }

    fn f32_tensor<F: Scalar>(&mut self, name: &str, t: &Tensor<F>) -> Result<()> {
        self.header(name, t.shape(), DTYPE_F32)?;
        for v in t.data() {
            self.buf
                .extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
        Ok(())
    }

    fn u8_tensor(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.header(name, &[bytes.len()], DTYPE_U8)?;
        self.buf.extend_from_slice(bytes);
        Ok(())
    }

    fn finish(mut self) -> Vec<u8> {
        let count = self.count.to_le_bytes();
        self.buf[12..16].copy_from_slice(&count);
        self.buf
    }
}

/// Serialize every parameter in the store (name-ordered), run metadata, and
/// optimizer momentum buffers.
pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    store: &ParamStore<F>,
    opt: Option<&Sgd<F>>,
    epoch: u64,
    fingerprint: &[u8; 32],
) -> Result<()> {
    let mut w = Writer::new();
    let mut by_name: BTreeMap<&str, ParamId> = BTreeMap::new();
    for id in store.ids() {
        by_name.insert(store.name(id), id);
    }
    for (name, id) in &by_name {
        w.f32_tensor(name, store.value(*id))?;
    }
    w.u8_tensor("meta.epoch", &epoch.to_le_bytes())?;
    w.u8_tensor("meta.fingerprint", fingerprint)?;
    if let Some(opt) = opt {
        for (name, id) in &by_name {
            if let Some(v) = opt.velocity(*id) {
                w.f32_tensor(&format!("optim.{name}.momentum"), v)?;
            }
        }
        w.u8_tensor("optim.step", &opt.steps().to_le_bytes())?;
    }
    fs::write(path, w.finish())?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "checkpoint truncated while reading {what}"
            ))),
        }
    }

    fn u16le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

enum Payload<F: Scalar> {
    Float(Tensor<F>),
    Bytes(Vec<u8>),
}

/// Parse and classify a checkpoint file without touching any model state.
pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<LoadedCheckpoint<F>> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?} in {}",
            String::from_utf8_lossy(magic),
            path.display()
        )));
    }
    let version = r.u32le("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (want {VERSION})"
        )));
    }
    let count = r.u32le("tensor count")?;

    let mut params = HashMap::new();
    let mut momenta = HashMap::new();
    let mut optim_step = 0u64;
    let mut epoch: Option<u64> = None;
    let mut fingerprint: Option<[u8; 32]> = None;

    for _ in 0..count {
        let name_len = r.u16le("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32le("dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let dtype = r.u8("dtype")?;
        let payload = match dtype {
            DTYPE_F32 => {
                let raw = r.take(numel * 4, &format!("payload of {name}"))?;
                let data: Vec<F> = raw
                    .chunks_exact(4)
                    .map(|c| {
                        F::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    })
                    .collect();
                Payload::Float(Tensor::from_vec(dims, data)?)
            }
            DTYPE_U8 => Payload::Bytes(r.take(numel, &format!("payload of {name}"))?.to_vec()),
            other => {
                return Err(Error::Format(format!(
                    "unknown dtype tag {other} on tensor {name}"
                )))
            }
        };
        match (name.as_str(), payload) {
            ("meta.epoch", Payload::Bytes(b)) if b.len() == 8 => {
                epoch = Some(u64::from_le_bytes(b.try_into().expect("len checked")));
            }
            ("meta.fingerprint", Payload::Bytes(b)) if b.len() == 32 => {
                fingerprint = Some(b.try_into().expect("len checked"));
            }
            ("optim.step", Payload::Bytes(b)) if b.len() == 8 => {
                optim_step = u64::from_le_bytes(b.try_into().expect("len checked"));
            }
            (n, Payload::Float(t)) if n.starts_with("optim.") && n.ends_with(".momentum") => {
                let pname = &n["optim.".len()..n.len() - ".momentum".len()];
                momenta.insert(pname.to_string(), t);
            }
            (n, Payload::Float(t)) if !n.starts_with("meta.") && !n.starts_with("optim.") => {
                params.insert(n.to_string(), t);
            }
            (n, _) => {
                return Err(Error::Format(format!(
                    "malformed bookkeeping tensor {n}"
                )))
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(LoadedCheckpoint {
        params,
        momenta,
        optim_step,
        meta: CheckpointMeta {
            epoch: epoch.ok_or_else(|| Error::Format("checkpoint lacks meta.epoch".into()))?,
            fingerprint: fingerprint
                .ok_or_else(|| Error::Format("checkpoint lacks meta.fingerprint".into()))?,
        },
    })
}

/// Copy checkpoint parameters into the given store entries (staged: either
/// every id is applied or none). The checkpoint's parameter set must equal
/// the id set, name for name and shape for shape.
pub fn apply_params<F: Scalar>(
    loaded: &LoadedCheckpoint<F>,
    store: &mut ParamStore<F>,
    ids: &[ParamId],
) -> Result<()> {
    let mut staged: Vec<(ParamId, &Tensor<F>)> = Vec::with_capacity(ids.len());
    let mut wanted: BTreeMap<&str, ParamId> = BTreeMap::new();
    for &id in ids {
        wanted.insert(store.name(id), id);
    }
    for (name, id) in &wanted {
        let t = loaded.params.get(*name).ok_or_else(|| {
            Error::Format(format!("checkpoint lacks tensor {name}"))
        })?;
        if t.shape() != store.value(*id).shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model wants {:?}",
                t.shape(),
                store.value(*id).shape()
            )));
        }
        staged.push((*id, t));
    }
    let mut extra: Vec<&String> = loaded
        .params
        .keys()
        .filter(|n| !wanted.contains_key(n.as_str()))
        .collect();
    if !extra.is_empty() {
        extra.sort();
        return Err(Error::Format(format!(
            "checkpoint tensor {} has no home in the model",
            extra[0]
        )));
    }
    for (id, t) in staged {
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}

/// Restore momentum buffers and the step counter for the given parameters.
/// Momentum entries are optional per parameter; present ones must match
/// shapes.
pub fn apply_optimizer<F: Scalar>(
    loaded: &LoadedCheckpoint<F>,
    store: &ParamStore<F>,
    opt: &mut Sgd<F>,
    ids: &[ParamId],
) -> Result<()> {
    for &id in ids {
        let name = store.name(id);
        if let Some(v) = loaded.momenta.get(name) {
            if v.shape() != store.value(id).shape() {
                return Err(Error::Format(format!(
                    "momentum for {name} has shape {:?}, parameter is {:?}",
                    v.shape(),
                    store.value(id).shape()
                )));
            }
            opt.set_velocity(id, v.clone());
        }
    }
    opt.set_steps(loaded.optim_step);
    Ok(())
}
